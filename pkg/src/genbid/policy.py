"""Foresight-conditioned sequence policy.

A causal transformer over interleaved (return-to-go, state, action) frames;
the action slot of the current frame carries the planner's predicted next
state, so the freshest evidence when emitting an action is the forecast.  The
head is a diagonal Gaussian over the 1-d action: the mean is trained by
behavioral cloning, the density exists for the evolution stage's ratios.
"""
from __future__ import annotations

import dataclasses
import math

import numpy as np
import torch
import torch.nn as nn

from .batching import PackedData, gather_window
from .checkpoint import Checkpoint
from .config import PolicyConfig
from .data import NormStats, STATE_DIM
from .errors import InvalidInputError, NotTrainedError
from .nn_blocks import Trunk, attention_bias
from .numerics import SeededStream, build_module, stream_dropout
from .training import run_training

_LOG_2PI = math.log(2.0 * math.pi)

TYPE_RTG, TYPE_STATE, TYPE_ACTION, TYPE_SHAT = 0, 1, 2, 3


@dataclasses.dataclass
class PolicyContext:
    """One decision point: a window of past frames plus the foresight state.

    All values are raw (unnormalized); ``s_hat=None`` means the foresight
    token is zeroed (the no-foresight ablation path).
    """

    rtgs: np.ndarray        # (w,)
    states: np.ndarray      # (w, STATE_DIM)
    actions: np.ndarray     # (w-1,) actions of the past steps
    timesteps: np.ndarray   # (w,)
    s_hat: np.ndarray | None

    @property
    def window(self) -> int:
        return len(self.rtgs)

    @property
    def token_count(self) -> int:
        return 3 * self.window


def build_context(rtgs, states, actions, timesteps, s_hat, context_len: int) -> PolicyContext:
    """Assemble and validate a decision context, truncated to the window size."""
    rtgs = np.asarray(rtgs, dtype=np.float64)
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    timesteps = np.asarray(timesteps, dtype=np.int64)
    w = len(rtgs)
    if w < 1:
        raise InvalidInputError("context window must be non-empty")
    if states.shape != (w, STATE_DIM):
        raise InvalidInputError(f"states must be ({w}, {STATE_DIM}), got {states.shape}")
    if actions.shape != (w - 1,):
        raise InvalidInputError(f"actions must cover the {w - 1} past steps, got {actions.shape}")
    if timesteps.shape != (w,):
        raise InvalidInputError("timesteps must match the window")
    if s_hat is not None:
        s_hat = np.asarray(s_hat, dtype=np.float64)
        if s_hat.shape != (STATE_DIM,):
            raise InvalidInputError(f"s_hat must have dimension {STATE_DIM}, got {s_hat.shape}")
    if w > context_len:
        keep = slice(w - context_len, w)
        rtgs, states, timesteps = rtgs[keep], states[keep], timesteps[keep]
        actions = actions[w - context_len:]
    return PolicyContext(rtgs, states, actions, timesteps, s_hat)


def context_from_trajectory(traj, t: int, s_hat, context_len: int) -> PolicyContext:
    lo = max(0, t - context_len + 1)
    return build_context(
        rtgs=traj.rtgs[lo:t + 1],
        states=traj.states[lo:t + 1],
        actions=traj.actions[lo:t],
        timesteps=np.arange(lo, t + 1),
        s_hat=s_hat,
        context_len=context_len,
    )


class PolicyNet(nn.Module):
    def __init__(self, embed: int, heads: int, layers: int, context: int, horizon: int,
                 log_std_init: float, dropout: float = 0.0):
        super().__init__()
        self.context = context
        self.dropout_p = dropout
        self.dropout_gen = None  # armed by fit(); dropout is a training-only path
        self.rtg_embed = nn.Linear(1, embed)
        self.state_embed = nn.Linear(STATE_DIM, embed)
        self.action_embed = nn.Linear(1, embed)
        self.shat_embed = nn.Linear(STATE_DIM, embed)
        self.time_embed = nn.Embedding(horizon + 1, embed)
        self.type_embed = nn.Embedding(4, embed)
        self.trunk = Trunk(embed, heads, layers)
        self.head = nn.Linear(embed, 2)
        with torch.no_grad():
            self.head.weight.mul_(0.01)
            self.head.bias.zero_()
            self.head.bias[1] = log_std_init

    def forward(self, rtgs: torch.Tensor, states: torch.Tensor, actions: torch.Tensor,
                frame_valid: torch.Tensor, steps: torch.Tensor, s_hat: torch.Tensor) -> torch.Tensor:
        """rtgs/actions: [B, C]; states: [B, C, D]; s_hat: [B, D] (zeros => null token).

        Returns head outputs [B, 2] = (mean, raw log-std) at the foresight slot.
        """
        b, c = rtgs.shape
        time = self.time_embed(steps.clamp(min=0))
        r_tok = self.rtg_embed(rtgs[:, :, None]) + time + self.type_embed.weight[TYPE_RTG]
        s_tok = self.state_embed(states) + time + self.type_embed.weight[TYPE_STATE]
        x_tok = self.action_embed(actions[:, :, None]) + time + self.type_embed.weight[TYPE_ACTION]
        shat_tok = self.shat_embed(s_hat) + time[:, -1, :] + self.type_embed.weight[TYPE_SHAT]
        x_tok = torch.cat([x_tok[:, :-1, :], shat_tok[:, None, :]], dim=1)
        tokens = torch.stack([r_tok, s_tok, x_tok], dim=2).reshape(b, 3 * c, -1)
        if self.training and self.dropout_gen is not None:
            tokens = stream_dropout(tokens, self.dropout_p, self.dropout_gen, self.training)
        token_valid = frame_valid[:, :, None].expand(b, c, 3).reshape(b, 3 * c)
        h = self.trunk(tokens, attention_bias(token_valid, causal=True))
        return self.head(h[:, -1, :])


class SequencePolicy:
    """Wrapper owning normalization, the action range, and the Gaussian head."""

    module_name = "policy"

    def __init__(self, cfg: PolicyConfig, horizon: int, action_max: float,
                 stream: SeededStream, norm: NormStats | None = None, dtype=torch.float32):
        self.cfg = cfg
        self.horizon = horizon
        self.action_max = action_max
        self.norm = norm
        self.trained = False
        self.dtype = dtype
        self.net = build_module(
            lambda: PolicyNet(cfg.embed, cfg.heads, cfg.layers, cfg.context, horizon,
                              cfg.log_std_init, dropout=cfg.dropout),
            stream.child("policy_net"),
        ).to(dtype)
        self.net.eval()

    def parameters(self):
        return self.net.parameters()

    def clone(self) -> "SequencePolicy":
        twin = SequencePolicy(self.cfg, self.horizon, self.action_max, SeededStream(0, "clone"),
                              norm=self.norm, dtype=self.dtype)
        twin.net.load_state_dict({k: v.clone() for k, v in self.net.state_dict().items()})
        twin.trained = self.trained
        return twin

    # --- batched forward ----------------------------------------------------

    def head_outputs(self, rtgs, states, actions, frame_valid, steps, s_hat) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.net(rtgs, states, actions, frame_valid, steps, s_hat)
        mean = out[:, 0]
        log_std = out[:, 1].clamp(self.cfg.log_std_min, self.cfg.log_std_max)
        return mean, log_std

    def batch_from_packed(self, packed: PackedData, idx: torch.Tensor, t: torch.Tensor,
                          foresight_norm: torch.Tensor | None):
        c = self.cfg.context
        rtgs, frame_valid, steps = gather_window(packed.rtgs, idx, t, c)
        states, _, _ = gather_window(packed.states, idx, t, c)
        actions, _, _ = gather_window(packed.actions, idx, t, c)
        if foresight_norm is None:
            s_hat = torch.zeros(len(idx), STATE_DIM, dtype=packed.states.dtype)
        else:
            s_hat = foresight_norm[idx, t]
        return rtgs, states, actions, frame_valid, steps, s_hat

    def dist_params(self, packed: PackedData, idx: torch.Tensor, t: torch.Tensor,
                    foresight_norm: torch.Tensor | None) -> tuple[torch.Tensor, torch.Tensor]:
        batch = self.batch_from_packed(packed, idx, t, foresight_norm)
        return self.head_outputs(*batch)

    def bc_loss_from_batch(self, batch, target_actions_norm: torch.Tensor) -> torch.Tensor:
        mean, _ = self.head_outputs(*batch)
        return ((mean - target_actions_norm) ** 2).mean()

    def bc_loss(self, packed: PackedData, idx: torch.Tensor, t: torch.Tensor,
                foresight_norm: torch.Tensor | None) -> torch.Tensor:
        batch = self.batch_from_packed(packed, idx, t, foresight_norm)
        targets = packed.actions[idx, t]
        return self.bc_loss_from_batch(batch, targets)

    def _sample_bc_indices(self, packed: PackedData, batch_size: int, gen: torch.Generator):
        idx = torch.randint(0, packed.n, (batch_size,), generator=gen)
        u = torch.rand(batch_size, generator=gen)
        t = (u * packed.lengths[idx].to(torch.float32)).long()
        return idx, torch.minimum(t, packed.lengths[idx] - 1)

    def fit(self, packed: PackedData, foresight_norm: torch.Tensor | None,
            optim_cfg, stream: SeededStream, log_cb=None) -> dict:
        def step_loss(gen):
            idx, t = self._sample_bc_indices(packed, self.cfg.batch_size, gen)
            return self.bc_loss(packed, idx, t, foresight_norm)

        self.net.train()
        self.net.dropout_gen = stream.child("dropout").torch_gen()
        try:
            result = run_training(
                step_loss, self.parameters(),
                lr=self.cfg.lr, epochs=self.cfg.epochs, steps_per_epoch=self.cfg.steps_per_epoch,
                patience=self.cfg.patience, weight_decay=optim_cfg.weight_decay,
                grad_clip=optim_cfg.grad_clip, gen=stream.child("batches").torch_gen(),
                log_cb=log_cb, metric="policy_loss",
            )
        finally:
            self.net.eval()
            self.net.dropout_gen = None
        self.trained = True
        return result

    # --- single-context interface --------------------------------------------

    def _require_ready(self):
        if not self.trained:
            raise NotTrainedError("policy has no trained checkpoint; refusing to act")
        if self.norm is None:
            raise NotTrainedError("policy has no normalization stats")

    def _prepare_context(self, context: PolicyContext):
        c = self.cfg.context
        w = context.window
        if w > c:
            context = build_context(context.rtgs, context.states, context.actions,
                                    context.timesteps, context.s_hat, c)
            w = context.window
        norm = self.norm
        rtgs = torch.zeros(1, c, dtype=self.dtype)
        states = torch.zeros(1, c, STATE_DIM, dtype=self.dtype)
        actions = torch.zeros(1, c, dtype=self.dtype)
        frame_valid = torch.zeros(1, c, dtype=torch.bool)
        steps = torch.zeros(1, c, dtype=torch.int64)
        rtgs[0, c - w:] = torch.from_numpy(norm.norm_rtg(context.rtgs)).to(self.dtype)
        states[0, c - w:] = torch.from_numpy(norm.norm_state(context.states)).to(self.dtype)
        if w > 1:
            actions[0, c - w:c - 1] = torch.from_numpy(norm.norm_action(context.actions)).to(self.dtype)
        frame_valid[0, c - w:] = True
        steps[0, c - w:] = torch.from_numpy(np.asarray(context.timesteps, dtype=np.int64))
        if context.s_hat is None:
            s_hat = torch.zeros(1, STATE_DIM, dtype=self.dtype)
        else:
            s_hat = torch.from_numpy(norm.norm_state(context.s_hat)).to(self.dtype)[None, :]
        return rtgs, states, actions, frame_valid, steps, s_hat

    def context_dist(self, context: PolicyContext) -> tuple[float, float]:
        """(mean, std) of the action Gaussian in normalized units."""
        self._require_ready()
        with torch.no_grad():
            mean, log_std = self.head_outputs(*self._prepare_context(context))
        return float(mean[0]), float(torch.exp(log_std[0]))

    def act(self, context: PolicyContext, mode: str = "mean",
            stream: SeededStream | None = None) -> float:
        self._require_ready()
        mean, std = self.context_dist(context)
        if mode == "mean":
            a_norm = mean
        elif mode == "sample":
            if stream is None:
                raise InvalidInputError("mode='sample' needs a stream")
            z = float(torch.randn(1, generator=stream.torch_gen())[0])
            a_norm = mean + std * z
        else:
            raise InvalidInputError(f"unknown act mode {mode!r}")
        raw = self.norm.denorm_action(a_norm)
        return float(min(max(raw, 0.0), self.action_max))

    def log_prob(self, context: PolicyContext, action_raw: float) -> float:
        """Log density of the raw action under the head's Gaussian (density taken
        in normalized action units; the affine Jacobian cancels in ratios)."""
        self._require_ready()
        mean, std = self.context_dist(context)
        a = self.norm.norm_action(action_raw)
        return float(-0.5 * _LOG_2PI - math.log(std) - 0.5 * ((a - mean) / std) ** 2)

    # --- checkpointing --------------------------------------------------------

    def to_checkpoint(self, stage: str, config_hash: str, extra: dict | None = None,
                      frozen: bool = False) -> Checkpoint:
        arrays = {f"param/{k}": v.detach().cpu().numpy().copy()
                  for k, v in self.net.named_parameters()}
        for k, v in self.norm.to_arrays().items():
            arrays[f"norm/{k}"] = v
        return Checkpoint(
            module=self.module_name, stage=stage, config_hash=config_hash,
            config={"policy": dataclasses.asdict(self.cfg), "horizon": self.horizon,
                    "action_max": self.action_max, "norm_floored": self.norm.floored},
            arrays=arrays, frozen=frozen, trained=self.trained, extra=extra or {},
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, dtype=torch.float32) -> "SequencePolicy":
        if ckpt.module != cls.module_name:
            raise InvalidInputError(f"checkpoint is for module {ckpt.module!r}, not {cls.module_name!r}")
        cfg = PolicyConfig(**ckpt.config["policy"])
        norm = NormStats.from_arrays(
            {k.split("/", 1)[1]: v for k, v in ckpt.arrays.items() if k.startswith("norm/")},
            floored=ckpt.config.get("norm_floored"),
        )
        policy = cls(cfg, ckpt.config["horizon"], ckpt.config["action_max"],
                     SeededStream(0, "load"), norm=norm, dtype=dtype)
        params = dict(policy.net.named_parameters())
        with torch.no_grad():
            for k, v in ckpt.arrays.items():
                if k.startswith("param/"):
                    params[k.split("/", 1)[1]].copy_(torch.from_numpy(v.copy()))
        policy.trained = ckpt.trained
        return policy
