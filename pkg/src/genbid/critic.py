"""History-conditioned Q and V networks trained by expectile regression.

Both networks read a causal window of (state, action) tokens; V simply never
sees the current action.  Training queries Q only at dataset actions, which an
optional audit log can verify.  Once trained the pair is frozen and serves as
the fixed value oracle for the evolution stage.
"""
from __future__ import annotations

import dataclasses
import logging

import numpy as np
import torch
import torch.nn as nn

from .batching import PackedData, gather_window
from .checkpoint import Checkpoint
from .config import CriticConfig
from .data import NormStats, STATE_DIM
from .errors import InvalidInputError, NotTrainedError
from .nn_blocks import Trunk, attention_bias
from .numerics import SeededStream, build_module
from .training import run_training

logger = logging.getLogger(__name__)


def expectile_loss(u, tau: float):
    """|tau - 1[u < 0]| * u^2, elementwise."""
    if not 0 < tau < 1:
        raise InvalidInputError(f"tau must be in (0, 1), got {tau}")
    if isinstance(u, torch.Tensor):
        weight = torch.where(u < 0, 1.0 - tau, tau)
        return weight * u ** 2
    u = np.asarray(u, dtype=np.float64)
    weight = np.where(u < 0, 1.0 - tau, tau)
    out = weight * u ** 2
    return float(out) if out.ndim == 0 else out


class CriticNet(nn.Module):
    """Causal transformer over interleaved (state, action) tokens, scalar head."""

    def __init__(self, embed: int, heads: int, layers: int, context: int, horizon: int):
        super().__init__()
        self.context = context
        self.state_embed = nn.Linear(STATE_DIM, embed)
        self.action_embed = nn.Linear(1, embed)
        self.time_embed = nn.Embedding(horizon + 1, embed)
        self.type_embed = nn.Embedding(2, embed)
        self.trunk = Trunk(embed, heads, layers)
        self.head = nn.Linear(embed, 1)

    def forward(self, states: torch.Tensor, actions: torch.Tensor, frame_valid: torch.Tensor,
                steps: torch.Tensor, use_last_action: bool) -> torch.Tensor:
        """states: [B, C, D]; actions: [B, C].  With ``use_last_action`` the head
        reads the final action token (a Q value); otherwise the final action is
        masked out and the head reads the final state token (a V value)."""
        b, c, _ = states.shape
        time = self.time_embed(steps.clamp(min=0))
        s_tok = self.state_embed(states) + time + self.type_embed.weight[0]
        a_tok = self.action_embed(actions[:, :, None]) + time + self.type_embed.weight[1]
        tokens = torch.stack([s_tok, a_tok], dim=2).reshape(b, 2 * c, -1)
        token_valid = frame_valid[:, :, None].expand(b, c, 2).reshape(b, 2 * c).clone()
        if not use_last_action:
            token_valid[:, -1] = False
        h = self.trunk(tokens, attention_bias(token_valid, causal=True))
        pick = 2 * c - 1 if use_last_action else 2 * c - 2
        return self.head(h[:, pick, :])[:, 0]


class CriticPair:
    """Separate Q and V parameter sets sharing one architecture."""

    module_name = "critic"

    def __init__(self, cfg: CriticConfig, context: int, horizon: int, gamma: float,
                 stream: SeededStream, norm: NormStats | None = None, dtype=torch.float32):
        if not 0 < cfg.tau < 1:
            raise InvalidInputError(f"critic tau must be in (0, 1), got {cfg.tau}")
        self.cfg = cfg
        self.context = context
        self.horizon = horizon
        self.gamma = gamma
        self.norm = norm
        self.trained = False
        self.frozen = False
        self.dtype = dtype
        self.audit_actions: list[np.ndarray] | None = None
        self.q_net = build_module(
            lambda: CriticNet(cfg.embed, cfg.heads, cfg.layers, context, horizon),
            stream.child("q_net"),
        ).to(dtype)
        self.v_net = build_module(
            lambda: CriticNet(cfg.embed, cfg.heads, cfg.layers, context, horizon),
            stream.child("v_net"),
        ).to(dtype)
        # Polyak-averaged V for TD targets, behind the stability flag
        self.v_target = None
        if cfg.use_target_net:
            self.v_target = build_module(
                lambda: CriticNet(cfg.embed, cfg.heads, cfg.layers, context, horizon),
                stream.child("v_net"),
            ).to(dtype)
            self.v_target.load_state_dict(self.v_net.state_dict())
            for p in self.v_target.parameters():
                p.requires_grad_(False)

    def parameters(self):
        yield from self.q_net.parameters()
        yield from self.v_net.parameters()

    def modules(self) -> nn.ModuleDict:
        return nn.ModuleDict({"q_net": self.q_net, "v_net": self.v_net})

    # --- losses ---------------------------------------------------------------

    def _q_forward(self, states, actions, frame_valid, steps) -> torch.Tensor:
        if self.audit_actions is not None:
            self.audit_actions.append(actions[:, -1].detach().cpu().numpy().copy())
        return self.q_net(states, actions, frame_valid, steps, use_last_action=True)

    def _v_forward(self, states, actions, frame_valid, steps) -> torch.Tensor:
        return self.v_net(states, actions, frame_valid, steps, use_last_action=False)

    def batch_windows(self, packed: PackedData, idx: torch.Tensor, t: torch.Tensor):
        c = self.context
        states, frame_valid, steps = gather_window(packed.states, idx, t, c)
        actions, _, _ = gather_window(packed.actions, idx, t, c)
        return states, actions, frame_valid, steps

    def v_loss(self, packed: PackedData, idx: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """Expectile regression of V toward Q at dataset actions (Q detached)."""
        windows = self.batch_windows(packed, idx, t)
        with torch.no_grad():
            q = self._q_forward(*windows)
        v = self._v_forward(*windows)
        return expectile_loss(q - v, self.cfg.tau).mean()

    def q_loss(self, packed: PackedData, idx: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """TD regression of Q toward r + gamma * V(s') (V detached; target = r at done)."""
        windows = self.batch_windows(packed, idx, t)
        q = self._q_forward(*windows)
        rewards = packed.rewards[idx, t].to(q.dtype)
        terminal = t >= packed.lengths[idx] - 1
        t_next = torch.minimum(t + 1, packed.lengths[idx] - 1)
        next_windows = self.batch_windows(packed, idx, t_next)
        with torch.no_grad():
            if self.v_target is not None:
                states, actions, frame_valid, steps = next_windows
                v_next = self.v_target(states, actions, frame_valid, steps,
                                       use_last_action=False)
            else:
                v_next = self._v_forward(*next_windows)
        target = rewards + self.gamma * v_next * (~terminal).to(q.dtype)
        return ((q - target) ** 2).mean()

    def polyak_update(self, rate: float = 0.995) -> None:
        if self.v_target is None:
            return
        with torch.no_grad():
            for tp, p in zip(self.v_target.parameters(), self.v_net.parameters()):
                tp.mul_(rate).add_(p, alpha=1.0 - rate)

    def combined_loss(self, packed: PackedData, idx: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        return self.q_loss(packed, idx, t) + self.v_loss(packed, idx, t)

    # --- evaluation -------------------------------------------------------------

    def _require_trained(self):
        if not self.trained:
            raise NotTrainedError("critic has no trained checkpoint")

    def q_values_at(self, packed: PackedData, idx: torch.Tensor, t: torch.Tensor,
                    actions_norm: torch.Tensor) -> torch.Tensor:
        """Q at the batch contexts with the current action replaced (evolution path)."""
        states, actions, frame_valid, steps = self.batch_windows(packed, idx, t)
        actions = actions.clone()
        actions[:, -1] = actions_norm
        with torch.no_grad():
            return self.q_net(states, actions, frame_valid, steps, use_last_action=True)

    def q_value(self, history_states, history_actions, state, action) -> float:
        """Scalar Q for raw history arrays plus the current (state, action)."""
        self._require_trained()
        if self.norm is None:
            raise NotTrainedError("critic has no normalization stats")
        hist_s = np.asarray(history_states, dtype=np.float64).reshape(-1, STATE_DIM)
        hist_a = np.asarray(history_actions, dtype=np.float64).reshape(-1)
        if len(hist_s) != len(hist_a):
            raise InvalidInputError("history states and actions must have equal length")
        states = np.concatenate([hist_s, np.asarray(state, dtype=np.float64)[None, :]], axis=0)
        actions = np.concatenate([hist_a, [float(action)]])
        w = min(len(states), self.context)
        c = self.context
        s_pad = torch.zeros(1, c, STATE_DIM, dtype=self.dtype)
        a_pad = torch.zeros(1, c, dtype=self.dtype)
        valid = torch.zeros(1, c, dtype=torch.bool)
        steps = torch.zeros(1, c, dtype=torch.int64)
        s_pad[0, c - w:] = torch.from_numpy(self.norm.norm_state(states[-w:])).to(self.dtype)
        a_pad[0, c - w:] = torch.from_numpy(self.norm.norm_action(actions[-w:])).to(self.dtype)
        valid[0, c - w:] = True
        t0 = len(states) - w
        steps[0, c - w:] = torch.arange(t0, t0 + w).clamp(max=self.horizon)
        with torch.no_grad():
            q = self.q_net(s_pad, a_pad, valid, steps, use_last_action=True)
        return float(q[0])

    # --- training ----------------------------------------------------------------

    def fit(self, packed: PackedData, stream: SeededStream, optim_cfg, log_cb=None) -> dict:
        """Minimize L_Q + L_V until the epoch budget or an early-stop plateau.

        Returns with the pair marked trained and frozen.
        """
        cfg = self.cfg

        def step_loss(gen):
            idx = torch.randint(0, packed.n, (cfg.batch_size,), generator=gen)
            u = torch.rand(cfg.batch_size, generator=gen)
            t = (u * packed.lengths[idx].to(torch.float32)).long()
            t = torch.minimum(t, packed.lengths[idx] - 1)
            self.polyak_update()
            return self.combined_loss(packed, idx, t)

        result = run_training(
            step_loss, list(self.parameters()),
            lr=cfg.lr, epochs=cfg.epochs, steps_per_epoch=cfg.steps_per_epoch,
            patience=cfg.patience, weight_decay=optim_cfg.weight_decay,
            grad_clip=optim_cfg.grad_clip, gen=stream.child("batches").torch_gen(),
            log_cb=log_cb, metric="critic_loss",
        )
        self.trained = True
        self.frozen = True
        return result

    # --- checkpointing --------------------------------------------------------------

    def to_checkpoint(self, stage: str, config_hash: str, extra: dict | None = None) -> Checkpoint:
        arrays = {f"param/{k}": v.detach().cpu().numpy().copy()
                  for k, v in self.modules().named_parameters()}
        for k, v in self.norm.to_arrays().items():
            arrays[f"norm/{k}"] = v
        return Checkpoint(
            module=self.module_name, stage=stage, config_hash=config_hash,
            config={"critic": dataclasses.asdict(self.cfg), "context": self.context,
                    "horizon": self.horizon, "gamma": self.gamma,
                    "norm_floored": self.norm.floored},
            arrays=arrays, frozen=self.frozen, trained=self.trained, extra=extra or {},
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, dtype=torch.float32) -> "CriticPair":
        if ckpt.module != cls.module_name:
            raise InvalidInputError(f"checkpoint is for module {ckpt.module!r}, not {cls.module_name!r}")
        cfg = CriticConfig(**ckpt.config["critic"])
        norm = NormStats.from_arrays(
            {k.split("/", 1)[1]: v for k, v in ckpt.arrays.items() if k.startswith("norm/")},
            floored=ckpt.config.get("norm_floored"),
        )
        pair = cls(cfg, ckpt.config["context"], ckpt.config["horizon"], ckpt.config["gamma"],
                   SeededStream(0, "load"), norm=norm, dtype=dtype)
        params = dict(pair.modules().named_parameters())
        with torch.no_grad():
            for k, v in ckpt.arrays.items():
                if k.startswith("param/"):
                    params[k.split("/", 1)[1]].copy_(torch.from_numpy(v.copy()))
        pair.trained = ckpt.trained
        pair.frozen = ckpt.frozen
        return pair
