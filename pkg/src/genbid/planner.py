"""Per-step denoising diffusion over the next state, conditioned on a causal
history embedding and campaign attributes, with classifier-free guidance.

Also houses the non-causal whole-trajectory diffusion baseline used by the
ablation harness.
"""
from __future__ import annotations

import dataclasses
import logging

import numpy as np
import torch
import torch.nn as nn

from .batching import PackedData
from .checkpoint import Checkpoint
from .config import PlannerConfig
from .data import NormStats, STATE_DIM
from .errors import InvalidInputError, NotTrainedError
from .nn_blocks import SinusoidalStepEmbedding, Trunk, attention_bias
from .numerics import SeededStream, build_module
from .schedule import build_schedule, forward_noise, guided_noise, posterior_step
from .training import run_training

logger = logging.getLogger(__name__)


class HistoryEncoder(nn.Module):
    """Causal encoder over past states; output at position i embeds s_{<=i}."""

    def __init__(self, embed: int, heads: int, layers: int, max_len: int):
        super().__init__()
        self.state_embed = nn.Linear(STATE_DIM, embed)
        self.pos_embed = nn.Embedding(max_len, embed)
        self.trunk = Trunk(embed, heads, layers)
        self.max_len = max_len

    def forward(self, states: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        b, l, _ = states.shape
        pos = torch.arange(l, device=states.device).clamp(max=self.max_len - 1)
        tokens = self.state_embed(states) + self.pos_embed(pos)[None, :, :]
        return self.trunk(tokens, attention_bias(valid, causal=True))


class NoiseNet(nn.Module):
    """eps_theta(s_k, k, z, y): an MLP over the concatenated conditioning."""

    def __init__(self, cond_dim: int, y_dim: int, hidden: int, k_embed: int, y_embed: int):
        super().__init__()
        self.k_embed = SinusoidalStepEmbedding(k_embed)
        self.y_proj = nn.Linear(y_dim, y_embed)
        self.y_null = nn.Parameter(torch.randn(y_embed) * 0.02)
        self.net = nn.Sequential(
            nn.Linear(STATE_DIM + k_embed + cond_dim + y_embed, hidden),
            nn.GELU(),
            nn.Linear(hidden, hidden),
            nn.GELU(),
            nn.Linear(hidden, STATE_DIM),
        )

    def embed_y(self, y: torch.Tensor | None, batch: int) -> torch.Tensor:
        if y is None:
            return self.y_null[None, :].expand(batch, -1)
        return self.y_proj(y)

    def forward(self, s_k: torch.Tensor, k: torch.Tensor, z: torch.Tensor,
                y_emb: torch.Tensor) -> torch.Tensor:
        feats = torch.cat([s_k, self.k_embed(k.to(s_k.dtype)), z, y_emb], dim=-1)
        return self.net(feats)


@dataclasses.dataclass(frozen=True)
class GuidanceConfig:
    omega: float
    cond_dropout: float

    def __post_init__(self):
        if self.omega < 0 or not 0 <= self.cond_dropout < 1:
            raise InvalidInputError("guidance needs omega >= 0 and cond_dropout in [0, 1)")


class DiffusionPlanner:
    """Autoregressive next-state planner: one denoised state per call."""

    module_name = "planner"

    def __init__(self, cfg: PlannerConfig, n_categories: int, stream: SeededStream,
                 norm: NormStats | None = None, dtype=torch.float32):
        self.cfg = cfg
        self.n_categories = n_categories
        self.y_dim = 2 + n_categories
        self.sched = build_schedule(cfg.diffusion_steps, cfg.beta_min, cfg.beta_max)
        self.guidance = GuidanceConfig(cfg.omega, cfg.cond_dropout)
        self.norm = norm
        self.trained = False
        self.sample_calls = 0
        self.encoder = build_module(
            lambda: HistoryEncoder(cfg.embed, cfg.heads, cfg.layers, cfg.context),
            stream.child("encoder"),
        ).to(dtype)
        self.noise_net = build_module(
            lambda: NoiseNet(cfg.embed, self.y_dim, cfg.hidden, cfg.k_embed, cfg.y_embed),
            stream.child("noise_net"),
        ).to(dtype)
        self.dtype = dtype

    def parameters(self):
        yield from self.encoder.parameters()
        yield from self.noise_net.parameters()

    def modules(self) -> nn.ModuleDict:
        return nn.ModuleDict({"encoder": self.encoder, "noise_net": self.noise_net})

    # --- training ---------------------------------------------------------

    def loss_from_samples(self, states: torch.Tensor, valid: torch.Tensor, y: torch.Tensor,
                          t_idx: torch.Tensor, k: torch.Tensor, eps: torch.Tensor,
                          drop_cond: torch.Tensor) -> torch.Tensor:
        """Denoising MSE on explicit samples (deterministic given the inputs).

        states: [B, T, D] normalized; t_idx: [B] target indices >= 1;
        k: [B] diffusion steps in 1..K; eps: [B, D]; drop_cond: [B] bool.
        """
        b = states.shape[0]
        z_all = self.encoder(states, valid)
        z = z_all[torch.arange(b), t_idx - 1]
        s0 = states[torch.arange(b), t_idx]
        abar = torch.from_numpy(self.sched.alpha_bar).to(states.dtype)[k - 1]
        s_k = torch.sqrt(abar)[:, None] * s0 + torch.sqrt(1.0 - abar)[:, None] * eps
        y_emb = self.noise_net.embed_y(y, b)
        null_emb = self.noise_net.embed_y(None, b)
        y_mix = torch.where(drop_cond[:, None], null_emb, y_emb)
        eps_hat = self.noise_net(s_k, k, z, y_mix)
        return ((eps - eps_hat) ** 2).mean()

    def sample_training_batch(self, packed: PackedData, batch_size: int, gen: torch.Generator):
        """Draw (trajectory, t, k, eps, dropout) tuples for one update."""
        n = packed.n
        idx = torch.randint(0, n, (batch_size,), generator=gen)
        lengths = packed.lengths[idx]
        # target index uniform in [1, len-1]
        u = torch.rand(batch_size, generator=gen)
        t_idx = 1 + (u * (lengths - 1).clamp(min=1).to(torch.float32)).long()
        t_idx = torch.minimum(t_idx, lengths - 1).clamp(min=1)
        k = torch.randint(1, self.sched.K + 1, (batch_size,), generator=gen)
        eps = torch.randn(batch_size, STATE_DIM, generator=gen, dtype=self.dtype)
        drop = torch.rand(batch_size, generator=gen) < self.guidance.cond_dropout
        return packed.states[idx], packed.valid[idx], packed.y[idx], t_idx, k, eps, drop

    def loss_on_batch(self, packed: PackedData, batch_size: int, gen: torch.Generator) -> torch.Tensor:
        return self.loss_from_samples(*self.sample_training_batch(packed, batch_size, gen))

    def fit(self, packed: PackedData, optim_cfg, stream: SeededStream, log_cb=None) -> dict:
        result = run_training(
            lambda gen: self.loss_on_batch(packed, self.cfg.batch_size, gen),
            self.parameters(),
            lr=self.cfg.lr, epochs=self.cfg.epochs, steps_per_epoch=self.cfg.steps_per_epoch,
            patience=self.cfg.patience, weight_decay=optim_cfg.weight_decay,
            grad_clip=optim_cfg.grad_clip, gen=stream.child("batches").torch_gen(),
            log_cb=log_cb, metric="planner_loss",
        )
        self.trained = True
        return result

    # --- sampling ---------------------------------------------------------

    def _require_trained(self):
        if not self.trained:
            raise NotTrainedError("planner has no trained checkpoint; refusing to sample")

    def encode_history(self, states_norm: torch.Tensor) -> torch.Tensor:
        """[B, L, D] normalized history window -> [B, E] embedding of s_{<=L}."""
        window = states_norm[:, -self.cfg.context:, :]
        valid = torch.ones(window.shape[:2], dtype=torch.bool)
        return self.encoder(window, valid)[:, -1, :]

    def sample_batch(self, histories_norm: torch.Tensor, y: torch.Tensor,
                     gen: torch.Generator, omega: float | None = None) -> torch.Tensor:
        """Denoise next states for a batch of equal-length histories (normalized)."""
        self._require_trained()
        self.sample_calls += 1
        omega = self.guidance.omega if omega is None else omega
        b = histories_norm.shape[0]
        with torch.no_grad():
            z = self.encode_history(histories_norm)
            y_emb = self.noise_net.embed_y(y, b)
            null_emb = self.noise_net.embed_y(None, b)
            s = torch.randn(b, STATE_DIM, generator=gen, dtype=self.dtype)
            for k in range(self.sched.K, 0, -1):
                k_t = torch.full((2 * b,), float(k), dtype=self.dtype)
                eps_both = self.noise_net(
                    torch.cat([s, s]), k_t, torch.cat([z, z]), torch.cat([null_emb, y_emb])
                )
                eps_hat = guided_noise(eps_both[:b], eps_both[b:], omega)
                noise = torch.randn(b, STATE_DIM, generator=gen, dtype=self.dtype) if k > 1 else None
                s = posterior_step(s, eps_hat, k, self.sched, noise)
        return s

    def sample_next_state(self, history_states, campaign, stream: SeededStream,
                          omega: float | None = None) -> np.ndarray:
        """Predict the state after the last observed one; deterministic per stream."""
        history = np.asarray(history_states, dtype=np.float64)
        if history.ndim != 2 or history.shape[0] < 1 or history.shape[1] != STATE_DIM:
            raise InvalidInputError(f"history must be [t, {STATE_DIM}] with t >= 1")
        if self.norm is None:
            raise NotTrainedError("planner has no normalization stats")
        hist_norm = torch.from_numpy(self.norm.norm_state(history)).to(self.dtype)[None, :, :]
        y = torch.from_numpy(self.norm.campaign_vector(campaign, self.n_categories)).to(self.dtype)[None, :]
        out = self.sample_batch(hist_norm, y, stream.torch_gen(), omega)
        return self.norm.denorm_state(out[0].numpy())

    # --- checkpointing ------------------------------------------------------

    def to_checkpoint(self, stage: str, config_hash: str, extra: dict | None = None) -> Checkpoint:
        arrays = {f"param/{k}": v.detach().cpu().numpy().copy()
                  for k, v in self.modules().named_parameters()}
        for k, v in self.norm.to_arrays().items():
            arrays[f"norm/{k}"] = v
        return Checkpoint(
            module=self.module_name,
            stage=stage,
            config_hash=config_hash,
            config={"planner": dataclasses.asdict(self.cfg), "n_categories": self.n_categories,
                    "norm_floored": self.norm.floored},
            arrays=arrays,
            trained=self.trained,
            extra=extra or {},
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, dtype=torch.float32) -> "DiffusionPlanner":
        if ckpt.module != cls.module_name:
            raise InvalidInputError(f"checkpoint is for module {ckpt.module!r}, not {cls.module_name!r}")
        cfg = PlannerConfig(**ckpt.config["planner"])
        norm = NormStats.from_arrays(
            {k.split("/", 1)[1]: v for k, v in ckpt.arrays.items() if k.startswith("norm/")},
            floored=ckpt.config.get("norm_floored"),
        )
        planner = cls(cfg, ckpt.config["n_categories"], SeededStream(0, "load"), norm=norm, dtype=dtype)
        params = dict(planner.modules().named_parameters())
        with torch.no_grad():
            for k, v in ckpt.arrays.items():
                if k.startswith("param/"):
                    params[k.split("/", 1)[1]].copy_(torch.from_numpy(v.copy()))
        planner.trained = ckpt.trained
        return planner


class TrajectoryDiffusionNet(nn.Module):
    """Non-causal denoiser over a whole state trajectory (ablation baseline)."""

    def __init__(self, embed: int, heads: int, layers: int, horizon: int,
                 y_dim: int, k_embed: int):
        super().__init__()
        self.state_embed = nn.Linear(STATE_DIM, embed)
        self.pos_embed = nn.Embedding(horizon, embed)
        self.k_proj = nn.Sequential(SinusoidalStepEmbedding(k_embed), nn.Linear(k_embed, embed))
        self.y_proj = nn.Linear(y_dim, embed)
        self.y_null = nn.Parameter(torch.randn(embed) * 0.02)
        self.trunk = Trunk(embed, heads, layers)
        self.head = nn.Linear(embed, STATE_DIM)
        self.horizon = horizon

    def embed_y(self, y: torch.Tensor | None, batch: int) -> torch.Tensor:
        if y is None:
            return self.y_null[None, :].expand(batch, -1)
        return self.y_proj(y)

    def forward(self, x_k: torch.Tensor, k: torch.Tensor, y_emb: torch.Tensor,
                valid: torch.Tensor) -> torch.Tensor:
        b, l, _ = x_k.shape
        pos = torch.arange(l, device=x_k.device).clamp(max=self.horizon - 1)
        tokens = self.state_embed(x_k) + self.pos_embed(pos)[None, :, :]
        tokens = tokens + self.k_proj(k.to(x_k.dtype))[:, None, :] + y_emb[:, None, :]
        h = self.trunk(tokens, attention_bias(valid, causal=False))
        return self.head(h)


class TrajectoryDiffusionPlanner:
    """Whole-trajectory diffusion; foresight read off a globally generated plan.

    Same schedule and guidance as the per-step planner but no history
    embedding: generation is joint over all positions, with the observed
    prefix re-imposed at each reverse step (replacement inpainting).
    """

    module_name = "planner_global"

    def __init__(self, cfg: PlannerConfig, n_categories: int, horizon: int,
                 stream: SeededStream, norm: NormStats | None = None, dtype=torch.float32):
        self.cfg = cfg
        self.n_categories = n_categories
        self.y_dim = 2 + n_categories
        self.horizon = horizon
        self.sched = build_schedule(cfg.diffusion_steps, cfg.beta_min, cfg.beta_max)
        self.guidance = GuidanceConfig(cfg.omega, cfg.cond_dropout)
        self.norm = norm
        self.trained = False
        self.sample_calls = 0
        self.dtype = dtype
        self.net = build_module(
            lambda: TrajectoryDiffusionNet(cfg.embed, cfg.heads, cfg.layers, horizon,
                                           self.y_dim, cfg.k_embed),
            stream.child("global_net"),
        ).to(dtype)

    def parameters(self):
        return self.net.parameters()

    def modules(self) -> nn.ModuleDict:
        return nn.ModuleDict({"net": self.net})

    def loss_from_samples(self, states: torch.Tensor, valid: torch.Tensor, y: torch.Tensor,
                          k: torch.Tensor, eps: torch.Tensor, drop_cond: torch.Tensor) -> torch.Tensor:
        b = states.shape[0]
        abar = torch.from_numpy(self.sched.alpha_bar).to(states.dtype)[k - 1]
        x_k = torch.sqrt(abar)[:, None, None] * states + torch.sqrt(1.0 - abar)[:, None, None] * eps
        y_emb = torch.where(drop_cond[:, None], self.net.embed_y(None, b), self.net.embed_y(y, b))
        eps_hat = self.net(x_k, k, y_emb, valid)
        mask = valid[:, :, None].to(states.dtype)
        return (((eps - eps_hat) ** 2) * mask).sum() / mask.sum() / STATE_DIM

    def loss_on_batch(self, packed: PackedData, batch_size: int, gen: torch.Generator) -> torch.Tensor:
        idx = torch.randint(0, packed.n, (batch_size,), generator=gen)
        k = torch.randint(1, self.sched.K + 1, (batch_size,), generator=gen)
        eps = torch.randn(batch_size, packed.horizon, STATE_DIM, generator=gen, dtype=self.dtype)
        drop = torch.rand(batch_size, generator=gen) < self.guidance.cond_dropout
        return self.loss_from_samples(packed.states[idx], packed.valid[idx], packed.y[idx], k, eps, drop)

    def fit(self, packed: PackedData, optim_cfg, stream: SeededStream, log_cb=None) -> dict:
        result = run_training(
            lambda gen: self.loss_on_batch(packed, self.cfg.batch_size, gen),
            self.parameters(),
            lr=self.cfg.lr, epochs=self.cfg.epochs, steps_per_epoch=self.cfg.steps_per_epoch,
            patience=self.cfg.patience, weight_decay=optim_cfg.weight_decay,
            grad_clip=optim_cfg.grad_clip, gen=stream.child("batches").torch_gen(),
            log_cb=log_cb, metric="planner_global_loss",
        )
        self.trained = True
        return result

    def _require_trained(self):
        if not self.trained:
            raise NotTrainedError("global planner has no trained checkpoint; refusing to sample")

    def sample_batch(self, histories_norm: torch.Tensor, y: torch.Tensor,
                     gen: torch.Generator, omega: float | None = None) -> torch.Tensor:
        """Generate full trajectories holding the observed prefix fixed; return
        the position after the prefix (clamped to the final position)."""
        self._require_trained()
        self.sample_calls += 1
        omega = self.guidance.omega if omega is None else omega
        b, t_obs = histories_norm.shape[0], histories_norm.shape[1]
        t_obs = min(t_obs, self.horizon)
        prefix = histories_norm[:, :t_obs, :]
        valid = torch.ones(b, self.horizon, dtype=torch.bool)
        with torch.no_grad():
            y_emb = self.net.embed_y(y, b)
            null_emb = self.net.embed_y(None, b)
            x = torch.randn(b, self.horizon, STATE_DIM, generator=gen, dtype=self.dtype)
            for k in range(self.sched.K, 0, -1):
                k_t = torch.full((2 * b,), float(k), dtype=self.dtype)
                eps_both = self.net(torch.cat([x, x]), k_t, torch.cat([null_emb, y_emb]),
                                    torch.cat([valid, valid]))
                eps_hat = guided_noise(eps_both[:b], eps_both[b:], omega)
                noise = torch.randn(b, self.horizon, STATE_DIM, generator=gen, dtype=self.dtype) if k > 1 else None
                x = posterior_step(x, eps_hat, k, self.sched, noise)
                if k > 1:
                    prefix_noise = torch.randn(prefix.shape, generator=gen, dtype=self.dtype)
                    x[:, :t_obs, :] = forward_noise(prefix, k - 1, prefix_noise, self.sched)
                else:
                    x[:, :t_obs, :] = prefix
        return x[:, min(t_obs, self.horizon - 1), :]

    def sample_next_state(self, history_states, campaign, stream: SeededStream,
                          omega: float | None = None) -> np.ndarray:
        history = np.asarray(history_states, dtype=np.float64)
        if history.ndim != 2 or history.shape[0] < 1 or history.shape[1] != STATE_DIM:
            raise InvalidInputError(f"history must be [t, {STATE_DIM}] with t >= 1")
        if self.norm is None:
            raise NotTrainedError("global planner has no normalization stats")
        hist_norm = torch.from_numpy(self.norm.norm_state(history)).to(self.dtype)[None, :, :]
        y = torch.from_numpy(self.norm.campaign_vector(campaign, self.n_categories)).to(self.dtype)[None, :]
        out = self.sample_batch(hist_norm, y, stream.torch_gen(), omega)
        return self.norm.denorm_state(out[0].numpy())

    def to_checkpoint(self, stage: str, config_hash: str, extra: dict | None = None) -> Checkpoint:
        arrays = {f"param/{k}": v.detach().cpu().numpy().copy()
                  for k, v in self.modules().named_parameters()}
        for k, v in self.norm.to_arrays().items():
            arrays[f"norm/{k}"] = v
        return Checkpoint(
            module=self.module_name, stage=stage, config_hash=config_hash,
            config={"planner": dataclasses.asdict(self.cfg), "n_categories": self.n_categories,
                    "horizon": self.horizon, "norm_floored": self.norm.floored},
            arrays=arrays, trained=self.trained, extra=extra or {},
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, dtype=torch.float32) -> "TrajectoryDiffusionPlanner":
        if ckpt.module != cls.module_name:
            raise InvalidInputError(f"checkpoint is for module {ckpt.module!r}, not {cls.module_name!r}")
        cfg = PlannerConfig(**ckpt.config["planner"])
        norm = NormStats.from_arrays(
            {k.split("/", 1)[1]: v for k, v in ckpt.arrays.items() if k.startswith("norm/")},
            floored=ckpt.config.get("norm_floored"),
        )
        planner = cls(cfg, ckpt.config["n_categories"], ckpt.config["horizon"],
                      SeededStream(0, "load"), norm=norm, dtype=dtype)
        params = dict(planner.modules().named_parameters())
        with torch.no_grad():
            for k, v in ckpt.arrays.items():
                if k.startswith("param/"):
                    params[k.split("/", 1)[1]].copy_(torch.from_numpy(v.copy()))
        planner.trained = ckpt.trained
        return planner
