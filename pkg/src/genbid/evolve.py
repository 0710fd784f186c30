"""Offline policy evolution: group sampling, critic-derived advantages, and a
clipped ratio objective with a KL anchor to the pre-trained reference policy.

The stage touches no environment and reads no rewards; its only learning
signal is the frozen critic.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from .batching import PackedData
from .config import EvolveConfig
from .critic import CriticPair
from .errors import InvalidInputError, StageGateError
from .numerics import SeededStream
from .policy import PolicyContext, SequencePolicy

logger = logging.getLogger(__name__)

_RATIO_MIN, _RATIO_MAX = 1e-6, 1e6
_STD_FLOOR = 1e-6
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class GroupSample:
    """G candidate actions at one context with the quantities the update needs."""

    context: PolicyContext
    actions: np.ndarray       # (G,) raw action values
    old_log_probs: np.ndarray  # (G,) under the sampling policy
    q_values: np.ndarray | None = None
    advantages: np.ndarray | None = None


def sample_group(context: PolicyContext, policy_old: SequencePolicy, group_size: int,
                 stream: SeededStream) -> GroupSample:
    """Draw G actions from the old policy at one context; deterministic per stream."""
    if group_size < 2:
        raise InvalidInputError(f"group size must be >= 2, got {group_size}")
    mean, std = policy_old.context_dist(context)
    if std < _STD_FLOOR:
        logger.warning("degenerate action std %.3e floored at %.0e", std, _STD_FLOOR)
        std = _STD_FLOOR
    z = torch.randn(group_size, generator=stream.torch_gen()).numpy()
    a_norm = mean + std * z
    logp = -0.5 * _LOG_2PI - math.log(std) - 0.5 * ((a_norm - mean) / std) ** 2
    raw = policy_old.norm.denorm_action(a_norm)
    return GroupSample(context=context, actions=raw, old_log_probs=logp)


def compute_advantages(q_values, normalize: bool = True):
    """Group-mean-centered critic values, optionally scaled by the group std."""
    q = np.asarray(q_values, dtype=np.float64)
    if q.ndim != 1 or len(q) < 2:
        raise InvalidInputError("advantages need at least 2 group values")
    adv = q - q.mean()
    if normalize:
        adv = adv / max(float(q.std()), _STD_FLOOR)
    return adv


def importance_ratio(logp_new: float, logp_old: float) -> float:
    """exp(logp_new - logp_old), clamped for numeric safety."""
    if not (math.isfinite(logp_new) and math.isfinite(logp_old)):
        raise InvalidInputError("log densities must be finite")
    return float(min(max(math.exp(min(logp_new - logp_old, 700.0)), _RATIO_MIN), _RATIO_MAX))


def clip_objective(r: float, advantage: float, eps: float) -> float:
    """min(r*A, clip(r, 1-eps, 1+eps)*A)."""
    if not 0 < eps < 1:
        raise InvalidInputError(f"clip eps must be in (0, 1), got {eps}")
    return min(r * advantage, min(max(r, 1.0 - eps), 1.0 + eps) * advantage)


def gaussian_kl(mean_p, std_p, mean_q, std_q):
    """KL(N(mean_p, std_p^2) || N(mean_q, std_q^2)), elementwise closed form."""
    if isinstance(mean_p, torch.Tensor):
        return (torch.log(std_q / std_p)
                + (std_p ** 2 + (mean_p - mean_q) ** 2) / (2.0 * std_q ** 2) - 0.5)
    return (math.log(std_q / std_p)
            + (std_p ** 2 + (mean_p - mean_q) ** 2) / (2.0 * std_q ** 2) - 0.5)


def kl_penalty(context: PolicyContext, policy_new: SequencePolicy,
               policy_ref: SequencePolicy) -> float:
    """Closed-form KL between the two heads at one context; >= 0."""
    mean_n, std_n = policy_new.context_dist(context)
    mean_r, std_r = policy_ref.context_dist(context)
    return float(gaussian_kl(mean_n, std_n, mean_r, std_r))


def grpo_loss_terms(mean_new: torch.Tensor, log_std_new: torch.Tensor,
                    actions_norm: torch.Tensor, old_logp: torch.Tensor,
                    advantages: torch.Tensor, mean_ref: torch.Tensor,
                    std_ref: torch.Tensor, cfg: EvolveConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched surrogate and KL terms.

    mean_new/log_std_new: [B] with grad; actions_norm/old_logp/advantages: [B, G];
    mean_ref/std_ref: [B] detached.  Returns (clip_term [B], kl [B]).
    """
    std_new = torch.exp(log_std_new)
    logp_new = (-0.5 * _LOG_2PI - log_std_new[:, None]
                - 0.5 * ((actions_norm - mean_new[:, None]) / std_new[:, None]) ** 2)
    ratio = torch.exp(logp_new - old_logp).clamp(_RATIO_MIN, _RATIO_MAX)
    clipped = ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps)
    clip_term = torch.minimum(ratio * advantages, clipped * advantages).mean(dim=1)
    kl = gaussian_kl(mean_new, std_new, mean_ref, std_ref)
    return clip_term, kl


def grpo_objective(policy_new: SequencePolicy, policy_ref: SequencePolicy,
                   packed: PackedData, idx: torch.Tensor, t: torch.Tensor,
                   foresight_norm: torch.Tensor | None, actions_norm: torch.Tensor,
                   old_logp: torch.Tensor, advantages: torch.Tensor,
                   cfg: EvolveConfig) -> torch.Tensor:
    """The scalar objective (to maximize) on one batch of groups."""
    mean_new, log_std_new = policy_new.dist_params(packed, idx, t, foresight_norm)
    with torch.no_grad():
        mean_ref, log_std_ref = policy_ref.dist_params(packed, idx, t, foresight_norm)
    clip_term, kl = grpo_loss_terms(mean_new, log_std_new, actions_norm, old_logp,
                                    advantages, mean_ref, torch.exp(log_std_ref), cfg)
    return (clip_term - cfg.kl_beta * kl).mean()


def _group_draws(policy_old: SequencePolicy, packed: PackedData, idx: torch.Tensor,
                 t: torch.Tensor, foresight_norm, group_size: int, gen: torch.Generator):
    """Vectorized sample_group over a batch of contexts."""
    with torch.no_grad():
        mean_old, log_std_old = policy_old.dist_params(packed, idx, t, foresight_norm)
    std_old = torch.exp(log_std_old).clamp(min=_STD_FLOOR)
    z = torch.randn(len(idx), group_size, generator=gen, dtype=mean_old.dtype)
    a_norm = mean_old[:, None] + std_old[:, None] * z
    logp_old = (-0.5 * _LOG_2PI - torch.log(std_old)[:, None]
                - 0.5 * ((a_norm - mean_old[:, None]) / std_old[:, None]) ** 2)
    return a_norm, logp_old


def evolve(policy: SequencePolicy, critic: CriticPair, packed: PackedData,
           foresight_norm: torch.Tensor | None, cfg: EvolveConfig, optim_cfg,
           stream: SeededStream, log_cb=None) -> SequencePolicy:
    """Epochs of group sampling and ascent on the clipped objective.

    The critic must be frozen; the old policy refreshes once per epoch; the
    reference stays at the initial (pre-trained) parameters throughout.
    """
    if not critic.frozen:
        raise StageGateError("critic must be frozen before policy evolution")
    if not policy.trained:
        raise StageGateError("evolution needs a pre-trained policy checkpoint")
    policy_ref = policy.clone()
    n = packed.n
    gen = stream.child("batches").torch_gen()
    opt = torch.optim.AdamW(list(policy.parameters()), lr=cfg.lr,
                            weight_decay=optim_cfg.weight_decay)
    norm = policy.norm
    probe_idx = torch.arange(min(n, 64))
    probe_t = torch.minimum(packed.lengths[probe_idx] // 2, packed.lengths[probe_idx] - 1)

    snapshot = {k: v.clone() for k, v in policy.net.state_dict().items()}
    for epoch in range(cfg.epochs):
        policy_old = policy.clone()
        epoch_obj = 0.0
        diverged = False
        for _ in range(cfg.steps_per_epoch):
            idx = torch.randint(0, n, (cfg.batch_size,), generator=gen)
            u = torch.rand(cfg.batch_size, generator=gen)
            t = (u * packed.lengths[idx].to(torch.float32)).long()
            t = torch.minimum(t, packed.lengths[idx] - 1)
            a_norm, logp_old = _group_draws(policy_old, packed, idx, t, foresight_norm,
                                            cfg.group_size, gen)
            flat_idx = idx.repeat_interleave(cfg.group_size)
            flat_t = t.repeat_interleave(cfg.group_size)
            q = critic.q_values_at(packed, flat_idx, flat_t, a_norm.reshape(-1))
            q = q.reshape(cfg.batch_size, cfg.group_size).to(torch.float64).numpy()
            adv = q - q.mean(axis=1, keepdims=True)
            if cfg.normalize_advantages:
                adv = adv / np.maximum(q.std(axis=1, keepdims=True), _STD_FLOOR)
            advantages = torch.from_numpy(adv).to(a_norm.dtype)
            objective = grpo_objective(policy, policy_ref, packed, idx, t, foresight_norm,
                                       a_norm, logp_old, advantages, cfg)
            if not torch.isfinite(objective):
                logger.warning("evolution objective non-finite at epoch %d; "
                               "reverting to last-good parameters", epoch)
                policy.net.load_state_dict(snapshot)
                diverged = True
                break
            loss = -objective
            opt.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(list(policy.parameters()), optim_cfg.grad_clip)
            opt.step()
            epoch_obj += float(objective.detach())
        if diverged:
            break
        snapshot = {k: v.clone() for k, v in policy.net.state_dict().items()}
        if log_cb:
            with torch.no_grad():
                mean_a, _ = policy.dist_params(packed, probe_idx, probe_t, foresight_norm)
                q_probe = critic.q_values_at(packed, probe_idx, probe_t, mean_a)
            log_cb(epoch, {
                "grpo_objective": epoch_obj / cfg.steps_per_epoch,
                "policy_mean_q": float(q_probe.mean()),
            })
    return policy
