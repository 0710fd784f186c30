"""Dataset packing: padded tensors shared by the model training loops."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .data import Dataset, NormStats


@dataclass
class PackedData:
    """Normalized, padded views of a dataset (float32 torch tensors)."""

    states: torch.Tensor        # [N, T, 16] normalized
    actions: torch.Tensor       # [N, T] normalized
    rtgs: torch.Tensor          # [N, T] normalized
    rewards: torch.Tensor       # [N, T] raw
    valid: torch.Tensor         # [N, T] bool
    lengths: torch.Tensor       # [N] int64
    y: torch.Tensor             # [N, y_dim] campaign conditioning vectors
    timesteps: torch.Tensor     # [N, T] int64 (0..len-1, 0 at pads)

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def horizon(self) -> int:
        return self.states.shape[1]


def pack_dataset(dataset: Dataset, norm: NormStats, n_categories: int,
                 dtype=torch.float32) -> PackedData:
    n = len(dataset)
    t_max = max(len(traj) for traj in dataset)
    states = np.zeros((n, t_max, 16), dtype=np.float64)
    actions = np.zeros((n, t_max), dtype=np.float64)
    rtgs = np.zeros((n, t_max), dtype=np.float64)
    rewards = np.zeros((n, t_max), dtype=np.float64)
    valid = np.zeros((n, t_max), dtype=bool)
    lengths = np.zeros(n, dtype=np.int64)
    timesteps = np.zeros((n, t_max), dtype=np.int64)
    ys = np.zeros((n, 2 + n_categories), dtype=np.float64)
    for i, traj in enumerate(dataset):
        length = len(traj)
        lengths[i] = length
        states[i, :length] = norm.norm_state(traj.states)
        actions[i, :length] = norm.norm_action(traj.actions)
        rtgs[i, :length] = norm.norm_rtg(traj.rtgs)
        rewards[i, :length] = traj.rewards
        valid[i, :length] = True
        timesteps[i, :length] = np.arange(length)
        ys[i] = norm.campaign_vector(traj.campaign, n_categories)
    return PackedData(
        states=torch.from_numpy(states).to(dtype),
        actions=torch.from_numpy(actions).to(dtype),
        rtgs=torch.from_numpy(rtgs).to(dtype),
        rewards=torch.from_numpy(rewards).to(dtype),
        valid=torch.from_numpy(valid),
        lengths=torch.from_numpy(lengths),
        y=torch.from_numpy(ys).to(dtype),
        timesteps=torch.from_numpy(timesteps),
    )


def gather_window(values: torch.Tensor, idx: torch.Tensor, t: torch.Tensor,
                  context: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Left-padded windows ending at step ``t`` (inclusive).

    values: [N, T, ...]; idx, t: [B].  Returns (window [B, C, ...],
    frame_valid [B, C], steps [B, C]) where invalid frames are zeroed.
    """
    b = idx.shape[0]
    offsets = torch.arange(context) - (context - 1)          # [-C+1 .. 0]
    steps = t[:, None] + offsets[None, :]                    # [B, C]
    frame_valid = steps >= 0
    steps_clamped = steps.clamp(min=0)
    flat = values[idx[:, None].expand(b, context), steps_clamped]
    mask_shape = [b, context] + [1] * (flat.dim() - 2)
    window = flat * frame_valid.view(*mask_shape).to(flat.dtype)
    return window, frame_valid, steps_clamped
