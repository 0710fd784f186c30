"""Shared epoch/update loop used by every training stage."""
from __future__ import annotations

import logging

import torch

from .errors import DivergenceError

logger = logging.getLogger(__name__)


def run_training(step_loss, parameters, *, lr: float, epochs: int, steps_per_epoch: int,
                 patience: int, weight_decay: float, grad_clip: float,
                 gen: torch.Generator, log_cb=None, metric: str = "loss") -> dict:
    """AdamW updates with gradient clipping, NaN guard, and plateau early stop.

    ``step_loss(gen)`` must sample its own batch from the generator and return
    a scalar loss tensor.  Early stop is a warning, not a failure.
    """
    params = list(parameters)
    opt = torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)
    history = []
    best, bad_epochs = float("inf"), 0
    for epoch in range(epochs):
        total = 0.0
        for _ in range(steps_per_epoch):
            loss = step_loss(gen)
            if not torch.isfinite(loss):
                raise DivergenceError(f"{metric} is non-finite",
                                      {"epoch": epoch, metric: float(loss)})
            opt.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, grad_clip)
            opt.step()
            total += float(loss.detach())
        mean_loss = total / steps_per_epoch
        history.append(mean_loss)
        if log_cb:
            log_cb(epoch, {metric: mean_loss})
        if mean_loss < best - 1e-12:
            best, bad_epochs = mean_loss, 0
        else:
            bad_epochs += 1
            if bad_epochs >= patience:
                logger.warning("%s plateaued; early stop at epoch %d", metric, epoch)
                break
    return {"loss_history": history}
