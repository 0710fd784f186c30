"""Shared numeric substrate: labeled randomness, parameter views, gradient checks.

Every stochastic operation in the package draws from a :class:`SeededStream`
(or a child derived from one); nothing reads the process-global numpy/torch
generators, so runs are reproducible from a single root seed.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidInputError

_MASK64 = (1 << 64) - 1
_MASK63 = (1 << 63) - 1


class SeededStream:
    """A named, reproducible source of randomness.

    Child streams derive from ``(seed, label)`` via SHA-256: the child seed is
    the first 8 bytes (big-endian) of ``sha256("{seed:016x}:{label}")``.  The
    construction is platform independent, and distinct labels give independent
    streams.
    """

    def __init__(self, seed: int, label: str = "root"):
        self.seed = int(seed) & _MASK64
        self.label = label
        self._np_rng: np.random.Generator | None = None
        self._torch_gen: torch.Generator | None = None

    def child(self, label: str) -> "SeededStream":
        digest = hashlib.sha256(f"{self.seed:016x}:{label}".encode()).digest()
        child_seed = int.from_bytes(digest[:8], "big")
        return SeededStream(child_seed, f"{self.label}/{label}")

    def derive_seed(self, label: str) -> int:
        return self.child(label).seed

    def numpy(self) -> np.random.Generator:
        """Persistent numpy generator for this node (draws advance it)."""
        if self._np_rng is None:
            self._np_rng = np.random.Generator(np.random.PCG64(self.seed))
        return self._np_rng

    def torch_gen(self) -> torch.Generator:
        """Persistent torch CPU generator for this node."""
        if self._torch_gen is None:
            g = torch.Generator()
            g.manual_seed(self.seed & _MASK63)
            self._torch_gen = g
        return self._torch_gen

    def __repr__(self):
        return f"SeededStream(seed={self.seed:#x}, label={self.label!r})"


def build_module(factory, stream: SeededStream) -> torch.nn.Module:
    """Construct a torch module with deterministic, stream-derived init.

    Module constructors call their default ``reset_parameters`` against the
    global torch generator; we fork that generator, seed it from the stream,
    and restore it afterwards so the ambient RNG state is left untouched.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(stream.derive_seed("init") & _MASK63)
        module = factory()
    return module


def stream_dropout(x: torch.Tensor, p: float, gen: torch.Generator, training: bool) -> torch.Tensor:
    """Inverted dropout driven by an explicit generator (no global RNG)."""
    if not training or p <= 0.0:
        return x
    keep = (torch.rand(x.shape, generator=gen, device=x.device) >= p).to(x.dtype)
    return x * keep / (1.0 - p)


class ParamSet:
    """Named float arrays with a flat view for finite-difference tooling."""

    def __init__(self, arrays: dict[str, np.ndarray]):
        names = list(arrays)
        if len(set(names)) != len(names):
            raise InvalidInputError("parameter names must be unique")
        self._arrays = {k: np.asarray(v) for k, v in arrays.items()}

    @property
    def names(self) -> list[str]:
        return list(self._arrays)

    @property
    def shapes(self) -> dict[str, tuple]:
        return {k: v.shape for k, v in self._arrays.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def arrays(self) -> dict[str, np.ndarray]:
        return dict(self._arrays)

    def flat(self) -> np.ndarray:
        if not self._arrays:
            return np.zeros(0)
        return np.concatenate([v.reshape(-1) for v in self._arrays.values()])

    def with_flat(self, flat: np.ndarray) -> "ParamSet":
        flat = np.asarray(flat)
        total = sum(v.size for v in self._arrays.values())
        if flat.shape != (total,):
            raise InvalidInputError(f"flat view must have shape ({total},), got {flat.shape}")
        out, i = {}, 0
        for k, v in self._arrays.items():
            out[k] = flat[i : i + v.size].reshape(v.shape).astype(v.dtype, copy=True)
            i += v.size
        return ParamSet(out)

    @classmethod
    def from_module(cls, module: torch.nn.Module) -> "ParamSet":
        return cls({k: p.detach().cpu().numpy().copy() for k, p in module.named_parameters()})

    def assign_to(self, module: torch.nn.Module) -> None:
        params = dict(module.named_parameters())
        if set(params) != set(self._arrays):
            raise InvalidInputError("parameter names do not match the module")
        with torch.no_grad():
            for k, p in params.items():
                arr = self._arrays[k]
                if tuple(p.shape) != arr.shape:
                    raise InvalidInputError(f"shape mismatch for {k}: {tuple(p.shape)} vs {arr.shape}")
                p.copy_(torch.from_numpy(np.asarray(arr)).to(p.dtype))


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    n_checked: int
    n_skipped: int
    passed: bool
    finite: bool

    def __str__(self):
        status = "ok" if self.passed else "FAIL"
        return (
            f"grad-check {status}: max_rel_error={self.max_rel_error:.3e} "
            f"at {self.worst_param} ({self.n_checked} coords, {self.n_skipped} near-zero skipped)"
        )


def grad_check(
    loss_fn,
    module: torch.nn.Module,
    tolerance: float = 1e-3,
    h: float = 1e-4,
    zero_atol: float = 1e-9,
) -> GradCheckReport:
    """Compare autograd gradients of ``loss_fn()`` against central differences.

    ``loss_fn`` must be a deterministic closure over ``module``'s parameters
    (freeze any sampled batch indices/noise before calling).  Parameters are
    perturbed in place one coordinate at a time with step ``h``; use float64
    parameters for meaningful comparisons at 1e-3 tolerance.
    """
    params = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    for _, p in params:
        p.grad = None
    loss = loss_fn()
    if not torch.isfinite(loss):
        return GradCheckReport(float("inf"), "<loss>", 0, 0, False, False)
    loss.backward()
    analytic = {n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)) for n, p in params}

    max_rel, worst, checked, skipped = 0.0, "<none>", 0, 0
    with torch.no_grad():
        for name, p in params:
            flat = p.view(-1)
            g_flat = analytic[name].view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                f_plus = float(loss_fn())
                flat[i] = orig - h
                f_minus = float(loss_fn())
                flat[i] = orig
                fd = (f_plus - f_minus) / (2.0 * h)
                a = float(g_flat[i])
                if abs(a) < zero_atol and abs(fd) < zero_atol:
                    skipped += 1
                    continue
                rel = abs(a - fd) / max(abs(a), abs(fd))
                checked += 1
                if rel > max_rel:
                    max_rel, worst = rel, f"{name}[{i}]"
    return GradCheckReport(max_rel, worst, checked, skipped, max_rel < tolerance, True)
