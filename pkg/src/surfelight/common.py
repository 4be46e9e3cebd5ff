"""Shared numeric conventions: dtype, seeding, and the deterministic mode.

All differentiable computation runs in float64 on CPU; the tolerance budgets of
the verification suite assume double precision throughout.
"""

from __future__ import annotations

import contextlib
import random

import numpy as np
import torch

DTYPE = torch.float64
EPS = 1e-12


def seed_all(seed: int) -> np.random.Generator:
    """Seed every RNG the pipeline touches and return a fresh numpy generator."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


@contextlib.contextmanager
def deterministic_mode(enabled: bool = True):
    """Single-threaded execution context for bitwise-reproducible runs.

    Reductions in torch and BLAS can reorder across threads; pinning to one
    thread makes every floating-point reduction order fixed.
    """
    if not enabled:
        yield
        return
    n_torch = torch.get_num_threads()
    n_interop = torch.get_num_interop_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(n_torch)
        del n_interop  # interop thread count cannot be lowered after start-up


def to_tensor(x, dtype: torch.dtype = DTYPE) -> torch.Tensor:
    """Convert array-likes to a torch tensor of the pipeline dtype."""
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def check_finite(name: str, *tensors) -> None:
    """Raise with a diagnostic if any input contains NaN/Inf."""
    for t in tensors:
        arr = t.detach() if isinstance(t, torch.Tensor) else torch.as_tensor(np.asarray(t))
        if not torch.isfinite(arr).all():
            bad = torch.nonzero(~torch.isfinite(arr))
            first = bad[0].tolist() if len(bad) else []
            raise ValueError(f"non-finite values in {name} (first at index {first})")


def normalize(v: torch.Tensor, dim: int = -1, eps: float = EPS) -> torch.Tensor:
    """Unit-normalize along ``dim`` guarding the zero vector."""
    return v / v.norm(dim=dim, keepdim=True).clamp_min(eps)
