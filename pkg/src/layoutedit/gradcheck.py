"""Finite-difference verification of reverse-mode gradients.

Central differences at step 1e-3 in double precision against a scalar
head (fixed random projection of the module output). Large parameter
groups are subsampled entry-wise; every checked entry must agree within
the relative tolerance.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import Rng
from .tensor import Param, Tensor

FD_STEP = 1e-3
REL_TOL = 1e-4


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1.0)


def finite_diff(fn, arr: np.ndarray, idx, step: float = FD_STEP) -> float:
    old = arr[idx]
    arr[idx] = old + step
    hi = fn()
    arr[idx] = old - step
    lo = fn()
    arr[idx] = old
    return (hi - lo) / (2.0 * step)


@dataclass
class GroupReport:
    name: str
    max_rel_err: float
    entries: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < REL_TOL


def check_param_group(fn, param: Param, rng: Rng, max_entries: int = 8,
                      corrupt: bool = False) -> GroupReport:
    """Compare the tape gradient of `fn()` (a fresh scalar Tensor per
    call) against central differences on sampled entries of `param`."""
    was = param.tensor.requires_grad
    param.tensor.requires_grad = True
    param.zero_grad()
    out = fn()
    out.backward()
    grad = param.tensor.grad
    if grad is None:
        grad = np.zeros_like(param.data)
    if corrupt:
        grad = grad + 1.0
    flat = param.data.reshape(-1)
    n = flat.size
    picks = (range(n) if n <= max_entries
             else sorted({rng.randint(n) for _ in range(max_entries)}))
    worst = 0.0
    scalar = lambda: fn().item()
    for i in picks:
        fd = finite_diff(scalar, flat, i)
        worst = max(worst, relative_error(float(grad.reshape(-1)[i]), fd))
    param.tensor.requires_grad = was
    param.zero_grad()
    return GroupReport(name=param.name, max_rel_err=worst, entries=len(picks))


def check_groups(fn_for_param, params, seed: int = 0, max_entries: int = 8,
                 corrupt_name: str | None = None) -> list:
    """Run check_param_group over a parameter list; `fn_for_param` maps a
    Param to the scalar-head closure (usually the same closure)."""
    rng = Rng(seed).spawn("gradcheck")
    reports = []
    for p in params:
        fn = fn_for_param(p) if callable(fn_for_param) else fn_for_param
        reports.append(check_param_group(fn, p, rng, max_entries=max_entries,
                                         corrupt=(p.name == corrupt_name)))
    return reports


def projection_head(rng: Rng, key: str):
    """Return a closure turning a Tensor output into a fixed scalar: the
    sum of the output times a frozen random array."""
    r = rng.spawn(key)
    cache = {}

    def head(out: Tensor) -> Tensor:
        if "R" not in cache:
            cache["R"] = r.normal(out.shape)
        return (out * Tensor(cache["R"].astype(out.dtype))).sum()

    return head
