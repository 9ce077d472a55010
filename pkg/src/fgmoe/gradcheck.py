"""Finite-difference gradient checking for scalar-valued tensor functions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, no_grad
from .errors import GradCheckError, GraphError


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: tuple | None
    checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def _rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def grad_check(f, x, h: float = 1e-6, tol: float = 1e-5, indices=None) -> GradCheckReport:
    """Compare the analytic gradient of ``f`` at ``x`` with central differences.

    ``f`` must map a Tensor to a scalar Tensor and be deterministic; two
    differing evaluations raise :class:`GradCheckError`.  ``indices`` limits
    the check to a subset of entries of ``x`` (all entries by default).
    Relative errors use an absolute floor of 1e-8.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)

    leaf = Tensor(base.copy(), requires_grad=True)
    out = f(leaf)
    if out.data.size != 1:
        raise GraphError(f"grad_check requires a scalar-valued f, got shape {out.data.shape}")
    with no_grad():
        repeat = f(Tensor(base.copy()))
    if not np.array_equal(out.data, repeat.data):
        raise GradCheckError("f is not deterministic: two evaluations differ")
    out.backward()
    if leaf._grad is None:
        raise GradCheckError("f does not depend on its tensor argument")
    analytic = leaf.grad.copy()

    if indices is None:
        indices = list(np.ndindex(base.shape))
    worst = 0.0
    worst_index = None
    for idx in indices:
        idx = tuple(np.atleast_1d(idx)) if not isinstance(idx, tuple) else idx
        xp = base.copy()
        xp[idx] += h
        xm = base.copy()
        xm[idx] -= h
        with no_grad():
            fp = f(Tensor(xp)).item()
            fm = f(Tensor(xm)).item()
        numeric = (fp - fm) / (2.0 * h)
        err = _rel_error(float(analytic[idx]), numeric)
        if err > worst:
            worst = err
            worst_index = idx
    return GradCheckReport(max_rel_error=worst, worst_index=worst_index,
                           checked=len(indices), tol=tol)
