"""Finite-difference checker: pass/fail verdicts and misuse tripwires."""

import numpy as np
import pytest

from fgmoe.autodiff import Tensor, gelu
from fgmoe.errors import GradCheckError, GraphError
from fgmoe.gradcheck import GradCheckReport, grad_check


def test_passes_on_smooth_function(rng):
    x = Tensor(rng.normal(size=(3, 4)))
    report = grad_check(lambda t: (gelu(t) * t).sum(), x)
    assert report.passed
    assert report.checked == 12
    assert report.max_rel_error < 1e-6


def test_detects_wrong_gradient():
    # value x^2 but half the product is detached: analytic x vs numeric 2x
    from fgmoe.autodiff import stop_gradient

    def bad(t):
        return (stop_gradient(t) * t).sum()

    report = grad_check(bad, Tensor(np.array([1.0, -2.0, 3.0])))
    assert not report.passed
    assert report.max_rel_error == pytest.approx(0.5, abs=1e-6)
    assert report.worst_index is not None


def test_indices_subset_limits_work(rng):
    x = Tensor(rng.normal(size=(4, 4)))
    report = grad_check(lambda t: (t ** 3).sum(), x, indices=[(0, 0), (2, 3)])
    assert report.checked == 2 and report.passed


def test_rejects_non_scalar_objective(rng):
    with pytest.raises(GraphError, match="scalar"):
        grad_check(lambda t: t * 2.0, Tensor(rng.normal(size=(2, 2))))


def test_rejects_nondeterministic_function(rng):
    counter = {"n": 0}

    def flaky(t):
        counter["n"] += 1
        return (t * float(counter["n"])).sum()

    with pytest.raises(GradCheckError, match="not deterministic"):
        grad_check(flaky, Tensor(rng.normal(size=3)))


def test_rejects_function_ignoring_input(rng):
    hidden = Tensor(rng.normal(size=3), requires_grad=True)
    with pytest.raises(GradCheckError, match="does not depend"):
        grad_check(lambda t: (hidden * 2.0).sum(), Tensor(rng.normal(size=3)))


def test_report_verdict_threshold():
    assert GradCheckReport(max_rel_error=1e-6, worst_index=(0,), checked=1,
                           tol=1e-5).passed
    assert not GradCheckReport(max_rel_error=2e-5, worst_index=(0,), checked=1,
                               tol=1e-5).passed
