"""Finite-difference gradient verification suites."""

import time

import numpy as np
import pytest

from fsstis.autodiff import Tensor
from fsstis.gradcheck import (CheckResult, ISOLATED_THRESHOLD,
                              COMPOSED_THRESHOLD, _entry_sample, _fd_entries,
                              backbone_suite, composed_loss_suite,
                              run_gradcheck, transform_param_suite)
from fsstis.tensors import Rng


# ------------------------------------------------------------- the FD oracle


def test_fd_entries_matches_quadratic_gradient():
    # f(x) = sum(x^2) has gradient 2x; central differences must nail it
    x = Tensor(np.array([0.5, -1.5, 2.0, 0.25]), requires_grad=True)
    entries = np.arange(4)
    numeric = _fd_entries(lambda: float(np.sum(x.data ** 2)), x, entries)
    assert np.allclose(numeric, 2.0 * x.data, atol=1e-8)


def test_fd_entries_restores_tensor():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    before = x.data.copy()
    _fd_entries(lambda: float(x.data.sum()), x, np.array([0, 2]))
    assert np.array_equal(x.data, before)


def test_entry_sample_exhaustive_for_small_tensors():
    assert np.array_equal(_entry_sample((4, 5), Rng(0)), np.arange(20))


def test_entry_sample_subsamples_large_tensors():
    idx = _entry_sample((40, 40), Rng(0))
    assert idx.size < 1600
    assert len(set(idx.tolist())) == idx.size  # distinct
    assert idx.max() < 1600 and idx.min() >= 0
    again = _entry_sample((40, 40), Rng(0))
    assert np.array_equal(idx, again)  # seeded, reproducible


def test_check_result_pass_boundary():
    assert CheckResult("s", "n", 1e-4, 1e-4, ).passed
    assert not CheckResult("s", "n", 1.0001e-4, 1e-4).passed


# ------------------------------------------------------------------- suites


def test_transform_suite_within_isolated_threshold():
    results = transform_param_suite(seed=0)
    names = {r.name for r in results}
    assert {"ttis.m_amp", "ttis.v_amp", "ttis.m_phase", "ttis.v_phase",
            "input"} <= names
    for r in results:
        assert r.threshold == ISOLATED_THRESHOLD
        assert r.passed, f"{r.name}: {r.rel_err}"


def test_backbone_suite_within_isolated_threshold():
    results = backbone_suite(seed=0)
    assert {r.name for r in results} == {
        "backbone.w1", "backbone.b1", "backbone.w2", "backbone.b2",
        "backbone.w3", "backbone.b3"}
    for r in results:
        assert r.passed, f"{r.name}: {r.rel_err}"


def test_composed_suite_within_composed_threshold():
    results = composed_loss_suite(seed=0)
    names = {r.name for r in results}
    # last backbone layer + all transform parameters are live in fine-tuning
    assert {"backbone.w3", "backbone.b3", "ttis.m_amp", "ttis.v_phase"} <= names
    for r in results:
        assert r.threshold == COMPOSED_THRESHOLD
        assert r.passed, f"{r.name}: {r.rel_err}"


@pytest.mark.parametrize("seed", range(5))
def test_thresholds_met_across_seeds(seed):
    assert all(r.passed for r in run_gradcheck(seed=seed))


def test_full_run_fast_enough():
    start = time.time()
    results = run_gradcheck(seed=7)
    assert all(r.passed for r in results)
    assert time.time() - start < 60.0


def test_sabotage_hook_fires():
    results = run_gradcheck(seed=0, sabotage=True)
    failures = [r for r in results if not r.passed]
    assert failures, "sign-flipped gradient must be detected"
    # only the tampered suite fails; the untouched suites stay green
    assert all(r.suite == "transform-params" for r in failures)
