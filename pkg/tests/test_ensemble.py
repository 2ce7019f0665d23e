import math

import numpy as np
import pytest

from esln import (BathSpec, DomainError, LZSpec, RunConfig, SchemeSpec, SpinBosonDrive,
                  TimeGrid, asymptote_estimate, diagnostics, lz_limit, modified_lz_limit,
                  propagate_trajectory, run_ensemble, thermal_reference, variance_scan)
from esln.ensemble import batch_of, post_minimum_average

GIBBS_SZ = math.tanh(math.sqrt(2) / 2) / math.sqrt(2)


def _coarse(**kw):
    base = dict(t_max=1.0, dt=1e-2, dtau=1e-2, n_samples=48, batches=6, chunk=16)
    base.update(kw)
    return RunConfig(**base)


def test_single_noise_free_sample_is_the_trajectory():
    cfg = _coarse(alpha=0.0, init="pure_up", n_samples=1, epsilon0=0.3)
    res = run_ensemble(cfg)
    n = 100
    ref = propagate_trajectory(SpinBosonDrive(1.0, 0.3), SchemeSpec(), t0=0.0, dt=1e-2,
                               eta=np.zeros(n + 1), nu=np.zeros(n + 1))
    assert np.allclose(res.mean_sz, ref.spins[:, 2].real, rtol=0, atol=1e-14)
    assert np.allclose(res.mean_sx, ref.spins[:, 0].real, rtol=0, atol=1e-14)
    assert np.all(np.isnan(res.err_sz))


def test_noise_free_runs_ignore_the_seed():
    a = run_ensemble(_coarse(alpha=0.0, init="pure_up", seed=1, n_samples=12))
    b = run_ensemble(_coarse(alpha=0.0, init="pure_up", seed=2, n_samples=12))
    assert np.array_equal(a.mean_sz, b.mean_sz)


def test_normalisation_and_worker_independence():
    cfg = _coarse(n_samples=60)
    one = run_ensemble(cfg)
    two = run_ensemble(cfg.replace(workers=2))
    assert abs(one.mean_trace[0] - 1.0) < 1e-13
    assert one.normalisation != 0
    for name in ("mean_sx", "mean_sy", "mean_sz", "mean_trace", "err_sz", "err_trace"):
        assert np.array_equal(getattr(one, name), getattr(two, name)), name
    assert one.n_samples == 60 and one.n_excluded == 0 and not one.unreliable


def test_batches_are_contiguous_and_balanced():
    b = batch_of(np.arange(1000), 1000, 12)
    counts = np.bincount(b)
    assert counts.size == 12 and counts.max() - counts.min() <= 1
    assert np.all(np.diff(b) >= 0)


def test_thermal_reference_matches_gibbs_at_weak_coupling():
    cfg = _coarse(alpha=0.01, n_samples=6000, batches=12, chunk=256)
    mean, err = thermal_reference(cfg)
    # dtau = 1e-2 moves the closed-system value by ~1e-5, well below the error
    assert abs(mean[2] - GIBBS_SZ) < 3 * err[2] + 1e-4
    assert abs(mean[1]) < 3 * err[1] + 1e-12


class TestLandauZener:
    def test_limit_values(self):
        assert lz_limit(1.0, 5.0) == pytest.approx(2 * math.exp(-math.pi / 10) - 1, rel=1e-15)
        assert lz_limit(1.0, 1e12) == pytest.approx(1.0)
        assert lz_limit(10.0, 1e-3) == pytest.approx(-1.0)
        with pytest.raises(ValueError):
            lz_limit(1.0, 0.0)

    def test_modified_limit_converges(self):
        limit = lz_limit(1.0, 5.0)
        dev = {t0: modified_lz_limit(1.0, 5.0, t0) - limit for t0 in (-5, -10, -10.06, -20, -40)}
        assert np.sign(dev[-10]) != np.sign(dev[-10.06])
        assert abs(dev[-40]) < abs(dev[-20]) < abs(dev[-5])
        assert abs(dev[-40]) < 5e-3

    def test_post_minimum_average(self):
        t = np.linspace(0, 10, 1001)
        y = np.where(t < 2, 1 - t, -1 + 0.1 * np.sin(5 * (t - 2)) + 0.0 * t)
        got = post_minimum_average(t, y)
        first_peak = 2 + math.pi / 10
        assert got == pytest.approx(np.mean(y[t >= first_peak - 0.005]), abs=2e-3)
        with pytest.raises(ValueError):
            post_minimum_average(t, t)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            LZSpec(t0=1.0)
        with pytest.raises(ValueError):
            LZSpec(kappa=-1.0)


class TestAsymptote:
    def test_constant_signal(self):
        mean, err = asymptote_estimate(np.full(600, 0.25), (0, 599), n_batches=12)
        assert mean == 0.25 and err == 0.0

    def test_iid_signal_error(self):
        rng = np.random.default_rng(0)
        y = rng.normal(0.1, 2.0, size=120000)
        # 200 batch means give the error estimate a ~5% relative spread
        mean, err = asymptote_estimate(y, (0, y.size), n_batches=200)
        assert err == pytest.approx(2.0 / math.sqrt(y.size), rel=0.3)
        assert abs(mean - 0.1) < 4 * err

    def test_window_too_short(self):
        with pytest.raises(ValueError):
            asymptote_estimate(np.ones(100), (0, 5), n_batches=12)

    def test_ensemble_batches(self):
        res = run_ensemble(_coarse(n_samples=36))
        mean, err = asymptote_estimate(res, (0.5, 1.0), n_batches=res.n_batches)
        sel = res.times >= 0.5 - 1e-12
        assert mean == pytest.approx(res.mean_sz[sel].mean())
        assert err > 0


class TestDiagnostics:
    def test_renormalised_tunnelling(self):
        grid = TimeGrid.from_span(-10, 10, 1e-3, 1.0, 1e-3)
        d_r, q = diagnostics(BathSpec(0.05, 20.0, 1.0), SpinBosonDrive(1.0, 0.0, 5.0), grid)
        assert d_r == pytest.approx(20 ** (-1 / 19), rel=1e-12)
        assert d_r == pytest.approx(0.8541, abs=1e-4)
        assert q == pytest.approx(1 / 50)

    def test_temperature_ratio(self):
        grid = TimeGrid.from_span(-10, 10, 1e-3, 0.1, 1e-3)
        _, q = diagnostics(BathSpec(0.01, 20.0, 0.1), SpinBosonDrive(1.0, 0.0, 5.0), grid)
        assert q == pytest.approx(0.2)

    def test_zero_coupling_and_domain(self):
        grid = TimeGrid.from_span(0, 1, 1e-2, 1.0, 1e-2)
        assert diagnostics(BathSpec(0.0, 20.0, 1.0), SpinBosonDrive(0.7, 1.0), grid)[0] == 0.7
        with pytest.raises(DomainError):
            diagnostics(BathSpec(1.0, 20.0, 1.0), SpinBosonDrive(0.7, 1.0), grid)


def test_variance_scan_single_sample_is_absent():
    rows = variance_scan(_coarse(n_samples=1), r_values=(0.5, 5.0))
    assert rows == [(0.5, None), (5.0, None)]


def test_guided_pathology_is_counted():
    cfg = _coarse(variant="guided", t_max=2.0, n_samples=24, batches=6)
    res = run_ensemble(cfg)
    assert res.max_trace_drift <= 1e-12
    assert res.n_samples <= 24 and res.max_guide > 0
    assert res.n_excluded == res.n_diverged + res.n_pathological
