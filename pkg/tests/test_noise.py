import math

import numpy as np
import pytest
import scipy.fft as sfft

from esln import (BathSpec, RunConfig, ScalingSpec, build_filters, correlation_study,
                  TimeGrid, derive_seed, eval_kernels, rescale, sample_white, synthesize,
                  synthesize_batch)
from esln.noise import (GridMismatchError, SpectralError, _draws_per_trajectory,
                        _sqrt_nonneg, trajectory_rng)


def _components(rng, n=50, m=10):
    c = {"eta_nu": rng.normal(size=n) + 1j * rng.normal(size=n),
         "nu_eta": rng.normal(size=n) + 1j * rng.normal(size=n),
         "eta_mu": rng.normal(size=n) + 1j * rng.normal(size=n),
         "mu_eta": rng.normal(size=m) + 1j * rng.normal(size=m)}
    return c


class TestSampleWhite:
    def test_variance_and_mean(self):
        x = sample_white(np.random.default_rng(3), 10**6, 1e-3)
        assert abs(x.mean()) < 3 * math.sqrt(1000.0 / 10**6)
        # the sample variance has relative sd sqrt(2/n) ~ 0.14%
        assert x.var() == pytest.approx(1000.0, rel=0.01)

    def test_independent_streams(self):
        a = sample_white(trajectory_rng(0, 0), 20000, 1.0)
        b = sample_white(trajectory_rng(0, 1), 20000, 1.0)
        for k in (0, 1, 7):
            c = np.mean(a[k:] * b[:a.size - k])
            assert abs(c) < 3 / math.sqrt(a.size - k)

    def test_step_must_be_positive(self):
        with pytest.raises(ValueError):
            sample_white(np.random.default_rng(0), 3, 0.0)


def test_seed_derivation_is_injective_and_stateless():
    a = trajectory_rng(7, 3).standard_normal(5)
    b = trajectory_rng(7, 3).standard_normal(5)
    c = trajectory_rng(7, 4).standard_normal(5)
    d = trajectory_rng(8, 3).standard_normal(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c) and not np.array_equal(a, d)
    assert derive_seed(7, 3).spawn_key == (3,)
    with pytest.raises(ValueError):
        derive_seed(-1, 0)


class TestFilters:
    def test_spectral_square_roots(self, coarse_filters, coarse_kernels):
        f = coarse_filters
        n_len, half = f.fft_len, f.fft_len // 2
        ring = np.zeros(n_len)
        k = coarse_kernels.k_eta_eta[:half + 1]
        ring[:k.size] = k
        ring[n_len - k.size + 1:] = k[1:][::-1]
        spec = sfft.rfft(ring).real
        assert np.max(np.abs(f._spec_ee ** 2 - np.clip(spec, 0, None))) < 1e-10 * spec.max()

        ring_c = np.zeros(n_len, dtype=complex)
        kc = coarse_kernels.k_eta_nu[:half + 1]
        ring_c[:kc.size] = kc
        target = -0.5j * sfft.fft(ring_c)
        # G_en(w) G_ne(-w) with G_ne(-w) = G_en(w)
        prod = f._spec_en * f._spec_ne[(-np.arange(n_len)) % n_len]
        assert np.max(np.abs(prod - target)) < 1e-10 * np.abs(target).max()

    def test_zero_kernels_give_zero_noise(self, coarse_grid):
        k = eval_kernels(BathSpec(0.0, 20.0, 1.0), coarse_grid)
        f = build_filters(k, coarse_grid)
        nb = synthesize_batch(f, 0, [0, 1], ScalingSpec(), keep_components=True)
        assert not np.any(nb.components["eta_eta"])
        assert not np.any(nb.components["eta_nu"]) and not np.any(nb.nu)
        # mu_eta is white and unaffected by the kernels
        assert not np.any(nb.components["mu_mu"])

    def test_negative_spectrum_is_rejected(self):
        with pytest.raises(SpectralError) as exc:
            _sqrt_nonneg(np.array([1.0, 0.5, -1e-3, 0.2]), "eta-eta")
        assert "2" in str(exc.value)
        # a round-off dip is tolerated
        assert _sqrt_nonneg(np.array([1.0, -1e-12]), "x")[1] == 0.0

    def test_grid_mismatch(self, coarse_filters):
        other = TimeGrid.from_span(0.0, 2.0, 1e-2, 1.0, 1e-2)
        with pytest.raises(GridMismatchError):
            synthesize(coarse_filters, np.random.default_rng(0), other, ScalingSpec())


class TestSynthesis:
    def test_zero_white_gives_zero_noise(self, coarse_filters):
        white = np.zeros((1, _draws_per_trajectory(coarse_filters)))
        nb = synthesize_batch(coarse_filters, 0, [0], ScalingSpec(), white=white)
        assert nb.skipped == 1
        assert not np.any(nb.eta) and not np.any(nb.nu) and not np.any(nb.mu)

    def test_decomposition(self, coarse_filters, coarse_grid):
        r = synthesize(coarse_filters, np.random.default_rng(1), coarse_grid, ScalingSpec())
        assert np.array_equal(r.eta, r.eta_eta + r.eta_nu + r.eta_mu)
        assert np.array_equal(r.nu, r.nu_eta)
        assert np.array_equal(r.mu, r.mu_mu + r.mu_eta)
        assert r.eta.shape == (coarse_grid.n_steps + 1,)
        assert r.mu.shape == (coarse_grid.m_steps,)

    def test_deterministic(self, coarse_filters):
        a = synthesize_batch(coarse_filters, 11, [0, 5, 9], ScalingSpec())
        b = synthesize_batch(coarse_filters, 11, [9, 0, 5], ScalingSpec())
        assert np.array_equal(a.eta[[2, 0, 1]], b.eta)
        assert np.array_equal(a.mu[[2, 0, 1]], b.mu)

    def test_common_random_numbers_preserve_products(self, coarse_filters):
        white = np.random.default_rng(5).standard_normal(
            (3, _draws_per_trajectory(coarse_filters)))
        x = synthesize_batch(coarse_filters, 0, np.arange(3), ScalingSpec(0.5, 1.0),
                             keep_components=True, white=white)
        y = synthesize_batch(coarse_filters, 0, np.arange(3), ScalingSpec(5.0, 0.1),
                             keep_components=True, white=white)
        for p, q in (("eta_nu", "nu_eta"), ("eta_mu", "mu_eta")):
            px = np.einsum("ri,rj->rij", x.components[p], x.components[q])
            py = np.einsum("ri,rj->rij", y.components[p], y.components[q])
            assert np.allclose(px, py, rtol=1e-12, atol=0)
        assert np.array_equal(x.components["eta_eta"], y.components["eta_eta"])

    def test_eta_eta_variance_round_trip(self, coarse_filters, coarse_kernels):
        nb = synthesize_batch(coarse_filters, 2, np.arange(4000), ScalingSpec(),
                              keep_components=True)
        x = nb.components["eta_eta"][:, 17]
        est, err = np.mean(x * x), np.std(x * x) / math.sqrt(x.size)
        assert abs(est - coarse_kernels.k_eta_eta[0]) < 3 * err


class TestRescale:
    def test_b_factor_from_magnitude_sums(self):
        # sum|nu_eta| = 4, sum|eta_nu| = 1, r = 1: b = sqrt(4 / 1)
        c = {"eta_nu": np.array([0.25, 0.25, 0.5], dtype=complex),
             "nu_eta": np.array([1.0, 2.0, 1.0], dtype=complex)}
        a, b, skipped = rescale(c, ScalingSpec(1.0, 1.0), with_mu=False)
        assert b[0] == pytest.approx(2.0)
        assert np.sum(np.abs(c["eta_nu"])) == pytest.approx(2.0)
        assert np.sum(np.abs(c["nu_eta"])) == pytest.approx(2.0)
        assert not skipped[0]

    def test_products_unchanged(self):
        rng = np.random.default_rng(0)
        c = _components(rng)
        before = {k: v.copy() for k, v in c.items()}
        rescale(c, ScalingSpec(0.3, 2.0))
        assert np.allclose(np.outer(c["eta_nu"], c["nu_eta"]),
                           np.outer(before["eta_nu"], before["nu_eta"]), rtol=1e-13)
        assert np.allclose(np.outer(c["eta_mu"], c["mu_eta"]),
                           np.outer(before["eta_mu"], before["mu_eta"]), rtol=1e-13)

    def test_unit_ratio_is_a_fixed_point(self):
        c = _components(np.random.default_rng(1))
        rescale(c, ScalingSpec(1.0, 1.0))
        a, b, _ = rescale(c, ScalingSpec(1.0, 1.0))
        assert a[0] == pytest.approx(1.0, abs=1e-14)
        assert b[0] == pytest.approx(1.0, abs=1e-14)

    def test_zero_partner_is_skipped(self):
        c = _components(np.random.default_rng(2))
        c["eta_nu"][:] = 0
        _, b, skipped = rescale(c, ScalingSpec())
        assert b[0] == 1.0 and skipped[0]

    def test_ratios_must_be_positive(self):
        with pytest.raises(ValueError):
            ScalingSpec(0.0, 1.0)


def test_small_correlation_study():
    cfg = RunConfig(t_max=1.0, dt=1e-2, dtau=1e-2, n_samples=3000, n_lags=8, seed=4)
    rows = correlation_study(cfg)
    pairs = {r.pair for r in rows}
    assert pairs == {"eta_eta", "eta_nu", "mu_mu", "eta_mu", "nu_nu", "nu_mu"}
    for r in rows:
        if r.pair in ("nu_nu", "nu_mu"):
            assert abs(r.estimate) < 5 * r.stderr + 1e-12
        else:
            assert r.z < 4.0, r
