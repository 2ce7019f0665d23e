"""Coloured complex noises for the stochastic Liouville equations.

The three driving processes are built from six independent real white
noises.  In real time ``x1, x2, x3`` and in imaginary time ``xb1, xb2, xb3``:

    eta = eta_eta + eta_nu + eta_mu          nu = nu_eta
    mu  = mu_mu + mu_eta

    eta_eta = G_ee * x1                      nu_eta = G_ne * (x3 + i x2)
    eta_nu  = G_en * (x2 + i x3)             mu_mu  = G_mm * xb1
    eta_mu  = int G_em(t, tau) (xb2 + i xb3)  mu_eta = xb3 + i xb2

Stationary components are synthesised by circulant embedding: the kernel
is laid on a ring of ``fft_len`` lags, its discrete spectrum is square
rooted and the white noise is filtered in Fourier space.  On lags covered
by the simulation window the resulting covariance equals the tabulated
kernel exactly.  The imaginary-time kernel is periodic in ``beta`` so its
ring is exactly the ``M`` imaginary nodes.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

from .kernels import KernelTable, TimeGrid

__all__ = [
    "FilterSet",
    "GridMismatchError",
    "NoiseBatch",
    "NoiseRealisation",
    "ScalingSpec",
    "SpectralError",
    "build_filters",
    "derive_seed",
    "rescale",
    "sample_white",
    "synthesize",
    "synthesize_batch",
    "trajectory_rng",
]

_NEG_TOL = 1e-10


class SpectralError(ValueError):
    """A power spectrum that must be non-negative is not."""

    def __init__(self, name: str, index: int, value: float, scale: float):
        super().__init__(
            f"{name} spectrum negative at frequency bin {index}: {value:.3e} "
            f"(max {scale:.3e})")
        self.index = index


class GridMismatchError(ValueError):
    """Filters and requested realisation use different grids."""


@dataclass(frozen=True)
class ScalingSpec:
    """Target magnitude ratios ``|eta_nu|/|nu_eta|`` and ``|eta_mu|/|mu_eta|``."""

    r_nu_eta: float = 0.5
    r_mu_eta: float = 1.0

    def __post_init__(self):
        if not (self.r_nu_eta > 0.0 and self.r_mu_eta > 0.0):
            raise ValueError("scaling ratios must be strictly positive")


@dataclass(frozen=True)
class FilterSet:
    """Filtering kernels in continuum normalisation.

    Lag arrays live on a ring of ``fft_len`` real lags (index ``k`` is lag
    ``k``, index ``fft_len - k`` is lag ``-k``) or ``M`` imaginary lags.
    ``g_eta_mu[n, m]`` is ``-(i/2) K_eta_mu(t_n, tau_m)`` for ``m < M``.
    The white ``mu_eta`` component corresponds to a delta filter.
    """

    g_eta_eta: np.ndarray
    g_eta_nu: np.ndarray
    g_nu_eta: np.ndarray
    g_mu_mu: np.ndarray
    g_eta_mu: np.ndarray
    dt: float
    dtau: float
    n_steps: int
    m_steps: int
    fft_len: int
    strat_real: float
    strat_imag: float
    mu_eta_is_white: bool = True
    # discrete spectra used by the synthesiser
    _spec_ee: np.ndarray = field(repr=False, default=None)
    _spec_en: np.ndarray = field(repr=False, default=None)
    _spec_ne: np.ndarray = field(repr=False, default=None)
    _spec_mm: np.ndarray = field(repr=False, default=None)
    _em_matrix: np.ndarray = field(repr=False, default=None)

    def matches(self, grid: TimeGrid) -> bool:
        return (self.n_steps == grid.n_steps and self.m_steps == grid.m_steps
                and math.isclose(self.dt, grid.dt, rel_tol=1e-12)
                and math.isclose(self.dtau, grid.dtau, rel_tol=1e-12))


@dataclass
class NoiseRealisation:
    """One draw of the driving noises and their components."""

    eta: np.ndarray
    nu: np.ndarray
    mu: np.ndarray
    eta_eta: np.ndarray
    eta_nu: np.ndarray
    eta_mu: np.ndarray
    nu_eta: np.ndarray
    mu_mu: np.ndarray
    mu_eta: np.ndarray
    a_mu_eta: float = 1.0
    b_nu_eta: float = 1.0
    skipped: bool = False


@dataclass
class NoiseBatch:
    """Noises for a batch of trajectories, one row per trajectory.

    ``eta`` and ``nu`` have ``N + 1`` columns, ``mu`` has ``M`` (the left
    end points of the imaginary steps).  ``skipped`` counts rows where a
    rescaling pair was left unscaled because one component vanished.
    """

    eta: np.ndarray
    nu: np.ndarray
    mu: np.ndarray
    components: dict | None = None
    skipped: int = 0
    a_mu_eta: np.ndarray | None = None
    b_nu_eta: np.ndarray | None = None
    skipped_rows: np.ndarray | None = None


def _sqrt_nonneg(spectrum: np.ndarray, name: str) -> np.ndarray:
    scale = float(np.max(np.abs(spectrum))) if spectrum.size else 0.0
    if scale == 0.0:
        return np.zeros_like(spectrum)
    worst = int(np.argmin(spectrum))
    if spectrum[worst] < -_NEG_TOL * scale:
        raise SpectralError(name, worst, float(spectrum[worst]), scale)
    return np.sqrt(np.clip(spectrum, 0.0, None))


def fft_length(kernels: KernelTable, n_steps: int) -> int:
    """Ring length: a power of two above ``N + support`` and ``2 support``.

    Lags up to ``N`` then never wrap onto the kernel support, so the
    embedded covariance agrees with the kernel on every simulated lag, and
    the even kernel fits on the ring without truncation.
    """
    support = int(np.max(np.nonzero(np.abs(kernels.k_eta_eta) > 0.0)[0], initial=0))
    support = max(support, int(np.max(np.nonzero(np.abs(kernels.k_eta_nu) > 0.0)[0],
                                      initial=0)))
    need = max(n_steps + support + 2, 2 * support + 2)
    return 1 << max(1, int(math.ceil(math.log2(need))))


def build_filters(kernels: KernelTable, grid: TimeGrid) -> FilterSet:
    """Square-root the kernel spectra and return lag-domain filters.

    Raises ``SpectralError`` when the ``eta_eta`` or ``mu_mu`` power
    spectrum dips below ``-1e-10`` of its maximum.
    """
    if not (math.isclose(kernels.dt, grid.dt) and math.isclose(kernels.dtau, grid.dtau)):
        raise GridMismatchError("kernel table and grid use different steps")
    if kernels.k_mu_mu.shape[0] != grid.m_steps + 1:
        raise GridMismatchError("imaginary kernel length does not match grid")
    if kernels.n_lags < grid.n_steps + 1:
        raise GridMismatchError("real kernel table shorter than the grid")
    n_len = fft_length(kernels, grid.n_steps)
    half = n_len // 2
    dt, dtau = grid.dt, grid.dtau

    ring_ee = np.zeros(n_len)
    k_ee = kernels.k_eta_eta[:half + 1]
    ring_ee[:k_ee.shape[0]] = k_ee
    ring_ee[n_len - k_ee.shape[0] + 1:] = k_ee[1:][::-1]
    spec_ee = _sqrt_nonneg(sfft.rfft(ring_ee).real, "eta-eta")

    ring_en = np.zeros(n_len, dtype=complex)
    k_en = kernels.k_eta_nu[:half + 1]
    ring_en[:k_en.shape[0]] = k_en
    spec_en = np.sqrt(-0.5j * sfft.fft(ring_en))
    spec_ne = spec_en[(-np.arange(n_len)) % n_len]

    m = grid.m_steps
    spec_mm = _sqrt_nonneg(sfft.rfft(kernels.k_mu_mu[:m]).real, "mu-mu")

    d_ee = sfft.irfft(spec_ee, n=n_len)
    d_en = sfft.ifft(spec_en)
    d_mm = sfft.irfft(spec_mm, n=m)

    rows = min(kernels.support_rows, grid.n_steps + 1)
    g_em = -0.5j * kernels.k_eta_mu[:rows, :m]
    em_matrix = np.ascontiguousarray((math.sqrt(dtau) * g_em).T)

    return FilterSet(
        g_eta_eta=d_ee / math.sqrt(dt),
        g_eta_nu=d_en / math.sqrt(dt),
        g_nu_eta=d_en[(-np.arange(n_len)) % n_len] / math.sqrt(dt),
        g_mu_mu=d_mm / math.sqrt(dtau),
        g_eta_mu=g_em,
        dt=dt, dtau=dtau, n_steps=grid.n_steps, m_steps=m, fft_len=n_len,
        strat_real=dt * float(np.sum(d_ee ** 2)),
        strat_imag=dtau * float(np.sum(d_mm ** 2)),
        _spec_ee=spec_ee, _spec_en=spec_en, _spec_ne=spec_ne, _spec_mm=spec_mm,
        _em_matrix=em_matrix,
    )


def derive_seed(master_seed: int, trajectory_index: int) -> np.random.SeedSequence:
    """Stateless, injective map ``(master, index) -> stream seed``."""
    if master_seed < 0 or trajectory_index < 0:
        raise ValueError("seeds and indices must be non-negative")
    return np.random.SeedSequence(int(master_seed), spawn_key=(int(trajectory_index),))


def trajectory_rng(master_seed: int, trajectory_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(master_seed, trajectory_index)))


def sample_white(rng: np.random.Generator, count: int, step: float) -> np.ndarray:
    """Gaussian white noise with variance ``1/step`` per sample."""
    if not step > 0.0:
        raise ValueError("step must be positive")
    return rng.standard_normal(count) / math.sqrt(step)


def _draws_per_trajectory(filters: FilterSet) -> int:
    return 3 * filters.fft_len + 3 * filters.m_steps


def _ratio_factor(num: np.ndarray, den: np.ndarray, r: float):
    """``sqrt(r) sqrt(num/den)`` with unit factor where either side vanishes."""
    ok = (den > 0.0) & (num > 0.0) & np.isfinite(num) & np.isfinite(den)
    out = np.ones(num.shape)
    out[ok] = math.sqrt(r) * np.sqrt(num[ok] / den[ok])
    return out, ~ok


def rescale(components: dict, scaling: ScalingSpec, *, with_mu: bool = True):
    """Rescale the cross-correlated component pairs in place.

    ``a = sqrt(r_mu_eta) sqrt(mean|mu_eta| / max|eta_mu|)`` multiplies
    ``eta_mu`` and divides ``mu_eta``; ``b = sqrt(r_nu_eta)
    sqrt(sum|nu_eta| / sum|eta_nu|)`` multiplies ``eta_nu`` and divides
    ``nu_eta``.  Each product of partners is unchanged.  Arrays may be one
    realisation (1-D) or a batch (rows).  Returns ``(a, b, skipped)``
    where ``skipped`` flags rows with an identically zero partner.
    """
    en = np.atleast_2d(components["eta_nu"])
    ne = np.atleast_2d(components["nu_eta"])
    b, skip_b = _ratio_factor(np.sum(np.abs(ne), axis=1), np.sum(np.abs(en), axis=1),
                              scaling.r_nu_eta)
    en *= b[:, None]
    ne /= b[:, None]
    skipped = skip_b
    a = np.ones(en.shape[0])
    if with_mu:
        em = np.atleast_2d(components["eta_mu"])
        me = np.atleast_2d(components["mu_eta"])
        a, skip_a = _ratio_factor(np.mean(np.abs(me), axis=1),
                                  np.max(np.abs(em), axis=1, initial=0.0),
                                  scaling.r_mu_eta)
        em *= a[:, None]
        me /= a[:, None]
        skipped = skipped | skip_a
    return a, b, skipped


def _imaginary_components(filters: FilterSet, xb1, xb2, xb3, n1: int):
    n_b, m = xb1.shape
    mu_mu = sfft.irfft(sfft.rfft(xb1, axis=1) * filters._spec_mm, n=m, axis=1)
    mu_eta = (xb3 + 1j * xb2) / math.sqrt(filters.dtau)
    rows = filters._em_matrix.shape[1]
    eta_mu = np.zeros((n_b, n1), dtype=complex)
    if rows:
        eta_mu[:, :rows] = (xb2 + 1j * xb3) @ filters._em_matrix
    return mu_mu, mu_eta, eta_mu


def synthesize_mu_batch(filters: FilterSet, master_seed: int, indices,
                        scaling: ScalingSpec) -> np.ndarray:
    """Rescaled imaginary-time noise alone, for thermalisation-only ensembles.

    Each trajectory draws ``3 M`` normals (``xb1, xb2, xb3``) from its own
    stream; ``eta_mu`` is formed only to fix the rescaling factor.
    """
    indices = np.asarray(indices, dtype=np.int64)
    m = filters.m_steps
    white = np.empty((indices.shape[0], 3 * m))
    for r, idx in enumerate(indices):
        trajectory_rng(master_seed, int(idx)).standard_normal(out=white[r])
    mu_mu, mu_eta, eta_mu = _imaginary_components(
        filters, white[:, :m], white[:, m:2 * m], white[:, 2 * m:], filters.n_steps + 1)
    em = np.max(np.abs(eta_mu), axis=1, initial=0.0)
    a, _ = _ratio_factor(np.mean(np.abs(mu_eta), axis=1), em, scaling.r_mu_eta)
    return mu_mu + mu_eta / a[:, None]


def synthesize_batch(filters: FilterSet, master_seed: int, indices,
                     scaling: ScalingSpec, *, with_mu: bool = True,
                     keep_components: bool = False,
                     white: np.ndarray | None = None) -> NoiseBatch:
    """Synthesise rescaled noises for the given trajectory indices.

    Each trajectory draws ``3 fft_len + 3 M`` standard normals from its own
    stream in the fixed order ``x1, x2, x3, xb1, xb2, xb3``.  With
    ``with_mu=False`` the imaginary-time noise and ``eta_mu`` are zero (a
    partitioned initial state); the draws are still consumed so streams
    stay aligned.  ``white`` overrides the draws (rows of standard normals)
    for common-random-number studies.
    """
    indices = np.asarray(indices, dtype=np.int64)
    n_b = indices.shape[0] if white is None else white.shape[0]
    n_len, m, n1 = filters.fft_len, filters.m_steps, filters.n_steps + 1
    n_draw = _draws_per_trajectory(filters)
    if white is None:
        white = np.empty((n_b, n_draw))
        for r, idx in enumerate(indices):
            trajectory_rng(master_seed, int(idx)).standard_normal(out=white[r])
    elif white.shape[1] != n_draw:
        raise GridMismatchError(f"white rows need {n_draw} draws, got {white.shape[1]}")

    x1 = white[:, :n_len]
    x2 = white[:, n_len:2 * n_len]
    x3 = white[:, 2 * n_len:3 * n_len]
    o = 3 * n_len
    xb1 = white[:, o:o + m]
    xb2 = white[:, o + m:o + 2 * m]
    xb3 = white[:, o + 2 * m:o + 3 * m]

    eta_eta = sfft.irfft(sfft.rfft(x1, axis=1) * filters._spec_ee, n=n_len, axis=1)[:, :n1]
    z = np.empty((n_b, n_len), dtype=complex)
    z.real = x2
    z.imag = x3
    w = sfft.fft(z, axis=1, overwrite_x=True)  # may reuse z's buffer
    # x3 + i x2 = i conj(x2 + i x3) and spec_ne[k] = spec_en[-k], hence
    # nu_eta = i conj(ifft(W conj(spec_en)))
    z = w * np.conj(filters._spec_en)
    w *= filters._spec_en
    eta_nu = sfft.ifft(w, axis=1, overwrite_x=True)[:, :n1]
    nu_eta = sfft.ifft(z, axis=1, overwrite_x=True)[:, :n1]
    nu_eta = 1j * np.conj(nu_eta)
    del w, z

    if with_mu:
        mu_mu, mu_eta, eta_mu = _imaginary_components(filters, xb1, xb2, xb3, n1)
    else:
        mu_mu = np.zeros((n_b, m))
        mu_eta = np.zeros((n_b, m), dtype=complex)
        eta_mu = np.zeros((n_b, n1), dtype=complex)

    comps = {"eta_eta": eta_eta, "eta_nu": eta_nu, "eta_mu": eta_mu,
             "nu_eta": nu_eta, "mu_mu": mu_mu, "mu_eta": mu_eta}
    a, b, skipped = rescale(comps, scaling, with_mu=with_mu)
    eta = eta_eta + eta_nu + eta_mu
    nu = np.ascontiguousarray(nu_eta)
    mu = mu_mu + mu_eta
    return NoiseBatch(eta=np.ascontiguousarray(eta), nu=nu, mu=np.ascontiguousarray(mu),
                      components=comps if keep_components else None,
                      skipped=int(np.count_nonzero(skipped)),
                      a_mu_eta=a, b_nu_eta=b, skipped_rows=skipped)


def synthesize(filters: FilterSet, rng: np.random.Generator, grid: TimeGrid,
               scaling: ScalingSpec, *, with_mu: bool = True) -> NoiseRealisation:
    """Draw a single realisation from ``rng``."""
    if not filters.matches(grid):
        raise GridMismatchError("filters were built for a different grid")
    white = rng.standard_normal((1, _draws_per_trajectory(filters)))
    batch = synthesize_batch(filters, 0, [0], scaling, with_mu=with_mu,
                             keep_components=True, white=white)
    c = {k: v[0] for k, v in batch.components.items()}
    if batch.skipped:
        warnings.warn("a rescaling pair had a vanishing component and was left unscaled",
                      RuntimeWarning, stacklevel=2)
    return NoiseRealisation(eta=batch.eta[0], nu=batch.nu[0], mu=batch.mu[0],
                            a_mu_eta=float(batch.a_mu_eta[0]),
                            b_nu_eta=float(batch.b_nu_eta[0]),
                            skipped=bool(batch.skipped_rows[0]), **c)
