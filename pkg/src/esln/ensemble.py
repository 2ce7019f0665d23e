"""Monte-Carlo ensembles, normalisation, batch-mean errors and LZ diagnostics.

Trajectories are processed in fixed chunks of consecutive indices.  Each
chunk returns compensated per-batch sums which the reducer merges in chunk
order, so results do not depend on the worker count.
"""

from __future__ import annotations

import math
import multiprocessing as mp
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .config import RunConfig
from .kernels import BathSpec, DomainError, TimeGrid, eval_kernels
from .noise import FilterSet, build_filters, synthesize_batch, synthesize_mu_batch
from .propagate import (EULER, STATUS_DIVERGED, STATUS_OK, STATUS_PATHOLOGICAL,
                        SpinBosonDrive, memory_kernel, propagate_chunk)

__all__ = [
    "EnsembleResult",
    "LZSpec",
    "asymptote_estimate",
    "correlation_study",
    "diagnostics",
    "lz_limit",
    "modified_lz_limit",
    "run_ensemble",
    "thermal_reference",
    "variance_scan",
]

EXCLUSION_BUDGET = 0.01


@dataclass
class EnsembleResult:
    """Normalised observables with batch-mean standard errors.

    ``batch_means[b, n, i]`` holds the per-batch estimate of
    ``(sx, sy, sz, Tr)`` used for the error bars.
    """

    times: np.ndarray
    mean_sx: np.ndarray
    mean_sy: np.ndarray
    mean_sz: np.ndarray
    mean_trace: np.ndarray
    err_sx: np.ndarray
    err_sy: np.ndarray
    err_sz: np.ndarray
    err_trace: np.ndarray
    n_samples: int
    n_excluded: int
    normalisation: complex
    batch_means: np.ndarray
    n_diverged: int = 0
    n_pathological: int = 0
    n_replaced: int = 0
    unreliable: bool = False
    max_guide: float = 0.0
    spike_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    max_trace_drift: float = 0.0
    wall_time: float = 0.0

    @property
    def n_batches(self) -> int:
        return self.batch_means.shape[0]

    @property
    def exclusion_fraction(self) -> float:
        total = self.n_samples + self.n_excluded - self.n_replaced
        return self.n_excluded / total if total else 0.0


@dataclass(frozen=True)
class LZSpec:
    kappa: float = 5.0
    t0: float = -10.0
    init: str = "thermal"
    window: tuple | None = None

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if not self.t0 < 0:
            raise ValueError("t0 must be negative")
        if self.init not in ("thermal", "pure_up"):
            raise ValueError("init must be 'thermal' or 'pure_up'")


# --------------------------------------------------------------------------
# chunk workers

_CTX: dict = {}


@dataclass
class _Context:
    filters: FilterSet
    cfg: RunConfig
    kmem: np.ndarray
    with_mu: bool
    codes: tuple
    strat_real: float
    strat_imag: float
    mu_only: bool = False


def _init_worker(ctx):
    _CTX["ctx"] = ctx


def _run_chunk(task):
    indices, batches = task
    ctx: _Context = _CTX["ctx"]
    cfg = ctx.cfg
    n = len(indices)
    if ctx.mu_only:
        mu = synthesize_mu_batch(ctx.filters, cfg.seed, indices, cfg.scaling())
        eta = nu = np.zeros((n, 1), dtype=complex)
    else:
        noise = synthesize_batch(ctx.filters, cfg.seed, indices, cfg.scaling(),
                                 with_mu=ctx.with_mu)
        eta, nu = noise.eta, noise.nu
        mu = noise.mu if ctx.with_mu else np.zeros((n, 0), dtype=complex)
    b_lo = int(batches.min())
    n_local = int(batches.max()) - b_lo + 1
    n1 = eta.shape[1]
    acc = np.zeros((n_local, n1, 8))
    comp = np.zeros_like(acc)
    status = np.zeros(n, dtype=np.int64)
    guide = np.zeros(n)
    spike = np.zeros(n, dtype=np.int64)
    drift = np.zeros(n)
    stepper, variant, rep = ctx.codes
    init = np.array([1.0, 0.0, 0.0, 0.0], dtype=complex)
    propagate_chunk(eta, nu, mu, ctx.with_mu, init, cfg.t0, cfg.dt,
                    cfg.dtau, cfg.epsilon0, cfg.kappa, cfg.delta, stepper, variant, rep,
                    ctx.strat_real, ctx.strat_imag, ctx.kmem,
                    (batches - b_lo).astype(np.int64), acc, comp, status, guide,
                    spike, drift)
    return b_lo, acc + comp, status, guide, spike, drift


def _neumaier_merge(total, comp, part, b_lo):
    sl = slice(b_lo, b_lo + part.shape[0])
    s = total[sl]
    t = s + part
    big = np.abs(s) >= np.abs(part)
    comp[sl] += np.where(big, (s - t) + part, (part - t) + s)
    total[sl] = t


def _map(tasks, ctx, workers):
    if workers <= 1 or len(tasks) <= 1:
        _init_worker(ctx)
        for task in tasks:
            yield _run_chunk(task)
        return
    _CTX["ctx"] = ctx
    method = "fork" if "fork" in mp.get_all_start_methods() else None
    with ProcessPoolExecutor(max_workers=workers, mp_context=mp.get_context(method),
                             initializer=_init_worker, initargs=(ctx,)) as pool:
        yield from pool.map(_run_chunk, tasks)


def _tasks(indices, batches, chunk):
    return [(indices[i:i + chunk], batches[i:i + chunk])
            for i in range(0, len(indices), chunk)]


def batch_of(index, n_samples: int, n_batches: int):
    return (np.asarray(index, dtype=np.int64) * n_batches) // n_samples


def prepare(cfg: RunConfig, kernels=None):
    """Kernels, filters and memory weights for ``cfg``."""
    grid = cfg.grid()
    with_mu = cfg.init == "thermal"
    if kernels is None:
        kernels = eval_kernels(cfg.bath(), grid, with_eta_mu=with_mu)
    filters = build_filters(kernels, grid)
    stepper, variant, rep = cfg.scheme().codes
    kmem = (memory_kernel(kernels.k_eta_nu, cfg.dt) if variant != 0
            else np.zeros(1, dtype=complex))
    use_strat = cfg.stratonovich and stepper != EULER
    return _Context(filters=filters, cfg=cfg, kmem=np.ascontiguousarray(kmem),
                    with_mu=with_mu, codes=(stepper, variant, rep),
                    strat_real=filters.strat_real if use_strat else 0.0,
                    strat_imag=filters.strat_imag if use_strat else 0.0), kernels


def run_ensemble(cfg: RunConfig, *, kernels=None, context=None) -> EnsembleResult:
    """Sample ``cfg.n_samples`` trajectories and return normalised observables.

    Diverged or pathological trajectories are replaced by fresh indices
    ``S, S+1, ...`` up to 1% of ``S`` attempts; more exclusions than that
    mark the result unreliable.
    """
    start = time.perf_counter()
    ctx = context if context is not None else prepare(cfg, kernels)[0]
    s_total, n_b = cfg.n_samples, cfg.batches
    if s_total < n_b:
        n_b = max(1, s_total)
    n1 = 1 if ctx.mu_only else ctx.filters.n_steps + 1
    total = np.zeros((n_b, n1, 8))
    comp = np.zeros_like(total)
    guide_max = 0.0
    drift_max = 0.0
    spikes = []
    n_div = n_path = 0

    indices = np.arange(s_total, dtype=np.int64)
    batches = batch_of(indices, s_total, n_b)
    excluded = []

    def consume(results, idx_all, bat_all):
        nonlocal guide_max, drift_max, n_div, n_path
        failed = []
        offset = 0
        for b_lo, part, status, guide, spike, drift in results:
            _neumaier_merge(total, comp, part, b_lo)
            rows = slice(offset, offset + status.shape[0])
            offset += status.shape[0]
            bad = status != STATUS_OK
            n_div += int(np.count_nonzero(status == STATUS_DIVERGED))
            n_path += int(np.count_nonzero(status == STATUS_PATHOLOGICAL))
            failed.extend(zip(idx_all[rows][bad].tolist(), bat_all[rows][bad].tolist()))
            if guide.size:
                guide_max = max(guide_max, float(guide.max()))
            drift_max = max(drift_max, float(np.max(drift[~bad], initial=0.0)))
            spikes.extend((cfg.t0 + cfg.dt * spike[spike >= 0]).tolist())
        return failed

    excluded = consume(_map(_tasks(indices, batches, cfg.chunk), ctx, cfg.workers),
                       indices, batches)
    n_excluded = len(excluded)
    budget = int(math.floor(EXCLUSION_BUDGET * s_total))
    slots = [b for _, b in excluded]
    next_index = s_total
    attempts = 0
    n_replaced = 0
    while slots and attempts < budget:
        take = min(len(slots), budget - attempts)
        idx = np.arange(next_index, next_index + take, dtype=np.int64)
        bat = np.asarray(slots[:take], dtype=np.int64)
        next_index += take
        attempts += take
        failed = consume(_map(_tasks(idx, bat, cfg.chunk), ctx, cfg.workers), idx, bat)
        failed_idx = {i for i, _ in failed}
        kept = [s for i, s in zip(idx.tolist(), slots[:take]) if i in failed_idx]
        n_replaced += take - len(kept)
        slots = kept + slots[take:]

    sums = total + comp
    sums_c = sums[:, :, 0::2] + 1j * sums[:, :, 1::2]            # (B, N+1, 4)
    norm_b = sums_c[:, 0, 3]
    with np.errstate(invalid="ignore", divide="ignore"):
        batch_means = sums_c / norm_b[:, None, None]
        overall = sums_c.sum(axis=0) / sums_c[:, 0, 3].sum()
    if n_b > 1:
        dev = batch_means - batch_means.mean(axis=0)
        err_re = np.sqrt(np.sum(dev.real ** 2, axis=0) / (n_b * (n_b - 1)))
        err_c = np.sqrt(np.sum(np.abs(dev) ** 2, axis=0) / (n_b * (n_b - 1)))
    else:
        err_re = err_c = np.full((n1, 4), np.nan)
    norm_total = sums_c[:, 0, 3].sum()
    n_samples = s_total - len(slots)
    unreliable = (n_excluded > EXCLUSION_BUDGET * s_total
                  or not np.all(np.isfinite(overall)))
    times = cfg.t0 + cfg.dt * np.arange(n1)
    return EnsembleResult(
        times=times, mean_sx=overall[:, 0].real.copy(), mean_sy=overall[:, 1].real.copy(),
        mean_sz=overall[:, 2].real.copy(), mean_trace=overall[:, 3].copy(),
        err_sx=err_re[:, 0].copy(), err_sy=err_re[:, 1].copy(), err_sz=err_re[:, 2].copy(),
        err_trace=err_c[:, 3].copy(), n_samples=n_samples, n_excluded=n_excluded,
        normalisation=complex(1.0 / norm_total) if norm_total != 0 else complex("nan"),
        batch_means=batch_means, n_diverged=n_div, n_pathological=n_path,
        n_replaced=n_replaced, unreliable=bool(unreliable), max_guide=guide_max,
        spike_times=np.asarray(spikes, dtype=float), max_trace_drift=drift_max,
        wall_time=time.perf_counter() - start)


def thermal_reference(cfg: RunConfig, *, n_samples: int | None = None,
                      seed_offset: int = 1, kernels=None):
    """Thermalised ``(sx, sy, sz)`` and errors from an independent ensemble.

    Only the imaginary-time noise is drawn (on the grid of ``cfg`` so the
    rescaling matches) with master seed ``cfg.seed + seed_offset``.
    """
    ref = cfg.replace(init="thermal", variant="original", seed=cfg.seed + seed_offset,
                      n_samples=n_samples or cfg.n_samples)
    ctx, _ = prepare(ref, kernels)
    ctx.mu_only = True
    res = run_ensemble(ref, context=ctx)
    mean = np.array([res.mean_sx[0], res.mean_sy[0], res.mean_sz[0]])
    err = np.array([res.err_sx[0], res.err_sy[0], res.err_sz[0]])
    return mean, err


# --------------------------------------------------------------------------
# Landau-Zener


def lz_limit(delta: float, kappa: float) -> float:
    """Asymptotic ``<sz>`` of a sweep started in the infinite past."""
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    return 2.0 * math.exp(-math.pi * delta * delta / (2.0 * kappa)) - 1.0


def _closed_sz(delta, kappa, t0, t_max, dt):
    """High-accuracy closed-system ``sz(t)`` from ``sz(t0) = 1``."""

    def rhs(t, s):
        e = kappa * t
        return [-e * s[1], -delta * s[2] + e * s[0], delta * s[1]]

    t_eval = np.arange(t0, t_max + 0.5 * dt, dt)
    sol = solve_ivp(rhs, (t0, t_eval[-1]), [0.0, 0.0, 1.0], method="DOP853",
                    t_eval=t_eval, rtol=1e-11, atol=1e-13)
    if not sol.success:
        raise RuntimeError(sol.message)
    return sol.t, sol.y[2]


def post_minimum_average(times, values) -> float:
    """Mean from the first local maximum after the global minimum to the end."""
    v = np.asarray(values, dtype=float)
    i_min = int(np.argmin(v))
    if i_min == 0 or i_min >= v.size - 2:
        raise ValueError("no interior minimum in the signal")
    rest = v[i_min:]
    peaks = np.nonzero((rest[1:-1] >= rest[:-2]) & (rest[1:-1] > rest[2:]))[0]
    if peaks.size == 0:
        raise ValueError("no maximum after the minimum")
    return float(np.mean(v[i_min + 1 + peaks[0]:]))


def modified_lz_limit(delta: float, kappa: float, t0: float, *, t_max: float = 10.0,
                      dt: float = 1e-3) -> float:
    """Asymptote of the isolated spin swept from ``sz(t0) = 1``."""
    if not t0 < 0:
        raise ValueError("t0 must be negative")
    t, sz = _closed_sz(delta, kappa, t0, t_max, dt)
    return post_minimum_average(t, sz)


def asymptote_estimate(data, window, n_batches: int = 12, times=None):
    """Boxed late-time mean and standard error.

    ``data`` is an :class:`EnsembleResult` (the window average is taken in
    each ensemble batch, giving independent estimates of the mean) or a
    plain signal with ``times``, split into ``n_batches`` contiguous blocks.
    """
    if n_batches < 2:
        raise ValueError("need at least two batches")
    t_a, t_b = window
    if isinstance(data, EnsembleResult):
        t = data.times
        sel = (t >= t_a - 1e-12) & (t <= t_b + 1e-12)
        if np.count_nonzero(sel) < n_batches:
            raise ValueError("window shorter than the number of batches")
        per = data.batch_means[:, sel, 2].real.mean(axis=1)
        mean = float(data.mean_sz[sel].mean())
    else:
        y = np.asarray(data, dtype=float)
        t = np.arange(y.size, dtype=float) if times is None else np.asarray(times)
        sel = (t >= t_a - 1e-12) & (t <= t_b + 1e-12)
        y = y[sel]
        if y.size < n_batches:
            raise ValueError("window shorter than the number of batches")
        per = np.array([blk.mean() for blk in np.array_split(y, n_batches)])
        mean = float(y.mean())
    k = per.size
    err = float(np.std(per, ddof=1) / math.sqrt(k)) if k > 1 else math.nan
    return mean, err


def diagnostics(bath: BathSpec, drive: SpinBosonDrive, grid: TimeGrid):
    """Renormalised tunnelling ``delta_r`` and temperature ratio ``q``."""
    if bath.alpha >= 1.0:
        raise DomainError("alpha must be below 1")
    delta_r = drive.delta * (drive.delta / bath.omega_c) ** (bath.alpha / (1.0 - bath.alpha))
    eps_end = float(drive.epsilon_at(grid.t_max))
    q = (1.0 / bath.beta_hbar) / eps_end if eps_end != 0 else math.inf
    return float(delta_r), float(q)


# --------------------------------------------------------------------------
# variance scan and noise correlations


def variance_scan(cfg: RunConfig, r_values=None):
    """Final-time trace error for each ``r_nu_eta`` at ``eps = delta = 0``.

    Returns ``[(r, stderr or None)]``; a single-sample run has no error.
    """
    rows = []
    base = cfg.replace(epsilon0=0.0, kappa=0.0, delta=0.0)
    kernels = None
    for r in (cfg.r_values if r_values is None else r_values):
        run = base.replace(r_nu_eta=float(r))
        if run.n_samples < 2:
            rows.append((float(r), None))
            continue
        ctx, kernels = prepare(run, kernels)
        res = run_ensemble(run, context=ctx)
        rows.append((float(r), float(res.err_trace[-1])))
    return rows


@dataclass
class CorrelationRow:
    pair: str
    t: float
    t_prime: float
    target: complex
    estimate: complex
    stderr: float

    @property
    def z(self) -> float:
        return abs(self.estimate - self.target) / self.stderr if self.stderr > 0 else math.inf


def _lagged(x, y, k):
    """Per-row mean of ``x[n + k] y[n]`` over the valid ``n``."""
    return np.mean(x[:, k:] * y[:, :x.shape[1] - k], axis=1)


def correlation_study(cfg: RunConfig, *, kernels=None, n_lags: int | None = None):
    """Empirical noise correlations against the kernel tables.

    Stationary pairs use per-sample lag averages; the eta-mu pair is taken
    at fixed ``(t, tau)`` nodes.  Null pairs (nu-nu, nu-mu) have target 0.
    Standard errors are ``sqrt(E|z - mean|^2 / S)`` over per-sample values.
    """
    grid = cfg.grid()
    if kernels is None:
        kernels = eval_kernels(cfg.bath(), grid)
    filters = build_filters(kernels, grid)
    n_lags = cfg.n_lags if n_lags is None else n_lags
    n, m = grid.n_steps, grid.m_steps
    pick = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(2**32,)))
    real_lags = np.sort(pick.choice(np.arange(0, n // 2), size=n_lags, replace=False))
    imag_lags = np.sort(pick.choice(np.arange(0, m), size=n_lags, replace=False))
    em_rows = np.sort(pick.choice(np.arange(0, min(n + 1, kernels.support_rows)),
                                  size=n_lags, replace=False))
    em_cols = pick.choice(np.arange(0, m), size=n_lags, replace=True)

    specs = []
    for k in real_lags:
        specs.append(("eta_eta", k * cfg.dt, 0.0, kernels.k_eta_eta[k]))
    for k in real_lags:
        specs.append(("eta_nu", k * cfg.dt, 0.0, kernels.k_eta_nu[k]))
    for k in imag_lags:
        specs.append(("mu_mu", k * cfg.dtau, 0.0, kernels.k_mu_mu[k]))
    for r, c in zip(em_rows, em_cols):
        specs.append(("eta_mu", r * cfg.dt, c * cfg.dtau, kernels.k_eta_mu[r, c]))
    for k in real_lags:
        specs.append(("nu_nu", k * cfg.dt, 0.0, 0.0))
    for c in imag_lags:
        specs.append(("nu_mu", 0.0, c * cfg.dtau, 0.0))
    n_est = len(specs)
    s1 = np.zeros(n_est, dtype=complex)
    s2 = np.zeros(n_est)
    s_total = cfg.n_samples
    for lo in range(0, s_total, cfg.chunk):
        idx = np.arange(lo, min(lo + cfg.chunk, s_total))
        nb = synthesize_batch(filters, cfg.seed, idx, cfg.scaling())
        eta, nu, mu = nb.eta, nb.nu, nb.mu
        cols = []
        for k in real_lags:
            cols.append(_lagged(eta, eta, k))
        for k in real_lags:
            cols.append(_lagged(eta, nu, k))
        for k in imag_lags:
            cols.append(np.mean(np.roll(mu, -k, axis=1) * mu, axis=1))
        for r, c in zip(em_rows, em_cols):
            cols.append(eta[:, r] * mu[:, c])
        for k in real_lags:
            cols.append(_lagged(nu, nu, k))
        nu_mean = nu.mean(axis=1)
        for c in imag_lags:
            cols.append(nu_mean * mu[:, c])
        z = np.stack(cols, axis=1)
        s1 += z.sum(axis=0)
        s2 += (np.abs(z) ** 2).sum(axis=0)
    mean = s1 / s_total
    var = np.maximum(s2 / s_total - np.abs(mean) ** 2, 0.0)
    err = np.sqrt(var / s_total)
    return [CorrelationRow(p, float(t), float(tp), complex(tg), complex(e), float(se))
            for (p, t, tp, tg), e, se in zip(specs, mean, err)]
