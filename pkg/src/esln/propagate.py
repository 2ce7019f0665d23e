"""Single-trajectory propagation of the spin-boson stochastic equations.

Real time (hbar = 1, ``H = (delta sx + eps(t) sz)/2``)::

    d rho/dt = -i[H, rho] + i eta [sz, rho] + (i/2) nu {sz, rho}

Imaginary time, starting from the identity::

    d rhobar/dtau = -(H(t0) + mu sz) rhobar

with the noise nodes visited from ``tau = beta`` towards ``tau = 0``.

The guided variant replaces ``eta`` by the memory-shifted ``eta_hat`` and
the anticommutator by ``{sz - s, rho}`` with the guide spin
``s = Tr(sz rho)/Tr(rho)``; the normalised variant uses ``eta_hat`` with
the plain anticommutator.  States are four complex numbers: density
elements ``(r11, r12, r21, r22)`` or spins ``(sx, sy, sz, Tr)``.

The noises are sampled on grid nodes and held fixed across a step, so a
step integrates an ordinary differential equation.  The Heun step is the
explicit trapezoidal rule on that equation, with the Stratonovich drift
terms added when enabled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

__all__ = [
    "SchemeSpec",
    "SpinBosonDrive",
    "Trajectory",
    "density_to_spins",
    "heun_step",
    "propagate_trajectory",
    "spins_to_density",
    "step_guided",
    "step_normalised",
    "step_original",
    "stratonovich_drift_real",
    "thermalise",
]

EULER, HEUN = 0, 1
ORIGINAL, GUIDED, NORMALISED = 0, 1, 2
DENSITY, SPINS = 0, 1

STATUS_OK, STATUS_DIVERGED, STATUS_PATHOLOGICAL = 0, 1, 2
OVERFLOW_NORM = 1e300
TRACE_FLOOR = 1e-12
SPIKE_LEVEL = 10.0

_STEPPERS = {"euler_maruyama": EULER, "heun": HEUN}
_VARIANTS = {"original": ORIGINAL, "guided": GUIDED, "normalised": NORMALISED}
_REPRS = {"density": DENSITY, "spins": SPINS}


@dataclass(frozen=True)
class SpinBosonDrive:
    """Tunnelling ``delta`` and bias ``eps(t) = epsilon0 + kappa t``."""

    delta: float
    epsilon0: float = 0.0
    kappa: float = 0.0

    def __post_init__(self):
        for name in ("delta", "epsilon0", "kappa"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    def epsilon_at(self, t):
        return self.epsilon0 + self.kappa * np.asarray(t, dtype=float)

    def hamiltonian(self, t: float) -> np.ndarray:
        e = float(self.epsilon_at(t))
        return 0.5 * np.array([[e, self.delta], [self.delta, -e]], dtype=complex)


@dataclass(frozen=True)
class SchemeSpec:
    stepper: str = "heun"
    variant: str = "original"
    representation: str = "density"
    stratonovich: bool = True

    def __post_init__(self):
        if self.stepper not in _STEPPERS:
            raise ValueError(f"unknown stepper {self.stepper!r}")
        if self.variant not in _VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.representation not in _REPRS:
            raise ValueError(f"unknown representation {self.representation!r}")

    @property
    def codes(self) -> tuple[int, int, int]:
        return (_STEPPERS[self.stepper], _VARIANTS[self.variant],
                _REPRS[self.representation])


def density_to_spins(rho) -> np.ndarray:
    """``(r11, r12, r21, r22)`` or a 2x2 matrix to ``(sx, sy, sz, Tr)``."""
    r = np.asarray(rho, dtype=complex).reshape(-1, 4)
    out = np.stack([r[:, 1] + r[:, 2], 1j * (r[:, 1] - r[:, 2]),
                    r[:, 0] - r[:, 3], r[:, 0] + r[:, 3]], axis=1)
    return out[0] if np.ndim(rho) in (1, 2) and np.size(rho) == 4 else out


def spins_to_density(spins) -> np.ndarray:
    s = np.asarray(spins, dtype=complex).reshape(-1, 4)
    out = np.stack([0.5 * (s[:, 3] + s[:, 2]), 0.5 * (s[:, 0] - 1j * s[:, 1]),
                    0.5 * (s[:, 0] + 1j * s[:, 1]), 0.5 * (s[:, 3] - s[:, 2])], axis=1)
    return out[0] if np.ndim(spins) == 1 else out


# --------------------------------------------------------------------------
# right-hand sides with the noises frozen over a step


@njit(cache=True)
def _ratio(a, b):
    # NaN on an exactly vanishing denominator so that the step is flagged as diverged
    if b == 0:
        return complex(math.nan, math.nan)
    return a / b


@njit(cache=True)
def _rhs(rep, variant, s, eps, delta, eta, nu, strat, out):
    if rep == DENSITY:
        r11, r12, r21, r22 = s[0], s[1], s[2], s[3]
        c11 = 0.5 * delta * (r21 - r12)
        c12 = eps * r12 + 0.5 * delta * (r22 - r11)
        c21 = -eps * r21 + 0.5 * delta * (r11 - r22)
        c22 = 0.5 * delta * (r12 - r21)
        out[0] = -1j * c11 + 1j * nu * r11
        out[1] = -1j * c12 + 2j * eta * r12 + 2.0 * strat * r12
        out[2] = -1j * c21 - 2j * eta * r21 + 2.0 * strat * r21
        out[3] = -1j * c22 - 1j * nu * r22
        if variant == GUIDED:
            guide = _ratio(r11 - r22, r11 + r22)
            k = 1j * nu * guide
            out[0] -= k * r11
            out[1] -= k * r12
            out[2] -= k * r21
            out[3] -= k * r22
    else:
        sx, sy, sz, tr = s[0], s[1], s[2], s[3]
        w = eps - 2.0 * eta
        out[0] = -w * sy + 2.0 * strat * sx
        out[1] = -delta * sz + w * sx + 2.0 * strat * sy
        out[2] = delta * sy + 1j * nu * tr
        out[3] = 1j * nu * sz
        if variant == GUIDED:
            g = 1j * nu * _ratio(sz, tr)
            out[0] -= g * sx
            out[1] -= g * sy
            out[2] -= g * sz
            # the trace is constant by construction and is not evolved
            out[3] = 0.0


@njit(cache=True)
def _step(stepper, rep, variant, s, t, dt, eps0, kappa, delta, eta, nu, strat,
          k1, k2, tmp):
    """Advance ``s`` in place from ``t`` to ``t + dt``."""
    eps_a = eps0 + kappa * t
    if stepper == EULER:
        _rhs(rep, variant, s, eps_a, delta, eta, nu, 0.0, k1)
        for i in range(4):
            s[i] += dt * k1[i]
        return
    _rhs(rep, variant, s, eps_a, delta, eta, nu, strat, k1)
    for i in range(4):
        tmp[i] = s[i] + dt * k1[i]
    eps_b = eps0 + kappa * (t + dt)
    _rhs(rep, variant, tmp, eps_b, delta, eta, nu, strat, k2)
    for i in range(4):
        s[i] += 0.5 * dt * (k1[i] + k2[i])


@njit(cache=True)
def _thermal_rhs(r, eps, delta, mu, shift, out):
    # -(H0 + shift + mu sz) r
    h11 = 0.5 * eps * r[0] + 0.5 * delta * r[2]
    h12 = 0.5 * eps * r[1] + 0.5 * delta * r[3]
    h21 = 0.5 * delta * r[0] - 0.5 * eps * r[2]
    h22 = 0.5 * delta * r[1] - 0.5 * eps * r[3]
    out[0] = -(h11 + shift * r[0] + mu * r[0])
    out[1] = -(h12 + shift * r[1] + mu * r[1])
    out[2] = -(h21 + shift * r[2] - mu * r[2])
    out[3] = -(h22 + shift * r[3] - mu * r[3])


@njit(cache=True)
def _bad(s):
    for i in range(4):
        v = s[i]
        if not (math.isfinite(v.real) and math.isfinite(v.imag)):
            return True
        if abs(v) > OVERFLOW_NORM:
            return True
    return False


@njit(cache=True)
def _thermalise(r, mu, dtau, eps, delta, stepper, shift, k1, k2, tmp):
    """Imaginary-time evolution of ``r`` in place; returns False on overflow.

    The nodes are applied from ``tau = beta`` down to ``tau = 0``; with the
    cross kernel ``K(t, tau)`` this ordering makes the joint equilibrium
    stationary, while the opposite order correlates ``eta`` with the
    mirrored node ``beta - tau``.
    """
    for m in range(mu.shape[0] - 1, -1, -1):
        if stepper == EULER:
            _thermal_rhs(r, eps, delta, mu[m], 0.0, k1)
            for i in range(4):
                r[i] += dtau * k1[i]
        else:
            _thermal_rhs(r, eps, delta, mu[m], shift, k1)
            for i in range(4):
                tmp[i] = r[i] + dtau * k1[i]
            _thermal_rhs(tmp, eps, delta, mu[m], shift, k2)
            for i in range(4):
                r[i] += 0.5 * dtau * (k1[i] + k2[i])
        if _bad(r):
            return False
    return True


@njit(cache=True)
def _observables(rep, s, out):
    if rep == DENSITY:
        out[0] = s[1] + s[2]
        out[1] = 1j * (s[1] - s[2])
        out[2] = s[0] - s[3]
        out[3] = s[0] + s[3]
    else:
        for i in range(4):
            out[i] = s[i]


@njit(cache=True)
def _run_one(eta, nu, mu, thermal, init, t0, dt, dtau, eps0, kappa, delta,
             stepper, variant, rep, strat_real, strat_imag, kmem, buf, guide_hist):
    """Propagate one trajectory, filling ``buf[h] = (sx, sy, sz, Tr)``.

    Returns ``(status, max |sz/Tr|, first step where |sz/Tr|`` exceeds
    ``SPIKE_LEVEL`` or the trace vanishes (-1 if never), ``max |Tr(t) - Tr(t0)|)``.
    """
    k1 = np.empty(4, dtype=np.complex128)
    k2 = np.empty(4, dtype=np.complex128)
    tmp = np.empty(4, dtype=np.complex128)
    r = np.empty(4, dtype=np.complex128)
    n_steps = eta.shape[0] - 1
    if thermal:
        r[0] = 1.0
        r[1] = 0.0
        r[2] = 0.0
        r[3] = 1.0
        ok = _thermalise(r, mu, dtau, eps0 + kappa * t0, delta, stepper,
                         0.5 * strat_imag, k1, k2, tmp)
        if not ok:
            return STATUS_DIVERGED, 0.0, -1, 0.0
    else:
        for i in range(4):
            r[i] = init[i]
    s = np.empty(4, dtype=np.complex128)
    if rep == DENSITY:
        for i in range(4):
            s[i] = r[i]
    else:
        s[0] = r[1] + r[2]
        s[1] = 1j * (r[1] - r[2])
        s[2] = r[0] - r[3]
        s[3] = r[0] + r[3]
    obs = np.empty(4, dtype=np.complex128)
    _observables(rep, s, obs)
    for i in range(4):
        buf[0, i] = obs[i]
    tr0 = obs[3]
    max_guide = 0.0
    spike = -1
    drift = 0.0
    memory = variant != ORIGINAL
    n_mem = kmem.shape[0] - 1
    for h in range(n_steps):
        tr = obs[3]
        if memory:
            if abs(tr) < TRACE_FLOOR:
                return STATUS_PATHOLOGICAL, max_guide, h if spike < 0 else spike, drift
            guide_hist[h] = obs[2] / tr
            g = abs(guide_hist[h])
            if g > max_guide:
                max_guide = g
            if spike < 0 and g > SPIKE_LEVEL:
                spike = h
            shift = 0j
            top = h if h < n_mem else n_mem
            for j in range(1, top + 1):
                shift += kmem[j] * guide_hist[h - j]
            eta_h = eta[h] + shift
        else:
            eta_h = eta[h]
        _step(stepper, rep, variant, s, t0 + h * dt, dt, eps0, kappa, delta, eta_h,
              nu[h], strat_real, k1, k2, tmp)
        if _bad(s):
            return STATUS_DIVERGED, max_guide, spike, drift
        _observables(rep, s, obs)
        for i in range(4):
            buf[h + 1, i] = obs[i]
        d = abs(obs[3] - tr0)
        if d > drift:
            drift = d
    if memory:
        tr = obs[3]
        if abs(tr) < TRACE_FLOOR:
            return STATUS_PATHOLOGICAL, max_guide, n_steps if spike < 0 else spike, drift
        g = abs(obs[2] / tr)
        if g > max_guide:
            max_guide = g
        if spike < 0 and g > SPIKE_LEVEL:
            spike = n_steps
    return STATUS_OK, max_guide, spike, drift


@njit(cache=True)
def _neumaier_add(acc, comp, b, n, k, x):
    s = acc[b, n, k]
    t = s + x
    if abs(s) >= abs(x):
        comp[b, n, k] += (s - t) + x
    else:
        comp[b, n, k] += (x - t) + s
    acc[b, n, k] = t


@njit(cache=True)
def propagate_chunk(eta, nu, mu, thermal, init, t0, dt, dtau, eps0, kappa, delta,
                    stepper, variant, rep, strat_real, strat_imag, kmem,
                    row_batch, acc, comp, status, max_guide, spike_step, drift):
    """Propagate every row and accumulate its observables into ``acc``.

    ``acc``/``comp`` have shape ``(n_batches, N + 1, 8)`` and hold the
    compensated sums of ``Re, Im`` of ``(sx, sy, sz, Tr)`` (already
    trace-weighted for the normalised variant) per batch ``row_batch[r]``.
    Rows that diverge or hit a vanishing trace are left out.
    """
    n_rows = eta.shape[0]
    n1 = eta.shape[1]
    buf = np.empty((n1, 4), dtype=np.complex128)
    guide_hist = np.empty(n1, dtype=np.complex128)
    for row in range(n_rows):
        st, mg, zs, dr = _run_one(eta[row], nu[row], mu[row], thermal, init, t0, dt,
                                  dtau, eps0, kappa, delta, stepper, variant, rep,
                                  strat_real, strat_imag, kmem, buf, guide_hist)
        status[row] = st
        max_guide[row] = mg
        spike_step[row] = zs
        drift[row] = dr
        if st != STATUS_OK:
            continue
        b = row_batch[row]
        if variant == NORMALISED:
            tr0 = buf[0, 3]
            for n in range(n1):
                w = _ratio(tr0, buf[n, 3])
                for i in range(3):
                    v = w * buf[n, i]
                    _neumaier_add(acc, comp, b, n, 2 * i, v.real)
                    _neumaier_add(acc, comp, b, n, 2 * i + 1, v.imag)
                _neumaier_add(acc, comp, b, n, 6, tr0.real)
                _neumaier_add(acc, comp, b, n, 7, tr0.imag)
        else:
            for n in range(n1):
                for i in range(4):
                    v = buf[n, i]
                    _neumaier_add(acc, comp, b, n, 2 * i, v.real)
                    _neumaier_add(acc, comp, b, n, 2 * i + 1, v.imag)


@njit(cache=True)
def _trajectory(eta, nu, mu, thermal, init, t0, dt, dtau, eps0, kappa, delta,
                stepper, variant, rep, strat_real, strat_imag, kmem):
    n1 = eta.shape[0]
    buf = np.zeros((n1, 4), dtype=np.complex128)
    guide_hist = np.empty(n1, dtype=np.complex128)
    st, mg, zs, dr = _run_one(eta, nu, mu, thermal, init, t0, dt, dtau, eps0, kappa,
                              delta, stepper, variant, rep, strat_real, strat_imag,
                              kmem, buf, guide_hist)
    return buf, st, mg, zs, dr


def memory_kernel(k_eta_nu: np.ndarray, dt: float) -> np.ndarray:
    """Left-rectangle weights ``dt * i * K_eta_nu(j dt)`` for the shift of eta.

    Index ``j = 0`` is zero (``Theta(0) = 0``); the array stops at the last
    lag whose magnitude exceeds ``1e-17`` of the peak.
    """
    k = np.asarray(k_eta_nu, dtype=complex)
    mag = np.abs(k)
    nz = np.nonzero(mag > 1e-17 * mag.max())[0] if mag.size and mag.max() > 0 else []
    nz = np.asarray(nz)
    last = int(nz[-1]) if nz.size else 0
    out = 1j * dt * k[:last + 1].copy()
    out[0] = 0.0
    return out


@dataclass
class Trajectory:
    """Observables ``(sx, sy, sz, Tr)`` of one stochastic trajectory."""

    times: np.ndarray
    spins: np.ndarray
    status: int
    max_guide: float
    spike_step: int
    trace_drift: float


def propagate_trajectory(drive: SpinBosonDrive, scheme: SchemeSpec, *, t0: float,
                         dt: float, eta, nu, mu=None, dtau: float = 1.0,
                         init=None, k_eta_nu=None, strat_real: float = 0.0,
                         strat_imag: float = 0.0) -> Trajectory:
    """Propagate one trajectory on explicit noise arrays.

    With ``mu`` given the state is first thermalised from the identity over
    ``len(mu)`` imaginary steps of size ``dtau``; otherwise ``init`` (a 2x2
    matrix, default ``|0><0|``) is the initial density matrix.  The
    guided and normalised variants need ``k_eta_nu`` on the real lag grid.
    """
    stepper, variant, rep = scheme.codes
    eta = np.ascontiguousarray(eta, dtype=complex)
    nu = np.ascontiguousarray(nu, dtype=complex)
    if eta.shape != nu.shape:
        raise ValueError("eta and nu must share the real grid")
    thermal = mu is not None
    mu_arr = np.ascontiguousarray(mu if thermal else np.zeros(0), dtype=complex)
    rho0 = np.array([[1.0, 0.0], [0.0, 0.0]], dtype=complex) if init is None \
        else np.asarray(init, dtype=complex)
    init4 = np.ascontiguousarray(rho0.reshape(4))
    if variant != ORIGINAL:
        if k_eta_nu is None:
            raise ValueError("guided and normalised variants need k_eta_nu")
        kmem = memory_kernel(k_eta_nu, dt)
    else:
        kmem = np.zeros(1, dtype=complex)
    if not scheme.stratonovich or stepper == EULER:
        strat_real = strat_imag = 0.0
    buf, st, mg, zs, dr = _trajectory(eta, nu, mu_arr, thermal, init4, float(t0),
                                      float(dt), float(dtau), drive.epsilon0,
                                      drive.kappa, drive.delta, stepper, variant, rep,
                                      float(strat_real), float(strat_imag), kmem)
    times = t0 + dt * np.arange(eta.shape[0])
    return Trajectory(times=times, spins=buf, status=int(st), max_guide=float(mg),
                      spike_step=int(zs), trace_drift=float(dr))


# --------------------------------------------------------------------------
# single-step API


def _as_state(state) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(state, dtype=complex).reshape(4)).copy()


def _single(variant, state, t, eta, nu, drive, dt, stepper, representation, strat):
    s = _as_state(state)
    k1 = np.empty(4, dtype=complex)
    k2 = np.empty(4, dtype=complex)
    tmp = np.empty(4, dtype=complex)
    _step(_STEPPERS[stepper], _REPRS[representation], variant, s, float(t), float(dt),
          drive.epsilon0, drive.kappa, drive.delta, complex(eta), complex(nu),
          float(strat), k1, k2, tmp)
    return s


def step_original(state, t, eta, nu, drive: SpinBosonDrive, dt: float, *,
                  stepper: str = "heun", representation: str = "density",
                  strat: float = 0.0) -> np.ndarray:
    """One step of the trace-violating equation.

    ``state`` holds four density elements ``(r11, r12, r21, r22)`` or, with
    ``representation="spins"``, ``(sx, sy, sz, Tr)``.
    """
    return _single(ORIGINAL, state, t, eta, nu, drive, dt, stepper, representation, strat)


def eta_hat(eta_t: complex, k_eta_nu, guide_history, dt: float) -> complex:
    """Memory-shifted noise ``eta + i dt sum_{j>=1} K(j dt) s(t - j dt)``.

    ``guide_history[0]`` is the most recent past guide spin ``s(t - dt)``.
    """
    kmem = memory_kernel(k_eta_nu, dt)
    hist = np.asarray(guide_history, dtype=complex)
    top = min(hist.shape[0], kmem.shape[0] - 1)
    return complex(eta_t) + complex(np.dot(kmem[1:top + 1], hist[:top]))


def step_guided(state, t, eta, nu, drive: SpinBosonDrive, dt: float, *,
                k_eta_nu=None, guide_history=(), stepper: str = "heun",
                representation: str = "density", strat: float = 0.0) -> np.ndarray:
    """One step of the trace-preserving guided equation."""
    shifted = eta if k_eta_nu is None else eta_hat(eta, k_eta_nu, guide_history, dt)
    return _single(GUIDED, state, t, shifted, nu, drive, dt, stepper, representation, strat)


def step_normalised(state, t, eta, nu, drive: SpinBosonDrive, dt: float, *,
                    k_eta_nu=None, guide_history=(), stepper: str = "heun",
                    representation: str = "density", strat: float = 0.0) -> np.ndarray:
    """One step with the shifted noise and the plain anticommutator."""
    shifted = eta if k_eta_nu is None else eta_hat(eta, k_eta_nu, guide_history, dt)
    return _single(NORMALISED, state, t, shifted, nu, drive, dt, stepper,
                   representation, strat)


def heun_step(state, t, rhs, dt: float) -> np.ndarray:
    """Generic trapezoidal predictor-corrector for ``dy/dt = rhs(t, y)``.

    The supporting value is the Euler prediction; the corrector averages the
    slopes at ``(t, y)`` and ``(t + dt, y_pred)``.
    """
    y = np.asarray(state, dtype=complex)
    k1 = np.asarray(rhs(t, y), dtype=complex)
    pred = y + dt * k1
    k2 = np.asarray(rhs(t + dt, pred), dtype=complex)
    return y + 0.5 * dt * (k1 + k2)


def stratonovich_drift_real(state, strat_real: float, representation: str = "density"):
    """Drift correction ``2 dt^2 sum G_ee^2`` times the off-diagonal part.

    ``strat_real`` is ``dt^2 sum_n G_ee(t_n)^2`` (``FilterSet.strat_real``).
    In spin form the correction acts on ``sx`` and ``sy`` only.
    """
    s = np.asarray(state, dtype=complex).reshape(4)
    if representation == "density":
        return 2.0 * strat_real * np.array([0.0, s[1], s[2], 0.0], dtype=complex)
    return 2.0 * strat_real * np.array([s[0], s[1], 0.0, 0.0], dtype=complex)


def thermalise(drive: SpinBosonDrive, mu, dtau: float, *, t0: float = 0.0,
               stepper: str = "heun", strat_imag: float = 0.0) -> np.ndarray:
    """Evolve the identity over ``len(mu)`` imaginary steps; returns 2x2.

    Raises ``FloatingPointError`` when the matrix norm exceeds 1e300.
    """
    mu = np.ascontiguousarray(np.asarray(mu, dtype=complex).reshape(-1))
    r = np.array([1.0, 0.0, 0.0, 1.0], dtype=complex)
    k1, k2, tmp = (np.empty(4, dtype=complex) for _ in range(3))
    eps = float(drive.epsilon_at(t0))
    ok = _thermalise(r, mu, float(dtau), eps, drive.delta, _STEPPERS[stepper],
                     0.5 * strat_imag if stepper == "heun" else 0.0, k1, k2, tmp)
    if not ok:
        raise FloatingPointError("thermalisation overflowed")
    return r.reshape(2, 2)
