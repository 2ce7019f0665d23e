"""Drude spectral density and the physical bath correlation kernels.

Every kernel is a frequency integral of the spectral density against a
thermal factor and a trigonometric or exponential phase.  All of them can
be written through the one-sided transform

    L(z) = (1/pi) * int_0^inf J(w) exp(-w z) / (1 - exp(-beta w)) dw,

with ``z`` in the strip ``0 <= Re z <= beta``:

    K_eta_eta(t)    = Re[L(-i t) + L(beta - i t)]
    K_mu_mu(tau)    = L(|tau|) + L(beta - |tau|)
    K_eta_mu(t,tau) = -[L(tau + i t) + L(beta - tau - i t)]

while the causal kernel ``K_eta_nu(t) = -2i Theta(t) (1/pi) int J sin(w t) dw``
carries no thermal factor.

The integrals are split at ``Omega = omega_max_factor * omega_c``.  The
finite part uses composite Gauss-Legendre panels refined by halving until
successive tables agree to ``rtol``.  Beyond ``Omega`` the Drude density
is expanded in inverse powers of frequency and each power is integrated
exactly with generalised exponential integrals, which removes the slowly
decaying ``w**-3`` truncation error of a plain cut-off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from numpy.polynomial.legendre import leggauss

__all__ = [
    "BathSpec",
    "DomainError",
    "KernelTable",
    "QuadratureError",
    "QuadratureSpec",
    "TimeGrid",
    "drude_k_eta_nu",
    "eval_kernels",
    "expint_n",
    "spectral_density",
    "support_time",
]

_EULER = 0.5772156649015329
# Relative size below which a kernel tail is treated as identically zero.
_SUPPORT_EXPONENT = 46.0


class DomainError(ValueError):
    """Raised when an argument lies outside the mathematical domain."""


class QuadratureError(RuntimeError):
    """Raised when refinement fails to reach the requested tolerance."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (achieved relative change {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class BathSpec:
    """Drude bath: coupling ``alpha``, cutoff ``omega_c`` and ``beta_hbar``."""

    alpha: float
    omega_c: float
    beta_hbar: float

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and self.alpha >= 0.0):
            raise DomainError(f"alpha must be >= 0, got {self.alpha}")
        if not (math.isfinite(self.omega_c) and self.omega_c > 0.0):
            raise DomainError(f"omega_c must be > 0, got {self.omega_c}")
        if not (math.isfinite(self.beta_hbar) and self.beta_hbar > 0.0):
            raise DomainError(f"beta_hbar must be > 0, got {self.beta_hbar}")


@dataclass(frozen=True)
class TimeGrid:
    """Real-time grid ``t0 + n dt`` (n = 0..N) and imaginary grid ``m dtau``."""

    t0: float
    dt: float
    n_steps: int
    dtau: float
    m_steps: int

    def __post_init__(self):
        if not self.dt > 0.0:
            raise DomainError(f"dt must be > 0, got {self.dt}")
        if not self.dtau > 0.0:
            raise DomainError(f"dtau must be > 0, got {self.dtau}")
        if self.n_steps < 0 or self.m_steps < 0:
            raise DomainError("step counts must be non-negative")

    @classmethod
    def from_span(cls, t0: float, t_max: float, dt: float, beta_hbar: float,
                  dtau: float) -> "TimeGrid":
        """Build a grid covering ``[t0, t_max]`` and ``[0, beta_hbar]``.

        Both intervals must be tiled by whole steps to one part in 1e9.
        """
        if not (dt > 0.0 and dtau > 0.0):
            raise DomainError("dt and dtau must be positive")
        span = t_max - t0
        if span < 0.0:
            raise DomainError(f"t_max ({t_max}) precedes t0 ({t0})")
        n = int(round(span / dt))
        m = int(round(beta_hbar / dtau))
        if abs(n * dt - span) > 1e-9 * max(abs(span), dt):
            raise DomainError(f"t_max - t0 = {span} is not a multiple of dt = {dt}")
        if m < 1 or abs(m * dtau - beta_hbar) > 1e-9 * beta_hbar:
            raise DomainError(
                f"beta_hbar = {beta_hbar} is not a multiple of dtau = {dtau}")
        return cls(t0=float(t0), dt=float(dt), n_steps=n, dtau=float(dtau), m_steps=m)

    def check_beta(self, beta_hbar: float) -> None:
        if abs(self.m_steps * self.dtau - beta_hbar) > 1e-9 * beta_hbar:
            raise DomainError(
                f"imaginary grid M*dtau = {self.m_steps * self.dtau} does not tile "
                f"beta_hbar = {beta_hbar}")

    @property
    def t_max(self) -> float:
        return self.t0 + self.n_steps * self.dt

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    @property
    def taus(self) -> np.ndarray:
        return self.dtau * np.arange(self.m_steps + 1)


@dataclass(frozen=True)
class QuadratureSpec:
    """Frequency quadrature controls.

    ``omega_max_factor`` sets the split point ``Omega`` in units of
    ``omega_c``; ``order`` is the Gauss-Legendre order per panel; ``rtol``
    is the refinement stopping criterion relative to the kernel scale.
    """

    omega_max_factor: float = 50.0
    rtol: float = 1e-8
    order: int = 24
    max_refinements: int = 8
    tail_terms: int = 8

    def __post_init__(self):
        if self.omega_max_factor < 20.0:
            raise DomainError("quadrature upper frequency must be >= 20 omega_c")
        if not self.rtol > 0.0:
            raise DomainError("rtol must be positive")
        if self.order < 4:
            raise DomainError("Gauss-Legendre order must be >= 4")


@dataclass(frozen=True)
class KernelTable:
    """Physical kernels on the simulation grids.

    ``k_eta_eta`` and ``k_eta_nu`` are indexed by real lag ``n dt`` for
    ``n = 0 .. n_lags-1`` (negative lags follow from evenness and
    causality).  ``k_mu_mu`` is indexed by ``m dtau`` for ``m = 0..M``.
    ``k_eta_mu[n, m]`` holds ``K(t0 + n dt, m dtau)`` for the rows
    ``n < support_rows``; later rows are below ``exp(-46)`` of the kernel
    scale and are omitted.
    """

    k_eta_eta: np.ndarray
    k_eta_nu: np.ndarray
    k_mu_mu: np.ndarray
    k_eta_mu: np.ndarray
    dt: float
    dtau: float
    residual: float
    n_nodes: int

    @property
    def n_lags(self) -> int:
        return self.k_eta_eta.shape[0]

    @property
    def support_rows(self) -> int:
        return self.k_eta_mu.shape[0]

    def k_eta_eta_at(self, lag: np.ndarray) -> np.ndarray:
        """Even extension to signed integer lags."""
        lag = np.abs(np.asarray(lag))
        out = np.zeros(lag.shape)
        ok = lag < self.n_lags
        out[ok] = self.k_eta_eta[lag[ok]]
        return out

    def k_eta_nu_at(self, lag: np.ndarray) -> np.ndarray:
        """Causal extension to signed integer lags."""
        lag = np.asarray(lag)
        out = np.zeros(lag.shape, dtype=complex)
        ok = (lag >= 0) & (lag < self.n_lags)
        out[ok] = self.k_eta_nu[lag[ok]]
        return out

    def k_eta_mu_at(self, n: np.ndarray, m: np.ndarray) -> np.ndarray:
        n = np.asarray(n)
        m = np.asarray(m)
        out = np.zeros(np.broadcast(n, m).shape, dtype=complex)
        n_b, m_b = np.broadcast_arrays(n, m)
        ok = n_b < self.support_rows
        out[ok] = self.k_eta_mu[n_b[ok], m_b[ok]]
        return out


def spectral_density(omega, bath: BathSpec):
    """Drude density ``alpha w / (1 + (w/omega_c)^2)^2``."""
    w = np.asarray(omega, dtype=float)
    if np.any(w < 0.0) or np.any(~np.isfinite(w)):
        raise DomainError("spectral density requires finite omega >= 0")
    out = bath.alpha * w / (1.0 + (w / bath.omega_c) ** 2) ** 2
    return float(out) if out.ndim == 0 else out


def drude_k_eta_nu(t, bath: BathSpec):
    """Closed form of the causal kernel, ``-2i Theta(t) alpha wc^3 t e^{-wc t}/4``."""
    t = np.asarray(t, dtype=float)
    wc = bath.omega_c
    val = np.where(t > 0.0, bath.alpha * wc ** 3 * t * np.exp(-wc * np.abs(t)) / 4.0, 0.0)
    return -2j * val


def support_time(bath: BathSpec) -> float:
    """Time after which every kernel is below ``exp(-46)`` of its scale.

    The slowest decay comes from either the Drude pole (rate ``omega_c``)
    or the first Matsubara frequency ``2 pi / beta``.
    """
    rate = min(bath.omega_c, 2.0 * math.pi / bath.beta_hbar)
    return _SUPPORT_EXPONENT / rate


# --------------------------------------------------------------------------
# generalised exponential integral E_p(x) for complex x with Re x >= 0


@njit(cache=True)
def _expint_scalar(p, x):
    if x == 0:
        return complex(1.0 / (p - 1)) if p > 1 else complex(np.inf)
    if x.real > 700.0:
        return 0j
    nm1 = p - 1
    if abs(x) <= 1.0:
        if nm1 != 0:
            ans = complex(1.0 / nm1)
        else:
            ans = -np.log(x) - _EULER
        fact = 1.0 + 0j
        for i in range(1, 400):
            fact *= -x / i
            if i != nm1:
                delta = -fact / (i - nm1)
            else:
                psi = -_EULER
                for ii in range(1, nm1 + 1):
                    psi += 1.0 / ii
                delta = fact * (-np.log(x) + psi)
            ans += delta
            if abs(delta) < abs(ans) * 1e-17:
                break
        return ans
    # modified Lentz evaluation of the continued fraction
    tiny = 1e-300
    b = x + p
    c = 1.0 / tiny + 0j
    d = 1.0 / b
    h = d
    for i in range(1, 20000):
        an = -i * (nm1 + i)
        b = b + 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        d = 1.0 / d
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        delta = c * d
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return h * np.exp(-x)


@njit(cache=True)
def _expint_array(p, x):
    out = np.empty(x.shape[0], dtype=np.complex128)
    for i in range(x.shape[0]):
        out[i] = _expint_scalar(p, x[i])
    return out


def expint_n(p: int, x) -> np.ndarray:
    """``E_p(x) = int_1^inf exp(-x s) s^-p ds`` for ``Re x >= 0``."""
    x = np.atleast_1d(np.asarray(x, dtype=complex))
    if np.any(x.real < 0.0):
        raise DomainError("expint_n requires Re x >= 0")
    return _expint_array(int(p), x.ravel()).reshape(x.shape)


@njit(cache=True)
def _tail_transform(z, omega_max, beta, n_shift, n_terms, u):
    """Sum over the inverse-power expansion of J beyond ``omega_max``.

    Returns ``sum_k (-1)^k (k+1) u^(k+1) sum_j E_{3+2k}(Omega (z + j beta))``
    for every entry of ``z``; multiply by ``alpha omega_c^2 / pi`` to get
    the tail of ``L``.  Terms whose exponential factor is below
    ``exp(-46)`` are skipped.
    """
    out = np.zeros(z.shape[0], dtype=np.complex128)
    for i in range(z.shape[0]):
        acc = 0j
        for j in range(n_shift + 1):
            x = omega_max * (z[i] + j * beta)
            if x.real > _SUPPORT_EXPONENT:
                continue
            coef = u
            sgn = 1.0
            for k in range(n_terms):
                acc += sgn * (k + 1) * coef * _expint_scalar(3 + 2 * k, x)
                coef *= u
                sgn = -sgn
        out[i] = acc
    return out


class _Quadrature:
    """Composite Gauss-Legendre rule on ``[0, Omega]`` plus analytic tail."""

    def __init__(self, bath: BathSpec, spec: QuadratureSpec, panel_width: float):
        self.bath = bath
        self.spec = spec
        self.omega_max = spec.omega_max_factor * bath.omega_c
        n_panels = max(1, int(math.ceil(self.omega_max / panel_width)))
        edges = np.linspace(0.0, self.omega_max, n_panels + 1)
        x, w = leggauss(spec.order)
        half = 0.5 * np.diff(edges)
        mid = 0.5 * (edges[1:] + edges[:-1])
        self.nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
        self.weights = (half[:, None] * w[None, :]).ravel()
        self.n_panels = n_panels
        b = bath.beta_hbar
        self.n_shift = int(_SUPPORT_EXPONENT / (b * self.omega_max))
        self.tail_scale = bath.alpha * bath.omega_c ** 2 / math.pi
        self.u = (bath.omega_c / self.omega_max) ** 2
        wq = self.nodes
        jw = bath.alpha * wq / (1.0 + (wq / bath.omega_c) ** 2) ** 2
        small = wq < 1e-6 * bath.omega_c
        # J(w) / (1 - exp(-beta w)), with its finite limit near w = 0
        thermal = np.empty_like(wq)
        big = ~small
        thermal[big] = jw[big] / -np.expm1(-b * wq[big])
        ws = wq[small]
        thermal[small] = (bath.alpha / b) * (1.0 + 0.5 * b * ws + (b * ws) ** 2 / 12.0) \
            / (1.0 + (ws / bath.omega_c) ** 2) ** 2
        self.c_thermal = self.weights * thermal / math.pi
        self.c_plain = self.weights * jw / math.pi

    def tail(self, z: np.ndarray, thermal: bool = True) -> np.ndarray:
        z = np.ascontiguousarray(np.asarray(z, dtype=complex).ravel())
        n_shift = self.n_shift if thermal else 0
        if self.bath.alpha == 0.0:
            return np.zeros(z.shape, dtype=complex)
        vals = _tail_transform(z, self.omega_max, self.bath.beta_hbar, n_shift,
                               self.spec.tail_terms, self.u)
        return self.tail_scale * vals

    # -- one-dimensional kernels ------------------------------------------

    def k_eta_eta(self, t: np.ndarray) -> np.ndarray:
        b = self.bath.beta_hbar
        # J coth = J (1 + e^{-b w}) / (1 - e^{-b w})
        weight = self.c_thermal * (1.0 + np.exp(-b * self.nodes))
        out = _cos_sum(weight, self.nodes, t)
        out += (self.tail(-1j * t) + self.tail(b - 1j * t)).real
        return out

    def k_eta_nu(self, t: np.ndarray) -> np.ndarray:
        val = _sin_sum(self.c_plain, self.nodes, t)
        val += self.tail(-1j * t, thermal=False).imag
        return np.where(t > 0.0, -2j * val, 0.0 + 0j)

    def k_mu_mu(self, tau: np.ndarray) -> np.ndarray:
        b = self.bath.beta_hbar
        tau = np.abs(tau)
        w = self.nodes
        out = np.exp(-np.outer(tau, w)) + np.exp(-np.outer(b - tau, w))
        out = out @ self.c_thermal
        out += (self.tail(tau) + self.tail(b - tau)).real
        return out

    def k_eta_mu(self, t: np.ndarray, tau: np.ndarray, chunk: int = 512) -> np.ndarray:
        """Dense table ``K(t_i, tau_j)`` via two real matrix products."""
        b = self.bath.beta_hbar
        w = self.nodes
        damp_a = self.c_thermal[:, None] * np.exp(-np.outer(w, tau))
        damp_b = self.c_thermal[:, None] * np.exp(-np.outer(w, b - tau))
        plus = damp_a + damp_b
        minus = damp_a - damp_b
        del damp_a, damp_b
        out = np.empty((t.shape[0], tau.shape[0]), dtype=complex)
        for s in range(0, t.shape[0], chunk):
            cos_block, sin_block = _phase_block(t[s:s + chunk], w)
            out[s:s + chunk].real = cos_block @ plus
            out[s:s + chunk].imag = -(sin_block @ minus)
        out = -out
        # tails only matter where Omega*tau or Omega*(beta - tau) is small
        near = (self.omega_max * np.minimum(tau, b - tau)) < _SUPPORT_EXPONENT
        if np.any(near) and self.bath.alpha != 0.0:
            cols = np.nonzero(near)[0]
            tt, cc = np.meshgrid(t, tau[cols], indexing="ij")
            z = cc + 1j * tt
            tail = self.tail(z.ravel()) + self.tail((b - z).ravel())
            out[:, cols] -= tail.reshape(z.shape)
        return out


@njit(cache=True)
def _phase_block(t, w):
    """``cos(w t)`` and ``sin(w t)`` tables.

    Rows on a uniform ``t`` axis are generated by angle addition and
    reseeded exactly every 32 rows, which keeps the drift near 1e-15.
    """
    nt = t.shape[0]
    nw = w.shape[0]
    c = np.empty((nt, nw))
    s = np.empty((nt, nw))
    uniform = nt > 2
    step = t[1] - t[0] if nt > 1 else 0.0
    if uniform:
        for i in range(2, nt):
            if abs((t[i] - t[i - 1]) - step) > 1e-12 * max(abs(step), 1.0):
                uniform = False
                break
    rot_c = np.cos(w * step)
    rot_s = np.sin(w * step)
    for i in range(nt):
        if (not uniform) or i % 32 == 0:
            for k in range(nw):
                c[i, k] = np.cos(w[k] * t[i])
                s[i, k] = np.sin(w[k] * t[i])
        else:
            for k in range(nw):
                ca = c[i - 1, k]
                sa = s[i - 1, k]
                cb = rot_c[k]
                sb = rot_s[k]
                c[i, k] = ca * cb - sa * sb
                s[i, k] = sa * cb + ca * sb
    return c, s


def _cos_sum(weight, nodes, t, chunk=512):
    out = np.empty(t.shape[0])
    for s in range(0, t.shape[0], chunk):
        out[s:s + chunk] = _phase_block(t[s:s + chunk], nodes)[0] @ weight
    return out


def _sin_sum(weight, nodes, t, chunk=512):
    out = np.empty(t.shape[0])
    for s in range(0, t.shape[0], chunk):
        out[s:s + chunk] = _phase_block(t[s:s + chunk], nodes)[1] @ weight
    return out


def _initial_panel_width(bath: BathSpec, t_span: float) -> float:
    # resolve the Drude peak, the first Matsubara pole and the fastest
    # oscillation exp(i w t_span) with a handful of nodes per panel
    return min(bath.omega_c, 8.0 * math.pi / (3.0 * bath.beta_hbar),
               56.0 / max(t_span, 1e-12))


def _probe(quad: _Quadrature, t: np.ndarray, tau: np.ndarray) -> list[np.ndarray]:
    """One-dimensional cuts used to certify convergence of every table."""
    b = quad.bath.beta_hbar
    edge_tau = np.array([0.0, 0.5 * b, b])
    return [
        quad.k_eta_eta(t),
        quad.k_eta_nu(t),
        quad.k_mu_mu(tau),
        quad.k_eta_mu(t, edge_tau),
        quad.k_eta_mu(t[:1], tau),
    ]


def _max_rel_change(a: list[np.ndarray], b: list[np.ndarray]) -> float:
    worst = 0.0
    for x, y in zip(a, b):
        scale = max(np.max(np.abs(y)), 1e-300)
        worst = max(worst, float(np.max(np.abs(x - y)) / scale))
    return worst


def eval_kernels(bath: BathSpec, grid: TimeGrid,
                 quad: QuadratureSpec | None = None,
                 *, with_eta_mu: bool = True) -> KernelTable:
    """Tabulate the four kernels on ``grid``.

    The real-lag tables cover ``max(N, support)`` lags so that callers can
    embed them in padded circulants; entries past the support time are
    below ``exp(-46)`` of the kernel scale and are stored as zero.
    Convergence is certified by halving the panel width until the
    one-dimensional cuts of every kernel (including the boundary columns
    ``tau = 0, beta/2, beta`` and the ``t = 0`` row of ``K_eta_mu``) change
    by less than ``quad.rtol`` relative to their maxima.

    Raises ``QuadratureError`` if refinement stalls.
    """
    quad = quad or QuadratureSpec()
    grid.check_beta(bath.beta_hbar)
    n_support = int(math.ceil(support_time(bath) / grid.dt))
    n_lags = max(grid.n_steps, n_support) + 1
    n_eval = min(n_lags, n_support + 1)
    t_lag = grid.dt * np.arange(n_eval)
    taus = grid.taus

    if bath.alpha == 0.0:
        return KernelTable(
            k_eta_eta=np.zeros(n_lags), k_eta_nu=np.zeros(n_lags, dtype=complex),
            k_mu_mu=np.zeros(taus.shape[0]),
            k_eta_mu=np.zeros((min(n_eval, grid.n_steps + 1), taus.shape[0]), dtype=complex),
            dt=grid.dt, dtau=grid.dtau, residual=0.0, n_nodes=0)

    width = _initial_panel_width(bath, float(t_lag[-1]))
    rule = _Quadrature(bath, quad, width)
    previous = _probe(rule, t_lag, taus)
    residual = math.inf
    for _ in range(quad.max_refinements):
        width *= 0.5
        rule = _Quadrature(bath, quad, width)
        current = _probe(rule, t_lag, taus)
        residual = _max_rel_change(previous, current)
        previous = current
        if residual < quad.rtol:
            break
    else:
        raise QuadratureError("kernel quadrature did not converge", residual)

    k_ee = np.zeros(n_lags)
    k_en = np.zeros(n_lags, dtype=complex)
    k_ee[:n_eval] = previous[0]
    k_en[:n_eval] = previous[1]
    k_mm = previous[2]
    rows = min(n_eval, grid.n_steps + 1)
    if with_eta_mu:
        k_em = rule.k_eta_mu(t_lag[:rows], taus)
    else:
        k_em = np.zeros((0, taus.shape[0]), dtype=complex)
    return KernelTable(k_eta_eta=k_ee, k_eta_nu=k_en, k_mu_mu=k_mm, k_eta_mu=k_em,
                       dt=grid.dt, dtau=grid.dtau, residual=residual,
                       n_nodes=rule.nodes.shape[0])
