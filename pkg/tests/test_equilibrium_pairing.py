"""Which imaginary-time node the real-time noise is correlated with.

The noise synthesis gives ``<eta(t) mu_m> = K_eta_mu(t, tau_m)``.  A
second-order expansion in the bath coupling of the noise-averaged density
matrix shows that the joint equilibrium is stationary only when node
``tau_m`` acts at thermalisation time ``beta - tau_m``; ``thermalise``
therefore visits the nodes from the last to the first.
"""

import numpy as np
import pytest
from scipy.linalg import expm

from esln import BathSpec, SpinBosonDrive, TimeGrid, eval_kernels, thermalise

SX = np.array([[0, 1], [1, 0]], dtype=complex)
SZ = np.diag([1.0, -1.0]).astype(complex)
I2 = np.eye(2)


def test_last_node_acts_first():
    drive = SpinBosonDrive(1.0, -1.0)
    h, dtau, c = drive.hamiltonian(0.0), 1e-3, 40.0
    mu = np.zeros(1000)
    mu[-1] = c
    got = thermalise(drive, mu, dtau)
    kicked_first = expm(-(1.0 - dtau) * h) @ expm(-dtau * (h + c * SZ))
    kicked_last = expm(-dtau * (h + c * SZ)) @ expm(-(1.0 - dtau) * h)
    assert np.max(np.abs(got - kicked_first)) < 1e-4
    assert np.max(np.abs(got - kicked_last)) > 1e-2


def _trapezoid(n):
    w = np.ones(n + 1)
    w[0] = w[-1] = 0.5
    return w


def _sz_drift(mirrored, dt=1e-2, dtau=1e-2, t_end=2.0):
    """Largest change of the O(alpha) mean ``sz`` over ``[0, t_end]``."""
    bath = BathSpec(0.05, 20.0, 1.0)
    grid = TimeGrid.from_span(0.0, t_end, dt, 1.0, dtau)
    k = eval_kernels(bath, grid)
    n, m = grid.n_steps, grid.m_steps
    h = SpinBosonDrive(1.0, -1.0).hamiltonian(0.0)

    def vec(x):
        return x.reshape(-1, order="F")

    def unvec(v):
        return v.reshape(2, 2, order="F")

    liou = -1j * (np.kron(I2, h) - np.kron(h.T, I2))
    comm = 1j * (np.kron(I2, SZ) - np.kron(SZ.T, I2))
    anti = 0.5j * (np.kron(I2, SZ) + np.kron(SZ.T, I2))
    step = expm(liou * dt)
    u = [np.eye(4, dtype=complex)]
    for _ in range(n):
        u.append(step @ u[-1])
    u = np.array(u)

    # thermalisation: d rhobar / ds = -(H + mu(s) sz) rhobar from the identity
    taus = dtau * (np.arange(m) + 0.5)
    left = np.array([expm(-(1.0 - s) * h) for s in taus])
    right = np.array([expm(-s * h) for s in taus])
    rho0 = expm(-h)
    lags = dtau * np.arange(m + 1)
    second = np.zeros((2, 2), dtype=complex)
    for i in range(m):
        for j in range(i):
            kmm = np.interp(taus[i] - taus[j], lags, k.k_mu_mu)
            second += kmm * left[i] @ SZ @ expm(-(taus[i] - taus[j]) * h) @ SZ @ right[j]
    rhobar = rho0 + second * dtau * dtau
    sandwich = np.einsum("mij,jk,mkl->mil", left, SZ, right)

    # kernel at the node that acts at thermalisation time s
    nodes = 1.0 - taus if mirrored else taus
    kem = np.array([np.interp(nodes, lags, row.real) + 1j * np.interp(nodes, lags, row.imag)
                    for row in k.k_eta_mu[:n + 1]])
    eta_mu = np.array([vec(-np.einsum("m,mij->ij", kem[i], sandwich) * dtau)
                       for i in range(n + 1)])
    v0 = vec(rho0)
    free = np.einsum("nij,j->ni", u, v0)
    memory = np.array([comm @ u[i] @ (k.k_eta_eta[i] * comm + k.k_eta_nu[i] * anti)
                       for i in range(n + 1)])
    inner = np.zeros((n + 1, 4), dtype=complex)
    for s in range(1, n + 1):
        inner[s] = np.einsum("k,kij,kj->i", _trapezoid(s), memory[:s + 1],
                             free[s::-1][:s + 1]) * dt * dt
    outer = np.array([comm @ u[s] @ eta_mu[s] * dt for s in range(n + 1)])
    tr = np.trace(rhobar)
    values = []
    for i in range(0, n + 1, 10):
        total = u[i] @ vec(rhobar) + np.einsum("s,sij,sj->i", _trapezoid(i), u[i::-1],
                                                outer[:i + 1] + inner[:i + 1])
        values.append((np.trace(SZ @ unvec(total)) / tr).real)
    values = np.array(values)
    return np.max(np.abs(values - values[0]))


@pytest.mark.parametrize("mirrored, stationary", [(True, True), (False, False)])
def test_only_the_mirrored_pairing_is_stationary(mirrored, stationary):
    drift = _sz_drift(mirrored)
    if stationary:
        assert drift < 5e-4
    else:
        assert drift > 3e-2
