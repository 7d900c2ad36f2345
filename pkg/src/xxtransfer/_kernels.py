"""Compiled RK4 loops for the tridiagonal single-excitation problem.

A controlled step needs three samples per actuator: start, midpoint and end
of the step. Callers supply these as arrays ordered in integration order, so
the same kernel serves forward (dt > 0) and backward (dt < 0) propagation.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def _rhs(hop, f, g, psi, out):
    # out = -i H psi with H = tridiag(hop) - f*h_L - g*h_R
    n = psi.shape[0]
    last = n - 2
    if n == 2:
        h = hop[0] - f - g
        out[0] = -1j * (h * psi[1])
        out[1] = -1j * (h * psi[0])
        return
    hl = hop[0] - f
    hr = hop[last] - g
    out[0] = -1j * (hl * psi[1])
    prev = hl
    for i in range(1, n - 1):
        nxt = hop[i]
        if i == last:
            nxt = hr
        out[i] = -1j * (prev * psi[i - 1] + nxt * psi[i + 1])
        prev = nxt
    out[n - 1] = -1j * (prev * psi[n - 2])


@njit(cache=True)
def _step(hop, fa, fm, fb, ga, gm, gb, psi, dt, k1, k2, k3, k4, tmp):
    n = psi.shape[0]
    half = 0.5 * dt
    _rhs(hop, fa, ga, psi, k1)
    for i in range(n):
        tmp[i] = psi[i] + half * k1[i]
    _rhs(hop, fm, gm, tmp, k2)
    for i in range(n):
        tmp[i] = psi[i] + half * k2[i]
    _rhs(hop, fm, gm, tmp, k3)
    for i in range(n):
        tmp[i] = psi[i] + dt * k3[i]
    _rhs(hop, fb, gb, tmp, k4)
    sixth = dt / 6.0
    for i in range(n):
        psi[i] += sixth * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])


@njit(cache=True)
def rk4_path(hop, fa, fm, fb, ga, gm, gb, psi0, dt):
    """Integrate and return every node state, shape (n_steps + 1, n)."""
    n = psi0.shape[0]
    nsteps = fa.shape[0]
    out = np.empty((nsteps + 1, n), dtype=np.complex128)
    psi = psi0.copy()
    out[0] = psi
    k1 = np.empty(n, dtype=np.complex128)
    k2 = np.empty_like(k1)
    k3 = np.empty_like(k1)
    k4 = np.empty_like(k1)
    tmp = np.empty_like(k1)
    for k in range(nsteps):
        _step(hop, fa[k], fm[k], fb[k], ga[k], gm[k], gb[k], psi, dt, k1, k2, k3, k4, tmp)
        out[k + 1] = psi
    return out


@njit(cache=True, nogil=True)
def rk4_final_batch(hops, fa, fm, fb, ga, gm, gb, psi0, dt):
    """Final states for a batch of hopping vectors ``hops`` (m, n-1) under shared pulses."""
    m = hops.shape[0]
    n = psi0.shape[0]
    nsteps = fa.shape[0]
    out = np.empty((m, n), dtype=np.complex128)
    k1 = np.empty(n, dtype=np.complex128)
    k2 = np.empty_like(k1)
    k3 = np.empty_like(k1)
    k4 = np.empty_like(k1)
    tmp = np.empty_like(k1)
    for r in range(m):
        psi = psi0.copy()
        hop = hops[r]
        for k in range(nsteps):
            _step(hop, fa[k], fm[k], fb[k], ga[k], gm[k], gb[k], psi, dt, k1, k2, k3, k4, tmp)
        out[r] = psi
    return out
