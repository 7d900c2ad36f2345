"""Time evolution in the single-excitation sector.

Two routes are provided: an exact eigendecomposition propagator for static
Hamiltonians, and fixed-step RK4 for boundary-controlled dynamics
``H(t) = H0 - F(t) h_L - G(t) h_R``. The exact route is the accuracy oracle
for the RK4 route.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from . import _kernels
from .model import ChainSpec, SingleExcHamiltonian, basis_state

DEFAULT_MAX_DT = 0.01
DEFAULT_COARSE_DT = 0.05
# search window for the free peak, in units of N; wider windows admit late
# secondary maxima at small alpha that outscore the first arrival
PEAK_WINDOW = 1.5
DEFAULT_ALPHA_GRID = np.round(np.arange(0.01, 1.5001, 0.01), 10)
NORM_TOL = 1e-8


class NumericalError(FloatingPointError):
    """Raised when a propagation produces non-finite amplitudes."""


def default_dt(t_final: float) -> float:
    return min(DEFAULT_MAX_DT, t_final / 2000.0)


@dataclass(frozen=True)
class TimeGrid:
    t_final: float
    n_steps: int

    def __post_init__(self):
        if not (self.t_final > 0 and np.isfinite(self.t_final)):
            raise ValueError(f"t_final must be positive, got {self.t_final!r}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps!r}")
        object.__setattr__(self, "n_steps", int(self.n_steps))
        object.__setattr__(self, "t_final", float(self.t_final))

    @classmethod
    def with_dt(cls, t_final: float, dt: float | None = None) -> TimeGrid:
        """Uniform grid whose step does not exceed ``dt`` (default ``min(0.01, T/2000)``)."""
        if dt is None:
            dt = default_dt(t_final)
        if dt <= 0:
            raise ValueError("dt must be positive")
        return cls(t_final, max(1, math.ceil(t_final / dt - 1e-9)))

    @property
    def dt(self) -> float:
        return self.t_final / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.t_final, self.n_steps + 1)


@dataclass(frozen=True)
class Pulse:
    """Control samples on the grid nodes.

    Between nodes the pulse is linear, or with ``hold=True`` it keeps the
    value of the left node (piecewise constant on each step).
    """

    grid: TimeGrid
    values: np.ndarray
    hold: bool = False

    def __post_init__(self):
        v = np.array(self.values, dtype=float).ravel()
        if v.size != self.grid.n_steps + 1:
            raise ValueError(f"expected {self.grid.n_steps + 1} samples, got {v.size}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, grid: TimeGrid) -> Pulse:
        return cls(grid, np.zeros(grid.n_steps + 1))

    @classmethod
    def constant(cls, grid: TimeGrid, value: float) -> Pulse:
        return cls(grid, np.full(grid.n_steps + 1, float(value)))

    @classmethod
    def from_function(cls, grid: TimeGrid, func) -> Pulse:
        return cls(grid, np.asarray(func(grid.times), dtype=float))

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if not self.hold:
            return np.interp(t, self.grid.times, self.values)
        k = np.clip(np.floor(t / self.grid.dt + 1e-9).astype(int), 0, self.grid.n_steps - 1)
        return self.values[k]

    def fluence(self) -> float:
        """Integral of F(t)**2 over [0, T]."""
        sq = self.values**2
        if self.hold:
            return float(sq[:-1].sum() * self.grid.dt)
        return float(np.trapezoid(sq, dx=self.grid.dt))

    def stage_values(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Start, midpoint and end values of every step, in forward order."""
        v = self.values
        if self.hold:
            a = np.ascontiguousarray(v[:-1])
            return a, a, a
        return v[:-1].copy(), 0.5 * (v[:-1] + v[1:]), v[1:].copy()

    def time_reversed(self) -> Pulse:
        if self.hold:
            raise ValueError("time reversal is only defined for linear pulses")
        return Pulse(self.grid, self.values[::-1])

    def resampled(self, grid: TimeGrid) -> Pulse:
        """Stretch this pulse onto ``grid``: F_new(t) = F(t * T_old / T_new)."""
        s = grid.times * (self.grid.t_final / grid.t_final)
        return Pulse(grid, self(s), hold=False)


@dataclass(frozen=True)
class Trajectory:
    grid: TimeGrid
    states: np.ndarray

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    @property
    def populations(self) -> np.ndarray:
        """Target-site population at every node."""
        return np.abs(self.states[:, -1]) ** 2

    @property
    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.states, axis=1)


def _check_finite(arr):
    if not np.all(np.isfinite(arr)):
        raise NumericalError("propagation produced non-finite amplitudes")


def _stages(pulse: Pulse | None, grid: TimeGrid):
    if pulse is None:
        z = np.zeros(grid.n_steps)
        return z, z, z
    if pulse.grid != grid:
        raise ValueError("pulse grid does not match the propagation grid")
    return pulse.stage_values()


def _check_dim(h: SingleExcHamiltonian, psi: np.ndarray):
    if psi.ndim != 1 or psi.size != h.n_sites:
        raise ValueError(f"state has shape {psi.shape}, Hamiltonian has {h.n_sites} sites")


def evolve_eigen(h: SingleExcHamiltonian, psi0, t: float) -> np.ndarray:
    """Exact ``exp(-i H t) psi0`` through the eigendecomposition of H."""
    psi0 = np.asarray(psi0, dtype=complex)
    _check_dim(h, psi0)
    e, v = h.eigh()
    return v @ (np.exp(-1j * e * t) * (v.T @ psi0))


def evolve_controlled(
    h0: SingleExcHamiltonian,
    left: Pulse | None,
    right: Pulse | None,
    psi0,
    grid: TimeGrid,
) -> Trajectory:
    """RK4 forward integration of ``i dpsi/dt = [H0 - F h_L - G h_R] psi``."""
    psi0 = np.asarray(psi0, dtype=complex)
    _check_dim(h0, psi0)
    if abs(np.linalg.norm(psi0) - 1.0) > NORM_TOL:
        raise ValueError("initial state is not normalized")
    fa, fm, fb = _stages(left, grid)
    ga, gm, gb = _stages(right, grid)
    states = _kernels.rk4_path(
        np.asarray(h0.off_diagonal, dtype=float), fa, fm, fb, ga, gm, gb, psi0.copy(), grid.dt
    )
    _check_finite(states)
    return Trajectory(grid, states)


def evolve_backward(
    h0: SingleExcHamiltonian,
    left: Pulse | None,
    right: Pulse | None,
    psi_final,
    grid: TimeGrid,
) -> Trajectory:
    """Integrate the same equation from ``T`` down to 0 starting at ``psi_final``.

    The returned states are indexed by forward time, so ``states[-1]`` is the
    input and ``states[0]`` the value at t = 0. No normalization is required.
    """
    psi_final = np.asarray(psi_final, dtype=complex)
    _check_dim(h0, psi_final)
    fa, fm, fb = _stages(left, grid)
    ga, gm, gb = _stages(right, grid)
    # reversed step order, start/end swapped
    states = _kernels.rk4_path(
        np.asarray(h0.off_diagonal, dtype=float),
        fb[::-1].copy(), fm[::-1].copy(), fa[::-1].copy(),
        gb[::-1].copy(), gm[::-1].copy(), ga[::-1].copy(),
        psi_final.copy(), -grid.dt,
    )
    _check_finite(states)
    return Trajectory(grid, states[::-1].copy())


def final_states_batch(
    off_diagonals: np.ndarray,
    left: Pulse | None,
    right: Pulse | None,
    psi0,
    grid: TimeGrid,
) -> np.ndarray:
    """Final RK4 states for many hopping vectors sharing the same pulses."""
    psi0 = np.asarray(psi0, dtype=complex)
    fa, fm, fb = _stages(left, grid)
    ga, gm, gb = _stages(right, grid)
    out = _kernels.rk4_final_batch(
        np.ascontiguousarray(off_diagonals, dtype=float), fa, fm, fb, ga, gm, gb, psi0.copy(), grid.dt
    )
    _check_finite(out)
    return out


def target_population(state) -> float:
    """Population of the last site, ``|c_N|**2``."""
    return float(abs(np.asarray(state)[-1]) ** 2)


def transfer_probabilities(h: SingleExcHamiltonian, times) -> np.ndarray:
    """Free ``|<N| exp(-iHt) |1>|**2`` at each time, from the eigendecomposition."""
    e, v = h.eigh()
    w = v[-1] * v[0]
    amp = np.exp(-1j * np.outer(np.atleast_1d(times), e)) @ w
    return np.abs(amp) ** 2


@dataclass(frozen=True)
class FreePeak:
    t_peak: float
    p_peak: float
    at_window_edge: bool = False


def free_peak_of(
    h: SingleExcHamiltonian, t_max: float, coarse_dt: float = DEFAULT_COARSE_DT
) -> FreePeak:
    """First global maximum of the free transfer probability on [0, t_max]."""
    if t_max <= 0:
        raise ValueError("t_max must be positive")
    n = max(2, math.ceil(t_max / coarse_dt)) + 1
    ts = np.linspace(0.0, t_max, n)
    p = transfer_probabilities(h, ts)
    i = int(np.argmax(p))
    if i == 0 or i == n - 1:
        return FreePeak(float(ts[i]), float(p[i]), at_window_edge=(i == n - 1))

    def neg(t):
        return -transfer_probabilities(h, t)[0]

    res = minimize_scalar(neg, bracket=(ts[i - 1], ts[i], ts[i + 1]), method="golden",
                          options={"xtol": 1e-8})
    t_best, p_best = float(res.x), float(-res.fun)
    if p_best < p[i]:
        t_best, p_best = float(ts[i]), float(p[i])
    return FreePeak(t_best, p_best, at_window_edge=False)


def free_peak(
    spec: ChainSpec, t_max: float | None = None, coarse_dt: float = DEFAULT_COARSE_DT
) -> FreePeak:
    """Peak time and probability of the uncontrolled transfer (window defaults to 1.5 N)."""
    if t_max is None:
        t_max = PEAK_WINDOW * spec.n_sites
    return free_peak_of(spec.hamiltonian(), t_max, coarse_dt)


@dataclass(frozen=True)
class AlphaOptimum:
    alpha: float
    t_peak: float
    p_peak: float
    alphas: np.ndarray
    peaks: tuple


def optimal_alpha(
    n_sites: int,
    alpha_grid,
    t_max: float | None = None,
    coarse_dt: float = DEFAULT_COARSE_DT,
    tie_tol: float = 1e-12,
) -> AlphaOptimum:
    """Grid maximizer of the free-evolution peak probability over ``alpha``.

    Ties (within ``tie_tol``) go to the smaller alpha.
    """
    alphas = np.sort(np.asarray(alpha_grid, dtype=float).ravel())
    if alphas.size == 0:
        raise ValueError("alpha grid is empty")
    peaks = tuple(free_peak(ChainSpec(n_sites, a), t_max, coarse_dt) for a in alphas)
    p = np.array([pk.p_peak for pk in peaks])
    i = int(np.flatnonzero(p >= p.max() - tie_tol)[0])
    return AlphaOptimum(float(alphas[i]), peaks[i].t_peak, peaks[i].p_peak, alphas, peaks)


def auto_alpha(n_sites: int, coarse_dt: float = DEFAULT_COARSE_DT) -> AlphaOptimum:
    """Free-evolution optimum on the default alpha grid."""
    return optimal_alpha(n_sites, DEFAULT_ALPHA_GRID, coarse_dt=coarse_dt)


def initial_state(n_sites: int) -> np.ndarray:
    return basis_state(n_sites, 0)


def target_state(n_sites: int) -> np.ndarray:
    return basis_state(n_sites, n_sites - 1)
