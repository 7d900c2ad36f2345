"""Optimal control of the end-to-end transfer by forward-backward iteration.

The objective is ``J = |<phi_F|Psi(T)>|**2 - a_L int F**2 - a_R int G**2``.
Each iteration propagates Psi forward under the current pulses, seeds the
costate ``chi(T) = |phi_F><phi_F|Psi(T)>``, propagates chi backward under the
same Hamiltonian and rebuilds the pulses from

    F(t) = -Im<chi(t)|h_L|Psi(t)> / a_L,   G(t) = -Im<chi(t)|h_R|Psi(t)> / a_R.

The new pulse is mixed with the old one, ``F <- (1 - eta) F + eta F_new``.
Because ``F_new - F`` is the L2 gradient of J divided by ``2 a_L``, the mixed
update is a gradient-ascent step of length ``eta / (2 a_L)`` whose fixed
points are exactly the solutions of the control equations.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from .model import ChainSpec, ControlOperator, Side
from .propagate import (
    NumericalError,
    Pulse,
    TimeGrid,
    Trajectory,
    evolve_backward,
    evolve_controlled,
    initial_state,
    target_state,
)

log = logging.getLogger(__name__)

MIXING_GROWTH = 1.2
MIN_MIXING = 1e-12


class Actuators(enum.Enum):
    LEFT = "left"
    BOTH = "both"


# initial guesses ---------------------------------------------------------


@dataclass(frozen=True)
class ZeroGuess:
    def pulse(self, grid: TimeGrid, side: Side) -> Pulse:
        return Pulse.zeros(grid)


@dataclass(frozen=True)
class ConstantGuess:
    value: float = 0.5

    def pulse(self, grid, side):
        return Pulse.constant(grid, self.value)


@dataclass(frozen=True)
class RandomGuess:
    seed: int = 0
    amplitude: float = 0.1

    def pulse(self, grid, side):
        # separate streams per actuator so LEFT and BOTH share the left guess
        rng = np.random.default_rng([int(self.seed), 0 if side is Side.LEFT else 1])
        return Pulse(grid, self.amplitude * rng.uniform(-1.0, 1.0, grid.n_steps + 1))


@dataclass(frozen=True)
class MonochromaticGuess:
    amplitude: float = 0.5
    omega: float = 1.0
    phase: float = 0.0

    def pulse(self, grid, side):
        return Pulse(grid, self.amplitude * np.cos(self.omega * grid.times + self.phase))


@dataclass(frozen=True)
class TwoToneGuess:
    """Superposition of two harmonics; frequencies are always caller supplied."""

    amplitudes: tuple[float, float]
    omegas: tuple[float, float]

    def pulse(self, grid, side):
        t = grid.times
        (a1, a2), (w1, w2) = self.amplitudes, self.omegas
        return Pulse(grid, a1 * np.cos(w1 * t) + a2 * np.cos(w2 * t))


@dataclass(frozen=True)
class WarmStart:
    """Pulses from a previous run, stretched onto the new operation time."""

    left: Pulse
    right: Pulse | None = None

    @classmethod
    def from_result(cls, result: OCTResult) -> WarmStart:
        return cls(result.left_pulse, result.right_pulse)

    def pulse(self, grid, side):
        src = self.left if side is Side.LEFT else self.right
        if src is None:
            return Pulse.zeros(grid)
        return src.resampled(grid)


GUESS_KINDS = {
    "zero": ZeroGuess,
    "constant": ConstantGuess,
    "random": RandomGuess,
    "monochromatic": MonochromaticGuess,
    "two-tone": TwoToneGuess,
}


# problem / result --------------------------------------------------------


@dataclass(frozen=True)
class OCTProblem:
    spec: ChainSpec
    grid: TimeGrid
    actuators: Actuators = Actuators.LEFT
    alpha_l: float = 0.05
    alpha_r: float = 0.05
    initial_guess: object = field(default_factory=ZeroGuess)
    max_iters: int = 5000
    tol: float = 1e-8
    mixing: float = 0.5
    stationarity_tol: float = 5e-4

    def __post_init__(self):
        object.__setattr__(self, "actuators", Actuators(self.actuators))
        if not self.alpha_l > 0:
            raise ValueError("alpha_l must be positive")
        if self.actuators is Actuators.BOTH and not self.alpha_r > 0:
            raise ValueError("alpha_r must be positive with two actuators")
        if not 0 < self.mixing <= 1:
            raise ValueError("mixing must lie in (0, 1]")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")

    @property
    def two_sided(self) -> bool:
        return self.actuators is Actuators.BOTH

    def initial_pulses(self) -> tuple[Pulse, Pulse]:
        left = self.initial_guess.pulse(self.grid, Side.LEFT)
        if self.two_sided:
            right = self.initial_guess.pulse(self.grid, Side.RIGHT)
        else:
            right = Pulse.zeros(self.grid)
        return left, right


@dataclass
class OCTResult:
    left_pulse: Pulse
    right_pulse: Pulse
    yield_: float
    fluences: tuple[float, float]
    j_history: np.ndarray  # rows (J1, J2, J)
    iterations: int
    converged: bool
    final_trajectory: Trajectory
    best_iteration: int = 0
    max_overlap_drift: float = 0.0
    max_costate_norm_drift: float = 0.0
    rejected_steps: int = 0
    problem: OCTProblem | None = None

    @property
    def t_final(self) -> float:
        return self.left_pulse.grid.t_final

    @property
    def total_fluence(self) -> float:
        return self.fluences[0] + self.fluences[1]

    @property
    def objective(self) -> float:
        return float(self.j_history[self.best_iteration, 2])

    def peak_time(self) -> float:
        """Grid time at which the target population is largest during the pulse."""
        traj = self.final_trajectory
        return float(traj.grid.times[int(np.argmax(traj.populations))])


# building blocks ---------------------------------------------------------


def functional(traj: Trajectory, left: Pulse, right: Pulse, problem: OCTProblem):
    """Return ``(J1, J2, J)``; the dynamics constraint term vanishes on a solved trajectory."""
    if traj.grid != left.grid or traj.grid != right.grid:
        raise ValueError("trajectory and pulses are on different grids")
    target = target_state(traj.states.shape[1])
    j1 = float(abs(np.vdot(traj.final, target)) ** 2)
    j2 = -problem.alpha_l * left.fluence()
    if problem.two_sided:
        j2 -= problem.alpha_r * right.fluence()
    return j1, j2, j1 + j2


def terminal_costate(psi_T, target) -> np.ndarray:
    """``chi(T) = |phi_F> <phi_F|Psi(T)>``."""
    target = np.asarray(target, dtype=complex)
    return target * np.vdot(target, psi_T)


def pulse_update(chi, psi, op: ControlOperator, penalty: float) -> float:
    """Control value ``-Im<chi|h|psi> / penalty`` at one instant."""
    if not penalty > 0:
        raise ValueError("penalty must be positive")
    return float(-np.vdot(chi, op.matvec(np.asarray(psi))).imag / penalty)


def _pulse_samples(chi_states, psi_states, bond: int, penalty: float) -> np.ndarray:
    # Im<chi|h|psi> on every node at once; h couples sites bond and bond + 1
    a, b = bond, bond + 1
    m = np.conj(chi_states[:, a]) * psi_states[:, b] + np.conj(chi_states[:, b]) * psi_states[:, a]
    return -m.imag / penalty


def candidate_pulses(psi: Trajectory, chi: Trajectory, problem: OCTProblem):
    n = problem.spec.n_sites
    f = _pulse_samples(chi.states, psi.states, 0, problem.alpha_l)
    g = None
    if problem.two_sided:
        g = _pulse_samples(chi.states, psi.states, n - 2, problem.alpha_r)
    return f, g


def optimize(problem: OCTProblem, callback=None) -> OCTResult:
    """Run the forward-backward iteration and return the best iterate.

    ``callback(iteration, (J1, J2, J))`` is called after every forward pass.
    """
    h0 = problem.spec.hamiltonian()
    n = problem.spec.n_sites
    grid = problem.grid
    psi0 = initial_state(n)
    target = target_state(n)
    eta = problem.mixing
    left, right = problem.initial_pulses()

    def forward(lp, rp):
        try:
            tr = evolve_controlled(h0, lp, rp if problem.two_sided else None, psi0, grid)
        except NumericalError as exc:
            raise NumericalError(f"iteration {it}: {exc}") from exc
        jj = functional(tr, lp, rp, problem)
        if not np.all(np.isfinite(jj)):
            raise NumericalError(f"iteration {it}: non-finite functional {jj}")
        return tr, jj

    it = 0
    traj, j = forward(left, right)
    history = [j]
    if callback is not None:
        callback(0, j)
    converged = False
    overlap_drift = 0.0
    norm_drift = 0.0
    rejected = 0
    best = (j, left, right, traj, 0)
    while it < problem.max_iters:
        chi_T = terminal_costate(traj.final, target)
        chi = evolve_backward(h0, left, right if problem.two_sided else None, chi_T, grid)
        overlaps = np.einsum("ij,ij->i", np.conj(chi.states), traj.states)
        overlap_drift = max(overlap_drift, float(np.abs(overlaps - overlaps[-1]).max()))
        norm_drift = max(norm_drift, float(np.abs(chi.norms - np.linalg.norm(chi_T)).max()))
        f_new, g_new = candidate_pulses(traj, chi, problem)
        mismatch = _relative_mismatch(left, right, f_new, g_new)

        it += 1
        while True:
            trial_l = Pulse(grid, (1 - eta) * left.values + eta * f_new)
            trial_r = right
            if problem.two_sided:
                trial_r = Pulse(grid, (1 - eta) * right.values + eta * g_new)
            trial_traj, trial_j = forward(trial_l, trial_r)
            if trial_j[2] >= j[2] or eta < MIN_MIXING:
                break
            # overshoot: the update decreased J, retry with a shorter step
            eta *= 0.5
            rejected += 1

        dj = trial_j[2] - j[2]
        left, right, traj, j = trial_l, trial_r, trial_traj, trial_j
        history.append(j)
        if callback is not None:
            callback(it, j)
        if j[2] > best[0][2]:
            best = (j, left, right, traj, it)
        eta = min(problem.mixing, eta * MIXING_GROWTH)
        if abs(dj) < problem.tol and mismatch < problem.stationarity_tol:
            converged = True
            break

    (j1, _, _), left, right, traj, best_it = best
    log.info("optimize: N=%d T=%.4g %s iters=%d converged=%s J1=%.6f",
             n, grid.t_final, problem.actuators.value, it, converged, j1)
    return OCTResult(
        left_pulse=left,
        right_pulse=right,
        yield_=j1,
        fluences=(left.fluence(), right.fluence() if problem.two_sided else 0.0),
        j_history=np.array(history),
        iterations=it,
        converged=converged,
        final_trajectory=traj,
        best_iteration=best_it,
        max_overlap_drift=overlap_drift,
        max_costate_norm_drift=norm_drift,
        rejected_steps=rejected,
        problem=problem,
    )


def _relative_mismatch(left, right, f, g) -> float:
    num = np.sum((f - left.values) ** 2)
    den = np.sum(left.values**2)
    if g is not None:
        num += np.sum((g - right.values) ** 2)
        den += np.sum(right.values**2)
    return float(np.sqrt(num / den)) if den > 0 else float(np.sqrt(num))


def stationarity_defect(result: OCTResult, problem: OCTProblem) -> float:
    """Relative L2 mismatch between the stored pulses and those rebuilt from Psi, chi."""
    h0 = problem.spec.hamiltonian()
    n = problem.spec.n_sites
    right = result.right_pulse if problem.two_sided else None
    traj = evolve_controlled(h0, result.left_pulse, right, initial_state(n), problem.grid)
    chi = evolve_backward(h0, result.left_pulse, right, terminal_costate(traj.final, target_state(n)),
                          problem.grid)
    f, g = candidate_pulses(traj, chi, problem)
    return _relative_mismatch(result.left_pulse, result.right_pulse, f, g)


def reduced_fluence(result: OCTResult) -> float:
    """Total fluence divided by the operation time."""
    return result.total_fluence / result.t_final


def symmetry_defect(left: Pulse, right: Pulse) -> float:
    """``||G(t) - F(T - t)|| / ||F||`` on the shared grid."""
    if left.grid != right.grid:
        raise ValueError("pulses are on different grids")
    norm = np.linalg.norm(left.values)
    if norm == 0:
        raise ValueError("left pulse is identically zero")
    return float(np.linalg.norm(right.values - left.values[::-1]) / norm)
