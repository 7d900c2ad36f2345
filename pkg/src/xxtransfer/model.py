"""Chain specifications, static coupling disorder and single-excitation operators.

Units: couplings are measured in the bulk exchange J, time in 1/J, hbar = 1.
Site indices are zero-based throughout: the excitation starts on site 0 and
the transfer target is site ``n_sites - 1``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh_tridiagonal


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ChainSpec:
    """A boundary-controlled XX chain: couplings (alpha, J, ..., J, alpha)."""

    n_sites: int
    alpha: float
    bulk_coupling: float = 1.0

    def __post_init__(self):
        if int(self.n_sites) != self.n_sites or self.n_sites < 2:
            raise ValueError(f"n_sites must be an integer >= 2, got {self.n_sites!r}")
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise ValueError(f"alpha must be finite and >= 0, got {self.alpha!r}")
        if not np.isfinite(self.bulk_coupling):
            raise ValueError("bulk_coupling must be finite")

    def couplings(self) -> np.ndarray:
        return couplings_from_spec(self)

    def hamiltonian(self) -> SingleExcHamiltonian:
        return build_hamiltonian(self.couplings())


def couplings_from_spec(spec: ChainSpec) -> np.ndarray:
    """Return the N-1 bond couplings; both boundary bonds carry ``alpha``."""
    j = np.full(spec.n_sites - 1, float(spec.bulk_coupling))
    j[0] = spec.alpha
    j[-1] = spec.alpha
    return _frozen(j)


@dataclass(frozen=True)
class DisorderRealization:
    deltas: np.ndarray
    amplitude: float
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "deltas", _frozen(self.deltas))


def realization_seed(master_seed: int, index: int) -> int:
    """Counter-based 64-bit seed for realization ``index`` of a study.

    The seed depends only on ``(master_seed, index)``, so any subset of
    realizations can be regenerated in any order.
    """
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(index),))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def unit_offsets(n_couplings: int, seed: int) -> np.ndarray:
    """Uniform draws on [-1, 1]; disorder of amplitude A is ``A * unit_offsets``."""
    rng = np.random.default_rng(int(seed))
    return rng.uniform(-1.0, 1.0, size=n_couplings)


def sample_disorder(n_couplings: int, amplitude: float, seed: int) -> DisorderRealization:
    """Draw independent offsets uniform on [-A, A].

    The same seed gives the same underlying unit draws for every amplitude,
    so sweeps over A use common random numbers.
    """
    if amplitude < 0 or not np.isfinite(amplitude):
        raise ValueError(f"disorder amplitude must be >= 0, got {amplitude!r}")
    if n_couplings < 1:
        raise ValueError("need at least one coupling")
    deltas = amplitude * unit_offsets(n_couplings, seed)
    return DisorderRealization(deltas=deltas, amplitude=float(amplitude), seed=int(seed))


def apply_disorder(couplings, realization: DisorderRealization) -> np.ndarray:
    """Multiply each coupling by ``1 + delta_i``. Negative results are kept."""
    j = np.asarray(couplings, dtype=float)
    if j.shape != realization.deltas.shape:
        raise ValueError(
            f"coupling vector has length {j.size}, realization has {realization.deltas.size}"
        )
    return _frozen(j * (1.0 + realization.deltas))


@dataclass(frozen=True)
class SingleExcHamiltonian:
    """Real symmetric tridiagonal hopping matrix with zero diagonal."""

    off_diagonal: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "off_diagonal", _frozen(self.off_diagonal))

    @property
    def n_sites(self) -> int:
        return self.off_diagonal.size + 1

    def dense(self) -> np.ndarray:
        return np.diag(self.off_diagonal, 1) + np.diag(self.off_diagonal, -1)

    def eigh(self) -> tuple[np.ndarray, np.ndarray]:
        return eigh_tridiagonal(np.zeros(self.n_sites), self.off_diagonal)

    def with_controls(self, left: float = 0.0, right: float = 0.0) -> SingleExcHamiltonian:
        """Static Hamiltonian ``H0 - left*h_L - right*h_R``."""
        h = np.array(self.off_diagonal)
        h[0] -= left
        h[-1] -= right
        return SingleExcHamiltonian(h)


def build_hamiltonian(couplings) -> SingleExcHamiltonian:
    j = np.asarray(couplings, dtype=float).ravel()
    if j.size == 0:
        raise ValueError("at least one coupling is required")
    # flip-flop term of -(J/2)(XX + YY) has matrix element -J between |i>, |i+1>
    return SingleExcHamiltonian(-j)


class Side(enum.Enum):
    LEFT = "left"
    RIGHT = "right"


@dataclass(frozen=True)
class ControlOperator:
    side: Side
    n_sites: int
    bond: int = field(init=False)

    def __post_init__(self):
        if self.n_sites < 2:
            raise ValueError(f"n_sites must be >= 2, got {self.n_sites}")
        object.__setattr__(self, "side", Side(self.side))
        object.__setattr__(self, "bond", 0 if self.side is Side.LEFT else self.n_sites - 2)

    def dense(self) -> np.ndarray:
        m = np.zeros((self.n_sites, self.n_sites))
        m[self.bond, self.bond + 1] = m[self.bond + 1, self.bond] = 1.0
        return m

    def matvec(self, psi: np.ndarray) -> np.ndarray:
        out = np.zeros_like(psi)
        b = self.bond
        out[b] = psi[b + 1]
        out[b + 1] = psi[b]
        return out


def control_operator(side, n_sites: int) -> ControlOperator:
    return ControlOperator(Side(side), n_sites)


def basis_state(n_sites: int, site: int) -> np.ndarray:
    psi = np.zeros(n_sites, dtype=complex)
    psi[site] = 1.0
    return psi
