"""Disorder averages and parameter sweeps built on the propagation and OCT layers.

Disorder is static and multiplicative on every bond. Realization ``m`` of a
study always uses the unit draws seeded by ``realization_seed(master, m)``,
scaled by the amplitude, so the same disorder pattern is reused across the
amplitude grid and any realization can be regenerated on its own.
Optimized pulses are never re-optimized per realization.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh_tridiagonal

from . import _kernels
from .model import ChainSpec, realization_seed, unit_offsets
from .oct import (
    Actuators,
    OCTProblem,
    OCTResult,
    WarmStart,
    ZeroGuess,
    optimize,
    reduced_fluence,
)
from .propagate import (
    TimeGrid,
    auto_alpha,
    final_states_batch,
    free_peak,
    initial_state,
    optimal_alpha,
    transfer_probabilities,
)

log = logging.getLogger(__name__)

# Weak penalty for the two-actuator scheme; 0.05 caps the clean N=40 yield near 0.994.
TWO_ACTUATOR_PENALTY = 0.002
ONE_ACTUATOR_PENALTY = 0.05


# -- disorder ---------------------------------------------------------------


@dataclass(frozen=True)
class FreeBase:
    """Uncontrolled evolution of ``spec`` evaluated at time ``t_final``."""

    spec: ChainSpec
    t_final: float

    @classmethod
    def at_peak(cls, spec: ChainSpec, t_max: float | None = None) -> FreeBase:
        return cls(spec, free_peak(spec, t_max).t_peak)


@dataclass(frozen=True)
class AtFixedT:
    """Evaluate at ``t`` (default: the base's operation time)."""

    t: float | None = None


@dataclass(frozen=True)
class AtPeak:
    """Per realization, the largest target population within ``window`` of the clean peak time.

    After the pulses end the chain evolves freely.
    """

    window: float = 1.0


@dataclass(frozen=True)
class DisorderStudy:
    base: object  # OCTResult or FreeBase
    amplitudes: tuple
    realizations: int = 2000
    master_seed: int = 0
    evaluation: object = field(default_factory=AtFixedT)

    def __post_init__(self):
        object.__setattr__(self, "amplitudes", tuple(float(a) for a in self.amplitudes))
        if self.realizations < 1:
            raise ValueError("need at least one realization")
        if any(a < 0 for a in self.amplitudes):
            raise ValueError("disorder amplitudes must be >= 0")


@dataclass(frozen=True)
class DisorderStats:
    amplitude: float
    mean: float
    std_error: float
    realizations: int


def _base_spec(base) -> ChainSpec:
    if isinstance(base, FreeBase):
        return base.spec
    return base.problem.spec


def _unit_draws(n_couplings: int, master_seed: int, indices) -> np.ndarray:
    return np.array([unit_offsets(n_couplings, realization_seed(master_seed, m)) for m in indices])


def _reduce(values: np.ndarray) -> tuple[float, float]:
    # sorted reduction: independent of realization order; identical samples give
    # their common value back exactly
    v = np.sort(values)
    d = v - v[0]
    mean = float(v[0] + np.mean(d))
    if v.size < 2:
        return mean, 0.0
    return mean, float(np.std(d, ddof=1) / math.sqrt(v.size))


def _free_populations(hops: np.ndarray, times) -> np.ndarray:
    # hops: (m, n-1); times: scalar or array -> (m,) or (m, len(times))
    out = []
    n = hops.shape[1] + 1
    ts = np.atleast_1d(times)
    for h in hops:
        e, v = eigh_tridiagonal(np.zeros(n), h)
        amp = np.exp(-1j * np.outer(ts, e)) @ (v[-1] * v[0])
        out.append(np.abs(amp) ** 2)
    out = np.array(out)
    return out[:, 0] if np.ndim(times) == 0 else out


def _controlled_peak(hop, result: OCTResult, lo: float, hi: float) -> float:
    grid = result.left_pulse.grid
    left = result.left_pulse
    right = result.right_pulse if result.problem.two_sided else None
    fa, fm, fb = left.stage_values()
    if right is None:
        ga = gm = gb = np.zeros(grid.n_steps)
    else:
        ga, gm, gb = right.stage_values()
    states = _kernels.rk4_path(hop, fa, fm, fb, ga, gm, gb, initial_state(hop.size + 1), grid.dt)
    t = grid.times
    mask = (t >= lo) & (t <= hi)
    best = float((np.abs(states[mask, -1]) ** 2).max()) if mask.any() else 0.0
    if hi > grid.t_final:
        ts = np.arange(grid.dt, hi - grid.t_final + 0.5 * grid.dt, grid.dt)
        e, v = eigh_tridiagonal(np.zeros(hop.size + 1), hop)
        c = v.T @ states[-1]
        amp = np.exp(-1j * np.outer(ts, e)) @ (v[-1] * c)
        best = max(best, float((np.abs(amp) ** 2).max()))
    return best


def _populations(base, hops: np.ndarray, evaluation) -> np.ndarray:
    if isinstance(base, FreeBase):
        if isinstance(evaluation, AtPeak):
            t0 = base.t_final
            ts = np.arange(max(0.0, t0 - evaluation.window), t0 + evaluation.window + 1e-12, 0.01)
            return _free_populations(hops, ts).max(axis=1)
        t = base.t_final if evaluation.t is None else evaluation.t
        return _free_populations(hops, t)

    grid = base.left_pulse.grid
    if isinstance(evaluation, AtPeak):
        t0 = base.peak_time()
        lo, hi = t0 - evaluation.window, t0 + evaluation.window
        return np.array([_controlled_peak(h, base, lo, hi) for h in hops])
    if evaluation.t is not None and not math.isclose(evaluation.t, grid.t_final):
        raise ValueError("controlled bases are evaluated at their operation time")
    right = base.right_pulse if base.problem.two_sided else None
    finals = final_states_batch(hops, base.left_pulse, right, initial_state(hops.shape[1] + 1), grid)
    return np.abs(finals[:, -1]) ** 2


def disorder_populations(study: DisorderStudy, amplitude: float, indices=None, threads: int = 1):
    """Target populations of the selected realizations at one amplitude."""
    spec = _base_spec(study.base)
    j = spec.couplings()
    if indices is None:
        indices = range(study.realizations)
    indices = list(indices)
    u = _unit_draws(j.size, study.master_seed, indices)
    hops = -(j * (1.0 + amplitude * u))
    if threads <= 1 or len(indices) < 2 * threads:
        return _populations(study.base, hops, study.evaluation)
    chunks = np.array_split(np.arange(len(indices)), threads)
    with ThreadPoolExecutor(threads) as pool:
        parts = list(pool.map(lambda c: _populations(study.base, hops[c], study.evaluation), chunks))
    return np.concatenate(parts)


def disorder_average(study: DisorderStudy, indices=None, threads: int = 1) -> list[DisorderStats]:
    """Mean target population and its standard error for every amplitude of the study."""
    stats = []
    for a in study.amplitudes:
        p = disorder_populations(study, a, indices, threads)
        mean, se = _reduce(p)
        stats.append(DisorderStats(a, mean, se, p.size))
    return stats


# -- sweep tables -----------------------------------------------------------


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class SweepTable:
    axis: str
    columns: list
    rows: list
    provenance: dict = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([_fmt(r.get(c, "")) for c in self.columns])


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


def _disorder_columns(amplitudes, prefix=""):
    cols = []
    for a in amplitudes:
        cols += [f"{prefix}mean_A={a:g}", f"{prefix}stderr_A={a:g}"]
    return cols


def _disorder_fields(base, amplitudes, realizations, seed, prefix="", evaluation=None, threads=1):
    if not amplitudes:
        return {}
    study = DisorderStudy(base, tuple(amplitudes), realizations, seed, evaluation or AtFixedT())
    out = {}
    for s in disorder_average(study, threads=threads):
        out[f"{prefix}mean_A={s.amplitude:g}"] = s.mean
        out[f"{prefix}stderr_A={s.amplitude:g}"] = s.std_error
    return out


@dataclass(frozen=True)
class OCTSettings:
    """Optimizer settings shared by every point of a sweep."""

    alpha_l: float = ONE_ACTUATOR_PENALTY
    alpha_r: float = ONE_ACTUATOR_PENALTY
    mixing: float = 0.5
    tol: float = 1e-8
    max_iters: int = 5000
    dt: float | None = None
    guess: object = field(default_factory=ZeroGuess)

    @classmethod
    def for_actuators(cls, actuators, **kw) -> OCTSettings:
        if Actuators(actuators) is Actuators.BOTH:
            kw.setdefault("alpha_l", TWO_ACTUATOR_PENALTY)
            kw.setdefault("alpha_r", TWO_ACTUATOR_PENALTY)
        return cls(**kw)

    def problem(self, spec, t_final, actuators, guess=None) -> OCTProblem:
        return OCTProblem(
            spec=spec,
            grid=TimeGrid.with_dt(t_final, self.dt),
            actuators=actuators,
            alpha_l=self.alpha_l,
            alpha_r=self.alpha_r,
            initial_guess=self.guess if guess is None else guess,
            max_iters=self.max_iters,
            tol=self.tol,
            mixing=self.mixing,
        )

    def as_dict(self) -> dict:
        return {
            "alpha_l": self.alpha_l, "alpha_r": self.alpha_r, "mixing": self.mixing,
            "tol": self.tol, "max_iters": self.max_iters, "dt": self.dt, "guess": repr(self.guess),
        }


def solve(settings: OCTSettings, spec, t_final, actuators, warm: OCTResult | None = None,
          always_cold: bool = True) -> tuple[OCTResult, str]:
    """Optimize from the cold guess and/or warm-started from ``warm``; keep the better objective.

    With ``always_cold=False`` the cold start only runs when the warm start
    fails to converge.
    """
    results = []
    if warm is not None:
        results.append((optimize(settings.problem(spec, t_final, actuators, WarmStart.from_result(warm))), "warm"))
    if warm is None or always_cold or not results[0][0].converged:
        results.append((optimize(settings.problem(spec, t_final, actuators)), "cold"))
    return max(results, key=lambda rs: rs[0].objective)


def _resolve_alpha(n_sites, alpha):
    if alpha is None or alpha == "auto":
        return auto_alpha(n_sites)
    return optimal_alpha(n_sites, [float(alpha)])


def _oct_row(result: OCTResult, source: str) -> dict:
    return {
        "yield": result.yield_,
        "objective": result.objective,
        "fluence": result.total_fluence,
        "reduced_fluence": reduced_fluence(result),
        "converged": result.converged,
        "iterations": result.iterations,
        "start": source,
    }


_OCT_COLS = ["yield", "objective", "fluence", "reduced_fluence", "converged", "iterations", "start"]


def time_sweep(
    n_sites: int,
    t_grid,
    actuators="left",
    alpha=None,
    settings: OCTSettings | None = None,
    continuation_step: float = 1.0,
) -> SweepTable:
    """One optimization per operation time, swept upward.

    Each point keeps the better of a cold start and a warm start continued
    from the previous point through intermediate times at most
    ``continuation_step`` apart.
    """
    actuators = Actuators(actuators)
    settings = settings or OCTSettings.for_actuators(actuators)
    ts = sorted(float(t) for t in t_grid)
    if not ts or ts[0] <= 0:
        raise ValueError("operation times must be positive")
    res = _resolve_alpha(n_sites, alpha)
    spec = ChainSpec(n_sites, res.alpha)
    h = spec.hamiltonian()
    rows = []
    prev, t_prev = None, None
    for t in ts:
        if prev is not None and continuation_step:
            tc = t_prev
            while tc + continuation_step < t - 1e-9:
                tc += continuation_step
                prev, _ = solve(settings, spec, tc, actuators, warm=prev, always_cold=False)
        result, source = solve(settings, spec, t, actuators, warm=prev)
        row = {"t_final": t, "t_over_n": t / n_sites,
               "free_population": float(transfer_probabilities(h, t)[0])}
        row.update(_oct_row(result, source))
        rows.append(row)
        prev, t_prev = result, t
    cfg = {"kind": "time-sweep", "n_sites": n_sites, "alpha": res.alpha, "actuators": actuators.value,
           "t_grid": ts, "continuation_step": continuation_step, **settings.as_dict()}
    return SweepTable(
        axis="t_final",
        columns=["t_final", "t_over_n", "free_population"] + _OCT_COLS,
        rows=rows,
        provenance={"config": cfg, "config_hash": config_hash(cfg),
                    "free_t_peak": res.t_peak, "free_p_peak": res.p_peak},
    )


@dataclass(frozen=True)
class DisorderSpec:
    amplitudes: tuple
    realizations: int = 2000
    master_seed: int = 0


def alpha_sweep(
    n_sites: int,
    alpha_grid,
    mode="free",
    t_final=None,
    disorder: DisorderSpec | None = None,
    settings: OCTSettings | None = None,
    threads: int = 1,
) -> SweepTable:
    """Clean and disorder-averaged yields as a function of the boundary coupling.

    ``mode`` is ``"free"``, ``"left"`` or ``"both"``. In the OCT modes every
    alpha shares one operation time, by default the free peak time at the
    free-evolution optimum; in free mode each alpha is read at its own peak.
    """
    alphas = [float(a) for a in alpha_grid]
    if not alphas:
        raise ValueError("alpha grid is empty")
    amps = tuple(disorder.amplitudes) if disorder else ()
    m = disorder.realizations if disorder else 0
    seed = disorder.master_seed if disorder else 0
    rows = []
    cfg = {"kind": "alpha-sweep", "n_sites": n_sites, "alphas": alphas, "mode": mode,
           "amplitudes": list(amps), "realizations": m, "master_seed": seed}
    if mode == "free":
        for a in alphas:
            spec = ChainSpec(n_sites, a)
            pk = free_peak(spec)
            row = {"alpha": a, "t_final": pk.t_peak, "yield": pk.p_peak, "at_window_edge": pk.at_window_edge}
            row.update(_disorder_fields(FreeBase(spec, pk.t_peak), amps, m, seed, threads=threads))
            rows.append(row)
        cols = ["alpha", "t_final", "yield", "at_window_edge"]
    else:
        actuators = Actuators(mode)
        settings = settings or OCTSettings.for_actuators(actuators)
        if t_final is None or t_final == "peak":
            t_final = auto_alpha(n_sites).t_peak
        elif t_final == "n":
            t_final = float(n_sites)
        t_final = float(t_final)
        cfg.update(settings.as_dict(), t_final=t_final)
        prev = None
        # descending alpha: strong couplings are easy, their pulses seed the weak ones
        order = sorted(range(len(alphas)), key=lambda i: -alphas[i])
        by_index = {}
        for i in order:
            spec = ChainSpec(n_sites, alphas[i])
            result, source = solve(settings, spec, t_final, actuators, warm=prev)
            row = {"alpha": alphas[i], "t_final": t_final}
            row.update(_oct_row(result, source))
            row.update(_disorder_fields(result, amps, m, seed, threads=threads))
            by_index[i] = row
            prev = result
        rows = [by_index[i] for i in range(len(alphas))]
        cols = ["alpha", "t_final"] + _OCT_COLS
    return SweepTable("alpha", cols + _disorder_columns(amps), rows,
                      {"config": cfg, "config_hash": config_hash(cfg)})


def disorder_sweep(base, amplitudes, realizations=2000, master_seed=0, evaluation=None,
                   threads: int = 1) -> SweepTable:
    """Disorder statistics of one base protocol as a table over the amplitude grid."""
    study = DisorderStudy(base, tuple(amplitudes), realizations, master_seed, evaluation or AtFixedT())
    rows = [
        {"amplitude": s.amplitude, "mean": s.mean, "std_error": s.std_error, "realizations": s.realizations,
         "master_seed": master_seed}
        for s in disorder_average(study, threads=threads)
    ]
    spec = _base_spec(base)
    cfg = {"kind": "disorder-sweep", "n_sites": spec.n_sites, "alpha": spec.alpha,
           "amplitudes": list(study.amplitudes), "realizations": realizations, "master_seed": master_seed,
           "base": "free" if isinstance(base, FreeBase) else base.problem.actuators.value,
           "evaluation": repr(study.evaluation)}
    return SweepTable("amplitude", ["amplitude", "mean", "std_error", "realizations", "master_seed"], rows,
                      {"config": cfg, "config_hash": config_hash(cfg)})


def length_scaling(
    n_grid,
    disorder_amplitudes=(),
    realizations: int = 2000,
    master_seed: int = 0,
    settings: OCTSettings | None = None,
    threads: int = 1,
) -> SweepTable:
    """Two-actuator pulses at ``T = T_peak(N)`` for a range of chain lengths.

    Each length is warm-started from the previous one, falling back to a cold
    start when the warm run does not converge. Disorder averages are taken at
    the operation time for the controlled chain and at the clean free peak for
    the free baseline.
    """
    ns = sorted(int(n) for n in n_grid)
    if not ns or ns[0] < 2:
        raise ValueError("chain lengths must be >= 2")
    settings = settings or OCTSettings.for_actuators(Actuators.BOTH)
    amps = tuple(float(a) for a in disorder_amplitudes)
    rows = []
    prev = None
    for n in ns:
        opt = auto_alpha(n)
        spec = ChainSpec(n, opt.alpha)
        result, source = solve(settings, spec, opt.t_peak, Actuators.BOTH, warm=prev, always_cold=False)
        row = {"n_sites": n, "alpha": opt.alpha, "t_final": opt.t_peak, "peak_time": result.peak_time(),
               "free_p_peak": opt.p_peak}
        row.update(_oct_row(result, source))
        row.update(_disorder_fields(result, amps, realizations, master_seed, threads=threads))
        row.update(_disorder_fields(FreeBase(spec, opt.t_peak), amps, realizations, master_seed,
                                    prefix="free_", threads=threads))
        rows.append(row)
        prev = result
    cfg = {"kind": "length-scaling", "n_grid": ns, "amplitudes": list(amps), "realizations": realizations,
           "master_seed": master_seed, **settings.as_dict()}
    cols = (["n_sites", "alpha", "t_final", "peak_time", "free_p_peak"] + _OCT_COLS
            + _disorder_columns(amps) + _disorder_columns(amps, "free_"))
    return SweepTable("n_sites", cols, rows, {"config": cfg, "config_hash": config_hash(cfg)})


def linear_fit(x, y) -> tuple[float, float, float]:
    """Least-squares slope, intercept and coefficient of determination."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), float(r2)
