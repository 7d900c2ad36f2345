"""Command-line front end.

Every run writes ``manifest.json`` plus CSV tables into its output directory.
A manifest can be passed back through ``--config`` to repeat the run.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .experiments import (
    ONE_ACTUATOR_PENALTY,
    TWO_ACTUATOR_PENALTY,
    AtFixedT,
    AtPeak,
    FreeBase,
    OCTSettings,
    alpha_sweep,
    config_hash,
    disorder_sweep,
    length_scaling,
    solve,
    time_sweep,
    DisorderSpec,
)
from .model import ChainSpec
from .oct import (
    GUESS_KINDS,
    ConstantGuess,
    MonochromaticGuess,
    RandomGuess,
    TwoToneGuess,
    ZeroGuess,
    reduced_fluence,
    stationarity_defect,
    symmetry_defect,
)
from .propagate import (
    DEFAULT_MAX_DT,
    NumericalError,
    TimeGrid,
    auto_alpha,
    initial_state,
    optimal_alpha,
    PEAK_WINDOW,
)

log = logging.getLogger("xxtransfer")

OUT_ENV = "XXTRANSFER_OUT"
EXPERIMENTS = ("free-evolve", "optimize", "time-sweep", "alpha-sweep", "disorder-sweep", "length-scaling")

# keys excluded when comparing or hashing configs
_VOLATILE = ("out", "threads")


class ConfigError(ValueError):
    def __init__(self, name, message):
        super().__init__(f"{name}: {message}")
        self.field = name


@dataclass
class RunConfig:
    experiment: str = "optimize"
    n: int = 10
    alpha: str = "auto"
    t: str = "peak"
    actuators: str = "left"
    alpha_l: float | None = None
    alpha_r: float | None = None
    guess: str = "zero"
    guess_value: float = 0.5
    guess_amplitude: float = 0.1
    guess_omegas: list = field(default_factory=lambda: [1.0])
    guess_seed: int = 0
    mixing: float = 0.5
    tol: float = 1e-8
    max_iters: int = 5000
    dt: float | None = None
    coarse_dt: float = 0.05
    amplitudes: list = field(default_factory=lambda: [0.0, 0.05, 0.1, 0.2, 0.5])
    realizations: int = 2000
    seed: int = 0
    base: str = "left"
    evaluation: str = "fixed"
    window: float = 1.0
    t_grid: list = field(default_factory=lambda: [0.4, 0.5, 0.65, 0.8, 1.0, 1.25, 1.5])
    alpha_grid: list = field(default_factory=lambda: [round(0.05 * k, 2) for k in range(1, 21)])
    n_grid: list = field(default_factory=lambda: [10, 15, 20, 25, 30, 35, 40])
    mode: str = "free"
    continuation_step: float = 1.0
    threads: int = 1
    out: str | None = None

    def reproducible(self) -> dict:
        d = asdict(self)
        for k in _VOLATILE:
            d.pop(k)
        return d


_FIELD_TYPES = {
    "n": int, "max_iters": int, "realizations": int, "seed": int, "guess_seed": int, "threads": int,
    "mixing": float, "tol": float, "coarse_dt": float, "guess_value": float, "guess_amplitude": float,
    "window": float, "continuation_step": float,
    "alpha_l": float, "alpha_r": float, "dt": float,
    "amplitudes": float, "t_grid": float, "alpha_grid": float, "n_grid": int, "guess_omegas": float,
}
_LISTS = {"amplitudes", "t_grid", "alpha_grid", "n_grid", "guess_omegas"}
_CHOICES = {
    "experiment": EXPERIMENTS,
    "actuators": ("left", "both"),
    "guess": tuple(GUESS_KINDS),
    "base": ("free", "left", "both"),
    "evaluation": ("fixed", "peak"),
    "mode": ("free", "left", "both"),
}


def _coerce(name, value):
    if name not in {f.name for f in fields(RunConfig)}:
        raise ConfigError(name, "unknown setting")
    if value is None or (isinstance(value, str) and value.strip().lower() in ("", "none", "null")):
        return None
    typ = _FIELD_TYPES.get(name)
    try:
        if name in _LISTS:
            if isinstance(value, str):
                value = [v for v in value.replace(",", " ").split() if v]
            return [typ(v) for v in value]
        if typ is not None:
            if typ is int and isinstance(value, float) and not value.is_integer():
                raise ValueError
            return typ(value)
    except (TypeError, ValueError):
        raise ConfigError(name, f"cannot interpret {value!r}") from None
    return str(value)


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", "expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def load_config_file(path) -> dict:
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        data = json.loads(text)
        # a manifest carries the full config under "config"
        return dict(data.get("config", data))
    return parse_config_text(text)


def make_config(overrides: dict) -> RunConfig:
    cfg = RunConfig()
    for key, value in overrides.items():
        key = key.replace("-", "_")
        setattr(cfg, key, _coerce(key, value))
    validate_fields(cfg)
    return cfg


def validate_fields(cfg: RunConfig) -> None:
    for name, choices in _CHOICES.items():
        if getattr(cfg, name) not in choices:
            raise ConfigError(name, f"must be one of {', '.join(choices)}; got {getattr(cfg, name)!r}")
    if cfg.n is None or cfg.n < 2:
        raise ConfigError("n", "chain length must be >= 2")
    if cfg.alpha != "auto":
        try:
            a = float(cfg.alpha)
        except ValueError:
            raise ConfigError("alpha", f"expected 'auto' or a number, got {cfg.alpha!r}") from None
        if not a >= 0:
            raise ConfigError("alpha", "must be >= 0")
    if cfg.t not in ("peak", "n"):
        try:
            t = float(cfg.t)
        except ValueError:
            raise ConfigError("t", f"expected 'peak', 'n' or a positive number, got {cfg.t!r}") from None
        if not t > 0:
            raise ConfigError("t", "operation time must be positive")
    for name in ("alpha_l", "alpha_r"):
        v = getattr(cfg, name)
        if v is not None and not v > 0:
            raise ConfigError(name, "penalty must be positive")
    if not 0 < cfg.mixing <= 1:
        raise ConfigError("mixing", "must lie in (0, 1]")
    if cfg.dt is not None and not cfg.dt > 0:
        raise ConfigError("dt", "must be positive")
    if not cfg.coarse_dt > 0:
        raise ConfigError("coarse_dt", "must be positive")
    if cfg.realizations < 1:
        raise ConfigError("realizations", "must be >= 1")
    if any(a < 0 for a in cfg.amplitudes):
        raise ConfigError("amplitudes", "must be >= 0")
    if cfg.max_iters < 0:
        raise ConfigError("max_iters", "must be >= 0")
    if cfg.threads < 1:
        raise ConfigError("threads", "must be >= 1")
    if cfg.guess == "two-tone" and len(cfg.guess_omegas) != 2:
        raise ConfigError("guess_omegas", "two-tone guess needs exactly two frequencies")
    if any(n < 2 for n in cfg.n_grid):
        raise ConfigError("n_grid", "chain lengths must be >= 2")


# -- resolution helpers -----------------------------------------------------


def resolve_alpha(cfg: RunConfig, n=None):
    n = cfg.n if n is None else n
    if cfg.alpha == "auto":
        return auto_alpha(n, coarse_dt=cfg.coarse_dt)
    return optimal_alpha(n, [float(cfg.alpha)], coarse_dt=cfg.coarse_dt)


def resolve_t(cfg: RunConfig, t_peak: float) -> float:
    if cfg.t == "peak":
        return t_peak
    if cfg.t == "n":
        return float(cfg.n)
    return float(cfg.t)


def make_guess(cfg: RunConfig):
    if cfg.guess == "zero":
        return ZeroGuess()
    if cfg.guess == "constant":
        return ConstantGuess(cfg.guess_value)
    if cfg.guess == "random":
        return RandomGuess(cfg.guess_seed, cfg.guess_amplitude)
    if cfg.guess == "monochromatic":
        return MonochromaticGuess(cfg.guess_amplitude, cfg.guess_omegas[0])
    return TwoToneGuess((cfg.guess_amplitude, cfg.guess_amplitude), tuple(cfg.guess_omegas))


def make_settings(cfg: RunConfig, actuators: str) -> OCTSettings:
    default = TWO_ACTUATOR_PENALTY if actuators == "both" else ONE_ACTUATOR_PENALTY
    return OCTSettings(
        alpha_l=cfg.alpha_l if cfg.alpha_l is not None else default,
        alpha_r=cfg.alpha_r if cfg.alpha_r is not None else default,
        mixing=cfg.mixing, tol=cfg.tol, max_iters=cfg.max_iters, dt=cfg.dt, guess=make_guess(cfg),
    )


def validate(cfg: RunConfig) -> dict:
    """Derived quantities and warnings, computed without running the experiment."""
    warnings = []
    opt = resolve_alpha(cfg)
    t_final = resolve_t(cfg, opt.t_peak)
    grid = TimeGrid.with_dt(t_final, cfg.dt)
    if cfg.dt is not None and cfg.dt > DEFAULT_MAX_DT:
        warnings.append(f"dt={cfg.dt:g} exceeds {DEFAULT_MAX_DT:g}; RK4 accuracy contract (1e-7 vs exact) may not hold")
    if cfg.experiment in ("optimize", "disorder-sweep") and t_final < 0.5 * cfg.n:
        warnings.append(f"T={t_final:.4g} is below the speed limit N/2={0.5 * cfg.n:g}; transfer is expected to fail")
    if cfg.experiment == "time-sweep" and min(cfg.t_grid) < 0.5:
        warnings.append("time grid reaches below T/N = 0.5, where transfer is expected to fail")
    # forward + backward + ~0.3 rejected trial per iteration, each n_steps RK4 steps on N sites
    cost = 3.3 * grid.n_steps * cfg.n * (cfg.max_iters + 1)
    return {
        "alpha": opt.alpha,
        "t_final": t_final,
        "dt": grid.dt,
        "n_steps": grid.n_steps,
        "estimated_site_steps_per_optimization": cost,
        "warnings": warnings,
    }


# -- output -----------------------------------------------------------------


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


def write_pulses(path, result):
    t = result.left_pulse.grid.times
    _write_rows(path, ["t", "F", "G"], zip(t, result.left_pulse.values, result.right_pulse.values))


def write_trajectory(path, times, states):
    p = np.abs(states[:, -1]) ** 2
    err = np.linalg.norm(states, axis=1) - 1.0
    _write_rows(path, ["t", "P_target", "norm_error"], zip(times, p, err))


def write_history(path, result):
    _write_rows(path, ["iteration", "J1", "J2", "J"],
                ((i, *row) for i, row in enumerate(result.j_history)))


def _pulse_activity(result) -> dict:
    # when the controls have delivered 99% of their fluence vs when the
    # target population first reaches half its final value
    t = result.left_pulse.grid.times
    energy = result.left_pulse.values**2 + result.right_pulse.values**2
    cum = np.cumsum(energy)
    out = {"t_fluence_99": None, "t_half_population": None}
    if cum[-1] > 0:
        out["t_fluence_99"] = float(t[np.searchsorted(cum, 0.99 * cum[-1])])
    pops = result.final_trajectory.populations
    if pops[-1] > 0:
        out["t_half_population"] = float(t[np.argmax(pops >= 0.5 * pops[-1])])
    return out


def _oct_summary(result, problem) -> dict:
    d = {
        "yield": result.yield_,
        "objective": result.objective,
        "fluence_left": result.fluences[0],
        "fluence_right": result.fluences[1],
        "reduced_fluence": reduced_fluence(result),
        "iterations": result.iterations,
        "converged": result.converged,
        "best_iteration": result.best_iteration,
        "rejected_steps": result.rejected_steps,
        "max_overlap_drift": result.max_overlap_drift,
        "stationarity_defect": stationarity_defect(result, problem),
        "pulse_activity": _pulse_activity(result),
    }
    if problem.two_sided and np.any(result.left_pulse.values):
        d["symmetry_defect"] = symmetry_defect(result.left_pulse, result.right_pulse)
    return d


def output_dir(cfg: RunConfig) -> Path:
    if cfg.out:
        path = Path(cfg.out)
    else:
        root = Path(os.environ.get(OUT_ENV, "runs"))
        path = root / f"{cfg.experiment}-{config_hash(cfg.reproducible())}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _versions() -> dict:
    import numba
    import scipy
    return {"xxtransfer": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


# -- experiments ------------------------------------------------------------


def _run_free(cfg, out):
    opt = resolve_alpha(cfg)
    spec = ChainSpec(cfg.n, opt.alpha)
    h = spec.hamiltonian()
    grid = TimeGrid.with_dt(PEAK_WINDOW * cfg.n, cfg.dt)
    e, v = h.eigh()
    c0 = v.T @ initial_state(cfg.n)
    states = (v @ (np.exp(-1j * np.outer(e, grid.times)) * c0[:, None])).T
    write_trajectory(out / "trajectory.csv", grid.times, states)
    chosen = opt.peaks[int(np.flatnonzero(opt.alphas == opt.alpha)[0])]
    return {"alpha": opt.alpha}, {"t_peak": opt.t_peak, "p_peak": opt.p_peak,
                                  "at_window_edge": chosen.at_window_edge}


def _optimized_base(cfg, actuators, out):
    opt = resolve_alpha(cfg)
    spec = ChainSpec(cfg.n, opt.alpha)
    t_final = resolve_t(cfg, opt.t_peak)
    settings = make_settings(cfg, actuators)
    result, _ = solve(settings, spec, t_final, actuators)
    problem = result.problem
    write_pulses(out / "pulses.csv", result)
    write_trajectory(out / "trajectory.csv", problem.grid.times, result.final_trajectory.states)
    write_history(out / "history.csv", result)
    resolved = {"alpha": opt.alpha, "t_final": t_final, "free_t_peak": opt.t_peak, "free_p_peak": opt.p_peak,
                "alpha_l": settings.alpha_l, "alpha_r": settings.alpha_r, "dt": problem.grid.dt}
    return result, resolved, _oct_summary(result, problem)


def _run_optimize(cfg, out):
    _, resolved, summary = _optimized_base(cfg, cfg.actuators, out)
    return resolved, summary


def _run_disorder(cfg, out):
    evaluation = AtPeak(cfg.window) if cfg.evaluation == "peak" else AtFixedT()
    if cfg.base == "free":
        opt = resolve_alpha(cfg)
        spec = ChainSpec(cfg.n, opt.alpha)
        t_final = resolve_t(cfg, opt.t_peak)
        base = FreeBase(spec, t_final)
        resolved, summary = {"alpha": opt.alpha, "t_final": t_final}, {}
    else:
        base, resolved, summary = _optimized_base(cfg, cfg.base, out)
    table = disorder_sweep(base, cfg.amplitudes, cfg.realizations, cfg.seed, evaluation, threads=cfg.threads)
    table.to_csv(out / "disorder.csv")
    summary["disorder"] = table.rows
    return resolved, summary


def _run_time_sweep(cfg, out):
    opt = resolve_alpha(cfg)
    table = time_sweep(cfg.n, [x * cfg.n for x in cfg.t_grid], cfg.actuators, alpha=opt.alpha,
                       settings=make_settings(cfg, cfg.actuators), continuation_step=cfg.continuation_step)
    table.to_csv(out / "time_sweep.csv")
    return {"alpha": opt.alpha, "free_t_peak": opt.t_peak, "free_p_peak": opt.p_peak}, {"rows": len(table.rows)}


def _run_alpha_sweep(cfg, out):
    disorder = None
    if cfg.amplitudes:
        disorder = DisorderSpec(tuple(cfg.amplitudes), cfg.realizations, cfg.seed)
    t_final = None
    if cfg.mode != "free":
        t_final = resolve_t(cfg, auto_alpha(cfg.n, coarse_dt=cfg.coarse_dt).t_peak)
    table = alpha_sweep(cfg.n, cfg.alpha_grid, cfg.mode, t_final, disorder,
                        settings=make_settings(cfg, cfg.mode) if cfg.mode != "free" else None,
                        threads=cfg.threads)
    table.to_csv(out / "alpha_sweep.csv")
    y = table.column("yield")
    i = int(np.argmax(y))
    return {"t_final": t_final}, {"best_alpha": table.rows[i]["alpha"], "best_yield": float(y[i])}


def _run_length_scaling(cfg, out):
    from .experiments import linear_fit
    table = length_scaling(cfg.n_grid, cfg.amplitudes, cfg.realizations, cfg.seed,
                           settings=make_settings(cfg, "both"), threads=cfg.threads)
    table.to_csv(out / "length_scaling.csv")
    slope, intercept, r2 = linear_fit(table.column("n_sites"), table.column("peak_time"))
    return {}, {"peak_time_slope": slope, "peak_time_intercept": intercept, "peak_time_r2": r2,
                "min_yield": float(table.column("yield").min())}


_RUNNERS = {
    "free-evolve": _run_free,
    "optimize": _run_optimize,
    "disorder-sweep": _run_disorder,
    "time-sweep": _run_time_sweep,
    "alpha-sweep": _run_alpha_sweep,
    "length-scaling": _run_length_scaling,
}


def run(cfg: RunConfig) -> tuple[Path, dict]:
    """Execute the configured experiment and write its artifacts."""
    diag = validate(cfg)
    for w in diag["warnings"]:
        log.warning(w)
    out = output_dir(cfg)
    start = time.time()
    resolved, results = _RUNNERS[cfg.experiment](cfg, out)
    manifest = {
        "experiment": cfg.experiment,
        "config": asdict(cfg),
        "config_hash": config_hash(cfg.reproducible()),
        "resolved": resolved,
        "results": results,
        "seeds": {"master_seed": cfg.seed, "guess_seed": cfg.guess_seed},
        "warnings": diag["warnings"],
        "versions": _versions(),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "wall_time_s": time.time() - start,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, default=_json_default)
    return out, manifest


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    return str(x)


# -- argument parsing -------------------------------------------------------


def _add_common(p):
    S = argparse.SUPPRESS
    p.add_argument("--config", help="key = value file or a previous manifest.json", default=S)
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<experiment>-<hash>)", default=S)
    p.add_argument("--n", type=int, help="chain length N", default=S)
    p.add_argument("--alpha", help="boundary coupling or 'auto'", default=S)
    p.add_argument("--t", help="operation time: 'peak', 'n' or a number", default=S)
    p.add_argument("--actuators", choices=("left", "both"), default=S)
    p.add_argument("--alpha-l", type=float, default=S, help="fluence penalty of the left control")
    p.add_argument("--alpha-r", type=float, default=S, help="fluence penalty of the right control")
    p.add_argument("--guess", choices=tuple(GUESS_KINDS), default=S)
    p.add_argument("--guess-value", type=float, default=S)
    p.add_argument("--guess-amplitude", type=float, default=S)
    p.add_argument("--guess-omegas", default=S, help="comma separated angular frequencies")
    p.add_argument("--guess-seed", type=int, default=S)
    p.add_argument("--mixing", type=float, default=S)
    p.add_argument("--tol", type=float, default=S)
    p.add_argument("--max-iters", type=int, default=S)
    p.add_argument("--dt", type=float, default=S)
    p.add_argument("--coarse-dt", type=float, default=S)
    p.add_argument("--amplitudes", default=S, help="comma separated disorder amplitudes")
    p.add_argument("--realizations", type=int, default=S)
    p.add_argument("--seed", type=int, default=S, help="master disorder seed")
    p.add_argument("--base", choices=("free", "left", "both"), default=S)
    p.add_argument("--evaluation", choices=("fixed", "peak"), default=S)
    p.add_argument("--window", type=float, default=S)
    p.add_argument("--t-grid", default=S, help="comma separated T/N values")
    p.add_argument("--alpha-grid", default=S)
    p.add_argument("--n-grid", default=S)
    p.add_argument("--mode", choices=("free", "left", "both"), default=S)
    p.add_argument("--continuation-step", type=float, default=S)
    p.add_argument("--threads", type=int, default=S)
    p.add_argument("-v", "--verbose", action="store_true", default=S)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xxtransfer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS + ("validate",):
        _add_common(sub.add_parser(name))
    return parser


def config_from_args(ns: argparse.Namespace) -> RunConfig:
    values = {}
    given = vars(ns).copy()
    command = given.pop("command")
    given.pop("verbose", None)
    if "config" in given:
        values.update(load_config_file(given.pop("config")))
    values.update(given)
    if command != "validate":
        values["experiment"] = command
    return make_config(values)


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(ns, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(ns)
        if ns.command == "validate":
            diag = validate(cfg)
            print(json.dumps(diag, indent=2))
            for w in diag["warnings"]:
                print(f"warning: {w}", file=sys.stderr)
            return 0
        out, manifest = run(cfg)
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    print(json.dumps({"out": str(out), "resolved": manifest["resolved"], "results": manifest["results"]},
                     indent=2, default=_json_default))
    return 0


if __name__ == "__main__":
    sys.exit(main())
