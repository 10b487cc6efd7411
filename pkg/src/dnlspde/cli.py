"""Command line front end: TOML configs, experiment runners, run manifests.

Every run writes its artifacts plus a ``manifest.json`` recording the
resolved configuration, a hash of it, and a sha256 per artifact.  The
artifacts themselves carry no timestamps and use fixed float formatting,
so reruns (at any worker count) produce byte-identical files; only the
manifest's wall-clock fields differ.

Exit codes: 0 on success, 1 when the experiment itself fails (solver
breakdown, failed assumption validation, nonconverged rate function),
2 on configuration errors.
"""

from __future__ import annotations

import argparse
import difflib
import hashlib
import json
import os
import sys

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from datetime import datetime, timezone
from functools import partial
from pathlib import Path

import numpy as np

from . import __version__
from .coefficients import (
    coefficients_from_config,
    validate_assumptions,
    _B_BUILDERS,
    _FLUX_BUILDERS,
    _SIGMA_BUILDERS,
)
from .dynamics import (
    Control,
    apriori_report,
    continuity_experiment,
    project_control,
    solve_skeleton,
    trajectory_summary_rows,
)
from .ergodic import (
    check_dissipativity,
    long_run,
    moment_bound_check,
    occupation_rows_csv,
    time_avg_lp_norm,
)
from .errors import ConfigError, EnsembleError, SolverError
from .grid import Field, Grid1D, field_csv_header, field_csv_row
from .ldp import (
    EventSpec,
    OptimizerSettings,
    empirical_ldp,
    ldp_rows_csv,
    rate_function,
    rate_rows_csv,
)
from .montecarlo import EnsembleConfig, ensemble_rows, ensemble_stats, map_paths

EXPERIMENTS = ("validate", "skeleton", "simulate", "ldp", "invariant", "convergence")

_ENV_WORKERS = "DNLSPDE_WORKERS"

# section -> known keys; used both for unknown-key reporting and docs
_KNOWN_KEYS = {
    "experiment": ("kind",),
    "grid": ("n_interior", "length"),
    "time": ("T", "N"),
    "coefficients": ("flux", "p", "c_lin", "c_plap", "b", "beta", "gamma",
                     "sigma", "sigma_lipschitz"),
    "initial": ("kind", "amplitude", "mode", "values"),
    "control": ("kind", "value", "amplitude", "frequency", "values"),
    "montecarlo": ("M_paths", "base_seed", "eps_list", "worker_count"),
    "event": ("kind", "radius", "target", "scale"),
    "optimizer": ("penalty_schedule", "fd_step", "gd_max_iter", "gd_init_step",
                  "grad_tol", "constraint_tol", "n_control"),
    "validation": ("sample_count", "seed"),
    "invariant": ("T_long", "window", "dt", "sample_count", "seed"),
    "convergence": ("freqs",),
    "output": ("directory", "dump_interval"),
}


# -- config resolution ------------------------------------------------------


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _get_number(sec: dict, name: str, key: str, default: float, errors,
                positive: bool = True) -> float:
    v = sec.get(key, default)
    if not _is_number(v):
        errors.append(f"{name}.{key}: expected a number, got {v!r}")
        return default
    if positive and not v > 0:
        errors.append(f"{name}.{key}: must be positive, got {v}")
        return default
    return float(v)


def _get_int(sec: dict, name: str, key: str, default: int, errors,
             minimum: int = 1) -> int:
    v = sec.get(key, default)
    if isinstance(v, bool) or not isinstance(v, int):
        errors.append(f"{name}.{key}: expected an integer, got {v!r}")
        return default
    if v < minimum:
        errors.append(f"{name}.{key}: must be >= {minimum}, got {v}")
        return default
    return v


def _get_choice(sec: dict, name: str, key: str, default: str, choices,
                errors) -> str:
    v = sec.get(key, default)
    if v not in choices:
        hint = difflib.get_close_matches(str(v), list(choices), n=1)
        extra = f" (did you mean {hint[0]!r}?)" if hint else ""
        errors.append(f"{name}.{key}: must be one of {sorted(choices)}, "
                      f"got {v!r}{extra}")
        return default
    return v


def _get_number_list(sec: dict, name: str, key: str, default, errors,
                     positive: bool = True):
    v = sec.get(key, list(default))
    if not isinstance(v, list) or not v or not all(_is_number(x) for x in v):
        errors.append(f"{name}.{key}: expected a nonempty list of numbers, got {v!r}")
        return list(default)
    if positive and any(not x > 0 for x in v):
        errors.append(f"{name}.{key}: entries must be positive, got {v!r}")
        return list(default)
    return [float(x) for x in v]


def _check_unknown(raw: dict, errors) -> None:
    for section, body in raw.items():
        if section not in _KNOWN_KEYS:
            hint = difflib.get_close_matches(section, list(_KNOWN_KEYS), n=1)
            extra = f" (did you mean [{hint[0]}]?)" if hint else ""
            errors.append(f"[{section}]: unknown section{extra}")
            continue
        if not isinstance(body, dict):
            errors.append(f"[{section}]: expected a table, got {body!r}")
            continue
        known = _KNOWN_KEYS[section]
        for key in body:
            if key not in known:
                hint = difflib.get_close_matches(key, known, n=1)
                extra = f" (did you mean {hint[0]!r}?)" if hint else ""
                errors.append(f"{section}.{key}: unknown key{extra}")


def resolve_config(raw: dict) -> dict:
    """Validate a raw TOML mapping and fill in every default.

    Collects all problems and raises a single ConfigError; the returned
    mapping is fully populated, so downstream code never touches the raw
    document again.
    """
    errors: list = []
    if not isinstance(raw, dict):
        raise ConfigError(["top level: expected a table"])
    _check_unknown(raw, errors)

    def sec(name):
        body = raw.get(name, {})
        return body if isinstance(body, dict) else {}

    exp = sec("experiment")
    kind = exp.get("kind", "")
    if kind and kind not in EXPERIMENTS:
        hint = difflib.get_close_matches(str(kind), EXPERIMENTS, n=1)
        extra = f" (did you mean {hint[0]!r}?)" if hint else ""
        errors.append(f"experiment.kind: must be one of {sorted(EXPERIMENTS)}, "
                      f"got {kind!r}{extra}")
        kind = ""

    g = sec("grid")
    grid = {
        "n_interior": _get_int(g, "grid", "n_interior", 32, errors),
        "length": _get_number(g, "grid", "length", 1.0, errors),
    }

    t = sec("time")
    time_blk = {
        "T": _get_number(t, "time", "T", 1.0, errors),
        "N": _get_int(t, "time", "N", 64, errors),
    }

    co = sec("coefficients")
    coeff = {
        "flux": _get_choice(co, "coefficients", "flux", "p_laplacian",
                            _FLUX_BUILDERS, errors),
        "b": _get_choice(co, "coefficients", "b", "wave", _B_BUILDERS, errors),
        "sigma": _get_choice(co, "coefficients", "sigma", "linear",
                             _SIGMA_BUILDERS, errors),
        "p": _get_number(co, "coefficients", "p", 4.0, errors),
        "c_lin": _get_number(co, "coefficients", "c_lin", 1.0, errors,
                             positive=False),
        "c_plap": _get_number(co, "coefficients", "c_plap", 1.0, errors),
        "beta": _get_number(co, "coefficients", "beta", 2.0, errors),
        "gamma": _get_number(co, "coefficients", "gamma", 1.0, errors,
                             positive=False),
        "sigma_lipschitz": _get_number(co, "coefficients", "sigma_lipschitz",
                                       1.0, errors),
    }
    n_before = len(errors)
    if coeff["flux"] != "linear" and not coeff["p"] > 2:
        errors.append(f"coefficients.p: must exceed 2, got {coeff['p']}")
    if coeff["b"] == "wave" and not coeff["beta"] > coeff["gamma"] >= 0:
        errors.append("coefficients: wave saturation needs beta > gamma >= 0, "
                      f"got beta={coeff['beta']}, gamma={coeff['gamma']}")
    if len(errors) == n_before:
        # constructor guards (positivity, Lipschitz ranges) are the source
        # of truth; surface their complaints as config errors
        try:
            coefficients_from_config(coeff)
        except ValueError as exc:
            errors.append(f"coefficients: {exc}")

    ini = sec("initial")
    initial = {
        "kind": _get_choice(ini, "initial", "kind", "sine",
                            ("zero", "sine", "tabulated"), errors),
        "amplitude": _get_number(ini, "initial", "amplitude", 1.0, errors,
                                 positive=False),
        "mode": _get_int(ini, "initial", "mode", 1, errors),
        "values": ini.get("values", []),
    }
    if initial["kind"] == "tabulated":
        vals = initial["values"]
        if not isinstance(vals, list) or not all(_is_number(x) for x in vals):
            errors.append("initial.values: expected a list of numbers")
        elif len(vals) != grid["n_interior"]:
            errors.append(f"initial.values: expected {grid['n_interior']} entries "
                          f"to match grid.n_interior, got {len(vals)}")

    ctl = sec("control")
    control = {
        "kind": _get_choice(ctl, "control", "kind", "zero",
                            ("zero", "constant", "sine", "tabulated"), errors),
        "value": _get_number(ctl, "control", "value", 1.0, errors, positive=False),
        "amplitude": _get_number(ctl, "control", "amplitude", 1.0, errors,
                                 positive=False),
        "frequency": _get_int(ctl, "control", "frequency", 1, errors),
        "values": ctl.get("values", []),
    }
    if control["kind"] == "tabulated":
        vals = control["values"]
        if not isinstance(vals, list) or not all(_is_number(x) for x in vals):
            errors.append("control.values: expected a list of numbers")
        elif len(vals) != time_blk["N"]:
            errors.append(f"control.values: expected {time_blk['N']} entries "
                          f"to match time.N, got {len(vals)}")

    mc = sec("montecarlo")
    montecarlo = {
        "M_paths": _get_int(mc, "montecarlo", "M_paths", 100, errors),
        "base_seed": _get_int(mc, "montecarlo", "base_seed", 0, errors, minimum=0),
        "eps_list": _get_number_list(mc, "montecarlo", "eps_list", (1.0,), errors),
        "worker_count": _get_int(mc, "montecarlo", "worker_count", 1, errors),
    }

    ev = sec("event")
    event = {
        "kind": _get_choice(ev, "event", "kind", "endpoint_ball",
                            ("endpoint_ball", "sup_tube"), errors),
        "radius": _get_number(ev, "event", "radius", 0.1, errors),
        "target": _get_choice(ev, "event", "target", "scaled_skeleton_endpoint",
                              ("scaled_skeleton_endpoint", "scaled_initial",
                               "skeleton"), errors),
        "scale": _get_number(ev, "event", "scale", 1.5, errors, positive=False),
    }
    if event["kind"] == "sup_tube" and event["target"] != "skeleton":
        errors.append("event.target: sup_tube events require target = 'skeleton'")
    if event["kind"] == "endpoint_ball" and event["target"] == "skeleton":
        errors.append("event.target: endpoint_ball events require "
                      "'scaled_skeleton_endpoint' or 'scaled_initial'")

    op = sec("optimizer")
    optimizer = {
        "penalty_schedule": _get_number_list(op, "optimizer", "penalty_schedule",
                                             (10.0, 100.0, 1000.0, 10000.0), errors),
        "fd_step": _get_number(op, "optimizer", "fd_step", 1e-5, errors),
        "gd_max_iter": _get_int(op, "optimizer", "gd_max_iter", 60, errors),
        "gd_init_step": _get_number(op, "optimizer", "gd_init_step", 0.5, errors),
        "grad_tol": _get_number(op, "optimizer", "grad_tol", 1e-7, errors),
        "constraint_tol": _get_number(op, "optimizer", "constraint_tol", 1e-4, errors),
        "n_control": _get_int(op, "optimizer", "n_control", 8, errors),
    }

    va = sec("validation")
    validation = {
        "sample_count": _get_int(va, "validation", "sample_count", 100_000, errors),
        "seed": _get_int(va, "validation", "seed", 0, errors, minimum=0),
    }

    inv = sec("invariant")
    invariant = {
        "T_long": _get_number(inv, "invariant", "T_long", 4.0, errors),
        "window": _get_number(inv, "invariant", "window", 0.5, errors),
        "dt": _get_number(inv, "invariant", "dt", 0.05, errors),
        "sample_count": _get_int(inv, "invariant", "sample_count", 32, errors),
        "seed": _get_int(inv, "invariant", "seed", 0, errors, minimum=0),
    }

    cv = sec("convergence")
    freqs = cv.get("freqs", [1, 2, 4, 8])
    if (not isinstance(freqs, list) or not freqs
            or not all(isinstance(x, int) and not isinstance(x, bool) and x >= 1
                       for x in freqs)):
        errors.append(f"convergence.freqs: expected a nonempty list of positive "
                      f"integers, got {freqs!r}")
        freqs = [1, 2, 4, 8]

    out = sec("output")
    directory = out.get("directory", "out")
    if not isinstance(directory, str) or not directory:
        errors.append(f"output.directory: expected a nonempty string, got {directory!r}")
        directory = "out"
    output = {
        "directory": directory,
        "dump_interval": _get_int(out, "output", "dump_interval", 1, errors),
    }

    if errors:
        raise ConfigError(errors)
    return {
        "experiment": {"kind": kind},
        "grid": grid,
        "time": time_blk,
        "coefficients": coeff,
        "initial": initial,
        "control": control,
        "montecarlo": montecarlo,
        "event": event,
        "optimizer": optimizer,
        "validation": validation,
        "invariant": invariant,
        "convergence": {"freqs": [int(x) for x in freqs]},
        "output": output,
    }


# -- builders ---------------------------------------------------------------


def _build_grid(cfg: dict) -> Grid1D:
    return Grid1D(n_interior=cfg["grid"]["n_interior"], length=cfg["grid"]["length"])


def _build_initial(cfg: dict, grid: Grid1D) -> Field:
    blk = cfg["initial"]
    if blk["kind"] == "zero":
        vals = np.zeros(grid.n_interior)
    elif blk["kind"] == "sine":
        vals = blk["amplitude"] * np.sin(blk["mode"] * np.pi * grid.x / grid.length)
    else:
        vals = np.array([float(v) for v in blk["values"]])
    return Field(grid=grid, values=vals)


def _control_callable(cfg: dict):
    blk = cfg["control"]
    T = cfg["time"]["T"]
    N = cfg["time"]["N"]
    kind = blk["kind"]
    if kind == "zero":
        return lambda t: np.zeros_like(np.asarray(t, dtype=float))
    if kind == "constant":
        v = blk["value"]
        return lambda t: np.full_like(np.asarray(t, dtype=float), v)
    if kind == "sine":
        a, f = blk["amplitude"], blk["frequency"]
        return lambda t: a * np.sin(2.0 * np.pi * f * np.asarray(t) / T)
    vals = np.array([float(v) for v in blk["values"]])
    tau = T / N

    def step(t):
        idx = np.minimum((np.asarray(t, dtype=float) / tau).astype(int), N - 1)
        return vals[idx]

    return step


def _build_control(cfg: dict) -> Control:
    blk = cfg["control"]
    T, N = cfg["time"]["T"], cfg["time"]["N"]
    if blk["kind"] == "zero":
        return Control.zero(N, T)
    if blk["kind"] == "tabulated":
        return Control(np.array([float(v) for v in blk["values"]]), T / N)
    return project_control(_control_callable(cfg), N, T)


def _build_event(cfg: dict, u0: Field, c, T: float, N: int) -> EventSpec:
    blk = cfg["event"]
    if blk["kind"] == "sup_tube":
        ref = solve_skeleton(u0, Control.zero(N, T), c)
        return EventSpec(kind="sup_tube", radius=blk["radius"],
                         target_trajectory=ref)
    if blk["target"] == "scaled_initial":
        target = Field(grid=u0.grid, values=blk["scale"] * u0.values)
    else:
        ref = solve_skeleton(u0, Control.zero(N, T), c)
        target = Field(grid=u0.grid, values=blk["scale"] * ref.values[-1])
    return EventSpec(kind="endpoint_ball", radius=blk["radius"], target_field=target)


# -- artifact writing -------------------------------------------------------


class _ArtifactWriter:
    """Writes artifacts under one directory and records their digests."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.outputs: list = []

    def _commit(self, name: str, data: str) -> None:
        path = self.out_dir / name
        raw = data.encode("utf-8")
        path.write_bytes(raw)
        self.outputs.append({"path": name,
                             "sha256": hashlib.sha256(raw).hexdigest()})

    def text(self, name: str, lines) -> None:
        self._commit(name, "\n".join(lines) + "\n")

    def json(self, name: str, obj) -> None:
        self._commit(name, json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _config_hash(resolved: dict) -> str:
    # worker count is an execution detail, not a scientific input: two
    # runs that differ only in parallelism must hash identically
    trimmed = {k: dict(v) for k, v in resolved.items()}
    trimmed["montecarlo"].pop("worker_count", None)
    canonical = json.dumps(trimmed, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


# -- experiment commands ----------------------------------------------------


def _cmd_validate(cfg: dict, w: _ArtifactWriter, workers: int):
    c = coefficients_from_config(cfg["coefficients"])
    rep = validate_assumptions(c, sample_count=cfg["validation"]["sample_count"],
                               seed=cfg["validation"]["seed"])
    w.json("validation.json", rep.to_jsonable())
    if rep.passed:
        return 0, None
    bad = [chk.name for chk in rep.checks if not chk.passed]
    return 1, "assumption validation failed: " + ", ".join(bad)


def _cmd_skeleton(cfg: dict, w: _ArtifactWriter, workers: int):
    grid = _build_grid(cfg)
    c = coefficients_from_config(cfg["coefficients"])
    u0 = _build_initial(cfg, grid)
    T, N = cfg["time"]["T"], cfg["time"]["N"]
    traj = solve_skeleton(u0, _build_control(cfg), c)
    w.text("skeleton_summary.csv",
           ["step,t,norm_B_l2,seminorm_w1p,residual,newton_iters"]
           + trajectory_summary_rows(traj, c))
    dump = cfg["output"]["dump_interval"]
    rows = [field_csv_header(grid)]
    for k in range(N + 1):
        if k % dump == 0 or k == N:
            rows.append(field_csv_row(traj.times[k], traj.field(k)))
    w.text("skeleton_fields.csv", rows)
    w.json("skeleton_diagnostics.json", {
        "grid": {"n_interior": grid.n_interior, "length": grid.length},
        "apriori": apriori_report(traj, c).to_jsonable(),
    })
    return 0, None


def _cmd_simulate(cfg: dict, w: _ArtifactWriter, workers: int):
    grid = _build_grid(cfg)
    c = coefficients_from_config(cfg["coefficients"])
    u0 = _build_initial(cfg, grid)
    T, N = cfg["time"]["T"], cfg["time"]["N"]
    mc = cfg["montecarlo"]
    header = "path_index,seed,sup_B_l2_sq,sup_B_l2_4,int_w1p_p_sq,converged"
    ladder = []
    for i, eps in enumerate(mc["eps_list"]):
        ecfg = EnsembleConfig(u0=u0, c=c, T=T, N=N, M_paths=mc["M_paths"],
                              base_seed=mc["base_seed"], eps=eps)
        rep = ensemble_stats(ecfg, workers=workers)
        w.text(f"ensemble_{i:02d}.csv", [header] + ensemble_rows(rep))
        ladder.append({"eps": eps, **rep.to_jsonable()})
    w.json("simulate_summary.json", {"ladder": ladder})
    return 0, None


def _cmd_ldp(cfg: dict, w: _ArtifactWriter, workers: int):
    grid = _build_grid(cfg)
    c = coefficients_from_config(cfg["coefficients"])
    u0 = _build_initial(cfg, grid)
    T, N = cfg["time"]["T"], cfg["time"]["N"]
    mc, op = cfg["montecarlo"], cfg["optimizer"]
    ev = _build_event(cfg, u0, c, T, N)
    opt = OptimizerSettings(
        penalty_schedule=tuple(op["penalty_schedule"]), fd_step=op["fd_step"],
        gd_max_iter=op["gd_max_iter"], gd_init_step=op["gd_init_step"],
        grad_tol=op["grad_tol"], constraint_tol=op["constraint_tol"])
    res = rate_function(ev, u0, c, T, op["n_control"], opt)
    w.text("rate_stages.csv",
           ["lambda,I,constraint_residual,converged"] + rate_rows_csv(res))
    rows = empirical_ldp(ev, u0, c, T, N, mc["eps_list"], mc["M_paths"],
                         mc["base_seed"], workers=workers)
    w.text("ldp_empirical.csv",
           ["epsilon,p_hat,ci_low,ci_high,eps2_log_p"] + ldp_rows_csv(rows))
    w.json("ldp_summary.json", {
        "rate": res.rate,
        "converged": res.converged,
        "constraint_residual": res.constraint_residual,
        "penalty_weight": res.penalty_weight,
        "n_solves": res.n_solves,
        "event": {"kind": cfg["event"]["kind"], "radius": cfg["event"]["radius"],
                  "target": cfg["event"]["target"], "scale": cfg["event"]["scale"]},
    })
    if not res.converged:
        return 1, ("rate optimization did not reach the feasibility tolerance "
                   f"(residual {res.constraint_residual:.3g})")
    return 0, None


def _time_avg_functional(p: float, traj):
    return (time_avg_lp_norm(traj, p),)


def _cmd_invariant(cfg: dict, w: _ArtifactWriter, workers: int):
    grid = _build_grid(cfg)
    c = coefficients_from_config(cfg["coefficients"])
    u0 = _build_initial(cfg, grid)
    inv, mc = cfg["invariant"], cfg["montecarlo"]
    rep = check_dissipativity(c, grid, sample_count=inv["sample_count"],
                              seed=inv["seed"])
    w.json("dissipativity.json", rep.to_jsonable())
    summary = long_run(u0, c, T_long=inv["T_long"], window=inv["window"],
                       seed=inv["seed"], dt=inv["dt"], dissipativity=rep)
    w.text("occupation.csv",
           ["window_index,observable_id,average,discrepancy_prev"]
           + occupation_rows_csv(summary))
    if rep.passed:
        T = cfg["time"]["T"]
        ecfg = EnsembleConfig(u0=u0, c=c, T=T, N=cfg["time"]["N"],
                              M_paths=mc["M_paths"], base_seed=mc["base_seed"],
                              eps=1.0)
        results, failures = map_paths(ecfg, partial(_time_avg_functional, c.flux.p),
                                      workers=workers)
        lhs = float(np.mean([v for _, (v,) in results]))
        verdict = moment_bound_check(c, delta=rep.delta_hat, u0=u0, horizon=T,
                                     lhs=lhs)
        blob = verdict.to_jsonable()
        blob.update({"n_paths": len(results), "n_failed": len(failures)})
        w.json("moment_bound.json", blob)
    else:
        w.json("moment_bound.json",
               {"skipped": "dissipativity check failed; no positive delta"})
    return 0, None


def _cmd_convergence(cfg: dict, w: _ArtifactWriter, workers: int):
    grid = _build_grid(cfg)
    c = coefficients_from_config(cfg["coefficients"])
    u0 = _build_initial(cfg, grid)
    T, N = cfg["time"]["T"], cfg["time"]["N"]
    rows = continuity_experiment(_control_callable(cfg), cfg["convergence"]["freqs"],
                                 c, u0, N, T)
    w.text("convergence.csv",
           ["n,sup_b_deviation"] + [f"{n},{d:.17g}" for n, d in rows])
    return 0, None


_COMMANDS = {
    "validate": _cmd_validate,
    "skeleton": _cmd_skeleton,
    "simulate": _cmd_simulate,
    "ldp": _cmd_ldp,
    "invariant": _cmd_invariant,
    "convergence": _cmd_convergence,
}


# -- entry point ------------------------------------------------------------


def _parse_args(argv):
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS,
                        help="TOML experiment configuration (required)")
    common.add_argument("--out", default=argparse.SUPPRESS,
                        help="output directory, overrides [output].directory")
    common.add_argument("--workers", type=int, default=argparse.SUPPRESS,
                        help=f"worker processes, overrides {_ENV_WORKERS} and "
                             "[montecarlo].worker_count")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="overrides [montecarlo].base_seed and [invariant].seed")
    parser = argparse.ArgumentParser(
        prog="dnlspde",
        description="Desk-scale experiments for a doubly nonlinear SPDE: "
                    "deterministic skeletons, noisy ensembles, rare-event "
                    "rates, and invariant-measure diagnostics.",
        parents=[common])
    sub = parser.add_subparsers(dest="command", metavar="experiment")
    for name in EXPERIMENTS:
        sub.add_parser(name, parents=[common],
                       help=f"run the {name} experiment")
    return parser.parse_args(argv)


def _resolve_workers(args, cfg: dict):
    if hasattr(args, "workers"):
        w = args.workers
    elif os.environ.get(_ENV_WORKERS):
        try:
            w = int(os.environ[_ENV_WORKERS])
        except ValueError:
            return None, f"{_ENV_WORKERS}: expected an integer, got " \
                         f"{os.environ[_ENV_WORKERS]!r}"
    else:
        w = cfg["montecarlo"]["worker_count"]
    if w < 1:
        return None, f"worker count must be >= 1, got {w}"
    return w, None


def main(argv=None) -> int:
    args = _parse_args(argv)
    config_path = getattr(args, "config", None)
    if config_path is None:
        print("config error: --config is required", file=sys.stderr)
        return 2
    try:
        raw = tomllib.loads(Path(config_path).read_text(encoding="utf-8"))
    except OSError as exc:
        print(f"config error: cannot read {config_path}: {exc}", file=sys.stderr)
        return 2
    except tomllib.TOMLDecodeError as exc:
        print(f"config error: {config_path}: {exc}", file=sys.stderr)
        return 2
    try:
        cfg = resolve_config(raw)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    command = getattr(args, "command", None) or cfg["experiment"]["kind"]
    if not command:
        print("config error: no experiment selected; pass a subcommand or set "
              "[experiment].kind", file=sys.stderr)
        return 2
    workers, werr = _resolve_workers(args, cfg)
    if werr:
        print(f"config error: {werr}", file=sys.stderr)
        return 2
    if hasattr(args, "seed"):
        if args.seed < 0:
            print(f"config error: --seed must be >= 0, got {args.seed}",
                  file=sys.stderr)
            return 2
        cfg["montecarlo"]["base_seed"] = args.seed
        cfg["invariant"]["seed"] = args.seed
    cfg["experiment"]["kind"] = command
    cfg["montecarlo"]["worker_count"] = workers

    out_dir = Path(getattr(args, "out", None) or cfg["output"]["directory"])
    out_dir.mkdir(parents=True, exist_ok=True)
    w = _ArtifactWriter(out_dir)
    started = _now()
    try:
        code, error = _COMMANDS[command](cfg, w, workers)
    except (SolverError, EnsembleError) as exc:
        code, error = 1, f"{type(exc).__name__}: {exc}"
    manifest = {
        "command": command,
        "config": cfg,
        "config_hash": _config_hash(cfg),
        "code_version": __version__,
        "workers": workers,
        "seeds": {"base_seed": cfg["montecarlo"]["base_seed"],
                  "invariant_seed": cfg["invariant"]["seed"]},
        "started_at": started,
        "finished_at": _now(),
        "status": "ok" if code == 0 else "failed",
        "error": error,
        "outputs": w.outputs,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    if error:
        print(f"experiment failed: {error}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
