"""Command-line front end.

Every command reads one run config (or a bare model file), validates it
fully, computes, and only then writes its artifacts plus a manifest.
Nothing in the output depends on wall-clock time, so reruns with the
same config and flags are byte-identical.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from .errors import ConfigError, MPSQError
from .measures import DEFAULT_H, dumps_measure
from .model import QueueModel, derived_params, load_model, model_from_dict

FIXTURES = Path(__file__).with_name("fixtures")
COMMANDS = ("params", "simulate", "fluid", "rbm", "identities", "ht", "ssc")


@dataclass
class RunConfig:
    model: QueueModel
    model_doc: dict
    raw: dict
    config_hash: str
    seed: int = 0
    threads: int = 1
    h: float = DEFAULT_H
    x_max: float | None = None
    dt: float | None = None
    section: dict = field(default_factory=dict)


def _resolve_model(ref, base_dir: Path) -> tuple[QueueModel, dict]:
    if isinstance(ref, dict):
        return model_from_dict(ref), ref
    path = Path(ref)
    candidates = [path] if path.is_absolute() else [base_dir / path, FIXTURES / path,
                                                    FIXTURES / f"{ref}.yaml"]
    for p in candidates:
        if p.is_file():
            return load_model(p), yaml.safe_load(p.read_text())
    raise ConfigError(f"model file not found: {ref}")


def load_run_config(path: str, command: str, args) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {p}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping")
    if "model" in doc:
        model, model_doc = _resolve_model(doc["model"], p.parent)
    else:  # a bare model file
        model, model_doc = model_from_dict(doc), doc
        doc = {"model": doc}
    grid = doc.get("grid", {}) or {}
    section = doc.get(command, {}) or {}
    if command in ("ht", "ssc"):
        section = {**(doc.get("experiment", {}) or {}), **section}
    seed = args.seed if args.seed is not None else doc.get("seed", section.get("seed", 0))
    h = args.grid_h if args.grid_h is not None else grid.get("h", DEFAULT_H)
    dt = args.dt if args.dt is not None else grid.get("dt")
    x_max = grid.get("x_max")
    for name, val in (("h", h), ("dt", dt), ("x_max", x_max)):
        if val is not None and not float(val) > 0:
            raise ConfigError(f"grid {name} must be positive")
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a nonnegative integer")
    threads = args.threads or 1
    overrides = {"seed": seed, "h": h, "dt": dt, "threads": threads, "command": command}
    digest = hashlib.sha256(text + json.dumps(overrides, sort_keys=True).encode()).hexdigest()
    return RunConfig(model, model_doc, doc, digest, int(seed), int(threads), float(h),
                     None if x_max is None else float(x_max), None if dt is None else float(dt),
                     section)


# output helpers -----------------------------------------------------------

def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    return x


class Output:
    """Collects artifacts in memory and writes them in one go."""

    def __init__(self):
        self.files: dict[str, str] = {}
        self.failed = False  # set when a check-type command finds failures

    def json(self, name: str, obj):
        self.files[name] = json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"

    def text(self, name: str, body: str):
        self.files[name] = body if body.endswith("\n") else body + "\n"

    def columns(self, name: str, header: list[str], rows):
        lines = ["\t".join(header)]
        for row in rows:
            lines.append("\t".join(repr(float(v)) if not isinstance(v, (int, np.integer)) else str(v)
                                   for v in row))
        self.text(name, "\n".join(lines))

    def flush(self, out_dir: Path, cfg: RunConfig, command: str):
        self.json("manifest.json", {
            "command": command,
            "config_hash": cfg.config_hash,
            "seed": cfg.seed,
            "grid": {"h": cfg.h, "x_max": cfg.x_max, "dt": cfg.dt},
            "versions": {"mpsq": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                         "python": ".".join(map(str, sys.version_info[:3]))},
            "files": sorted(self.files),
        })
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, body in self.files.items():
            (out_dir / name).write_text(body)


# commands -----------------------------------------------------------------

def _params_table(dp) -> str:
    def fmt(v):
        return np.array2string(np.asarray(v), precision=10, separator=", ", max_line_width=200)

    rows = [("Q", fmt(dp.Q)), ("lambda", fmt(dp.lam)), ("rho", repr(dp.rho)),
            ("Gamma", repr(dp.Gamma)), ("dstar", repr(dp.dstar)), ("R", repr(dp.R)),
            ("Delta_F", fmt(dp.Delta_F)), ("<1,Delta>", fmt(dp.lift_mass))]
    return "\n".join(f"{k:<10} {v}" for k, v in rows)


def cmd_params(cfg: RunConfig, out: Output):
    dp = derived_params(cfg.model)
    table = _params_table(dp)
    out.text("params.txt", table)
    out.json("params.json", dp.summary())
    return table


def cmd_simulate(cfg: RunConfig, out: Output):
    from .simulator import replicate, simulate

    s = cfg.section
    horizon = float(s.get("horizon", 100.0))
    n_snap = int(s.get("snapshots", 11))
    reps = int(s.get("reps", 1))
    descriptors = tuple(s.get("descriptors", ("mu", "gamma", "Q")))
    snaps = np.linspace(0.0, horizon, n_snap)
    ens = replicate(cfg.model, horizon, snaps, reps, cfg.seed, workers=cfg.threads)
    K = cfg.model.K
    rows = []
    for i in range(reps):
        if i in ens.errors:
            continue
        for j, t in enumerate(ens.times):
            rows.append([i, t, ens.W[i, j], *ens.Z[i, j]])
    out.columns("trajectory.tsv", ["rep", "t", "W"] + [f"Z{k}" for k in range(K)], rows)
    # descriptors of replication 0 at the horizon
    traj = simulate(cfg.model, horizon, [horizon], descriptors, seed=ens.seeds[0])
    snap = traj.snapshots[-1]
    if snap.mu is not None:
        for k, mu in enumerate(snap.mu):
            out.text(f"mu_{k}.txt", dumps_measure(mu))
    if snap.Q is not None:
        for k, q in enumerate(snap.Q):
            out.text(f"Q_{k}.txt", dumps_measure(q))
    if snap.gamma is not None:
        out.text("gamma.txt", dumps_measure(snap.gamma))
    out.json("summary.json", {"reps": reps, "horizon": horizon, "events_rep0": traj.events,
                              "errors": ens.errors,
                              "mean_W": np.nanmean(ens.W, axis=0).tolist()})
    return f"simulated {reps} replication(s) to t={horizon:g}; {len(ens.errors)} failed"


def _fluid_initial(cfg: RunConfig, ctx, s: dict):
    from .model import _service_from_dict

    init = s.get("initial", {"invariant": 1.0})
    if "invariant" in init:
        return ctx.invariant_state(float(init["invariant"]))
    counts = init.get("counts")
    specs = init.get("services")
    if counts is None or specs is None or len(counts) != cfg.model.K or len(specs) != cfg.model.K:
        raise ConfigError("fluid.initial needs 'invariant' or K 'counts' and 'services'")
    laws = [_service_from_dict(d, base) for d, base in zip(specs, cfg.model.services)]
    return ctx.state_from([float(c) for c in counts], laws)


def cmd_fluid(cfg: RunConfig, out: Output):
    from .fluid import FluidContext, convergence_to_invariant, solve_fluid

    s = cfg.section
    ctx = FluidContext(cfg.model, cfg.h, cfg.x_max)
    xi = _fluid_initial(cfg, ctx, s)
    mean = max(sp.mean for sp in cfg.model.services)
    t_max = float(s.get("t_max", 40.0 * mean))
    t_grid = np.linspace(0.0, t_max, int(s.get("n_times", 21)))
    series = convergence_to_invariant(xi, ctx, t_grid)
    sol = solve_fluid(xi, ctx, t_grid)
    eps = float(s.get("eps", 0.05))
    rows = []
    for j, t in enumerate(t_grid):
        rows.append([t, sol.u_grid[j], series.d_mu[j], series.d_Q[j], *sol.mu[j].mass()])
    out.columns("fluid_series.tsv", ["t", "u", "d_mu", "d_Q"] + [f"Zbar{k}" for k in range(cfg.model.K)],
                rows)
    step = max(1, ctx.n // 1000)
    out.columns("fluid_T.tsv", ["u", "T"], zip(ctx.x[::step], sol.T.values[::step]))
    out.json("fluid.json", {"Wbar0": series.Wbar0, "eps": eps, "final_d_mu": series.d_mu[-1],
                            "final_d_Q": series.d_Q[-1], "converged": series.final_below(eps)})
    return f"fluid: Wbar(0)={series.Wbar0:.6g}, final d_mu={series.d_mu[-1]:.3e}, d_Q={series.d_Q[-1]:.3e}"


def cmd_rbm(cfg: RunConfig, out: Output):
    from .diffusion import simulate_rbm

    s = cfg.section
    dp = derived_params(cfg.model)
    W0 = float(s.get("W0", 0.0))
    sigma = float(s.get("sigma", 0.5))
    Gamma = float(s.get("Gamma", dp.Gamma))
    horizon = float(s.get("horizon", 1.0))
    dt = cfg.dt if cfg.dt is not None else 1e-3 * horizon
    paths = int(s.get("paths", 10_000))
    rbm = simulate_rbm(W0, sigma, Gamma, dt, horizon, np.random.default_rng(cfg.seed), n_paths=paths,
                       bridge=bool(s.get("bridge", True)))
    idx = np.unique(np.linspace(0, rbm.n, 21).round().astype(int))
    vals = rbm.values[:, idx]
    out.columns("rbm_marginals.tsv", ["t", "mean", "var"],
                zip(rbm.times[idx], vals.mean(axis=0), vals.var(axis=0)))
    out.columns("rbm_path0.tsv", ["t", "W", "L"], zip(rbm.times, rbm.values[0], rbm.regulator[0]))
    return f"rbm: {paths} paths, E W(T) = {vals[:, -1].mean():.6g}"


def cmd_identities(cfg: RunConfig, out: Output):
    from .fluid import FluidContext
    from .harness import format_table, identity_suite

    rows = identity_suite(FluidContext(cfg.model, cfg.h, cfg.x_max))
    table = format_table(rows)
    out.text("identities.txt", table)
    out.json("identities.json", [{"name": r.name, "error": r.error, "tol": r.tol, "passed": r.passed}
                                 for r in rows])
    if not all(r.passed for r in rows):
        out.failed = True
    return table


def _experiment(cfg: RunConfig, ssc: bool):
    from .harness import Experiment

    s = cfg.section
    known = {"sigma", "r", "reps", "T", "snapshots", "init_scale", "rbm_paths", "seed"}
    unknown = set(s) - known
    if unknown:
        raise ConfigError(f"unknown experiment keys: {sorted(unknown)}")
    r_values = tuple(float(r) if float(r) != int(r) else int(r) for r in s.get("r", (10, 20, 40)))
    return Experiment(cfg.model, sigma=float(s.get("sigma", 0.5)), r_values=r_values,
                      reps=int(s.get("reps", 200)), T=float(s.get("T", 1.0)),
                      n_snapshots=int(s.get("snapshots", 21)), seed=cfg.seed, h=cfg.h,
                      x_max=cfg.x_max, dt=cfg.dt, init_scale=float(s.get("init_scale", 1.0)),
                      rbm_paths=int(s.get("rbm_paths", 20_000)), ssc=ssc)


def _report(report, out: Output, name: str):
    table = report.table()
    keys = list(table[0])
    out.columns(f"{name}.tsv", keys, [[row[k] for k in keys] for row in table])
    ks_rows = [[res.r, t, k] for res in report.results
               for t, k in zip(report.experiment.t_grid, res.ks) if np.isfinite(k)]
    out.columns(f"{name}_ks.tsv", ["r", "t", "ks"], ks_rows)
    trends = {k: report.trend(k) for k in ("ks_W_T", "ssc_mu", "ssc_Q", "Z_gap")}
    out.json(f"{name}.json", {"W0": report.W0, "Gamma": report.Gamma, "zbar0": report.zbar0,
                              "rows": table, "decreasing_in_r": trends})
    lines = ["\t".join(keys)] + ["\t".join(f"{row[k]:.6g}" if isinstance(row[k], float) else str(row[k])
                                           for k in keys) for row in table]
    return "\n".join(lines)


def cmd_ht(cfg: RunConfig, out: Output):
    from .harness import run_experiment

    return _report(run_experiment(_experiment(cfg, ssc=False)), out, "ht")


def cmd_ssc(cfg: RunConfig, out: Output):
    from .harness import run_experiment

    return _report(run_experiment(_experiment(cfg, ssc=True)), out, "ssc")


HANDLERS = {"params": cmd_params, "simulate": cmd_simulate, "fluid": cmd_fluid, "rbm": cmd_rbm,
            "identities": cmd_identities, "ht": cmd_ht, "ssc": cmd_ssc}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpsq", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HANDLERS[name].__doc__ or f"run {name}")
        p.add_argument("--config", required=True, help="run config or model file (YAML)")
        p.add_argument("--out", default=None, help="output directory (default: print only)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--grid-h", dest="grid_h", type=float, default=None)
        p.add_argument("--dt", type=float, default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config, args.command, args)
        out = Output()
        summary = HANDLERS[args.command](cfg, out)
        if args.out is not None:
            out.flush(Path(args.out), cfg, args.command)
    except MPSQError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    print(summary)
    return 3 if out.failed else 0


if __name__ == "__main__":
    sys.exit(main())
