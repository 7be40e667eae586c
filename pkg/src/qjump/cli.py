"""Command-line harness: ``qjump <trajectories|convergence|audit|replay> --config FILE``.

Exit codes: 0 when every check passes, 1 when a check fails, 2 for usage or
configuration errors. The worker count may also be set through the
``QJUMP_WORKERS`` environment variable (``--workers`` takes precedence).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .audit import run_audit
from .config import ConfigError, ExperimentConfig, parse_config
from .coupling import STATS, check_n_grid, convergence_report, run_coupled
from .discrete import n_steps, simulate_chain
from .exact import monte_carlo_mean, solve_path
from .flow import FlowParams
from .poisson import DOMAIN_CHAIN, PoissonRealization, RngStream, intensity_bound, sample_realization

WORKERS_ENV = "QJUMP_WORKERS"
EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2

ENTRY_COLUMNS = [f"{part}_{i}{j}" for i in (1, 2) for j in (1, 2) for part in ("re", "im")]


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return str(v)


def write_csv(path: Path, header, rows) -> Path:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror}") from e
    return path


def write_json(path: Path, obj) -> Path:
    try:
        path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror}") from e
    return path


def _out_dir(config: ExperimentConfig) -> Path:
    d = Path(config.output["directory"])
    d.mkdir(parents=True, exist_ok=True)
    return d


def metadata(config: ExperimentConfig) -> dict:
    return {"config_hash": config.hash(), "seed": config.run["seed"], "version": __version__,
            "config": config.data}


def verify_bundle(bundle: dict) -> bool:
    """Recompute the config hash from the embedded config."""
    meta = bundle["metadata"]
    text = json.dumps(meta["config"], sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest() == meta["config_hash"]


# -- trajectories ---------------------------------------------------------------

def run_trajectories(config: ExperimentConfig) -> list[Path]:
    """Per-path CSVs (with jump sidecars and realizations), the ensemble mean and one discrete chain."""
    spec, rho0, run = config.spec, config.rho0, config.run
    T, seed, P = run["T"], run["seed"], run["n_paths"]
    out = _out_dir(config)
    formats = config.output["formats"]
    grid = np.linspace(0.0, T, run["grid_points"])
    params = FlowParams(spec.H, spec.C)
    K = intensity_bound(spec.C)
    path_header = ["t"] + ENTRY_COLUMNS + ["N_t"]
    written: list[Path] = []

    if K == 0:
        # no detections: every path is the same deterministic curve
        path = solve_path(rho0, PoissonRealization(T, 0.0), params, grid, method=run["mode"]["flow"])
        written.append(write_csv(out / "trajectory.csv", path_header, path.rows()))
        return written

    for p in range(min(P, config.output["max_path_files"])):
        r = sample_realization(K, T, RngStream(seed, p))
        path = solve_path(rho0, r, params, grid, method=run["mode"]["flow"])
        stem = f"path_{p:05d}"
        if "csv" in formats:
            written.append(write_csv(out / f"{stem}.csv", path_header, path.rows()))
            written.append(write_csv(out / f"{stem}_jumps.csv", ["jump_time"] + ENTRY_COLUMNS,
                                     ([t] + [v for z in m.reshape(-1) for v in (z.real, z.imag)]
                                      for t, m in zip(path.jump_times, path.jump_states))))
        written.append(write_json(out / f"{stem}_realization.json", r.to_record()))

    res = monte_carlo_mean(spec, rho0, T, grid, max(P, 2), seed, method=run["mode"]["flow"])
    mean_header = ["t"] + [f"mean_{c}" for c in ENTRY_COLUMNS] + [f"stderr_{c}" for c in ENTRY_COLUMNS]
    if "csv" in formats:
        rows = ([t] + [v for z in m.reshape(-1) for v in (z.real, z.imag)]
                + [v for z in s.reshape(-1) for v in (z.real, z.imag)]
                for t, m, s in zip(res.grid, res.mean, res.stderr))
        written.append(write_csv(out / "mean.csv", mean_header, rows))

    n = run["n_grid"][-1]
    chain = simulate_chain(spec, n, T, rho0, RngStream(seed, 0, DOMAIN_CHAIN).generator(),
                           mode=run["mode"]["blocks"])
    if "csv" in formats:
        written.append(write_csv(out / "chain.csv", ["k", "outcome", "p", "q"] + ENTRY_COLUMNS,
                                 chain.rows()))
    if "json" in formats:
        summary = {"metadata": metadata(config), "n_paths": res.n_paths,
                   "mean_jump_count": res.mean_count,
                   "mean_compensator": float(res.compensators.mean()),
                   "chain": {"n": n, "steps": chain.steps, "detections": int(chain.outcomes.sum())}}
        written.append(write_json(out / "trajectories.json", summary))
    return written


# -- convergence ------------------------------------------------------------------

def run_convergence(config: ExperimentConfig, workers: int = 1) -> dict:
    """Build the report bundle (metadata, error table, slope fits, checks) and write it out."""
    run = config.run
    check_n_grid(run["n_grid"])
    report = convergence_report(config.spec, config.rho0, run["T"], run["n_grid"], run["n_paths"],
                                run["seed"], workers=workers, block_mode=run["mode"]["blocks"])
    bundle = {"metadata": metadata(config), "report": report.to_dict(), "passed": report.passed}
    out = _out_dir(config)
    if "json" in config.output["formats"]:
        write_json(out / "report.json", bundle)
    if "csv" in config.output["formats"]:
        write_csv(out / "errors.csv", ["n", "stat", "value", "stderr"], report.table())
    return bundle


def _print_report(bundle: dict) -> None:
    rep = bundle["report"]
    by = {(e["n"], e["stat"]): e for e in rep["errors"]}
    print("n      " + "".join(f"{s:>24}" for s in STATS))
    for n in rep["n_grid"]:
        cells = "".join(f"{by[n, s]['value']:>12.4e} ±{by[n, s]['stderr']:9.2e}" for s in STATS)
        print(f"{n:<7d}{cells}")
    for name, fit in rep["slopes"].items():
        s = "undefined" if fit["slope"] is None else f"{fit['slope']:.3f} [{fit['ci95'][0]:.3f}, {fit['ci95'][1]:.3f}]"
        print(f"slope {name}: {s} {fit['note']}".rstrip())
    for name, c in rep["checks"].items():
        tag = "SKIP" if c.get("skipped") else ("PASS" if c["passed"] else "FAIL")
        print(f"{tag}  {name}")


# -- replay -------------------------------------------------------------------------

REPLAY_HEADER = ["k", "t", "nu_coupled", "nu_intermediate", "euler_count", "N_exact",
                 "err_coupled", "err_intermediate", "err_euler"]


def replay(config: ExperimentConfig, realization: PoissonRealization, n: int):
    """Drive all four processes with one serialized realization; returns the run and its step table."""
    if realization.K < intensity_bound(config.spec.C):
        raise ValueError("realization height is below the model's intensity bound")
    T = realization.T
    if n_steps(n, T) < 1:
        raise ValueError("n too small for the realization horizon")
    res = run_coupled(config.spec, config.rho0, realization, n, config.run["mode"]["blocks"])
    return res, list(res.rows())


# -- entry point ------------------------------------------------------------------

def resolve_workers(flag: int | None) -> int:
    if flag is not None:
        value, source = flag, "--workers"
    elif os.environ.get(WORKERS_ENV):
        raw, source = os.environ[WORKERS_ENV], WORKERS_ENV
        try:
            value = int(raw)
        except ValueError:
            raise ConfigError(source, f"not an integer: {raw!r}") from None
    else:
        return 1
    if value < 1:
        raise ConfigError(source, "must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qjump", description="Jump-type qubit quantum trajectory experiments.")
    p.add_argument("--version", action="version", version=f"qjump {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [("trajectories", "write per-path and ensemble-mean CSVs"),
                        ("convergence", "estimate error rates and write the report bundle"),
                        ("audit", "run the invariant suite"),
                        ("replay", "re-run one saved realization through all four processes")]:
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, type=Path, help="YAML or JSON experiment file")
        s.add_argument("--seed", type=int, help="override run.seed")
        s.add_argument("--out", type=Path, help="override output.directory")
        s.add_argument("--paths", type=int, help="override run.n_paths")
        s.add_argument("--workers", type=int, help=f"worker processes (default ${WORKERS_ENV} or 1)")
        if name == "replay":
            s.add_argument("--realization", required=True, type=Path, help="saved *_realization.json")
            s.add_argument("--n", required=True, type=int, help="discretization parameter")
    return p


def load_config(path: Path, args) -> ExperimentConfig:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError("--config", f"cannot read {path}: {e.strerror}") from None
    return parse_config(text).with_overrides(seed=args.seed, out=args.out, paths=args.paths)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, args)
        workers = resolve_workers(args.workers)
        if args.command == "trajectories":
            files = run_trajectories(config)
            print(f"wrote {len(files)} files to {config.output['directory']}")
            return EXIT_OK
        if args.command == "convergence":
            bundle = run_convergence(config, workers)
            _print_report(bundle)
            return EXIT_OK if bundle["passed"] else EXIT_CHECK
        if args.command == "audit":
            results = run_audit(config)
            for r in results:
                print(r.line())
            return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK
        if args.command == "replay":
            try:
                realization = PoissonRealization.loads(args.realization.read_text())
            except (OSError, KeyError, ValueError) as e:
                raise ConfigError("--realization", str(e)) from None
            res, rows = replay(config, realization, args.n)
            w = csv.writer(sys.stdout, lineterminator="\n")
            w.writerow(REPLAY_HEADER)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
            return EXIT_OK if res.shares_realization() else EXIT_CHECK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
