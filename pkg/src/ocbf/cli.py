"""Command-line entry point: run, sweep, compare and verify.

Exit codes: 0 success, 1 configuration error, 2 I/O error, 3 verify failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import yaml

from . import __version__
from .config import ConfigError, ScenarioConfig, from_dict, load_config
from .controller import MODES
from .mergesim import LOG_FIELDS, run_scenario, scenario_arrivals

SCHEMA_VERSION = 1
DEFAULT_ALPHAS = (0.01, 0.25, 0.40, 0.60)
EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_VERIFY = 0, 1, 2, 3


class IoFailure(Exception):
    """An output could not be written; the message names the path."""


# ---- helpers -------------------------------------------------------------------


def arrivals_hash(arrivals) -> str:
    """Stable digest of an arrival list (exact float bits, lane and order)."""
    h = hashlib.sha256()
    for a in arrivals:
        h.update(f"{float(a.t).hex()}|{a.lane}|{float(a.v0).hex()};".encode())
    return h.hexdigest()


def _floats(text: str, n=None):
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from exc
    if n is not None and len(vals) != n:
        raise ConfigError(f"expected {n} comma-separated numbers, got {text!r}")
    return vals


def apply_overrides(cfg: ScenarioConfig, args) -> ScenarioConfig:
    """Fold command-line flags into a loaded configuration."""
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        changes["controller__mode"] = args.mode
    if getattr(args, "alpha", None) is not None:
        changes["objective"] = {"alpha": args.alpha, "beta": None}
    if getattr(args, "beta", None) is not None:
        changes["objective"] = {"alpha": None, "beta": args.beta}
    if getattr(args, "noise", None) is not None:
        w1, w2 = _floats(args.noise, 2)
        changes["noise"] = {"w1": w1, "w2": w2}
    return cfg.replace(**changes) if changes else cfg


def _jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return _jsonable(obj.item())
    return obj


def _makedirs(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create output directory {path}: {exc.strerror}") from exc


def _write_text(path, text):
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc.strerror}") from exc


def write_trajectories(path, log):
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_FIELDS)
            for row in log:
                w.writerow([repr(x) if isinstance(x, float) else x for x in row])
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc.strerror}") from exc


def metrics_document(cfg: ScenarioConfig, metrics, arrivals) -> dict:
    return _jsonable({
        "schema_version": SCHEMA_VERSION,
        "version": __version__,
        "seed": cfg.seed,
        "mode": cfg.controller.mode,
        "alpha": cfg.alpha,
        "beta": cfg.beta,
        "arrivals_sha256": arrivals_hash(arrivals),
        "summary": metrics.summary(),
        "per_cav": [dataclasses.asdict(m) for m in metrics.per_cav],
        "events": [
            {"cav": e.cav, "tag": e.tag, "t1": e.t1, "b1": e.b1, "duration": e.duration,
             "recovered": e.recovered, "c_min": e.c_min, "bound": e.bound(cfg.dt),
             "within_bound": e.within_bound(cfg.dt), "infeasible": e.infeasible}
            for e in metrics.events
        ],
        "config": dataclasses.asdict(cfg),
    })


def _simulate(cfg_dict):
    """Worker entry: one scenario from a plain dict, returning plain data."""
    cfg = from_dict(cfg_dict)
    arrivals = scenario_arrivals(cfg)
    metrics, log = run_scenario(cfg, arrivals)
    return metrics_document(cfg, metrics, arrivals), log


def _map(fn, items, jobs):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---- verbs ------------------------------------------------------------------


def cmd_run(cfg: ScenarioConfig, args) -> int:
    doc, log = _simulate(dataclasses.asdict(cfg))
    if args.out:
        _makedirs(args.out)
        write_trajectories(os.path.join(args.out, "trajectories.csv"), log)
        _write_text(os.path.join(args.out, "metrics.json"), json.dumps(doc, indent=2) + "\n")
    s = doc["summary"]
    print(f"cavs={s['n_cavs']} travel_time={s['all']['travel_time']:.4f} energy={s['all']['energy']:.4f} "
          f"objective={s['all']['objective']:.4f} violations={s['violation_events']} "
          f"infeasible_steps={s['infeasible_steps']}")
    return EXIT_OK


def cmd_sweep(cfg: ScenarioConfig, args) -> int:
    alphas = _floats(args.alphas) if args.alphas else list(DEFAULT_ALPHAS)
    seeds = [int(s) for s in _floats(args.seeds)] if args.seeds else [cfg.seed]
    cfgs = []
    for a in alphas:
        for s in seeds:
            cfgs.append(dataclasses.asdict(cfg.replace(objective={"alpha": a, "beta": None}, seed=s)))
    docs = [d for d, _ in _map(_simulate, cfgs, args.jobs)]
    # matched seeds: every alpha must see the same arrival stream per seed
    by_seed = {}
    for d in docs:
        if by_seed.setdefault(d["seed"], d["arrivals_sha256"]) != d["arrivals_sha256"]:
            raise RuntimeError(f"arrival streams differ across the sweep for seed {d['seed']}")
    series = []
    for a in alphas:
        group = [d for d in docs if d["alpha"] == a]
        series.append({
            "alpha": a,
            "travel_time": float(np.mean([d["summary"]["all"]["travel_time"] for d in group])),
            "energy": float(np.mean([d["summary"]["all"]["energy"] for d in group])),
            "objective": float(np.mean([d["summary"]["all"]["objective"] for d in group])),
            "fuel": float(np.mean([d["summary"]["all"]["fuel"] for d in group])),
        })
    for row in series:
        print(f"alpha={row['alpha']:.2f} travel_time={row['travel_time']:.4f} energy={row['energy']:.4f}")
    if args.out:
        _makedirs(args.out)
        lines = ["alpha,travel_time,energy,objective,fuel"]
        lines += [f"{r['alpha']!r},{r['travel_time']!r},{r['energy']!r},{r['objective']!r},{r['fuel']!r}"
                  for r in series]
        _write_text(os.path.join(args.out, "alpha_series.csv"), "\n".join(lines) + "\n")
        report = {"schema_version": SCHEMA_VERSION, "axis": "alpha", "alphas": alphas, "seeds": seeds,
                  "series": series, "runs": docs}
        _write_text(os.path.join(args.out, "sweep.json"), json.dumps(_jsonable(report), indent=2) + "\n")
    return EXIT_OK


def compare_modes(cfg: ScenarioConfig, modes, jobs=1) -> dict:
    """Run several controller modes on one arrival stream and diff them against the first."""
    cfgs = [dataclasses.asdict(cfg.replace(controller__mode=m)) for m in modes]
    docs = [d for d, _ in _map(_simulate, cfgs, jobs)]
    hashes = {d["arrivals_sha256"] for d in docs}
    if len(hashes) != 1:
        raise RuntimeError("compared runs saw different arrival streams")
    base = {c["id"]: c for c in docs[0]["per_cav"]}
    out = {"schema_version": SCHEMA_VERSION, "seed": cfg.seed, "modes": list(modes),
           "arrivals_sha256": hashes.pop(), "runs": docs, "deltas": {}}
    for m, d in zip(modes[1:], docs[1:]):
        per = []
        for c in d["per_cav"]:
            b = base.get(c["id"])
            if b is not None:
                per.append({"id": c["id"], **{k: c[k] - b[k] for k in ("travel_time", "energy", "fuel",
                                                                         "objective")}})
        means = {k: (d["summary"]["all"][k] - docs[0]["summary"]["all"][k])
                 for k in ("travel_time", "energy", "fuel", "objective")}
        out["deltas"][m] = {"mean": means, "per_cav": per}
    return _jsonable(out)


def cmd_compare(cfg: ScenarioConfig, args) -> int:
    modes = [m.strip() for m in args.compare.split(",") if m.strip()]
    bad = [m for m in modes if m not in MODES]
    if len(modes) < 2 or bad:
        raise ConfigError(f"--compare needs two or more of {MODES}, got {args.compare!r}")
    report = compare_modes(cfg, modes, args.jobs)
    for m, d in report["deltas"].items():
        mean = d["mean"]
        print(f"{m} - {modes[0]}: travel_time={mean['travel_time']:+.4f} energy={mean['energy']:+.4f} "
              f"objective={mean['objective']:+.4f}")
    if args.out:
        _makedirs(args.out)
        _write_text(os.path.join(args.out, "comparison.json"), json.dumps(report, indent=2) + "\n")
    return EXIT_OK


def cmd_verify(raw: dict, args) -> int:
    from .verify import run_checks

    checks = run_checks(raw, tol_scale=args.tol, n=args.samples, seed=args.seed or 0)
    width = max(len(c.name) for c in checks)
    for c in checks:
        print(f"{'PASS' if c.ok else 'FAIL'}  {c.name:<{width}}  worst={c.worst:.3e}  tol={c.tol:.1e}  {c.detail}")
    return EXIT_OK if all(c.ok for c in checks) else EXIT_VERIFY


# ---- argument parsing -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ocbf", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, scenario=True):
        sp.add_argument("--config", metavar="PATH", help="scenario file (YAML); defaults apply when omitted")
        sp.add_argument("--seed", type=int, metavar="N")
        if scenario:
            sp.add_argument("--out", metavar="DIR", help="directory for output files")
            sp.add_argument("--mode", choices=MODES)
            g = sp.add_mutually_exclusive_group()
            g.add_argument("--alpha", type=float, metavar="X")
            g.add_argument("--beta", type=float, metavar="X")
            sp.add_argument("--noise", metavar="W1,W2", help="uniform noise bounds on speed and acceleration")
            sp.add_argument("--jobs", type=int, default=1, metavar="N", help="worker processes")

    common(sub.add_parser("run", help="simulate one scenario"))
    sw = sub.add_parser("sweep", help="sweep alpha on matched seeds")
    common(sw)
    sw.add_argument("--alphas", metavar="A1,A2,...", help=f"default {','.join(map(str, DEFAULT_ALPHAS))}")
    sw.add_argument("--seeds", metavar="S1,S2,...", help="default: the configured seed")
    cp = sub.add_parser("compare", help="compare controller modes on one arrival stream")
    common(cp)
    cp.add_argument("--compare", required=True, metavar="M1,M2")
    vf = sub.add_parser("verify", help="run the built-in oracle checks")
    common(vf, scenario=False)
    vf.add_argument("--tol", type=float, default=1.0, metavar="SCALE",
                    help="multiply every check tolerance by SCALE (values < 1 tighten)")
    vf.add_argument("--samples", type=int, default=200, metavar="N", help="random cases per check")
    return p


def _load_raw(path):
    if not path:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc.strerror}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"{path}: parse error{where}: {getattr(exc, 'problem', exc)}") from exc
    return data if data is not None else {}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "verify":
            return cmd_verify(_load_raw(args.config), args)
        if args.config:
            try:
                cfg = load_config(args.config)
            except OSError as exc:
                raise IoFailure(f"cannot read {args.config}: {exc.strerror}") from exc
        else:
            cfg = ScenarioConfig()
        cfg = apply_overrides(cfg, args)
        t = time.perf_counter()
        code = {"run": cmd_run, "sweep": cmd_sweep, "compare": cmd_compare}[args.verb](cfg, args)
        print(f"elapsed {time.perf_counter() - t:.2f}s", file=sys.stderr)
        return code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IoFailure as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
