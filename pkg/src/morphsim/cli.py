"""Command-line experiment runner: ``morphsim {profile,run,sweep,compare}``.

Exit codes: 0 success, 2 validation error, 3 runtime fault.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .config import ARMS, ExperimentConfig, load_config
from .engine import ServingSimulator
from .metrics import write_outputs
from .profiler import (
    BACK_TO_FRONT,
    FRONT_TO_BACK,
    RANDOM,
    LayerSwapProfiler,
    baseline_sequence,
    evaluate_sequence,
    load_sequence,
    persist_sequence,
)
from .toymodel import build_model, calibration_batch
from .workload import downscale, synth_poisson

log = logging.getLogger("morphsim")

EXIT_OK, EXIT_INVALID, EXIT_FAULT = 0, 2, 3

SEQUENCE_FILES = {
    "lis_greedy": "lis_greedy.json",
    "front_to_back": "front_to_back.json",
    "back_to_front": "back_to_front.json",
    "random": "random.json",
}

COMPARE_FIELDS = (
    "ttft_ms.p95",
    "slo_violation_rate",
    "throughput_rps",
    "kv.peak_capacity_blocks",
    "exposure.exposed_fraction",
)


class SchemaError(ValueError):
    pass


# -- profile -----------------------------------------------------------------

def cmd_profile(cfg: ExperimentConfig, out: Path) -> dict:
    """Greedy LIS order plus baselines, and the depth-vs-degradation table."""
    p = cfg.profiler
    model = build_model(p.seed, p.num_layers, p.hidden_dim)
    X = calibration_batch(p.seed, p.calibration_samples, p.hidden_dim)
    est = LayerSwapProfiler(model, p.alpha1, p.alpha2, p.beta, p.bits).fit(X)
    sequences = {
        "lis_greedy": est.sequence_,
        "front_to_back": baseline_sequence(FRONT_TO_BACK, p.num_layers),
        "back_to_front": baseline_sequence(BACK_TO_FRONT, p.num_layers),
        "random": baseline_sequence(RANDOM, p.num_layers, seed=p.seed),
    }
    prof_dir = out / "profile"
    prof_dir.mkdir(parents=True, exist_ok=True)
    for name, seq in sequences.items():
        persist_sequence(seq, prof_dir / SEQUENCE_FILES[name])

    curves = {name: evaluate_sequence(model, sequences[name], X, p.bits)
              for name in ("lis_greedy", "front_to_back", "back_to_front")}
    randoms = [evaluate_sequence(model, baseline_sequence(RANDOM, p.num_layers, seed=s), X, p.bits)
               for s in range(p.random_baselines)]
    curves["random_mean"] = np.mean(randoms, axis=0)
    with open(prof_dir / "degradation_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["depth", *curves])
        for depth in range(p.num_layers + 1):
            w.writerow([depth, *(f"{curves[k][depth]:.12g}" for k in curves)])
    log.info("profile written to %s", prof_dir)
    return {"sequences": sequences, "curves": curves}


# -- run -----------------------------------------------------------------------

def _sequence_path(cfg: ExperimentConfig, out: Path) -> Path:
    path = Path(cfg.sequence_file)
    return path if path.is_absolute() else out / path


def simulate(cfg: ExperimentConfig, arm: str, trace, out: Path, audit: bool = False):
    policy = cfg.policy(arm)
    sequence = None
    if policy.kind == "morph":
        path = _sequence_path(cfg, out)
        if not path.exists():
            raise FileNotFoundError(f"swap sequence file not found: {path} (run `morphsim profile` first)")
        sequence = load_sequence(path)
        sequence.check_layers(cfg.model.num_layers)
    sim = ServingSimulator(cfg.model, cfg.kv, cfg.cost, policy, cfg.device_budget_bytes,
                           cfg.reserve_bytes, sequence=sequence, slo_ms=cfg.slo_ms, audit=audit,
                           arm=arm, fingerprint=cfg.fingerprint())
    return sim.run(trace)


def cmd_run(cfg: ExperimentConfig, arm: str, out: Path, audit: bool = False):
    result = simulate(cfg, arm, cfg.trace(), out, audit)
    dest = write_outputs(out / arm, result)
    rep = result.report
    print(f"{arm}: {rep['requests_completed']} requests, P95 TTFT {_fmt(rep['ttft_ms']['p95'])} ms, "
          f"{rep['slo_violations']} SLO violations, peak KV {rep['kv']['peak_capacity_blocks']} blocks "
          f"-> {dest}")
    return result


# -- sweep ---------------------------------------------------------------------

def saturation_rps(points: list[tuple[float, float | None]], slo_ms: float) -> float | None:
    """First rate (ascending) whose P95 TTFT exceeds the SLO; ``None`` if none does."""
    for rps, p95 in sorted(points):
        if p95 is not None and p95 > slo_ms:
            return rps
    return None


def cmd_sweep(cfg: ExperimentConfig, rps_list, arms, out: Path) -> dict:
    if not rps_list:
        raise ValueError("sweep needs at least one request rate")
    if any(r <= 0 for r in rps_list):
        raise ValueError("sweep rates must be positive")
    w = cfg.workload
    rows, table = [], {arm: [] for arm in arms}
    for rps in sorted(rps_list):
        trace = synth_poisson(cfg.seed, rps, w.total_ms, w.prompt_tokens, w.output_tokens)
        if cfg.downscale != 1.0:
            trace = downscale(trace, cfg.downscale)
        for arm in arms:
            rep = simulate(cfg, arm, trace, out).report
            p95 = rep["ttft_ms"]["p95"]
            table[arm].append((rps, p95))
            rows.append([rps, arm, _fmt(p95), rep["slo_violations"], _fmt(rep["throughput_rps"])])
    saturation = {arm: saturation_rps(pts, cfg.slo_ms) for arm, pts in table.items()}
    sweep_dir = out / "sweep"
    sweep_dir.mkdir(parents=True, exist_ok=True)
    with open(sweep_dir / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rps", "arm", "p95_ttft_ms", "slo_violations", "throughput_rps"])
        writer.writerows(rows)
    summary = {"slo_ms": cfg.slo_ms, "config_fingerprint": cfg.fingerprint(),
               "saturation_rps": saturation, "p95_ttft_ms": {a: [[r, p] for r, p in pts] for a, pts in table.items()}}
    (sweep_dir / "saturation.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    for row in rows:
        print("{:>8} {:<18} {:>10} {:>5} {:>8}".format(*row))
    for arm, sat in saturation.items():
        print(f"saturation {arm}: {'not reached' if sat is None else f'{sat:g} rps'}")
    return summary


# -- compare -------------------------------------------------------------------

def _lookup(report: dict, dotted: str, label: str):
    node = report
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            raise SchemaError(f"{label} is missing field '{dotted}'")
        node = node[part]
    return node


def _ratio(a, b):
    if a is None or b is None:
        return None
    if b == 0:
        return 1.0 if a == 0 else math.inf
    return a / b


def cmd_compare(path_a, path_b, force: bool = False) -> dict:
    reports = []
    for path in (path_a, path_b):
        try:
            reports.append(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path} is not valid JSON: {exc}") from None
    a, b = reports
    fp_a = _lookup(a, "config_fingerprint", str(path_a))
    fp_b = _lookup(b, "config_fingerprint", str(path_b))
    if fp_a != fp_b and not force:
        raise SchemaError(
            f"config fingerprints differ ({str(fp_a)[:12]} vs {str(fp_b)[:12]}); use --force to compare anyway"
        )
    ratios = {}
    print(f"{'field':<28} {'a':>14} {'b':>14} {'a/b':>8}")
    for name in COMPARE_FIELDS:
        va, vb = _lookup(a, name, str(path_a)), _lookup(b, name, str(path_b))
        ratios[name] = _ratio(va, vb)
        print(f"{name:<28} {_fmt(va):>14} {_fmt(vb):>14} {_fmt(ratios[name]):>8}")
    return ratios


# -- entry point ---------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return "null"
    if isinstance(v, float):
        return f"{v:.4g}" if math.isfinite(v) else "inf"
    return str(v)


def _rates(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--rps expects comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="morphsim", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="INI experiment config (defaults apply when omitted)")
    parser.add_argument("--seed", type=int, help="workload seed override")
    parser.add_argument("--out", default="out", help="output directory (default: out)")
    parser.add_argument("--downscale", type=float, help="stretch inter-arrival gaps by this factor")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("profile", help="compute swap sequences and the degradation table")

    run = sub.add_parser("run", help="simulate one arm")
    run.add_argument("--arm", required=True, choices=ARMS)
    run.add_argument("--audit", action="store_true", help="check memory invariants at every event")

    sweep = sub.add_parser("sweep", help="P95 TTFT over request rates; reports saturation")
    sweep.add_argument("--rps", required=True, type=_rates, help="comma-separated rates, e.g. 1,2,3")
    sweep.add_argument("--arms", default="static-full,morph-performance",
                       help="comma-separated arms (default: static-full,morph-performance)")

    cmp_ = sub.add_parser("compare", help="ratio table of two report.json files")
    cmp_.add_argument("report_a")
    cmp_.add_argument("report_b")
    cmp_.add_argument("--force", action="store_true", help="compare despite differing fingerprints")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        if args.command == "compare":
            cmd_compare(args.report_a, args.report_b, args.force)
            return EXIT_OK
        cfg = load_config(args.config, seed=args.seed, downscale=args.downscale)
        if args.command == "profile":
            cmd_profile(cfg, out)
        elif args.command == "run":
            cmd_run(cfg, args.arm, out, args.audit)
        elif args.command == "sweep":
            arms = [a.strip() for a in args.arms.split(",") if a.strip()]
            unknown = [a for a in arms if a not in ARMS]
            if unknown or not arms:
                raise ValueError(f"unknown arm(s) {unknown}; choose from {', '.join(ARMS)}")
            cmd_sweep(cfg, args.rps, arms, out)
    except (ValueError, FileNotFoundError) as exc:
        print(f"morphsim: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (RuntimeError, OSError, AssertionError) as exc:
        print(f"morphsim: fault: {exc}", file=sys.stderr)
        return EXIT_FAULT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
