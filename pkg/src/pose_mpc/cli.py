"""Command-line entry point: ``pose-mpc {run,bench,plan-debug,validate-config}``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .harness import aggregate, benchmark_planning, run_experiment, run_trial
from .kinematics import ConfigurationError
from .planner import select_candidate
from .riccati import NumericalFailure

log = logging.getLogger("pose_mpc")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    exp = cfg.values["experiment"]
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigurationError("--threads: must be >= 1")
        exp["threads"] = args.threads
        cfg.values["bench"]["threads"] = (args.threads,)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigurationError("--seed: must be >= 0")
        exp["seed"] = args.seed
    return cfg


def _out_dir(cfg: RunConfig, args) -> Path:
    if args.out is not None:
        return Path(args.out)
    return Path(cfg.resolve(cfg.get("experiment", "output")))


class _Staging:
    """Collect outputs in a scratch directory; publish only on success."""

    def __init__(self, target: Path):
        self.target = target

    def __enter__(self) -> Path:
        self.target.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=".staging-", dir=self.target))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            for f in self.tmp.iterdir():
                shutil.move(str(f), self.target / f.name)
        shutil.rmtree(self.tmp, ignore_errors=True)
        return False


def _header_lines(cfg: RunConfig, seeds) -> list[str]:
    return [f"# spec_hash {cfg.digest()}", f"# seeds {' '.join(map(str, seeds))}"]


def _num(x) -> str:
    # repr of a Python float round-trips exactly
    return repr(float(x))


def write_trial_csv(path: Path, record, cfg: RunConfig):
    with open(path, "w", newline="") as fh:
        for line in _header_lines(cfg, [record.seed]):
            fh.write(line + "\n")
        fh.write(f"# variant {record.variant}\n")
        if record.failed:
            fh.write(f"# failed {record.failure}\n")
        w = csv.writer(fh)
        w.writerow(["step", "x", "y", "z", "roll", "pitch", "yaw",
                    "r_x", "r_y", "r_z", "r_roll", "r_pitch", "r_yaw",
                    "error_norm", "track_cost", "input_cost", "pose_cost", "pose_switch"])
        for t in range(len(record.track_cost)):
            s, r = record.states[t + 1], record.references[t + 1]
            w.writerow([t + 1, *map(_num, s), *map(_num, r),
                        _num(np.linalg.norm(record.errors[t + 1])),
                        _num(record.track_cost[t]), _num(record.input_cost[t]),
                        _num(record.pose_cost[t]), int(record.switched[t])])


def _jsonable_plan(k, plan):
    return {"step": k, "chosen_index": plan.chosen_index,
            "costs": plan.per_candidate_costs.tolist(), "flags": plan.flags}


def cmd_run(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args)
    variants = cfg.get("experiment", "variants")
    report = {"spec_hash": cfg.digest(), "config": cfg.to_mapping(), "variants": {}}
    with _Staging(out) as stage:
        for variant in variants:
            spec = cfg.experiment_spec(variant)
            diag = None
            if cfg.get("experiment", "diagnostics"):
                diag = open(stage / f"plans_{variant}.jsonl", "w")
            try:
                if diag is None:
                    agg, records = run_experiment(spec, keep_records=True)
                else:
                    records = []
                    for i in range(spec.trials):
                        seed = spec.base_seed + i

                        def hook(k, plan, seed=seed):
                            diag.write(json.dumps({"seed": seed, **_jsonable_plan(k, plan)}) + "\n")
                        records.append(run_trial(spec, seed, on_plan=hook))
                    agg = aggregate(spec, records)
            finally:
                if diag is not None:
                    diag.close()
            for rec in records:
                write_trial_csv(stage / f"trial_{variant}_{rec.seed}.csv", rec, cfg)
            entry = agg.to_dict()
            entry["seeds"] = [r.seed for r in records]
            entry["accumulated_cost_curve"] = agg.curve.tolist()
            report["variants"][variant] = entry
            log.info("%s: mean C_total %.3f over %d trials", variant, agg.mean, len(agg.totals))
        with open(stage / "report.json", "w") as fh:
            json.dump(report, fh, indent=2)
    print(json.dumps({v: report["variants"][v]["mean_C_total"] for v in variants}))
    return EXIT_OK


def cmd_bench(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args)
    b = cfg.values["bench"]
    spec = cfg.experiment_spec()
    rows = benchmark_planning(spec, b["candidates"], b["horizons"], b["threads"], n_plans=b["plans"])
    with _Staging(out) as stage:
        with open(stage / "timing.csv", "w", newline="") as fh:
            for line in _header_lines(cfg, [spec.base_seed]):
                fh.write(line + "\n")
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    for r in rows:
        print(f"|Theta|={r['candidates']:3d} H={r['H']:2d} threads={r['threads']:2d} "
              f"median {r['median_ms']:.3f} ms")
    return EXIT_OK


def plan_debug(cfg: RunConfig, step: int) -> dict:
    spec = cfg.experiment_spec()
    if not 0 <= step < spec.T:
        raise ConfigurationError(f"--step: must be in [0, {spec.T})")
    captured = {}

    def hook(k, plan):
        if k == step:
            captured["plan"] = plan

    record = run_trial(spec, spec.base_seed, steps=step + 1, on_plan=hook)
    if "plan" not in captured:
        raise NumericalFailure(f"trial failed before step {step}: {record.failure}")
    plan = captured["plan"]
    sol = plan.solution
    return {
        "spec_hash": cfg.digest(),
        "seed": spec.base_seed,
        "variant": spec.variant,
        "step": step,
        "e0_mode": spec.e0_mode,
        "theta0": plan.candidates[0].tolist(),
        "candidates": plan.candidates.tolist(),
        "per_candidate_costs": plan.per_candidate_costs.tolist(),
        "argmin": select_candidate(plan.per_candidate_costs),
        "chosen_index": plan.chosen_index,
        "chosen": plan.chosen.tolist(),
        "pose_command": plan.pose_command.tolist(),
        "u_star": plan.u_star.tolist(),
        "control": plan.control.tolist(),
        "predicted_cost": plan.predicted_cost,
        "error0": plan.error0.tolist(),
        "P": sol.P.tolist(),
        "p": sol.p.tolist(),
        "c": sol.c.tolist(),
        "flags": plan.flags,
    }


def cmd_plan_debug(cfg: RunConfig, args) -> int:
    dump = plan_debug(cfg, args.step)
    text = json.dumps(dump, indent=2)
    if args.out is not None:
        out = Path(args.out)
        with _Staging(out) as stage:
            (stage / f"plan_debug_step{args.step}.json").write_text(text)
    else:
        print(text)
    return EXIT_OK


def cmd_validate(cfg: RunConfig, args) -> int:
    spec = cfg.experiment_spec()
    print(json.dumps({"ok": True, "spec_hash": cfg.digest(),
                      "experiment": dataclasses.asdict(spec)}, default=list))
    return EXIT_OK


COMMANDS = {"run": cmd_run, "bench": cmd_bench, "plan-debug": cmd_plan_debug,
            "validate-config": cmd_validate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pose-mpc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="run-config INI file")
        p.add_argument("--threads", type=int, default=None, help="worker threads for planning")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the base seed")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "plan-debug":
            p.add_argument("--step", type=int, default=0, help="time step to dump")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        return COMMANDS[args.command](cfg, args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalFailure, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
