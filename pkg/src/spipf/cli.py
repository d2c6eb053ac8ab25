"""Command line entry point: ``spipf simulate|filter|experiment <config>``.

On failure a single JSON line ``{"error": <type>, "message": <text>}`` is
written to stderr and the exit status is nonzero (2 for config problems, 1
for everything else).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ExperimentError
from .filter import records_to_csv
from .harness import (
    ALGORITHMS,
    FILTER_STREAM,
    TRIAL_FAILURES,
    _seed,
    build_system,
    load_config,
    mean_mse,
    run_algorithm,
    run_experiment,
    simulate_trial,
)


class _Parser(argparse.ArgumentParser):
    """Usage errors also end in one JSON error line."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(json.dumps({"error": "UsageError", "message": message}), file=sys.stderr)
        sys.exit(2)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spipf", description="Salted path integral particle filter experiments")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate one ground truth and its measurements")
    s.add_argument("config")
    s.add_argument("--trial", type=int, default=0)
    s.add_argument("--output", help="override output_dir")

    f = sub.add_parser("filter", help="run one algorithm on one simulated trial")
    f.add_argument("config")
    f.add_argument("--algorithm", choices=ALGORITHMS, default="spipf")
    f.add_argument("--trial", type=int, default=0)
    f.add_argument("--output", help="override output_dir")

    e = sub.add_parser("experiment", help="run the full Monte-Carlo sweep")
    e.add_argument("config")
    e.add_argument("--workers", type=int, help="override workers")
    e.add_argument("--trials", type=int, help="override n_trials")
    e.add_argument("--output", help="override output_dir")
    return p


def _config(args):
    cfg = load_config(args.config)
    if args.output:
        cfg = replace(cfg, output_dir=args.output)
    if getattr(args, "trials", None):
        cfg = replace(cfg, n_trials=args.trials)
    return cfg


def cmd_simulate(args) -> dict:
    cfg = _config(args)
    truth = simulate_trial(cfg, args.trial)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    truth.to_csv(out / f"truth_trial{args.trial:03d}.csv", out / f"transitions_trial{args.trial:03d}.csv")
    truth.measurements.to_csv(out / f"measurements_trial{args.trial:03d}.csv")
    return {"output_dir": str(out), "steps": len(truth.measurements),
            "transitions": [list(map(int, t)) for t in truth.transition_steps]}


def cmd_filter(args) -> dict:
    cfg = _config(args)
    fcfg = replace(cfg.filter, seed=int(_seed(cfg, FILTER_STREAM, args.trial).generate_state(1)[0]))
    truth = simulate_trial(cfg, args.trial)
    system = build_system(cfg)
    records = run_algorithm(args.algorithm, system, truth, fcfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"filter_{args.algorithm}_trial{args.trial:03d}.csv"
    records_to_csv(records, path)
    return {"output": str(path), "mse_full": mean_mse(records, truth, system),
            "transition_time": truth.first_transition_time}


def cmd_experiment(args) -> dict:
    cfg = _config(args)
    summary = run_experiment(cfg, workers=args.workers)
    return {"output_dir": cfg.output_dir,
            "rows": [{k: r[k] for k in ("sweep_value", "algorithm", "retained_trials", "mean_mse")}
                     for r in summary.rows]}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj) if np.isfinite(obj) else str(float(obj))
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"simulate": cmd_simulate, "filter": cmd_filter, "experiment": cmd_experiment}[args.command]
    try:
        result = handler(args)
    except ConfigError as exc:
        print(json.dumps({"error": "ConfigError", "message": str(exc)}), file=sys.stderr)
        return 2
    except (ExperimentError, *TRIAL_FAILURES, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps(_jsonable(result)))
    return 0


if __name__ == "__main__":
    sys.exit(main())
