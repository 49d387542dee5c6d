"""Command-line entry point: ``trap-attack <stage> --config run.yaml``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import TrapError
from .pipeline.config import ExperimentConfig
from .pipeline.experiment import STAGES, Experiment


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.from_dict({})
    overrides = {}
    if args.run_id:
        overrides["run_id"] = args.run_id
    if args.output_dir:
        overrides["output_dir"] = args.output_dir
    if args.workers:
        overrides["workers"] = args.workers
    if overrides:
        cfg = ExperimentConfig.from_dict({**cfg.raw, **overrides})
    return cfg


def _summary(report: dict) -> str:
    lines = [f"{'method':<10} {'ASR':>6} {'mean P':>8} {'count':>6}"]
    for row in report["methods"]:
        lines.append(f"{row['method']:<10} {row['asr']:>6.3f} {row['mean_p']:>8.3f} {row['instances']:>6d}")
    c = report["completeness"]
    lines.append(f"complete {c['instances_complete']}/{c['instances_included']} "
                 f"({c['fraction']:.2f}); sampled {c['instances_sampled']}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trap-attack", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def stage_parser(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", "-c", help="YAML or JSON run configuration")
        p.add_argument("--run-id")
        p.add_argument("--output-dir")
        p.add_argument("--workers", type=int)
        return p

    stage_parser("bootstrap", "sample instances and generate verified bad images")
    stage_parser("attack", "run the TRAP optimisation on every included instance")
    b = stage_parser("baseline", "run the SPSA, bandit and unoptimised-diffusion baselines")
    b.add_argument("--methods", nargs="+", choices=["spsa", "bandit", "noopt"])
    stage_parser("evaluate", "estimate selection probabilities for every method")
    stage_parser("ablate", "temperature, prompt-variant and noise-defense sweeps")
    stage_parser("report", "aggregate estimates into report.json, tables and plots")
    stage_parser("run", "all stages in order")

    t = sub.add_parser("make-toy-dataset", help="write a synthetic caption dataset")
    t.add_argument("root")
    t.add_argument("--count", type=int, default=60)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--size", type=int, default=64)

    s = sub.add_parser("serve-agent", help="serve the surrogate agent over HTTP")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8765)
    s.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "make-toy-dataset":
            from .pipeline.dataset import make_toy_dataset

            print(make_toy_dataset(args.root, args.count, args.seed, args.size))
            return 0
        if args.command == "serve-agent":
            import uvicorn

            from .agent_server import create_app

            uvicorn.run(create_app(seed=args.seed), host=args.host, port=args.port)
            return 0
        exp = Experiment(_load(args))
        if args.command == "run":
            print(_summary(exp.run(STAGES)))
        elif args.command == "baseline":
            exp.baseline(args.methods)
        elif args.command == "bootstrap":
            specs = exp.bootstrap()
            accepted = sum(s.bootstrap_status == "accepted" for s in specs)
            print(json.dumps({"sampled": len(specs), "accepted": accepted}))
        elif args.command == "report":
            print(_summary(exp.report()))
        else:
            getattr(exp, args.command)()
    except TrapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
