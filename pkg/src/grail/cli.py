"""Command-line entry point.

Subcommands: compress, eval, sweep, ablate, gram-dump, inspect.
stdout carries machine-readable JSON/CSV; logs go to stderr.
Exit codes: 0 ok, 2 bad arguments, 3 file format error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .calibration import accumulate_gram
from .errors import (
    ArgumentError,
    DegenerateStatisticsError,
    FormatError,
    ShapeError,
    SingularMatrixError,
)
from .harness import SyntheticTask, calib_ablation, evaluate, run_sweep
from .io_formats import (
    load_calibration,
    load_model,
    save_gram,
    save_model,
)
from .model import AttentionBlock, ConvBlock, DenseBlock, FfnBlock
from .pipeline import METHODS, CompressionPlan, PlanEntry, compress_graph, uniform_plan

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_FORMAT = 3
EXIT_NUMERICAL = 4


def _threads_flag(parser):
    parser.add_argument("--threads", type=int,
                        default=int(os.environ.get("GRAIL_THREADS", "1")),
                        help="parallelism cap (GRAIL_THREADS env is the fallback)")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="grail")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compress", help="compress a model with the closed-loop pipeline")
    p.add_argument("--model", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--plan", help="JSON plan file; overrides --method/--ratio")
    p.add_argument("--method", choices=METHODS, default="mag-l2")
    p.add_argument("--ratio", type=float, default=0.5)
    p.add_argument("--compensate", action="store_true")
    p.add_argument("--alpha", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--timings", action="store_true",
                   help="include wall times in the report (non-deterministic)")
    _threads_flag(p)

    p = sub.add_parser("eval", help="evaluate a model on a synthetic task")
    p.add_argument("--model", required=True)
    p.add_argument("--task", required=True, help="task config JSON")
    p.add_argument("--reference", help="reference model for regression metrics")
    p.add_argument("--seed", type=int, default=0)
    _threads_flag(p)

    p = sub.add_parser("sweep", help="compressed-vs-compensated sweep, CSV on stdout")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--timings", action="store_true")
    _threads_flag(p)

    p = sub.add_parser("ablate", help="calibration-size ablation, CSV on stdout")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    _threads_flag(p)

    p = sub.add_parser("gram-dump", help="write one block's Gram statistics")
    p.add_argument("--model", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--block", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _threads_flag(p)

    p = sub.add_parser("inspect", help="print the model manifest as JSON")
    p.add_argument("--model", required=True)
    p.add_argument("--seed", type=int, default=0)
    _threads_flag(p)

    return parser


def _load_json(path, what: str):
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{what} {path} is not valid JSON: {exc}") from exc


def _plan_from_file(path) -> CompressionPlan:
    doc = _load_json(path, "plan file")
    try:
        entries = [
            PlanEntry(int(e["block"]), e["method"], float(e["ratio"]),
                      bool(e.get("compensate", True)))
            for e in doc["entries"]
        ]
        return CompressionPlan(entries, alpha=float(doc.get("alpha", 1e-3)),
                               seed=int(doc.get("seed", 0)))
    except KeyError as exc:
        raise ArgumentError(f"plan file missing key {exc}") from exc


def _task_from_dict(doc: dict, where: str) -> SyntheticTask:
    if not isinstance(doc, dict):
        raise ArgumentError(f"{where} must be a JSON object")
    allowed = {"kind", "input_dim", "output_dim", "hidden_width", "n_eval",
               "seed", "redundancy", "noise"}
    unknown = set(doc) - allowed
    if unknown:
        raise ArgumentError(f"{where}: unknown key {sorted(unknown)[0]!r}")
    return SyntheticTask(**doc)


def _cmd_compress(args) -> int:
    graph = load_model(args.model)
    batch = load_calibration(args.calib)
    if args.plan:
        plan = _plan_from_file(args.plan)
    else:
        if not 0.0 <= args.ratio < 1.0:
            raise ArgumentError(f"--ratio must be in [0, 1), got {args.ratio}")
        if not 0.0 < args.alpha < 1.0:
            raise ArgumentError(f"--alpha must be in (0, 1), got {args.alpha}")
        plan = uniform_plan(graph, args.method, args.ratio, args.compensate,
                            alpha=args.alpha, seed=args.seed)
    compressed, reports = compress_graph(graph, batch, plan,
                                         collect_timings=args.timings)
    save_model(compressed, args.out)
    print(json.dumps({"out": args.out, "blocks": reports}, indent=2))
    return EXIT_OK


def _cmd_eval(args) -> int:
    graph = load_model(args.model)
    task = _task_from_dict(_load_json(args.task, "task config"), "task config")
    reference = load_model(args.reference) if args.reference else graph
    metric = evaluate(task, graph, reference, seed=args.seed)
    print(json.dumps({"kind": task.kind, "metric": metric}))
    return EXIT_OK


def _cmd_sweep(args) -> int:
    doc = _load_json(args.config, "sweep config")
    if not isinstance(doc, dict):
        raise ArgumentError("sweep config must be a JSON object")
    unknown = set(doc) - {"task", "methods", "ratios", "seeds", "calib_sizes", "alpha"}
    if unknown:
        raise ArgumentError(f"sweep config: unknown key {sorted(unknown)[0]!r}")
    task = _task_from_dict(doc.get("task", {}), "sweep config key 'task'")
    report = run_sweep(
        task,
        methods=tuple(doc.get("methods", METHODS)),
        ratios=tuple(doc.get("ratios", (0.3, 0.5, 0.7))),
        seeds=tuple(doc.get("seeds", (args.seed,))),
        calib_sizes=tuple(doc.get("calib_sizes", (128,))),
        alpha=float(doc.get("alpha", 1e-3)),
        collect_timings=args.timings,
    )
    sys.stdout.write(report.to_csv())
    return EXIT_OK


def _cmd_ablate(args) -> int:
    doc = _load_json(args.config, "ablate config")
    if not isinstance(doc, dict):
        raise ArgumentError("ablate config must be a JSON object")
    unknown = set(doc) - {"task", "method", "ratio", "sizes", "seeds", "alpha"}
    if unknown:
        raise ArgumentError(f"ablate config: unknown key {sorted(unknown)[0]!r}")
    task = _task_from_dict(doc.get("task", {}), "ablate config key 'task'")
    improvements = calib_ablation(
        task,
        method=doc.get("method", "mag-l2"),
        ratio=float(doc.get("ratio", 0.5)),
        sizes=tuple(doc.get("sizes", (8, 16, 32, 64, 128, 256))),
        seeds=tuple(doc.get("seeds", (args.seed,))),
        alpha=float(doc.get("alpha", 1e-3)),
    )
    lines = ["calib_size,mean_improvement"]
    lines += [f"{size},{imp:.9g}" for size, imp in improvements.items()]
    sys.stdout.write("\n".join(lines) + "\n")
    return EXIT_OK


def _cmd_gram_dump(args) -> int:
    graph = load_model(args.model)
    batch = load_calibration(args.calib)
    if not 0 <= args.block < len(graph.blocks):
        raise ArgumentError(
            f"--block {args.block} out of range for {len(graph.blocks)} blocks"
        )
    stats = accumulate_gram(graph, batch, args.block)
    save_gram(stats.g, stats.n_samples, args.out)
    print(json.dumps({"out": args.out, "block": args.block,
                      "width": stats.width, "n_samples": stats.n_samples}))
    return EXIT_OK


def _describe_block(block) -> dict:
    if isinstance(block, DenseBlock):
        return {"type": "dense", "activation": block.activation,
                "in": block.in_width, "hidden": block.hidden_width,
                "out": block.out_width}
    if isinstance(block, FfnBlock):
        return {"type": "ffn", "activation": block.activation,
                "in": block.in_width, "hidden": block.hidden_width,
                "out": block.out_width}
    if isinstance(block, ConvBlock):
        return {"type": "conv", "activation": block.activation,
                "in": block.in_width, "hidden": block.hidden_width,
                "out": block.out_width,
                "producer_kernel": list(block.w_producer.shape[2:]),
                "consumer_kernel": list(block.w_consumer.shape[2:])}
    if isinstance(block, AttentionBlock):
        return {"type": "attention", "n_heads": block.n_heads,
                "head_dim": block.head_dim, "gqa_groups": block.gqa_groups,
                "causal": block.causal, "in": block.in_width,
                "out": block.out_width}
    return {"type": type(block).__name__}


def _cmd_inspect(args) -> int:
    graph = load_model(args.model)
    print(json.dumps({
        "input_shape": list(graph.input_shape),
        "blocks": [_describe_block(b) for b in graph.blocks],
    }, indent=2))
    return EXIT_OK


_COMMANDS = {
    "compress": _cmd_compress,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "ablate": _cmd_ablate,
    "gram-dump": _cmd_gram_dump,
    "inspect": _cmd_inspect,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except (ArgumentError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (SingularMatrixError, DegenerateStatisticsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
