"""Desk-scale experiment battery.

Models are never gradient-trained. Teachers are constructed with injected
channel redundancy (a fraction of producer rows duplicated with small
noise), so how much of the width is recoverable after compression is
controlled analytically and recovery assertions stay honest. Classification
heads are fit by closed-form least squares on hidden features.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .calibration import accumulate_gram
from .compensation import RidgeConfig, merge_block
from .errors import ArgumentError
from .model import BlockGraph, DenseBlock, apply_activation, forward
from .pipeline import METHODS, CompressionPlan, PlanEntry, _decide, compress_graph, uniform_plan

TASK_KINDS = ("teacher_regression", "gaussian_mixture_classification")


@dataclass
class SyntheticTask:
    kind: str = "teacher_regression"
    input_dim: int = 16
    output_dim: int = 8  # n_classes for classification
    hidden_width: int = 32
    n_eval: int = 512
    seed: int = 0
    redundancy: float = 0.75  # fraction of duplicated producer rows
    noise: float = 0.01  # perturbation on the duplicated rows

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ArgumentError(
                f"unknown task kind {self.kind!r}; valid kinds: {', '.join(TASK_KINDS)}"
            )
        if not 0.0 <= self.redundancy < 1.0:
            raise ArgumentError("redundancy must be in [0, 1)")

    @property
    def higher_is_better(self) -> bool:
        return self.kind == "gaussian_mixture_classification"


def _redundant_producer(rng, h: int, c: int, redundancy: float, noise: float):
    """Producer with a duplicated fraction of rows: known recoverable width.

    Duplicates are positive rescalings of their source row with the bias
    scaled identically, so the duplicated hidden channels are exact positive
    multiples of their sources even after relu (up to the injected noise).
    """
    n_dup = int(round(h * redundancy))
    n_base = h - n_dup
    w = np.empty((h, c))
    b = np.empty(h)
    w[:n_base] = rng.standard_normal((n_base, c)) / np.sqrt(c)
    b[:n_base] = 0.1 * rng.standard_normal(n_base)
    sources = rng.integers(0, n_base, size=n_dup)
    scales = rng.uniform(0.5, 2.0, size=n_dup)
    w[n_base:] = scales[:, None] * w[sources] \
        + noise * rng.standard_normal((n_dup, c)) / np.sqrt(c)
    b[n_base:] = scales * b[sources]
    perm = rng.permutation(h)
    return w[perm], b[perm]


def _task_rng(task: SyntheticTask, *extra) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([task.seed, *extra]))


def sample_inputs(task: SyntheticTask, n: int, rng) -> np.ndarray:
    if task.kind == "teacher_regression":
        return rng.standard_normal((n, task.input_dim))
    means = _task_rng(task, 1).standard_normal((task.output_dim, task.input_dim)) * 2.0
    labels = rng.integers(0, task.output_dim, size=n)
    x = means[labels] + rng.standard_normal((n, task.input_dim))
    return x, labels


def build_model(task: SyntheticTask, seed: int = 0) -> BlockGraph:
    """Construct the task's model: one dense block with redundant hidden width."""
    rng = _task_rng(task, 2, seed)
    h, c, o = task.hidden_width, task.input_dim, task.output_dim
    w_p, b_p = _redundant_producer(rng, h, c, task.redundancy, task.noise)
    if task.kind == "teacher_regression":
        w_c = rng.standard_normal((o, h)) / np.sqrt(h)
        b_c = np.zeros(o)
    else:
        # Least-squares head: hidden features -> one-hot targets.
        fit_rng = _task_rng(task, 3, seed)
        x, labels = sample_inputs(task, max(8 * h, 256), fit_rng)
        phi = apply_activation("relu", x @ w_p.T + b_p)
        onehot = np.eye(o)[labels]
        a = phi.T @ phi + 1e-6 * np.eye(h)
        w_c = np.linalg.solve(a, phi.T @ onehot).T
        b_c = np.zeros(o)
    return BlockGraph([DenseBlock(w_p, b_p, "relu", w_c, b_c)], (c,))


def evaluate(task: SyntheticTask, graph: BlockGraph, reference: BlockGraph,
             seed: int = 0) -> float:
    """Held-out metric: accuracy (classification) or relative output error."""
    rng = _task_rng(task, 4, seed)
    if task.kind == "teacher_regression":
        x = sample_inputs(task, task.n_eval, rng)
        y_ref, _ = forward(reference, x)
        y, _ = forward(graph, x)
        denom = np.linalg.norm(y_ref)
        return float(np.linalg.norm(y - y_ref) / max(denom, 1e-300))
    x, labels = sample_inputs(task, task.n_eval, rng)
    y, _ = forward(graph, x)
    return float((y.argmax(axis=1) == labels).mean())


@dataclass
class SweepReport:
    rows: list = field(default_factory=list)
    higher_is_better: bool = True

    CSV_HEADER = ("method,ratio,seed,calib_size,metric_original,"
                  "metric_compressed,metric_compensated,t_calib_s,t_comp_s")

    def improvement(self, row: dict) -> float:
        delta = row["metric_compensated"] - row["metric_compressed"]
        return delta if self.higher_is_better else -delta

    def to_csv(self) -> str:
        lines = [self.CSV_HEADER]
        for r in self.rows:
            lines.append(
                f"{r['method']},{r['ratio']:.9g},{r['seed']},{r['calib_size']},"
                f"{r['metric_original']:.9g},{r['metric_compressed']:.9g},"
                f"{r['metric_compensated']:.9g},{r['t_calib_s']:.9g},"
                f"{r['t_comp_s']:.9g}"
            )
        return "\n".join(lines) + "\n"


def _calibration_batch(task: SyntheticTask, size: int, seed: int) -> np.ndarray:
    rng = _task_rng(task, 5, seed)
    sampled = sample_inputs(task, size, rng)
    return sampled[0] if isinstance(sampled, tuple) else sampled


def run_sweep(task: SyntheticTask, methods=METHODS, ratios=(0.3, 0.5, 0.7),
              seeds=(0,), calib_sizes=(128,), alpha: float = 1e-3,
              collect_timings: bool = False) -> SweepReport:
    for m in methods:
        if m not in METHODS:
            raise ArgumentError(
                f"unknown method {m!r}; valid methods: {', '.join(METHODS)}"
            )
    report = SweepReport(higher_is_better=task.higher_is_better)
    for seed in seeds:
        model = build_model(task, seed)
        metric_original = evaluate(task, model, model, seed)
        for calib_size in calib_sizes:
            batch = _calibration_batch(task, calib_size, seed)
            for method in methods:
                for ratio in ratios:
                    compressed, _ = compress_graph(
                        model, batch,
                        uniform_plan(model, method, ratio, compensate=False,
                                     alpha=alpha, seed=seed),
                    )
                    compensated, reps = compress_graph(
                        model, batch,
                        uniform_plan(model, method, ratio, compensate=True,
                                     alpha=alpha, seed=seed),
                        collect_timings=collect_timings,
                    )
                    t_calib = sum(r.get("t_calib_s", 0.0) for r in reps)
                    t_comp = sum(r.get("t_comp_s", 0.0) for r in reps)
                    report.rows.append({
                        "method": method,
                        "ratio": float(ratio),
                        "seed": int(seed),
                        "calib_size": int(calib_size),
                        "metric_original": metric_original,
                        "metric_compressed": evaluate(task, compressed, model, seed),
                        "metric_compensated": evaluate(task, compensated, model, seed),
                        "t_calib_s": t_calib if collect_timings else 0.0,
                        "t_comp_s": t_comp if collect_timings else 0.0,
                    })
    return report


def calib_ablation(task: SyntheticTask, method: str = "mag-l2", ratio: float = 0.5,
                   sizes=(8, 16, 32, 64, 128, 256), seeds=(0,),
                   alpha: float = 1e-3) -> dict:
    """Mean improvement from compensation per calibration size."""
    report = run_sweep(task, methods=(method,), ratios=(ratio,), seeds=seeds,
                       calib_sizes=sizes, alpha=alpha)
    out = {}
    for size in sizes:
        vals = [report.improvement(r) for r in report.rows if r["calib_size"] == size]
        out[int(size)] = float(np.mean(vals))
    return out


def measure_overhead(graph: BlockGraph, batch: np.ndarray, ratio: float = 0.5,
                     alpha: float = 1e-3, seed: int = 0) -> dict:
    """Wall time per stage plus analytic transient-memory estimates.

    Memory is reported, not measured: H*H*8 bytes per Gram accumulator and
    (K*K + H*K)*8 bytes of solver workspace per block.
    """
    cfg = RidgeConfig(alpha=alpha)
    t_calib = 0.0
    t_comp = 0.0
    blocks = []
    current = graph
    for i, block in enumerate(current.blocks):
        t0 = time.perf_counter()
        stats = accumulate_gram(current, batch, i)
        t1 = time.perf_counter()
        entry = PlanEntry(i, "mag-l2", ratio, compensate=True)
        decision = _decide(current, batch, entry, block, stats, seed)
        t2 = time.perf_counter()
        new_block, result = merge_block(block, decision, stats, cfg, block_index=i)
        t3 = time.perf_counter()
        current = current.with_block(i, new_block)
        t_calib += t1 - t0
        t_comp += t3 - t2
        h = stats.width
        k = decision.k
        blocks.append({
            "block": i,
            "hidden_width": h,
            "k": k,
            "gram_bytes": h * h * 8,
            "solver_workspace_bytes": (k * k + h * k) * 8,
        })
    return {"t_calib_s": t_calib, "t_comp_s": t_comp, "blocks": blocks}
