"""Experiment orchestration: accuracy matrices, k sweeps, and latency benches.

Reports are plain data plus deterministic renderers. The CSV form is the
machine artifact (one row per defense x input set, stable float formatting, no
timestamps), the text form is the same matrix pretty-printed with the best
defense per input set starred. Rerunning any report with the same inputs and
seed produces byte-identical output.
"""

from __future__ import annotations

import csv
import io
import platform
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import threadpoolctl

from . import __version__
from .attacks import load_adv_set
from .defense import (
    DefenseConfig,
    FeatureDatabase,
    classify_feature,
    defend_classify,
    extract_feature,
    sor,
    srs,
)
from .geometry import PointCloud, load_dataset
from .model import ModelWeights, predict

DEFENSES = ("none", "srs", "sor", "knn-uw", "knn-ew", "knn-dw")

__all__ = [
    "DEFENSES",
    "ExperimentPlan",
    "EvalCell",
    "EvalReport",
    "SweepRow",
    "BenchRow",
    "evaluate_defenses",
    "sweep_k",
    "bench_latency",
    "report_to_csv",
    "report_to_text",
    "sweep_to_csv",
    "bench_to_csv",
    "environment_meta",
]


@dataclass(frozen=True)
class ExperimentPlan:
    """Shared file-level configuration for eval/sweep/bench runs.

    adv_dirs maps an input-set name to a saved adversarial-set directory; the
    clean test split of data_dir always participates as input set "clean".
    """

    weights_path: str
    db_path: str | None = None
    data_dir: str | None = None
    adv_dirs: dict[str, str] = field(default_factory=dict)
    defenses: tuple[str, ...] = DEFENSES
    defense_cfg: DefenseConfig = field(default_factory=DefenseConfig)
    srs_fraction: float = 0.25
    sor_k: int = 2
    sor_alpha: float = 1.1
    seed: int = 0

    def __post_init__(self):
        for d in self.defenses:
            if d not in DEFENSES:
                raise ValueError(f"unknown defense {d!r}, expected one of {DEFENSES}")
        if not 0.0 <= self.srs_fraction < 1.0:
            raise ValueError(f"srs_fraction must be in [0, 1), got {self.srs_fraction}")

    def load_input_sets(self) -> dict[str, list[PointCloud]]:
        """Ordered input sets: clean test split first, then adversarial sets."""
        sets: dict[str, list[PointCloud]] = {}
        if self.data_dir is not None:
            _, test = load_dataset(self.data_dir)
            sets["clean"] = test
        for name, directory in self.adv_dirs.items():
            examples = load_adv_set(directory)
            sets[name] = [ex.adversarial for ex in examples]
        if not sets:
            raise ValueError("nothing to evaluate: provide a data directory or adversarial sets")
        return sets


@dataclass(frozen=True)
class EvalCell:
    accuracy: float  # percent
    correct: int
    total: int


@dataclass
class EvalReport:
    """Accuracy matrix: one cell per (defense, input set)."""

    defenses: tuple[str, ...]
    set_names: tuple[str, ...]
    cells: dict[tuple[str, str], EvalCell]
    meta: dict[str, str]


def environment_meta(seed: int, extra: dict[str, str] | None = None) -> dict[str, str]:
    """Versions/threads stamp for the text report; deliberately no timestamps."""
    pools = threadpoolctl.threadpool_info()
    meta = {
        "pcarmor": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "blas_threads": str(max((p["num_threads"] for p in pools), default=1)),
        "seed": str(seed),
    }
    if extra:
        meta.update(extra)
    return meta


def _srs_seed(root: int, set_idx: int, cloud_idx: int) -> int:
    ss = np.random.SeedSequence(entropy=root, spawn_key=(set_idx, cloud_idx))
    return int(ss.generate_state(1)[0])


def _defended_label(
    defense: str,
    weights: ModelWeights,
    db: FeatureDatabase | None,
    pc: PointCloud,
    plan: ExperimentPlan,
    set_idx: int,
    cloud_idx: int,
) -> int:
    if defense == "none":
        return predict(weights, pc)[0]
    if defense == "srs":
        n_remove = round(plan.srs_fraction * pc.n)
        reduced = srs(pc, n_remove, _srs_seed(plan.seed, set_idx, cloud_idx))
        return predict(weights, reduced)[0]
    if defense == "sor":
        return predict(weights, sor(pc, plan.sor_k, plan.sor_alpha))[0]
    if db is None:
        raise ValueError(f"defense {defense!r} needs a feature database")
    cfg = replace(plan.defense_cfg, weighting=defense.split("-")[1])
    return defend_classify(db, weights, pc, cfg).label


def evaluate_defenses(
    weights: ModelWeights,
    db: FeatureDatabase | None,
    input_sets: dict[str, list[PointCloud]],
    plan: ExperimentPlan,
) -> EvalReport:
    """Accuracy of every requested defense on every input set.

    Accuracy is always measured against the clouds' stored true labels, so an
    adversarial set scores the defense's recovery, not the attacker's goal.
    """
    cells: dict[tuple[str, str], EvalCell] = {}
    for set_idx, (name, clouds) in enumerate(input_sets.items()):
        if not clouds:
            raise ValueError(f"input set {name!r} is empty")
        for defense in plan.defenses:
            correct = 0
            for i, pc in enumerate(clouds):
                if pc.label is None:
                    raise ValueError(f"cloud {i} of set {name!r} has no true label")
                got = _defended_label(defense, weights, db, pc, plan, set_idx, i)
                correct += got == pc.label
            cells[(defense, name)] = EvalCell(
                accuracy=100.0 * correct / len(clouds), correct=correct, total=len(clouds)
            )
    return EvalReport(
        defenses=tuple(plan.defenses),
        set_names=tuple(input_sets),
        cells=cells,
        meta=environment_meta(plan.seed, {"k": str(plan.defense_cfg.k)}),
    )


def report_to_csv(report: EvalReport) -> str:
    """Long-form CSV: defense,input_set,accuracy,correct,total."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["defense", "input_set", "accuracy", "correct", "total"])
    for defense in report.defenses:
        for name in report.set_names:
            cell = report.cells[(defense, name)]
            writer.writerow([defense, name, f"{cell.accuracy:.2f}", cell.correct, cell.total])
    return buf.getvalue()


def report_to_text(report: EvalReport) -> str:
    """Fixed-width matrix, defenses as rows; '*' marks each column's best."""
    width = max(12, *(len(s) + 2 for s in report.set_names))
    best = {
        name: max(report.cells[(d, name)].accuracy for d in report.defenses)
        for name in report.set_names
    }
    lines = ["defense".ljust(10) + "".join(s.rjust(width) for s in report.set_names)]
    for defense in report.defenses:
        row = defense.ljust(10)
        for name in report.set_names:
            cell = report.cells[(defense, name)]
            mark = "*" if cell.accuracy == best[name] else ""
            row += f"{cell.accuracy:.2f}{mark}".rjust(width)
        lines.append(row)
    lines.append("")
    lines.append(" ".join(f"{k}={v}" for k, v in sorted(report.meta.items())))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# k sweep


@dataclass(frozen=True)
class SweepRow:
    k: int
    weighting: str
    input_set: str
    accuracy: float
    correct: int
    total: int


def sweep_k(
    weights: ModelWeights,
    db: FeatureDatabase,
    input_sets: dict[str, list[PointCloud]],
    plan: ExperimentPlan,
    ks: tuple[int, ...] = (1, 2, 5, 10, 15, 20, 30),
) -> list[SweepRow]:
    """Defended accuracy of the k-NN defense alone, for each k in ks.

    Each (k, set) cell runs the identical per-cloud loop a full evaluation
    with that k would run, so sweep rows and single-eval cells agree exactly.
    """
    if not ks or min(ks) < 1:
        raise ValueError(f"ks must be positive, got {ks}")
    rows = []
    for k in ks:
        cfg = replace(plan.defense_cfg, k=k)
        for name, clouds in input_sets.items():
            if not clouds:
                raise ValueError(f"input set {name!r} is empty")
            correct = 0
            for pc in clouds:
                if pc.label is None:
                    raise ValueError(f"input set {name!r} contains an unlabeled cloud")
                correct += defend_classify(db, weights, pc, cfg).label == pc.label
            rows.append(
                SweepRow(
                    k=k, weighting=cfg.weighting, input_set=name,
                    accuracy=100.0 * correct / len(clouds),
                    correct=correct, total=len(clouds),
                )
            )
    return rows


def sweep_to_csv(rows: list[SweepRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["k", "weighting", "input_set", "accuracy", "correct", "total"])
    for r in rows:
        writer.writerow([r.k, r.weighting, r.input_set, f"{r.accuracy:.2f}", r.correct, r.total])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# latency bench


@dataclass(frozen=True)
class BenchRow:
    """Per-query wall time for one pipeline; stage_mean_ms excludes the shared
    forward pass (the k-NN step for knn rows, the removal step for srs/sor)."""

    pipeline: str
    queries: int
    mean_ms: float
    median_ms: float
    p95_ms: float
    stage_mean_ms: float | None


def bench_latency(
    weights: ModelWeights,
    db: FeatureDatabase | None,
    clouds: list[PointCloud],
    plan: ExperimentPlan,
    pipelines: tuple[str, ...] = DEFENSES,
    n_queries: int = 500,
    warmup: int = 50,
    threads: int = 1,
) -> list[BenchRow]:
    """Wall-clock per-query latency, single-threaded BLAS by default.

    Queries cycle through the given clouds. Every pipeline includes the raw
    forward pass; "none" is that baseline alone. Timings use perf_counter and
    are reported in milliseconds.
    """
    if not clouds:
        raise ValueError("bench needs at least one cloud")
    if n_queries < 1 or warmup < 0:
        raise ValueError(f"bad bench sizes: n_queries={n_queries}, warmup={warmup}")

    def query(pipeline: str, pc: PointCloud, idx: int) -> tuple[float, float | None]:
        if pipeline == "none":
            t0 = time.perf_counter()
            predict(weights, pc)
            return time.perf_counter() - t0, None
        if pipeline == "srs":
            n_remove = round(plan.srs_fraction * pc.n)
            t0 = time.perf_counter()
            reduced = srs(pc, n_remove, idx)
            t1 = time.perf_counter()
            predict(weights, reduced)
            return time.perf_counter() - t0, t1 - t0
        if pipeline == "sor":
            t0 = time.perf_counter()
            reduced = sor(pc, plan.sor_k, plan.sor_alpha)
            t1 = time.perf_counter()
            predict(weights, reduced)
            return time.perf_counter() - t0, t1 - t0
        cfg = replace(plan.defense_cfg, weighting=pipeline.split("-")[1])
        if db is None:
            raise ValueError(f"pipeline {pipeline!r} needs a feature database")
        t0 = time.perf_counter()
        feature = extract_feature(weights, pc)
        t1 = time.perf_counter()
        classify_feature(db, feature, cfg)
        t2 = time.perf_counter()
        return t2 - t0, t2 - t1

    rows = []
    with threadpoolctl.threadpool_limits(limits=threads):
        for pipeline in pipelines:
            for i in range(warmup):
                query(pipeline, clouds[i % len(clouds)], i)
            totals, stages = [], []
            for i in range(n_queries):
                total, stage = query(pipeline, clouds[i % len(clouds)], i)
                totals.append(total * 1e3)
                if stage is not None:
                    stages.append(stage * 1e3)
            rows.append(
                BenchRow(
                    pipeline=pipeline,
                    queries=n_queries,
                    mean_ms=statistics.fmean(totals),
                    median_ms=statistics.median(totals),
                    p95_ms=float(np.percentile(totals, 95)),
                    stage_mean_ms=statistics.fmean(stages) if stages else None,
                )
            )
    return rows


def bench_to_csv(rows: list[BenchRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["pipeline", "queries", "mean_ms", "median_ms", "p95_ms", "stage_mean_ms"])
    for r in rows:
        stage = "-" if r.stage_mean_ms is None else f"{r.stage_mean_ms:.4f}"
        writer.writerow(
            [r.pipeline, r.queries, f"{r.mean_ms:.4f}", f"{r.median_ms:.4f}", f"{r.p95_ms:.4f}", stage]
        )
    return buf.getvalue()


def write_text(path, content: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(content)
