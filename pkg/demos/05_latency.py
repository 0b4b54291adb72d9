"""Measure what each defense adds to per-query wall time.

The k-nearest-neighbor step is a single matrix-vector product against the
stored feature matrix plus a partial sort, so defended inference should cost
little more than the forward pass it already shares. Statistical outlier
removal, by contrast, computes an all-pairs distance matrix per query. Run:

    python3 demos/05_latency.py
"""

from pcarmor.defense import build_feature_db
from pcarmor.geometry import build_dataset
from pcarmor.harness import ExperimentPlan, bench_latency, bench_to_csv
from pcarmor.model import ModelConfig, train


def main() -> None:
    train_clouds, test_clouds = build_dataset(n_per_class=24, seed=7, n_points=256)
    weights, _ = train(
        ModelConfig(per_point_widths=(32, 64, 128), head_widths=(48, 8), seed=1),
        train_clouds, epochs=4, batch_size=16,
    )
    db = build_feature_db(weights, train_clouds)
    print(f"database of {db.size} features, clouds of {test_clouds[0].n} points")
    print()

    plan = ExperimentPlan(weights_path="in-memory")
    rows = bench_latency(
        weights, db, test_clouds[:8], plan,
        pipelines=("none", "srs", "sor", "knn-uw", "knn-ew", "knn-dw"),
        n_queries=200, warmup=20, threads=1,
    )
    print(f"{'pipeline':9s} {'mean ms':>9s} {'median':>9s} {'p95':>9s} {'stage ms':>9s}")
    base = rows[0].mean_ms
    for r in rows:
        stage = "-" if r.stage_mean_ms is None else f"{r.stage_mean_ms:9.3f}"
        print(f"{r.pipeline:9s} {r.mean_ms:9.3f} {r.median_ms:9.3f} "
              f"{r.p95_ms:9.3f} {stage:>9s}   ({r.mean_ms / base:.2f}x baseline)")

    print()
    print("same rows as CSV (the harness contract):")
    print(bench_to_csv(rows), end="")


if __name__ == "__main__":
    main()
