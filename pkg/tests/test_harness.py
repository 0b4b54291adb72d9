"""Evaluation harness: accuracy matrices, k sweeps, latency rows, reports."""

import csv
import io

import numpy as np
import pytest

from pcarmor.attacks import AttackConfig, attack_drop_saliency, save_adv_set
from pcarmor.defense import DefenseConfig, defend_classify, srs
from pcarmor.geometry import save_dataset
from pcarmor.harness import (
    DEFENSES,
    ExperimentPlan,
    bench_latency,
    bench_to_csv,
    environment_meta,
    evaluate_defenses,
    report_to_csv,
    report_to_text,
    sweep_k,
    sweep_to_csv,
    write_text,
)
from pcarmor.model import predict


@pytest.fixture(scope="module")
def small_sets(tiny_weights, tiny_data):
    """Two tiny input sets: clean test clouds and their drop-attacked versions."""
    clean = tiny_data[1][:8]
    cfg = AttackConfig(kind="drop_saliency", n_drop=9, drop_rounds=3)
    dropped = [attack_drop_saliency(tiny_weights, pc, cfg).adversarial for pc in clean]
    return {"clean": clean, "drop": dropped}


@pytest.fixture(scope="module")
def plan():
    return ExperimentPlan(weights_path="unused.pnm", defense_cfg=DefenseConfig(k=5))


# ---------------------------------------------------------------------------
# plan validation and input loading


def test_plan_rejects_unknown_defense():
    with pytest.raises(ValueError):
        ExperimentPlan(weights_path="w", defenses=("none", "prayer"))


@pytest.mark.parametrize("frac", [-0.1, 1.0, 1.5])
def test_plan_rejects_bad_srs_fraction(frac):
    with pytest.raises(ValueError):
        ExperimentPlan(weights_path="w", srs_fraction=frac)


def test_plan_loads_clean_split_then_adv_sets(tiny_weights, tiny_data, tmp_path):
    save_dataset(tmp_path / "data", tiny_data[0], tiny_data[1])
    cfg = AttackConfig(kind="drop_saliency", n_drop=9, drop_rounds=3)
    examples = [attack_drop_saliency(tiny_weights, pc, cfg) for pc in tiny_data[1][:3]]
    save_adv_set(tmp_path / "drop", examples)
    loaded = ExperimentPlan(
        weights_path="w",
        data_dir=str(tmp_path / "data"),
        adv_dirs={"drop": str(tmp_path / "drop")},
    ).load_input_sets()
    assert list(loaded) == ["clean", "drop"]
    assert len(loaded["clean"]) == len(tiny_data[1])
    assert len(loaded["drop"]) == 3
    assert np.array_equal(loaded["drop"][0].points, examples[0].adversarial.points)


def test_plan_with_nothing_to_evaluate_raises():
    with pytest.raises(ValueError):
        ExperimentPlan(weights_path="w").load_input_sets()


# ---------------------------------------------------------------------------
# accuracy matrix


def test_eval_cells_match_manual_loops(tiny_weights, tiny_db, small_sets, plan):
    report = evaluate_defenses(tiny_weights, tiny_db, small_sets, plan)
    for set_idx, (name, clouds) in enumerate(small_sets.items()):
        raw = sum(predict(tiny_weights, pc)[0] == pc.label for pc in clouds)
        assert report.cells[("none", name)].correct == raw

        ew_cfg = DefenseConfig(k=5, weighting="ew")
        knn = sum(
            defend_classify(tiny_db, tiny_weights, pc, ew_cfg).label == pc.label
            for pc in clouds
        )
        assert report.cells[("knn-ew", name)].correct == knn

        seeds = [
            int(np.random.SeedSequence(entropy=plan.seed, spawn_key=(set_idx, i)).generate_state(1)[0])
            for i in range(len(clouds))
        ]
        reduced = [
            srs(pc, round(plan.srs_fraction * pc.n), s) for pc, s in zip(clouds, seeds)
        ]
        srs_hits = sum(predict(tiny_weights, pc)[0] == pc.label for pc in reduced)
        assert report.cells[("srs", name)].correct == srs_hits

    for cell in report.cells.values():
        assert cell.accuracy == pytest.approx(100.0 * cell.correct / cell.total)
        assert cell.total == 8


def test_eval_requires_database_for_knn_rows(tiny_weights, small_sets, plan):
    with pytest.raises(ValueError):
        evaluate_defenses(tiny_weights, None, small_sets, plan)


def test_eval_rejects_empty_and_unlabeled_sets(tiny_weights, tiny_db, plan, rng):
    with pytest.raises(ValueError):
        evaluate_defenses(tiny_weights, tiny_db, {"clean": []}, plan)
    from pcarmor.geometry import PointCloud

    nameless = [PointCloud(rng.standard_normal((16, 3)))]
    with pytest.raises(ValueError):
        evaluate_defenses(tiny_weights, tiny_db, {"clean": nameless}, plan)


def test_eval_is_repeatable(tiny_weights, tiny_db, small_sets, plan):
    a = evaluate_defenses(tiny_weights, tiny_db, small_sets, plan)
    b = evaluate_defenses(tiny_weights, tiny_db, small_sets, plan)
    assert a.cells == b.cells


# ---------------------------------------------------------------------------
# report rendering


def test_report_csv_shape_and_determinism(tiny_weights, tiny_db, small_sets, plan):
    report = evaluate_defenses(tiny_weights, tiny_db, small_sets, plan)
    text = report_to_csv(report)
    assert text == report_to_csv(report)
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ["defense", "input_set", "accuracy", "correct", "total"]
    assert len(rows) == 1 + len(DEFENSES) * 2
    for defense, name, acc, correct, total in rows[1:]:
        cell = report.cells[(defense, name)]
        assert acc == f"{cell.accuracy:.2f}"
        assert int(correct) == cell.correct and int(total) == cell.total


def test_report_text_marks_column_best(tiny_weights, tiny_db, small_sets, plan):
    report = evaluate_defenses(tiny_weights, tiny_db, small_sets, plan)
    text = report_to_text(report)
    lines = text.splitlines()
    assert lines[0].startswith("defense")
    for name in report.set_names:
        best = max(report.cells[(d, name)].accuracy for d in report.defenses)
        starred = [
            d for d in report.defenses
            if f"{report.cells[(d, name)].accuracy:.2f}*" in lines[1 + report.defenses.index(d)]
        ]
        assert starred, f"column {name} has no starred winner"
        for d in starred:
            assert report.cells[(d, name)].accuracy == best
    assert "seed=" in lines[-1] and "numpy=" in lines[-1]


def test_environment_meta_has_no_timestamps():
    meta = environment_meta(7, {"note": "x"})
    assert meta["seed"] == "7" and meta["note"] == "x"
    assert {"pcarmor", "python", "numpy", "blas_threads"} <= set(meta)
    for key in meta:
        assert "time" not in key.lower() and "date" not in key.lower()
    assert all(isinstance(v, str) for v in meta.values())


# ---------------------------------------------------------------------------
# k sweep


def test_sweep_rows_agree_with_full_eval(tiny_weights, tiny_db, small_sets, plan):
    rows = sweep_k(tiny_weights, tiny_db, small_sets, plan, ks=(1, 5))
    assert len(rows) == 2 * len(small_sets)
    report = evaluate_defenses(tiny_weights, tiny_db, small_sets, plan)
    w = plan.defense_cfg.weighting
    for row in rows:
        assert row.weighting == w
        if row.k == plan.defense_cfg.k:
            cell = report.cells[(f"knn-{w}", row.input_set)]
            assert (row.correct, row.total) == (cell.correct, cell.total)


def test_sweep_validation(tiny_weights, tiny_db, small_sets, plan):
    with pytest.raises(ValueError):
        sweep_k(tiny_weights, tiny_db, small_sets, plan, ks=())
    with pytest.raises(ValueError):
        sweep_k(tiny_weights, tiny_db, small_sets, plan, ks=(0, 5))


def test_sweep_csv_round_trips(tiny_weights, tiny_db, small_sets, plan):
    rows = sweep_k(tiny_weights, tiny_db, small_sets, plan, ks=(1, 5))
    parsed = list(csv.reader(io.StringIO(sweep_to_csv(rows))))
    assert parsed[0] == ["k", "weighting", "input_set", "accuracy", "correct", "total"]
    assert len(parsed) == 1 + len(rows)
    for row, rec in zip(rows, parsed[1:]):
        assert rec[0] == str(row.k) and rec[2] == row.input_set
        assert rec[3] == f"{row.accuracy:.2f}"


# ---------------------------------------------------------------------------
# latency bench


def test_bench_row_structure(tiny_weights, tiny_db, small_sets, plan):
    rows = bench_latency(
        tiny_weights, tiny_db, small_sets["clean"][:4], plan,
        pipelines=("none", "srs", "knn-uw"), n_queries=10, warmup=2,
    )
    assert [r.pipeline for r in rows] == ["none", "srs", "knn-uw"]
    for r in rows:
        assert r.queries == 10
        assert r.mean_ms > 0.0
        assert r.median_ms <= r.p95_ms
    assert rows[0].stage_mean_ms is None
    assert rows[1].stage_mean_ms is not None and rows[2].stage_mean_ms is not None
    assert rows[2].stage_mean_ms < rows[2].mean_ms


def test_bench_validation(tiny_weights, tiny_db, plan, small_sets):
    with pytest.raises(ValueError):
        bench_latency(tiny_weights, tiny_db, [], plan)
    with pytest.raises(ValueError):
        bench_latency(tiny_weights, tiny_db, small_sets["clean"][:2], plan, n_queries=0)


def test_bench_csv_marks_missing_stage(tiny_weights, tiny_db, small_sets, plan):
    rows = bench_latency(
        tiny_weights, tiny_db, small_sets["clean"][:2], plan,
        pipelines=("none", "knn-dw"), n_queries=5, warmup=1,
    )
    parsed = list(csv.reader(io.StringIO(bench_to_csv(rows))))
    assert parsed[0] == ["pipeline", "queries", "mean_ms", "median_ms", "p95_ms", "stage_mean_ms"]
    assert parsed[1][0] == "none" and parsed[1][5] == "-"
    assert parsed[2][0] == "knn-dw" and parsed[2][5] != "-"


def test_write_text_creates_parents(tmp_path):
    target = tmp_path / "a" / "b" / "report.txt"
    write_text(target, "hello\n")
    assert target.read_text() == "hello\n"
