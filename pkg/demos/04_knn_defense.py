"""Defend attacked clouds by voting over nearest neighbors in feature space.

The defense never looks at raw points. It stores the pooled feature vector
and softmax of every training cloud, finds the query's k nearest stored
features, and aggregates the stored softmaxes weighted by how confident each
neighbor's softmax is: uniformly (uw), by negated entropy (ew), or by the
summed cubed gaps to the top class (dw). A drop-attacked cloud moves in
feature space, but usually not far enough to change its neighborhood. Run:

    python3 demos/04_knn_defense.py
"""

from pcarmor.attacks import AttackConfig, run_attack_set
from pcarmor.defense import DefenseConfig, build_feature_db, defend_classify
from pcarmor.geometry import build_dataset
from pcarmor.harness import DEFENSES, ExperimentPlan, evaluate_defenses, report_to_text, sweep_k
from pcarmor.model import ModelConfig, predict, train


def main() -> None:
    train_clouds, test_clouds = build_dataset(n_per_class=80, seed=7)
    weights, _ = train(
        ModelConfig(per_point_widths=(32, 64, 128), head_widths=(64, 8), seed=1),
        train_clouds, epochs=30, batch_size=16,
    )
    db = build_feature_db(weights, train_clouds)
    print(f"feature database: {db.size} entries of dim {db.features.shape[1]}")

    print()
    print("== anatomy of one defended verdict ==")
    # test clouds are stored class-major, so slice across classes, not heads
    per_class = len(test_clouds) // 8
    subset = [test_clouds[cls * per_class + j] for j in range(2) for cls in range(8)]
    attacked = run_attack_set(
        weights, subset, AttackConfig(kind="drop_saliency", n_drop=51), seed=3
    )
    cfg = DefenseConfig(k=5, weighting="ew")
    ex = next(  # a cloud the attack fooled and the neighborhood vote rescues
        (e for e in attacked if e.success
         and defend_classify(db, weights, e.adversarial, cfg).label == e.true_label),
        attacked[0],
    )
    raw = predict(weights, ex.adversarial)[0]
    verdict = defend_classify(db, weights, ex.adversarial, cfg)
    print(f"true class {ex.true_label}, raw model says {raw}, "
          f"defense says {verdict.label} (weighting {verdict.weighting})")
    print(f"{'neighbor':9s} {'distance':10s} {'weight':10s} label")
    for nb in verdict.neighbors:
        print(f"{nb.index:<9d} {nb.distance:<10.4f} {nb.weight:<10.4f} {nb.label}")

    print()
    print("== accuracy matrix over clean and attacked inputs ==")
    adv_clouds = [e.adversarial for e in attacked]
    plan = ExperimentPlan(weights_path="in-memory", defenses=DEFENSES)
    report = evaluate_defenses(
        weights, db, {"clean": test_clouds, "drop": adv_clouds}, plan
    )
    print(report_to_text(report), end="")

    print()
    print("== neighbor count sweep (uniform weighting) ==")
    rows = sweep_k(weights, db, {"drop": adv_clouds}, plan, ks=(1, 3, 5, 10, 20))
    for r in rows:
        print(f"k={r.k:<3d} {r.input_set}: {r.accuracy:.1f}%  ({r.correct}/{r.total})")


if __name__ == "__main__":
    main()
