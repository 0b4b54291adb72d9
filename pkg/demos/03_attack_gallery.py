"""Craft one adversarial cloud with each attack and compare their footprints.

Shift attacks move existing points (dense L2-penalized margin descent, or
sign-gradient steps in an epsilon box). Add attacks append a handful of new
points and squeeze them toward the surface under a Chamfer or Hausdorff
penalty. The drop attack deletes the points whose collapse toward the center
would hurt the true-class score most. Success is always re-checked through
the public predict() path. Run:

    python3 demos/03_attack_gallery.py
"""

from pcarmor.attacks import AttackConfig, attack, load_adv_set, save_adv_set
from pcarmor.geometry import build_dataset
from pcarmor.model import ModelConfig, predict, train


def main() -> None:
    train_clouds, test_clouds = build_dataset(n_per_class=20, seed=7, n_points=128)
    weights, _ = train(
        ModelConfig(per_point_widths=(32, 64, 96), head_widths=(48, 8), seed=1),
        train_clouds, epochs=30, batch_size=16,
    )
    # pick a victim whose class has sharp local features; the smooth families
    # (sphere, cylinder, helix) barely react to a few added points because the
    # pooled feature is already saturated by their own surface
    victim = next(
        pc for pc in test_clouds
        if pc.label in (1, 3, 5, 6) and predict(weights, pc)[0] == pc.label
    )
    print(f"victim: class {victim.label}, {victim.n} points, correctly classified")
    print()

    configs = [
        AttackConfig(kind="shift_l2"),
        AttackConfig(kind="shift_pgd", epsilon=0.05),
        AttackConfig(kind="add_chamfer", n_add=16),
        AttackConfig(kind="add_hausdorff", n_add=16),
        AttackConfig(kind="drop_saliency", n_drop=26),
    ]
    print(f"{'attack':14s} {'success':8s} {'points':9s} {'distortion':12s} verdict")
    examples = []
    for cfg in configs:
        ex = attack(weights, victim, cfg)
        examples.append(ex)
        got = predict(weights, ex.adversarial)[0]
        print(f"{cfg.kind:14s} {str(ex.success):8s} "
              f"{ex.clean.n}->{ex.adversarial.n:<4d} {ex.distortion:<12.5g} "
              f"class {got} (true {ex.true_label})")

    print()
    print("== adversarial sets persist as .xyz files plus a manifest ==")
    save_adv_set("/tmp/demo_adv", examples)
    back = load_adv_set("/tmp/demo_adv")
    print(f"saved and reloaded {len(back)} examples; "
          f"kinds: {[ex.kind for ex in back]}")


if __name__ == "__main__":
    main()
