"""Train the compact point-cloud classifier and poke at its guarantees.

The model is a per-point MLP followed by a column-wise max pool and a small
dense head, trained with plain Adam on hand-derived gradients. Everything is
deterministic in the seeds, the pooled feature vector is what the defense
later indexes, and predictions cannot depend on point order. Run:

    python3 demos/02_train_and_inspect.py
"""

import numpy as np

from pcarmor.geometry import build_dataset
from pcarmor.model import (
    ModelConfig,
    evaluate,
    extract_feature,
    load_weights,
    predict,
    save_weights,
    train,
    weights_fingerprint,
)


def main() -> None:
    train_clouds, test_clouds = build_dataset(n_per_class=20, seed=7, n_points=128)
    config = ModelConfig(per_point_widths=(32, 64, 96), head_widths=(48, 8), seed=1)

    print("== training (20 clouds per class, 128 points each) ==")
    weights, metrics = train(
        config, train_clouds, epochs=30, batch_size=16, test_clouds=test_clouds
    )
    for m in metrics[:: max(1, len(metrics) // 6)]:
        print(f"epoch {m.epoch:2d}  loss={m.loss:.4f}  train={m.train_accuracy:.3f}  "
              f"test={m.test_accuracy:.3f}")
    loss, acc = evaluate(weights, test_clouds)
    print(f"final test accuracy {100 * acc:.1f}%  (nll {loss:.3f})")

    print()
    print("== permutation invariance ==")
    pc = test_clouds[0]
    label, softmax = predict(weights, pc)
    rng = np.random.default_rng(0)
    shuffled = pc.with_points(pc.points[rng.permutation(pc.n)])
    label2, softmax2 = predict(weights, shuffled)
    print(f"original -> class {label} (p={softmax[label]:.3f}); "
          f"shuffled -> class {label2}; softmax bitwise equal: "
          f"{np.array_equal(softmax, softmax2)}")

    print()
    print("== the global feature the defense will index ==")
    feature = extract_feature(weights, pc)
    print(f"feature dim {feature.shape[0]}, "
          f"nonzero entries {(feature != 0).sum()} (relu-pooled, so some die)")

    print()
    print("== weights file round-trip and fingerprint ==")
    save_weights("/tmp/demo_model.pnm", weights)
    back = load_weights("/tmp/demo_model.pnm")
    same = weights_fingerprint(back) == weights_fingerprint(weights)
    print(f"saved, reloaded, fingerprints match: {same}")


if __name__ == "__main__":
    main()
