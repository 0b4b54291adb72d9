"""pc-armor: command-line front end for the workbench.

Subcommands mirror the pipeline: gen-data, train, build-db, attack, defend,
eval, sweep-k, bench. Every subcommand accepts --config FILE holding
"key = value" lines (keys are the long option names); explicit flags win over
the file. Exit codes: 0 success, 2 validation error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .attacks import (
    ATTACK_KINDS,
    AttackConfig,
    attack,
    load_adv_set,
    run_attack_set,
    save_adv_set,
)
from .defense import DefenseConfig, build_feature_db, defend_classify, load_db, save_db
from .geometry import build_dataset, load_dataset, load_xyz, save_dataset
from .harness import (
    DEFENSES,
    ExperimentPlan,
    bench_latency,
    bench_to_csv,
    evaluate_defenses,
    report_to_csv,
    report_to_text,
    sweep_k,
    sweep_to_csv,
)
from .model import ModelConfig, load_weights, save_weights, train


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _write(path: str | None, content: str) -> None:
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(content)


# ---------------------------------------------------------------------------
# subcommand bodies


def cmd_gen_data(args) -> int:
    train_set, test_set = build_dataset(
        args.per_class,
        seed=args.seed,
        split=tuple(_floats(args.split)),
        n_points=args.n_points,
        jitter_sigma=args.jitter,
        rotation_scale=args.rotation_scale,
    )
    save_dataset(args.out, train_set, test_set)
    print(f"wrote {len(train_set)} train / {len(test_set)} test clouds to {args.out}")
    return 0


def cmd_train(args) -> int:
    out = Path(args.out)
    if out.exists() and not args.force:
        raise ValueError(f"{out} already exists; pass --force to overwrite")
    train_set, test_set = load_dataset(args.data)
    config = ModelConfig(
        n_classes=args.n_classes,
        per_point_widths=_ints(args.per_point_widths),
        head_widths=_ints(args.head_widths) if args.head_widths else (),
        seed=args.seed,
    )
    weights, metrics = train(
        config,
        train_set,
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        test_clouds=test_set or None,
    )
    for m in metrics:
        test = "-" if m.test_accuracy is None else f"{m.test_accuracy:.4f}"
        print(
            f"epoch {m.epoch:3d}  loss={m.loss:.4f}  "
            f"train_acc={m.train_accuracy:.4f}  test_acc={test}"
        )
    out.parent.mkdir(parents=True, exist_ok=True)
    save_weights(out, weights)
    print(f"saved weights to {out}")
    if args.metrics:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["epoch", "loss", "train_accuracy", "test_accuracy"])
        for m in metrics:
            writer.writerow(
                [
                    m.epoch,
                    f"{m.loss:.17g}",
                    f"{m.train_accuracy:.17g}",
                    "-" if m.test_accuracy is None else f"{m.test_accuracy:.17g}",
                ]
            )
        _write(args.metrics, buf.getvalue())
        print(f"saved metrics to {args.metrics}")
    return 0


def cmd_build_db(args) -> int:
    weights = load_weights(args.weights)
    train_set, _ = load_dataset(args.data)
    db = build_feature_db(weights, train_set)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_db(args.out, db)
    print(f"saved {db.size}-entry feature database to {args.out}")
    return 0


def _attack_config(args, kind: str, targeted: bool, target: int | None) -> AttackConfig:
    return AttackConfig(
        kind=kind,
        targeted=targeted,
        target=target,
        iterations=args.iterations,
        step_size=args.step_size,
        binary_search_steps=args.binary_search_steps,
        lam_init=args.lam_init,
        kappa=args.kappa,
        n_add=args.n_add,
        n_drop=args.n_drop,
        drop_rounds=args.drop_rounds,
        epsilon=args.epsilon,
    )


def cmd_attack(args) -> int:
    weights = load_weights(args.weights)
    _, test_set = load_dataset(args.data)
    if not test_set:
        raise ValueError(f"{args.data} has an empty test split")
    if args.targeted:
        examples = []
        per_class: dict[int, int] = {}
        picked = []
        for pc in test_set:
            if per_class.get(pc.label, 0) < args.per_class:
                per_class[pc.label] = per_class.get(pc.label, 0) + 1
                picked.append(pc)
        classes = sorted({pc.label for pc in test_set})
        for i, pc in enumerate(picked):
            for target in classes:
                if target == pc.label:
                    continue
                cfg = _attack_config(args, args.kind, True, target)
                ss = np.random.SeedSequence(entropy=args.seed, spawn_key=(i, target))
                examples.append(attack(weights, pc, replace(cfg, seed=int(ss.generate_state(1)[0]))))
    else:
        clouds = test_set if args.count is None else test_set[: args.count]
        cfg = _attack_config(args, args.kind, False, None)
        examples = run_attack_set(weights, clouds, cfg, seed=args.seed)
    save_adv_set(args.out, examples)
    n_ok = sum(ex.success for ex in examples)
    mean_dist = sum(ex.distortion for ex in examples) / len(examples)
    print(
        f"{args.kind}: {n_ok}/{len(examples)} succeeded "
        f"({100.0 * n_ok / len(examples):.1f}%), mean distortion {mean_dist:.6g}"
    )
    print(f"saved adversarial set to {args.out}")
    return 0


def cmd_defend(args) -> int:
    weights = load_weights(args.weights)
    db = load_db(args.db)
    cfg = DefenseConfig(k=args.k, weighting=args.weighting, metric=args.metric)
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["path", "verdict", "true_label", "fallback"])
    for path in args.input:
        pc = load_xyz(path)
        verdict = defend_classify(db, weights, pc, cfg)
        truth = "-" if pc.label is None else str(pc.label)
        writer.writerow([path, verdict.label, truth, int(verdict.fallback_used)])
        print(f"{path}: class {verdict.label} (true {truth})")
    _write(args.out, buf.getvalue())
    return 0


def _plan_from_args(args, need_db: bool) -> tuple[ExperimentPlan, object, object]:
    weights = load_weights(args.weights)
    db = load_db(args.db) if args.db else None
    defenses = tuple(d.strip() for d in args.defenses.split(",") if d.strip()) if hasattr(args, "defenses") else DEFENSES
    if need_db and db is None and any(d.startswith("knn") for d in defenses):
        raise ValueError("--db is required when knn defenses are evaluated")
    adv_dirs: dict[str, str] = {}
    for spec in args.adv or []:
        if "=" not in spec:
            raise ValueError(f"--adv expects NAME=DIR, got {spec!r}")
        name, directory = spec.split("=", 1)
        adv_dirs[name] = directory
    plan = ExperimentPlan(
        weights_path=args.weights,
        db_path=args.db,
        data_dir=args.data,
        adv_dirs=adv_dirs,
        defenses=defenses,
        defense_cfg=DefenseConfig(k=args.k, metric=args.metric),
        srs_fraction=args.srs_fraction,
        sor_k=args.sor_k,
        sor_alpha=args.sor_alpha,
        seed=args.seed,
    )
    return plan, weights, db


def cmd_eval(args) -> int:
    plan, weights, db = _plan_from_args(args, need_db=True)
    report = evaluate_defenses(weights, db, plan.load_input_sets(), plan)
    text = report_to_text(report)
    print(text, end="")
    _write(args.out, report_to_csv(report))
    _write(args.text, text)
    return 0


def cmd_sweep_k(args) -> int:
    plan, weights, db = _plan_from_args(args, need_db=True)
    if db is None:
        raise ValueError("--db is required for sweep-k")
    plan = replace(plan, defense_cfg=replace(plan.defense_cfg, weighting=args.weighting))
    rows = sweep_k(weights, db, plan.load_input_sets(), plan, ks=_ints(args.ks))
    out = sweep_to_csv(rows)
    print(out, end="")
    _write(args.out, out)
    return 0


def cmd_bench(args) -> int:
    plan, weights, db = _plan_from_args(args, need_db=True)
    sets = plan.load_input_sets()
    clouds = next(iter(sets.values()))
    rows = bench_latency(
        weights, db, clouds, plan,
        pipelines=plan.defenses, n_queries=args.queries,
        warmup=args.warmup, threads=args.threads,
    )
    out = bench_to_csv(rows)
    print(out, end="")
    _write(args.out, out)
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="file of 'key = value' lines applied as defaults")
    p.add_argument("--seed", type=int, default=0)


def _add_eval_inputs(p: argparse.ArgumentParser) -> None:
    p.add_argument("--weights", required=True)
    p.add_argument("--db", default=None)
    p.add_argument("--data", default=None, help="dataset directory; test/ is evaluated")
    p.add_argument("--adv", action="append", metavar="NAME=DIR", help="adversarial set (repeatable)")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--metric", choices=("euclidean", "cosine"), default="euclidean")
    p.add_argument("--srs-fraction", type=float, default=0.25)
    p.add_argument("--sor-k", type=int, default=2)
    p.add_argument("--sor-alpha", type=float, default=1.1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pc-armor", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic shape dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--n-points", type=int, default=256)
    p.add_argument("--jitter", type=float, default=0.01)
    p.add_argument("--rotation-scale", type=float, default=0.75)
    p.add_argument("--split", default="0.8,0.2")
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the classifier on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", default=None, help="write per-epoch CSV here")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--n-classes", type=int, default=8)
    p.add_argument("--per-point-widths", default="64,128,256")
    p.add_argument("--head-widths", default="")
    p.add_argument("--force", action="store_true", help="overwrite an existing weights file")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("build-db", help="extract the training-set feature database")
    p.add_argument("--weights", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_build_db)

    p = sub.add_parser("attack", help="craft an adversarial set from the test split")
    p.add_argument("--weights", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--kind", required=True, choices=ATTACK_KINDS)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=None, help="clouds to attack (default: all)")
    p.add_argument("--targeted", action="store_true")
    p.add_argument("--per-class", type=int, default=10, help="targeted: source clouds per class")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--step-size", type=float, default=None)
    p.add_argument("--binary-search-steps", type=int, default=5)
    p.add_argument("--lam-init", type=float, default=10.0)
    p.add_argument("--kappa", type=float, default=0.0)
    p.add_argument("--n-add", type=int, default=32)
    p.add_argument("--n-drop", type=int, default=51)
    p.add_argument("--drop-rounds", type=int, default=5)
    p.add_argument("--epsilon", type=float, default=0.05)
    _add_common(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("defend", help="defended classification of .xyz files")
    p.add_argument("--weights", required=True)
    p.add_argument("--db", required=True)
    p.add_argument("--input", nargs="+", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--weighting", choices=("uw", "ew", "dw"), default="uw")
    p.add_argument("--metric", choices=("euclidean", "cosine"), default="euclidean")
    p.add_argument("--out", default=None, help="write verdicts CSV here")
    _add_common(p)
    p.set_defaults(func=cmd_defend)

    p = sub.add_parser("eval", help="accuracy matrix of defenses x input sets")
    _add_eval_inputs(p)
    p.add_argument("--defenses", default=",".join(DEFENSES))
    p.add_argument("--out", default=None, help="write CSV report here")
    p.add_argument("--text", default=None, help="write text report here")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-k", help="defended accuracy across neighbor counts")
    _add_eval_inputs(p)
    p.add_argument("--ks", default="1,2,5,10,15,20,30")
    p.add_argument("--weighting", choices=("uw", "ew", "dw"), default="uw")
    p.add_argument("--out", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_sweep_k)

    p = sub.add_parser("bench", help="per-query latency of each defense pipeline")
    _add_eval_inputs(p)
    p.add_argument("--defenses", default=",".join(DEFENSES))
    p.add_argument("--queries", type=int, default=500)
    p.add_argument("--warmup", type=int, default=50)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_bench)

    return parser


def _apply_config_file(argv: list[str]) -> list[str]:
    """Expand --config FILE into option tokens placed before explicit flags."""
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    if i + 1 >= len(argv):
        raise ValueError("--config needs a file argument")
    path = Path(argv[i + 1])
    if not path.is_file():
        raise FileNotFoundError(f"config file {path} not found")
    tokens: list[str] = []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        flag = "--" + key.replace("_", "-")
        if value.lower() in ("true", "yes", "on") and key in ("force", "targeted"):
            tokens.append(flag)
        else:
            tokens.extend([flag, value])
    rest = argv[:i] + argv[i + 2 :]
    # subcommand first, then file-sourced defaults, then explicit flags (which win)
    return rest[:1] + tokens + rest[1:]


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config_file(argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except (OSError, FileNotFoundError) as exc:
        print(f"pc-armor: i/o error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"pc-armor: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
