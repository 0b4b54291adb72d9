"""Geometric attacks on the point-cloud classifier: shift, add, and drop.

All attacks run in the classifier's canonical frame: the input is re-scaled
into the unit sphere once (a no-op for dataset clouds) and both the clean and
adversarial clouds of the returned AdvExample live there. Success flags are
always re-derived from the public `predict` path, never from attack-internal
logits, so an AdvExample marked successful really does fool the classifier.

Shift attacks move existing points (L2-penalized margin descent, or PGD under
a per-coordinate epsilon box). Add attacks append a small set of new points and
optimize only those, with a Chamfer or Hausdorff distance penalty pulling them
onto the clean surface. The drop attack removes the points whose inward
collapse would most increase the true-class loss: no surviving coordinate is
ever modified.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import (
    PointCloud,
    chamfer_symmetric,
    hausdorff_directed,
    l2_shift_norm,
    load_xyz,
    save_xyz,
)
from .model import (
    ModelWeights,
    Objective,
    canonical_points,
    objective_value_and_input_gradient,
    predict,
)

ATTACK_KINDS = ("shift_l2", "shift_pgd", "add_chamfer", "add_hausdorff", "drop_saliency")

__all__ = [
    "ATTACK_KINDS",
    "AttackConfig",
    "AdvExample",
    "attack",
    "attack_shift_l2",
    "attack_shift_pgd",
    "attack_add",
    "attack_drop_saliency",
    "run_attack_set",
    "save_adv_set",
    "load_adv_set",
]


@dataclass(frozen=True)
class AttackConfig:
    """Attack kind plus every budget knob; unset iteration/step fall back per kind.

    iterations: inner optimizer steps (default 100 for margin attacks, 40 for PGD).
    step_size: inner step (default 0.01 for margin attacks, epsilon/10 for PGD).
    binary_search_steps / lam_init: outer search over the penalty weight.
    kappa: margin confidence. n_add / n_drop: point budgets. drop_rounds: rounds
    for the saliency drop. epsilon: PGD box half-width. seed: init noise stream.
    """

    kind: str
    targeted: bool = False
    target: int | None = None
    iterations: int | None = None
    step_size: float | None = None
    binary_search_steps: int = 5
    lam_init: float = 10.0
    kappa: float = 0.0
    n_add: int = 32
    n_drop: int = 51
    drop_rounds: int = 5
    epsilon: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}, expected one of {ATTACK_KINDS}")
        if self.targeted and self.target is None:
            raise ValueError("targeted attack needs a target label")
        if self.targeted and self.kind == "drop_saliency":
            raise ValueError("drop_saliency is untargeted only")
        if self.iterations is not None and self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")
        if self.binary_search_steps < 1:
            raise ValueError(f"binary_search_steps must be >= 1, got {self.binary_search_steps}")
        if self.lam_init <= 0:
            raise ValueError(f"lam_init must be > 0, got {self.lam_init}")
        if self.kappa < 0:
            raise ValueError(f"kappa must be >= 0, got {self.kappa}")
        if self.n_add < 1:
            raise ValueError(f"n_add must be >= 1, got {self.n_add}")
        if self.n_drop < 0:
            raise ValueError(f"n_drop must be >= 0, got {self.n_drop}")
        if self.drop_rounds < 1:
            raise ValueError(f"drop_rounds must be >= 1, got {self.drop_rounds}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")

    def resolved_iterations(self) -> int:
        if self.iterations is not None:
            return self.iterations
        return 40 if self.kind == "shift_pgd" else 100

    def resolved_step(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return self.epsilon / 10.0 if self.kind == "shift_pgd" else 0.01


@dataclass
class AdvExample:
    """One attack result; clean and adversarial share the canonical frame.

    distortion is kind-specific: l2 shift norm for shift attacks, symmetric
    Chamfer (full vs clean) for add_chamfer, directed Hausdorff (added to
    clean) for add_hausdorff, points removed for drop_saliency. It always
    equals an independent recomputation from the two stored clouds.
    """

    clean: PointCloud
    adversarial: PointCloud
    kind: str
    true_label: int
    target_label: int | None
    success: bool
    distortion: float
    detail: dict = field(default_factory=dict)


def _prepare(weights: ModelWeights, pc: PointCloud, cfg: AttackConfig) -> tuple[np.ndarray, int]:
    if pc.label is None:
        raise ValueError("attacks need the true label; the input cloud is unlabeled")
    y = pc.label
    if y >= weights.config.n_classes:
        raise ValueError(f"label {y} out of range for {weights.config.n_classes} classes")
    if cfg.targeted:
        if not 0 <= cfg.target < weights.config.n_classes:
            raise ValueError(f"target {cfg.target} out of range")
        if cfg.target == y:
            raise ValueError(f"target class equals the true label ({y})")
    return canonical_points(pc), y


def _objective_for(cfg: AttackConfig, y: int) -> Objective:
    if cfg.targeted:
        return Objective.cw_targeted(cfg.target, cfg.kappa)
    return Objective.cw_untargeted(y, cfg.kappa)


def _fooled(cfg: AttackConfig, y: int, pred: int) -> bool:
    return pred == cfg.target if cfg.targeted else pred != y


def attack(weights: ModelWeights, pc: PointCloud, cfg: AttackConfig) -> AdvExample:
    """Dispatch on cfg.kind."""
    if cfg.kind == "shift_l2":
        return attack_shift_l2(weights, pc, cfg)
    if cfg.kind == "shift_pgd":
        return attack_shift_pgd(weights, pc, cfg)
    if cfg.kind in ("add_chamfer", "add_hausdorff"):
        return attack_add(weights, pc, cfg)
    return attack_drop_saliency(weights, pc, cfg)


def _step_schedule(step0: float, iters: int, final_frac: float) -> np.ndarray:
    """Exponential decay from step0 to step0 * final_frac over iters steps."""
    if iters == 1:
        return np.array([step0])
    return step0 * final_frac ** (np.arange(iters) / (iters - 1))


# ---------------------------------------------------------------------------
# shift attacks


def attack_shift_l2(weights: ModelWeights, pc: PointCloud, cfg: AttackConfig) -> AdvExample:
    """Margin attack with an L2 penalty: minimize ||delta||^2 + lambda * margin.

    The penalty weight follows the classic outer search: multiply by 10 while
    the attack fails, bisect once it succeeds. Among all predict()-confirmed
    successes the lowest-distortion iterate wins; on total failure the iterate
    with the lowest combined objective is returned with success False.
    """
    if cfg.kind != "shift_l2":
        raise ValueError(f"config kind is {cfg.kind!r}, not shift_l2")
    x, y = _prepare(weights, pc, cfg)
    clean = PointCloud(x, y)
    pred0, _ = predict(weights, x)
    if _fooled(cfg, y, pred0):
        return AdvExample(
            clean=clean, adversarial=clean, kind=cfg.kind, true_label=y,
            target_label=cfg.target, success=True, distortion=0.0,
            detail={"trivial": True},
        )
    obj = _objective_for(cfg, y)
    iters = cfg.resolved_iterations()
    steps = _step_schedule(cfg.resolved_step(), iters, 0.1)

    best_adv = None
    best_dist = np.inf
    effort_adv = x
    effort_total = np.inf
    lam = cfg.lam_init
    lo, hi = 0.0, np.inf
    schedule = []
    for _ in range(cfg.binary_search_steps):
        delta = np.zeros_like(x)
        succeeded = False
        for t in range(iters):
            adv = x + delta
            margin, g_in, trace = objective_value_and_input_gradient(weights, adv, obj)
            dist2 = float((delta * delta).sum())
            total = dist2 + lam * margin
            if total < effort_total:
                effort_total, effort_adv = total, adv
            if _fooled(cfg, y, int(np.argmax(trace.logits))) and _fooled(cfg, y, predict(weights, adv)[0]):
                succeeded = True
                dist = np.sqrt(dist2)
                if dist < best_dist:
                    best_dist, best_adv = dist, adv
            grad = 2.0 * delta + lam * g_in
            gnorm = float(np.linalg.norm(grad))
            if gnorm < 1e-12:
                break
            delta = delta - steps[t] * grad / gnorm
            # project the iterate back onto the canonical (centered, unit-radius)
            # manifold and fold the correction into delta: the classifier
            # re-normalizes its input, so optimizing off-manifold would chase a
            # decision boundary the defender never evaluates
            moved = x + delta
            centered = moved - moved.mean(axis=0)
            radius = float(np.sqrt((centered * centered).sum(axis=1).max()))
            if radius < 1e-12:
                break
            delta = centered / radius - x
        schedule.append({"lam": lam, "success": succeeded})
        if succeeded:
            hi = lam
            lam = (lo + hi) / 2.0
        else:
            lo = lam
            lam = lam * 10.0 if np.isinf(hi) else (lo + hi) / 2.0

    # success is always re-derived from the public predict path; a best-effort
    # iterate can still fool the classifier once the normalization guard runs
    adv_pc = PointCloud(best_adv if best_adv is not None else effort_adv, y)
    return AdvExample(
        clean=clean, adversarial=adv_pc, kind=cfg.kind, true_label=y,
        target_label=cfg.target, success=_fooled(cfg, y, predict(weights, adv_pc)[0]),
        distortion=l2_shift_norm(adv_pc, clean), detail={"schedule": schedule},
    )


def attack_shift_pgd(weights: ModelWeights, pc: PointCloud, cfg: AttackConfig) -> AdvExample:
    """Iterated sign-gradient steps inside a per-coordinate epsilon box.

    Untargeted: ascend the true-class NLL. Targeted: descend the target-class
    NLL. The perturbation is clipped to [-epsilon, epsilon] after every step,
    so max |delta| <= epsilon holds exactly.
    """
    if cfg.kind != "shift_pgd":
        raise ValueError(f"config kind is {cfg.kind!r}, not shift_pgd")
    x, y = _prepare(weights, pc, cfg)
    clean = PointCloud(x, y)
    obj = Objective.nll(cfg.target if cfg.targeted else y)
    sign = -1.0 if cfg.targeted else 1.0
    alpha = cfg.resolved_step()
    delta = np.zeros_like(x)
    for _ in range(cfg.resolved_iterations()):
        _, g, _ = objective_value_and_input_gradient(weights, x + delta, obj)
        delta = np.clip(delta + sign * alpha * np.sign(g), -cfg.epsilon, cfg.epsilon)
    adv_pc = PointCloud(x + delta, y)
    pred, _ = predict(weights, adv_pc)
    return AdvExample(
        clean=clean, adversarial=adv_pc, kind=cfg.kind, true_label=y,
        target_label=cfg.target, success=_fooled(cfg, y, pred),
        distortion=l2_shift_norm(adv_pc, clean), detail={},
    )


# ---------------------------------------------------------------------------
# add attacks


def _add_distance_and_grad(
    kind: str, x: np.ndarray, added: np.ndarray
) -> tuple[float, np.ndarray]:
    """Distance penalty and its gradient w.r.t. the added points.

    add_chamfer: symmetric Chamfer between (clean + added) and clean. Because
    the clean points sit in both clouds at distance 0, only the added points
    contribute, each through its nearest clean point.
    add_hausdorff: directed Hausdorff from the added set to the clean cloud;
    only the single farthest added point carries gradient.
    """
    diff = added[:, None, :] - x[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    jstar = np.argmin(d2, axis=1)
    m = added.shape[0]
    nearest = d2[np.arange(m), jstar]
    if kind == "add_chamfer":
        total = x.shape[0] + m
        grad = 2.0 * (added - x[jstar]) / total
        return float(nearest.sum() / total), grad
    istar = int(np.argmax(nearest))
    h = float(np.sqrt(nearest[istar]))
    grad = np.zeros_like(added)
    if h > 1e-12:
        grad[istar] = (added[istar] - x[jstar[istar]]) / h
    return h, grad


def _add_distortion(kind: str, clean: PointCloud, adv: PointCloud) -> float:
    if kind == "add_chamfer":
        return chamfer_symmetric(adv, clean)
    return hausdorff_directed(adv.points[clean.n :], clean)


def attack_add(weights: ModelWeights, pc: PointCloud, cfg: AttackConfig) -> AdvExample:
    """Append n_add new points and optimize only them.

    Objective: margin + lambda * distance(added, clean). Added points start at
    randomly chosen clean points plus N(0, 0.01) noise. The outer search is the
    mirror image of shift_l2 because lambda multiplies the distance term here:
    success raises lambda (squeezing the added points onto the surface),
    failure lowers it. Clean points pass through bit-identical.
    """
    if cfg.kind not in ("add_chamfer", "add_hausdorff"):
        raise ValueError(f"config kind is {cfg.kind!r}, not an add attack")
    x, y = _prepare(weights, pc, cfg)
    clean = PointCloud(x, y)
    obj = _objective_for(cfg, y)
    iters = cfg.resolved_iterations()
    steps = _step_schedule(cfg.resolved_step(), iters, 0.01)
    rng = np.random.default_rng(cfg.seed)
    # initialize on randomly chosen pool-critical points: only points that win
    # max-pool columns pass gradient, so starting anywhere else leaves most of
    # the budget stuck with a zero margin gradient
    _, _, trace0 = objective_value_and_input_gradient(weights, x, obj)
    critical = np.unique(trace0.pool_arg)
    base = x[rng.choice(critical, cfg.n_add)]
    added0 = base + rng.normal(0.0, 0.01, (cfg.n_add, 3))

    best_added = None
    best_dist = np.inf
    effort_added = added0
    effort_total = np.inf
    lam = cfg.lam_init
    lo, hi = 0.0, np.inf
    schedule = []
    for _ in range(cfg.binary_search_steps):
        added = added0.copy()
        succeeded = False
        for t in range(iters):
            full = np.vstack([x, added])
            margin, g_full, trace = objective_value_and_input_gradient(weights, full, obj)
            dist, g_dist = _add_distance_and_grad(cfg.kind, x, added)
            total = margin + lam * dist
            if total < effort_total:
                effort_total, effort_added = total, added
            if _fooled(cfg, y, int(np.argmax(trace.logits))) and _fooled(cfg, y, predict(weights, full)[0]):
                succeeded = True
                if dist < best_dist:
                    best_dist, best_added = dist, added
            grad = g_full[x.shape[0] :] + lam * g_dist
            norms = np.linalg.norm(grad, axis=1, keepdims=True)
            if norms.max() < 1e-12:
                break
            # each added point steps steps[t] along its own direction; rows with
            # no gradient (not winning any pool column) stay put
            added = added - steps[t] * grad / np.maximum(norms, 1e-12)
            # keep added points inside the unit ball: the clean cloud's max norm
            # is 1, so the full cloud stays canonical and the classifier's
            # re-normalization guard never moves the decision boundary
            radii = np.linalg.norm(added, axis=1, keepdims=True)
            added = np.where(radii > 1.0, added / radii, added)
        schedule.append({"lam": lam, "success": succeeded})
        if succeeded:
            lo = lam
            lam = lam * 10.0 if np.isinf(hi) else (lo + hi) / 2.0
        else:
            hi = lam
            lam = (lo + hi) / 2.0 if lo > 0.0 else lam / 10.0

    chosen = best_added if best_added is not None else effort_added
    adv_pc = PointCloud(np.vstack([x, chosen]), y)
    return AdvExample(
        clean=clean, adversarial=adv_pc, kind=cfg.kind, true_label=y,
        target_label=cfg.target, success=_fooled(cfg, y, predict(weights, adv_pc)[0]),
        distortion=_add_distortion(cfg.kind, clean, adv_pc),
        detail={"schedule": schedule, "n_add": cfg.n_add},
    )


# ---------------------------------------------------------------------------
# drop attack


def attack_drop_saliency(
    weights: ModelWeights, pc: PointCloud, cfg: AttackConfig, alpha: float = 1.0
) -> AdvExample:
    """Remove the n_drop points whose collapse to the cloud center hurts most.

    Saliency of point i: -g_i . (p_i - c) * r_i^alpha / max(r_i, 1e-9), where
    g is the gradient of the true-class NLL, c the coordinate-wise median and
    r_i the distance to it. With alpha = 1 this is the first-order loss
    increase if the point were pulled into the center, so the highest-saliency
    points are dropped. Removal happens over drop_rounds rounds with the
    gradient recomputed each round; the final round takes any remainder.
    Surviving points are untouched: the output is an exact subset of the input.
    """
    if cfg.kind != "drop_saliency":
        raise ValueError(f"config kind is {cfg.kind!r}, not drop_saliency")
    x, y = _prepare(weights, pc, cfg)
    clean = PointCloud(x, y)
    if cfg.n_drop >= pc.n:
        raise ValueError(f"n_drop={cfg.n_drop} must leave at least one point of {pc.n}")
    per_round = cfg.n_drop // cfg.drop_rounds
    obj = Objective.nll(y)
    alive = np.arange(x.shape[0])
    for r in range(cfg.drop_rounds):
        quota = per_round if r < cfg.drop_rounds - 1 else cfg.n_drop - per_round * (cfg.drop_rounds - 1)
        if quota == 0:
            continue
        xg = canonical_points(x[alive])
        _, g, _ = objective_value_and_input_gradient(weights, xg, obj)
        center = np.median(xg, axis=0)
        rel = xg - center
        radius = np.linalg.norm(rel, axis=1)
        saliency = -(g * rel).sum(axis=1) * radius**alpha / np.maximum(radius, 1e-9)
        drop_local = np.argsort(-saliency, kind="stable")[:quota]
        alive = np.delete(alive, drop_local)
    adv_pc = PointCloud(x[alive], y)
    pred, _ = predict(weights, adv_pc)
    return AdvExample(
        clean=clean, adversarial=adv_pc, kind=cfg.kind, true_label=y,
        target_label=None, success=pred != y, distortion=float(cfg.n_drop),
        detail={"rounds": cfg.drop_rounds},
    )


# ---------------------------------------------------------------------------
# on-disk adversarial sets
#
# A directory with clean/NNNNN.xyz, adv/NNNNN.xyz, and manifest.csv tying them
# together with labels, success flags, and distortions.


def save_adv_set(directory, examples: list[AdvExample]) -> None:
    root = Path(directory)
    (root / "clean").mkdir(parents=True, exist_ok=True)
    (root / "adv").mkdir(parents=True, exist_ok=True)
    with open(root / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["index", "clean_path", "adv_path", "kind", "true_label",
             "target_label", "success", "distortion"]
        )
        for i, ex in enumerate(examples):
            clean_rel = f"clean/{i:05d}.xyz"
            adv_rel = f"adv/{i:05d}.xyz"
            save_xyz(root / clean_rel, ex.clean)
            save_xyz(root / adv_rel, ex.adversarial)
            writer.writerow(
                [i, clean_rel, adv_rel, ex.kind, ex.true_label,
                 "-" if ex.target_label is None else ex.target_label,
                 int(ex.success), f"{ex.distortion:.17g}"]
            )


def load_adv_set(directory) -> list[AdvExample]:
    root = Path(directory)
    manifest = root / "manifest.csv"
    if not manifest.is_file():
        raise FileNotFoundError(f"{manifest} not found")
    out: list[AdvExample] = []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            clean = load_xyz(root / row["clean_path"])
            adv = load_xyz(root / row["adv_path"])
            out.append(
                AdvExample(
                    clean=clean,
                    adversarial=adv,
                    kind=row["kind"],
                    true_label=int(row["true_label"]),
                    target_label=None if row["target_label"] == "-" else int(row["target_label"]),
                    success=bool(int(row["success"])),
                    distortion=float(row["distortion"]),
                )
            )
    return out


def run_attack_set(
    weights: ModelWeights, clouds: list[PointCloud], cfg: AttackConfig, seed: int = 0
) -> list[AdvExample]:
    """Attack each cloud with a per-cloud seed derived from the root seed."""
    out = []
    for i, pc in enumerate(clouds):
        ss = np.random.SeedSequence(entropy=seed, spawn_key=(i,))
        out.append(attack(weights, pc, replace(cfg, seed=int(ss.generate_state(1)[0]))))
    return out
