"""Compact point-cloud classifier with hand-chained exact gradients.

Architecture: a shared per-point MLP (ReLU), a column-wise max-pool over the
points giving one global feature vector, and a small dense head ending in
softmax. The network is permutation-invariant by construction: reordering the
input rows cannot change the pooled feature.

Gradients are derived by hand (no autodiff) and exposed two ways: parameter
gradients for training, and input gradients of attack objectives for crafting
adversarial clouds. `forward` re-normalizes inputs that drifted off unit scale;
objective/gradient helpers run on the raw coordinates they are given so that
finite-difference probes and attack iterates see a smooth function.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import PointCloud
from .numerics import (
    AdamState,
    adam_update,
    log_softmax_rows,
    max_pool_cols,
    relu_backward,
    relu_forward,
    softmax_rows,
)

WEIGHTS_MAGIC = b"PNMW"
WEIGHTS_VERSION = 1

__all__ = [
    "ModelConfig",
    "ModelWeights",
    "ForwardTrace",
    "Objective",
    "init_weights",
    "core_forward",
    "forward",
    "predict",
    "extract_feature",
    "objective_value",
    "objective_value_and_input_gradient",
    "input_gradient",
    "EpochMetrics",
    "train",
    "evaluate",
    "weights_to_bytes",
    "weights_from_bytes",
    "save_weights",
    "load_weights",
    "weights_fingerprint",
]


@dataclass(frozen=True)
class ModelConfig:
    """Layer widths and the init seed; the head's last width is the class count."""

    n_classes: int = 8
    per_point_widths: tuple[int, ...] = (64, 128, 256)
    head_widths: tuple[int, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.n_classes}")
        if not self.head_widths:
            object.__setattr__(self, "head_widths", (128, self.n_classes))
        object.__setattr__(self, "per_point_widths", tuple(int(w) for w in self.per_point_widths))
        object.__setattr__(self, "head_widths", tuple(int(w) for w in self.head_widths))
        if not self.per_point_widths or min(self.per_point_widths) < 1:
            raise ValueError(f"per_point_widths must be positive, got {self.per_point_widths}")
        if min(self.head_widths) < 1:
            raise ValueError(f"head_widths must be positive, got {self.head_widths}")
        if self.head_widths[-1] != self.n_classes:
            raise ValueError(
                f"head must end at n_classes={self.n_classes}, got widths {self.head_widths}"
            )

    @property
    def feature_dim(self) -> int:
        return self.per_point_widths[-1]

    def layer_dims(self) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
        """(fan_in, fan_out) pairs for the per-point stack and the head."""
        pp_in = (3,) + self.per_point_widths[:-1]
        head_in = (self.feature_dim,) + self.head_widths[:-1]
        return (
            list(zip(pp_in, self.per_point_widths)),
            list(zip(head_in, self.head_widths)),
        )


@dataclass
class ModelWeights:
    """All parameters as (W, b) pairs, per-point stack then head.

    Treated as immutable once created; the sha256 fingerprint that ties a
    feature database to its weights is cached on first use.
    """

    config: ModelConfig
    per_point: list[tuple[np.ndarray, np.ndarray]]
    head: list[tuple[np.ndarray, np.ndarray]]
    _fingerprint: bytes | None = field(default=None, repr=False, compare=False)

    def tensors(self) -> list[np.ndarray]:
        """All parameter arrays in fixed declaration order (each layer W then b)."""
        out: list[np.ndarray] = []
        for w, b in list(self.per_point) + list(self.head):
            out.append(w)
            out.append(b)
        return out


def init_weights(config: ModelConfig) -> ModelWeights:
    """Uniform(-a, a) weights with a = sqrt(6 / (fan_in + fan_out)), zero biases.

    Deterministic in config.seed; layers consume the stream in declaration order.
    """
    rng = np.random.default_rng(config.seed)
    pp_dims, head_dims = config.layer_dims()

    def make(dims):
        layers = []
        for fi, fo in dims:
            a = math.sqrt(6.0 / (fi + fo))
            layers.append((rng.uniform(-a, a, (fi, fo)), np.zeros(fo)))
        return layers

    return ModelWeights(config=config, per_point=make(pp_dims), head=make(head_dims))


@dataclass
class ForwardTrace:
    """Every intermediate needed to chain gradients backward.

    points is the array actually fed to the first layer (after any
    re-normalization by `forward`); logits and softmax are 1-D of length C.
    """

    points: np.ndarray
    pp_pre: list[np.ndarray]
    pp_post: list[np.ndarray]
    pool_arg: np.ndarray
    feature: np.ndarray
    head_pre: list[np.ndarray]
    head_hidden: list[np.ndarray]
    logits: np.ndarray
    softmax: np.ndarray


def core_forward(weights: ModelWeights, points: np.ndarray) -> ForwardTrace:
    """Run the network on raw (n, 3) coordinates exactly as given."""
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3 or x.shape[0] < 1:
        raise ValueError(f"expected (n, 3) coordinates with n >= 1, got shape {x.shape}")
    pp_pre, pp_post = [], []
    h = x
    for w, b in weights.per_point:
        pre = h @ w + b
        pp_pre.append(pre)
        h = relu_forward(pre)
        pp_post.append(h)
    feature, pool_arg = max_pool_cols(h)
    head_pre, head_hidden = [], []
    g = feature
    n_head = len(weights.head)
    for i, (w, b) in enumerate(weights.head):
        pre = g @ w + b
        head_pre.append(pre)
        if i < n_head - 1:
            g = relu_forward(pre)
            head_hidden.append(g)
    logits = head_pre[-1]
    return ForwardTrace(
        points=x,
        pp_pre=pp_pre,
        pp_post=pp_post,
        pool_arg=pool_arg,
        feature=feature,
        head_pre=head_pre,
        head_hidden=head_hidden,
        logits=logits,
        softmax=softmax_rows(logits[None, :])[0],
    )


def canonical_points(pc) -> np.ndarray:
    """Coordinates re-normalized into the unit sphere when off scale.

    The guard triggers only when the max point norm deviates from 1 by more
    than 1e-6; clouds already on the canonical scale pass through untouched.
    """
    pts = pc.points if isinstance(pc, PointCloud) else np.asarray(pc, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
        raise ValueError(f"expected (n, 3) coordinates with n >= 1, got shape {pts.shape}")
    max_norm = math.sqrt(float((pts * pts).sum(axis=1).max()))
    if abs(max_norm - 1.0) <= 1e-6:
        return pts
    centered = pts - pts.mean(axis=0)
    radius = math.sqrt(float((centered * centered).sum(axis=1).max()))
    if radius < 1e-12:
        raise ValueError("cannot classify a degenerate cloud: all points coincide")
    return centered / radius


def forward(weights: ModelWeights, pc) -> ForwardTrace:
    """Classify one cloud (PointCloud or raw array), normalizing first if needed."""
    return core_forward(weights, canonical_points(pc))


def predict(weights: ModelWeights, pc) -> tuple[int, np.ndarray]:
    """(argmax class, softmax). Ties resolve to the smallest class index."""
    trace = forward(weights, pc)
    return int(np.argmax(trace.softmax)), trace.softmax


def extract_feature(weights: ModelWeights, pc) -> np.ndarray:
    """The pooled global feature vector (length feature_dim) for one cloud."""
    return forward(weights, pc).feature


# ---------------------------------------------------------------------------
# objectives and input gradients


@dataclass(frozen=True)
class Objective:
    """A scalar attack objective over the logits.

    kind "nll": negative log-likelihood of class `label`.
    kind "cw": hinge margin with confidence kappa. Untargeted,
      max(z_label - max_{j != label} z_j, -kappa), pushes the true class down;
      targeted, max(max_{j != label} z_j - z_label, -kappa), pulls the target up.
    """

    kind: str
    label: int
    targeted: bool = False
    kappa: float = 0.0

    def __post_init__(self):
        if self.kind not in ("nll", "cw"):
            raise ValueError(f"unknown objective kind {self.kind!r}")
        if self.label < 0:
            raise ValueError(f"label must be >= 0, got {self.label}")
        if self.kappa < 0:
            raise ValueError(f"kappa must be >= 0, got {self.kappa}")

    @classmethod
    def nll(cls, label: int) -> "Objective":
        return cls(kind="nll", label=label)

    @classmethod
    def cw_untargeted(cls, true_label: int, kappa: float = 0.0) -> "Objective":
        return cls(kind="cw", label=true_label, targeted=False, kappa=kappa)

    @classmethod
    def cw_targeted(cls, target_label: int, kappa: float = 0.0) -> "Objective":
        return cls(kind="cw", label=target_label, targeted=True, kappa=kappa)


def _objective_from_trace(obj: Objective, trace: ForwardTrace) -> tuple[float, np.ndarray]:
    """(value, dvalue/dlogits) for one trace."""
    z = trace.logits
    c = z.shape[0]
    if obj.label >= c:
        raise ValueError(f"objective label {obj.label} out of range for {c} classes")
    dlogits = np.zeros(c)
    if obj.kind == "nll":
        logp = log_softmax_rows(z[None, :])[0]
        dlogits = trace.softmax.copy()
        dlogits[obj.label] -= 1.0
        return float(-logp[obj.label]), dlogits
    rival = np.argmax(np.where(np.arange(c) == obj.label, -np.inf, z))
    diff = z[rival] - z[obj.label] if obj.targeted else z[obj.label] - z[rival]
    if diff <= -obj.kappa:
        # saturated hinge: constant objective, zero gradient
        return -obj.kappa, dlogits
    hi, lo = (rival, obj.label) if obj.targeted else (obj.label, rival)
    dlogits[hi] = 1.0
    dlogits[lo] = -1.0
    return float(diff), dlogits


def _input_backward(weights: ModelWeights, trace: ForwardTrace, dlogits: np.ndarray) -> np.ndarray:
    """d(objective)/d(points) given d(objective)/d(logits)."""
    g = dlogits
    for i in range(len(weights.head) - 1, -1, -1):
        w, _ = weights.head[i]
        g = w @ g
        if i > 0:
            g = relu_backward(trace.head_pre[i - 1], g)
    n, d = trace.pp_post[-1].shape
    dh = np.zeros((n, d))
    dh[trace.pool_arg, np.arange(d)] = g
    for i in range(len(weights.per_point) - 1, -1, -1):
        w, _ = weights.per_point[i]
        dpre = relu_backward(trace.pp_pre[i], dh)
        dh = dpre @ w.T
    return dh


def objective_value(weights: ModelWeights, points, obj: Objective) -> float:
    """Objective evaluated on raw coordinates (no normalization guard)."""
    trace = core_forward(weights, points)
    return _objective_from_trace(obj, trace)[0]


def objective_value_and_input_gradient(
    weights: ModelWeights, points, obj: Objective
) -> tuple[float, np.ndarray, ForwardTrace]:
    """(value, d(value)/d(points), trace) in one forward/backward pass."""
    trace = core_forward(weights, points)
    value, dlogits = _objective_from_trace(obj, trace)
    return value, _input_backward(weights, trace, dlogits), trace


def input_gradient(weights: ModelWeights, points, obj: Objective) -> np.ndarray:
    """d(objective)/d(points), shape (n, 3)."""
    return objective_value_and_input_gradient(weights, points, obj)[1]


def _param_backward(weights: ModelWeights, trace: ForwardTrace, dlogits: np.ndarray) -> list[np.ndarray]:
    """Per-tensor gradients in tensors() order for one sample."""
    head_grads: list[np.ndarray] = []
    g = dlogits
    for i in range(len(weights.head) - 1, -1, -1):
        w, _ = weights.head[i]
        inp = trace.feature if i == 0 else trace.head_hidden[i - 1]
        head_grads.append(g.copy())         # db
        head_grads.append(np.outer(inp, g))  # dW
        g = w @ g
        if i > 0:
            g = relu_backward(trace.head_pre[i - 1], g)
    n, d = trace.pp_post[-1].shape
    dh = np.zeros((n, d))
    dh[trace.pool_arg, np.arange(d)] = g
    pp_grads: list[np.ndarray] = []
    for i in range(len(weights.per_point) - 1, -1, -1):
        w, _ = weights.per_point[i]
        inp = trace.points if i == 0 else trace.pp_post[i - 1]
        dpre = relu_backward(trace.pp_pre[i], dh)
        pp_grads.append(dpre.sum(axis=0))  # db
        pp_grads.append(inp.T @ dpre)      # dW
        dh = dpre @ w.T
    grads = pp_grads[::-1] + head_grads[::-1]
    return grads


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class EpochMetrics:
    """One metrics row. Epoch 0 is the pre-update evaluation of the fresh init."""

    epoch: int
    loss: float
    train_accuracy: float
    test_accuracy: float | None = None


def evaluate(weights: ModelWeights, clouds: list[PointCloud]) -> tuple[float, float]:
    """(mean NLL, accuracy in [0, 1]) over labeled clouds."""
    if not clouds:
        raise ValueError("cannot evaluate on an empty set")
    total_loss = 0.0
    correct = 0
    for pc in clouds:
        if pc.label is None:
            raise ValueError("evaluate requires labeled clouds")
        trace = forward(weights, pc)
        logp = log_softmax_rows(trace.logits[None, :])[0]
        total_loss += float(-logp[pc.label])
        correct += int(np.argmax(trace.softmax)) == pc.label
    return total_loss / len(clouds), correct / len(clouds)


def train(
    config: ModelConfig,
    train_clouds: list[PointCloud],
    *,
    epochs: int = 30,
    batch_size: int = 32,
    lr: float = 1e-3,
    test_clouds: list[PointCloud] | None = None,
) -> tuple[ModelWeights, list[EpochMetrics]]:
    """Adam training with deterministic batch order given config.seed.

    Returns the trained weights plus one EpochMetrics row per epoch; row 0 holds
    the pre-update loss/accuracy (about ln C when the init carries no signal).
    Rows 1..epochs carry streaming (pre-step) train loss/accuracy and a full
    test-set evaluation when test_clouds is given.
    """
    if not train_clouds:
        raise ValueError("training set is empty")
    for pc in train_clouds:
        if pc.label is None or pc.label >= config.n_classes:
            raise ValueError(f"every training cloud needs a label in [0, {config.n_classes})")
    if epochs < 1 or batch_size < 1:
        raise ValueError(f"epochs and batch_size must be >= 1, got {epochs}, {batch_size}")

    weights = init_weights(config)
    params = [t.copy() for t in weights.tensors()]
    states = [AdamState.zeros_like(t) for t in params]

    def current() -> ModelWeights:
        return _weights_from_tensors(config, params)

    rng = np.random.default_rng(config.seed)
    metrics: list[EpochMetrics] = []
    loss0, acc0 = evaluate(current(), train_clouds)
    test0 = evaluate(current(), test_clouds)[1] if test_clouds else None
    metrics.append(EpochMetrics(epoch=0, loss=loss0, train_accuracy=acc0, test_accuracy=test0))

    n = len(train_clouds)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        epoch_loss = 0.0
        epoch_correct = 0
        w_now = current()
        for start in range(0, n, batch_size):
            batch = order[start : start + batch_size]
            grads = [np.zeros_like(t) for t in params]
            for idx in batch:
                pc = train_clouds[idx]
                trace = forward(w_now, pc)
                logp = log_softmax_rows(trace.logits[None, :])[0]
                epoch_loss += float(-logp[pc.label])
                epoch_correct += int(np.argmax(trace.softmax)) == pc.label
                dlogits = trace.softmax.copy()
                dlogits[pc.label] -= 1.0
                dlogits /= len(batch)
                for g_acc, g in zip(grads, _param_backward(w_now, trace, dlogits)):
                    g_acc += g
            for i in range(len(params)):
                params[i], states[i] = adam_update(params[i], grads[i], states[i], lr)
            w_now = current()
        test_acc = evaluate(w_now, test_clouds)[1] if test_clouds else None
        metrics.append(
            EpochMetrics(
                epoch=epoch,
                loss=epoch_loss / n,
                train_accuracy=epoch_correct / n,
                test_accuracy=test_acc,
            )
        )
    return current(), metrics


def _weights_from_tensors(config: ModelConfig, tensors: list[np.ndarray]) -> ModelWeights:
    pp_dims, head_dims = config.layer_dims()
    it = iter(tensors)
    per_point = [(next(it), next(it)) for _ in pp_dims]
    head = [(next(it), next(it)) for _ in head_dims]
    return ModelWeights(config=config, per_point=per_point, head=head)


# ---------------------------------------------------------------------------
# serialization
#
# Binary layout (all integers little-endian u32 unless noted):
#   magic "PNMW" | version | n_classes | n_pp | pp widths... | n_head |
#   head widths... | seed (i64) | tensors as raw float64 LE in tensors() order


def weights_to_bytes(weights: ModelWeights) -> bytes:
    cfg = weights.config
    head = [
        WEIGHTS_MAGIC,
        struct.pack("<I", WEIGHTS_VERSION),
        struct.pack("<I", cfg.n_classes),
        struct.pack("<I", len(cfg.per_point_widths)),
        struct.pack(f"<{len(cfg.per_point_widths)}I", *cfg.per_point_widths),
        struct.pack("<I", len(cfg.head_widths)),
        struct.pack(f"<{len(cfg.head_widths)}I", *cfg.head_widths),
        struct.pack("<q", cfg.seed),
    ]
    body = [np.ascontiguousarray(t, dtype="<f8").tobytes() for t in weights.tensors()]
    return b"".join(head) + b"".join(body)


def weights_from_bytes(blob: bytes) -> ModelWeights:
    if blob[:4] != WEIGHTS_MAGIC:
        raise ValueError(f"not a weights file: bad magic {blob[:4]!r}, expected {WEIGHTS_MAGIC!r}")
    off = 4

    def u32() -> int:
        nonlocal off
        v = struct.unpack_from("<I", blob, off)[0]
        off += 4
        return v

    version = u32()
    if version != WEIGHTS_VERSION:
        raise ValueError(f"unsupported weights version {version}, expected {WEIGHTS_VERSION}")
    n_classes = u32()
    pp = tuple(u32() for _ in range(u32()))
    hd = tuple(u32() for _ in range(u32()))
    seed = struct.unpack_from("<q", blob, off)[0]
    off += 8
    config = ModelConfig(n_classes=n_classes, per_point_widths=pp, head_widths=hd, seed=seed)
    tensors: list[np.ndarray] = []
    for dims in config.layer_dims():
        for fi, fo in dims:
            for shape in ((fi, fo), (fo,)):
                count = int(np.prod(shape))
                arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape)
                tensors.append(arr.astype(np.float64))
                off += count * 8
    if off != len(blob):
        raise ValueError(f"weights file has {len(blob) - off} trailing bytes")
    return _weights_from_tensors(config, tensors)


def save_weights(path, weights: ModelWeights) -> None:
    Path(path).write_bytes(weights_to_bytes(weights))


def load_weights(path) -> ModelWeights:
    return weights_from_bytes(Path(path).read_bytes())


def weights_fingerprint(weights: ModelWeights) -> bytes:
    """sha256 of the serialized weights; ties a feature database to its model."""
    if weights._fingerprint is None:
        weights._fingerprint = hashlib.sha256(weights_to_bytes(weights)).digest()
    return weights._fingerprint
