"""Nearest-neighbor feature-space defense plus point-removal baselines.

The defense never edits the input cloud. It extracts the classifier's global
feature for the incoming cloud, finds the k nearest training-set features by
brute-force exact search, and averages the *training* clouds' stored softmax
vectors, each scaled by a per-neighbor confidence weight:

    s_avg = sum_j W(s_j) * s_j        (weights are not normalized)

The verdict is argmax(s_avg). Three weightings are provided: uniform (UW),
entropy (EW, low-entropy neighbors count more), and diversity (DW, powered
softmax gaps). SRS (random removal) and SOR (statistical outlier removal) are
included as input-restoration baselines that feed the raw classifier.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import PointCloud
from .model import ModelWeights, extract_feature, forward, weights_fingerprint

DB_MAGIC = b"FDB1"
DB_VERSION = 1

__all__ = [
    "FeatureDatabase",
    "DefenseConfig",
    "NeighborRecord",
    "DefenseVerdict",
    "StaleDatabaseError",
    "build_feature_db",
    "knn_query",
    "weight_uniform",
    "weight_entropy",
    "weight_diversity",
    "classify_feature",
    "defend_classify",
    "srs",
    "sor",
    "save_db",
    "load_db",
]


class StaleDatabaseError(ValueError):
    """The feature database was built from different model weights."""


@dataclass
class FeatureDatabase:
    """Frozen per-training-cloud features, softmaxes, and labels.

    fingerprint is the sha256 of the weights that produced the features; the
    defense refuses to run against weights with a different fingerprint.
    """

    features: np.ndarray   # (N, d) float64
    softmaxes: np.ndarray  # (N, C) float64
    labels: np.ndarray     # (N,) int
    fingerprint: bytes

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.softmaxes = np.asarray(self.softmaxes, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.softmaxes.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("features/softmaxes must be 2-D and labels 1-D")
        n = self.features.shape[0]
        if n < 1 or self.softmaxes.shape[0] != n or self.labels.shape[0] != n:
            raise ValueError(
                f"row counts disagree: {n} features, {self.softmaxes.shape[0]} softmaxes, "
                f"{self.labels.shape[0]} labels"
            )
        if len(self.fingerprint) != 32:
            raise ValueError(f"fingerprint must be 32 bytes, got {len(self.fingerprint)}")
        # Cached row norms keep the per-query distance pass at one matrix-vector
        # product instead of materializing an (N, d) difference array.
        self._sq_norms = (self.features * self.features).sum(axis=1)
        self._norms = np.sqrt(self._sq_norms)

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def n_classes(self) -> int:
        return self.softmaxes.shape[1]


@dataclass(frozen=True)
class DefenseConfig:
    """k, weighting scheme, feature metric, and the DW shape parameters."""

    k: int = 5
    weighting: str = "uw"
    metric: str = "euclidean"
    dw_exponent: float = 3.0
    dw_top_m: int = 20
    fallback_uniform: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.weighting not in ("uw", "ew", "dw"):
            raise ValueError(f"weighting must be uw, ew, or dw, got {self.weighting!r}")
        if self.metric not in ("euclidean", "cosine"):
            raise ValueError(f"metric must be euclidean or cosine, got {self.metric!r}")
        if self.dw_top_m < 1:
            raise ValueError(f"dw_top_m must be >= 1, got {self.dw_top_m}")


@dataclass(frozen=True)
class NeighborRecord:
    """One retrieved neighbor: database row, distance, weight, training label."""

    index: int
    distance: float
    weight: float
    label: int


@dataclass
class DefenseVerdict:
    """Defended decision: predicted label, aggregate score, and the neighbors used."""

    label: int
    s_avg: np.ndarray
    neighbors: list[NeighborRecord]
    weighting: str
    fallback_used: bool = False


def build_feature_db(weights: ModelWeights, clouds: list[PointCloud]) -> FeatureDatabase:
    """One database row per labeled training cloud, in input order."""
    if not clouds:
        raise ValueError("cannot build a feature database from an empty set")
    d = weights.config.feature_dim
    c = weights.config.n_classes
    features = np.empty((len(clouds), d))
    softmaxes = np.empty((len(clouds), c))
    labels = np.empty(len(clouds), dtype=np.int64)
    for i, pc in enumerate(clouds):
        if pc.label is None:
            raise ValueError(f"cloud {i} has no label; the database stores labeled training data")
        trace = forward(weights, pc)
        features[i] = trace.feature
        softmaxes[i] = trace.softmax
        labels[i] = pc.label
    return FeatureDatabase(
        features=features,
        softmaxes=softmaxes,
        labels=labels,
        fingerprint=weights_fingerprint(weights),
    )


def _distances(db: FeatureDatabase, feature: np.ndarray, metric: str) -> np.ndarray:
    dots = db.features @ feature
    if metric == "euclidean":
        sq = db._sq_norms - 2.0 * dots + feature @ feature
        return np.sqrt(np.maximum(sq, 0.0))
    norms = db._norms * np.linalg.norm(feature)
    sim = np.where(norms > 0.0, dots / np.where(norms > 0.0, norms, 1.0), 0.0)
    return 1.0 - sim


def knn_query(
    db: FeatureDatabase, feature, k: int, metric: str = "euclidean"
) -> tuple[np.ndarray, np.ndarray]:
    """Exact k nearest rows: (indices, distances), ascending distance.

    Brute force over all N rows with a stable sort, so exact duplicates are
    returned in row order. k must not exceed the database size.
    """
    feature = np.asarray(feature, dtype=np.float64)
    if feature.ndim != 1 or feature.shape[0] != db.features.shape[1]:
        raise ValueError(
            f"feature must be 1-D of length {db.features.shape[1]}, got shape {feature.shape}"
        )
    if not 1 <= k <= db.size:
        raise ValueError(f"k must be in [1, {db.size}], got {k}")
    if metric not in ("euclidean", "cosine"):
        raise ValueError(f"metric must be euclidean or cosine, got {metric!r}")
    dists = _distances(db, feature, metric)
    order = np.argsort(dists, kind="stable")[:k]
    return order, dists[order]


# ---------------------------------------------------------------------------
# neighbor weightings


def weight_uniform(softmax) -> float:
    """Every neighbor counts the same."""
    s = np.asarray(softmax, dtype=np.float64)
    if s.ndim != 1 or s.size < 2:
        raise ValueError(f"softmax must be 1-D with >= 2 entries, got shape {s.shape}")
    return 1.0


def weight_entropy(softmax) -> float:
    """|ln C - H(s)|: confident (low-entropy) neighbors weigh more.

    Computed as |sum_c s_c * ln(C * s_c)| with 0 * ln 0 := 0, which is
    algebraically ln C - H(s) and returns exactly 0.0 on a uniform softmax.
    C is the length of the vector.
    """
    s = np.asarray(softmax, dtype=np.float64)
    if s.ndim != 1 or s.size < 2:
        raise ValueError(f"softmax must be 1-D with >= 2 entries, got shape {s.shape}")
    c = s.size
    terms = np.where(s > 0.0, s * np.log(np.where(s > 0.0, c * s, 1.0)), 0.0)
    return float(abs(terms.sum()))


def weight_diversity(softmax, exponent: float = 3.0, top_m: int = 20) -> float:
    """Sum of powered gaps between the top softmax entry and the next M_eff.

    M_eff = min(top_m, C - 1). Sorting is descending; a one-hot vector scores
    exactly M_eff, a uniform one exactly 0.
    """
    s = np.asarray(softmax, dtype=np.float64)
    if s.ndim != 1 or s.size < 2:
        raise ValueError(f"softmax must be 1-D with >= 2 entries, got shape {s.shape}")
    if top_m < 1:
        raise ValueError(f"top_m must be >= 1, got {top_m}")
    m_eff = min(top_m, s.size - 1)
    s_hat = np.sort(s)[::-1]
    gaps = s_hat[0] - s_hat[1 : m_eff + 1]
    return float((gaps**exponent).sum())


def _neighbor_weight(softmax: np.ndarray, cfg: DefenseConfig) -> float:
    if cfg.weighting == "uw":
        return weight_uniform(softmax)
    if cfg.weighting == "ew":
        return weight_entropy(softmax)
    return weight_diversity(softmax, exponent=cfg.dw_exponent, top_m=cfg.dw_top_m)


def classify_feature(db: FeatureDatabase, feature, cfg: DefenseConfig) -> DefenseVerdict:
    """The pure defense step: k-NN lookup and weighted softmax aggregation.

    The input cloud's own softmax never enters the aggregate; only stored
    training softmaxes vote. If every weight vanishes (sum < 1e-12) and
    fallback is enabled, the vote is redone uniformly.
    """
    idx, dists = knn_query(db, feature, cfg.k, cfg.metric)

    def aggregate(uniform: bool) -> tuple[np.ndarray, list[float]]:
        s_avg = np.zeros(db.n_classes)
        ws = []
        for j in idx:
            w = 1.0 if uniform else _neighbor_weight(db.softmaxes[j], cfg)
            ws.append(w)
            s_avg += w * db.softmaxes[j]
        return s_avg, ws

    s_avg, ws = aggregate(uniform=False)
    fallback_used = False
    if cfg.fallback_uniform and sum(ws) < 1e-12:
        s_avg, ws = aggregate(uniform=True)
        fallback_used = True
    neighbors = [
        NeighborRecord(index=int(j), distance=float(d), weight=w, label=int(db.labels[j]))
        for j, d, w in zip(idx, dists, ws)
    ]
    return DefenseVerdict(
        label=int(np.argmax(s_avg)),
        s_avg=s_avg,
        neighbors=neighbors,
        weighting=cfg.weighting,
        fallback_used=fallback_used,
    )


def defend_classify(
    db: FeatureDatabase, weights: ModelWeights, pc, cfg: DefenseConfig | None = None
) -> DefenseVerdict:
    """Defended classification of one cloud.

    Raises StaleDatabaseError when the database fingerprint does not match the
    weights: mixing a database with foreign weights silently breaks the
    neighbor semantics, so it is an error, not a warning.
    """
    cfg = cfg or DefenseConfig()
    if db.fingerprint != weights_fingerprint(weights):
        raise StaleDatabaseError(
            "feature database fingerprint does not match these model weights; rebuild the database"
        )
    return classify_feature(db, extract_feature(weights, pc), cfg)


# ---------------------------------------------------------------------------
# input-restoration baselines


def srs(pc: PointCloud, n_remove: int, seed: int = 0) -> PointCloud:
    """Simple random sampling: remove exactly n_remove points, uniformly, seeded.

    Survivors keep their original relative order. n_remove must leave at least
    one point.
    """
    if not 0 <= n_remove < pc.n:
        raise ValueError(f"n_remove must be in [0, {pc.n - 1}], got {n_remove}")
    if n_remove == 0:
        return pc
    rng = np.random.default_rng(seed)
    drop = rng.choice(pc.n, size=n_remove, replace=False)
    keep = np.setdiff1d(np.arange(pc.n), drop)
    return PointCloud(pc.points[keep], pc.label)


def sor(pc: PointCloud, k: int = 2, alpha: float = 1.1) -> PointCloud:
    """Statistical outlier removal.

    For each point, the mean Euclidean distance to its k nearest neighbors
    (self excluded); points above mu + alpha * sigma are removed, where mu and
    sigma are the mean and sample standard deviation of those per-point means.
    Keeps at least one point. Needs n > k so every point has k real neighbors.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if pc.n <= k:
        raise ValueError(f"need more than k={k} points, got {pc.n}")
    diff = pc.points[:, None, :] - pc.points[None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    np.fill_diagonal(d, np.inf)
    knn_mean = np.sort(d, axis=1)[:, :k].mean(axis=1)
    mu = knn_mean.mean()
    sigma = knn_mean.std(ddof=1)
    keep = knn_mean <= mu + alpha * sigma
    if not keep.any():
        keep[np.argmin(knn_mean)] = True
    return PointCloud(pc.points[keep], pc.label)


# ---------------------------------------------------------------------------
# serialization
#
# Binary layout (little-endian):
#   magic "FDB1" | version u32 | N u32 | d u32 | C u32 | fingerprint (32 bytes)
#   | features (N*d float64) | softmaxes (N*C float64) | labels (N u32)


def save_db(path, db: FeatureDatabase) -> None:
    head = struct.pack(
        "<4sIIII", DB_MAGIC, DB_VERSION, db.size, db.features.shape[1], db.n_classes
    )
    Path(path).write_bytes(
        head
        + db.fingerprint
        + np.ascontiguousarray(db.features, dtype="<f8").tobytes()
        + np.ascontiguousarray(db.softmaxes, dtype="<f8").tobytes()
        + np.ascontiguousarray(db.labels, dtype="<u4").tobytes()
    )


def load_db(path) -> FeatureDatabase:
    blob = Path(path).read_bytes()
    if blob[:4] != DB_MAGIC:
        raise ValueError(f"not a feature database: bad magic {blob[:4]!r}, expected {DB_MAGIC!r}")
    version, n, d, c = struct.unpack_from("<IIII", blob, 4)
    if version != DB_VERSION:
        raise ValueError(f"unsupported database version {version}, expected {DB_VERSION}")
    off = 20
    fingerprint = blob[off : off + 32]
    off += 32
    expected = off + n * d * 8 + n * c * 8 + n * 4
    if len(blob) != expected:
        raise ValueError(f"database file is {len(blob)} bytes, layout implies {expected}")
    features = np.frombuffer(blob, dtype="<f8", count=n * d, offset=off).reshape(n, d)
    off += n * d * 8
    softmaxes = np.frombuffer(blob, dtype="<f8", count=n * c, offset=off).reshape(n, c)
    off += n * c * 8
    labels = np.frombuffer(blob, dtype="<u4", count=n, offset=off)
    return FeatureDatabase(
        features=features.astype(np.float64),
        softmaxes=softmaxes.astype(np.float64),
        labels=labels.astype(np.int64),
        fingerprint=fingerprint,
    )
