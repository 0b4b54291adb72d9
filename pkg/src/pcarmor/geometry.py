"""Point clouds, set distances, a synthetic 8-class shape family, and .xyz files.

A PointCloud is an immutable (n, 3) float64 array with an optional integer
label. All set distances are exact brute-force computations; clouds here are
desk-scale (hundreds of points), so the (n, m) distance matrix is cheap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SHAPE_KINDS = ("sphere", "cube", "cylinder", "cone", "torus", "pyramid", "disk", "helix")

__all__ = [
    "SHAPE_KINDS",
    "PointCloud",
    "ShapeSpec",
    "normalize_unit_sphere",
    "hausdorff_directed",
    "hausdorff_symmetric",
    "chamfer_directed",
    "chamfer_symmetric",
    "l2_shift_norm",
    "rotation_matrix",
    "sample_surface",
    "generate_shape",
    "build_dataset",
    "save_xyz",
    "load_xyz",
    "save_dataset",
    "load_dataset",
]


def _freeze(points: np.ndarray) -> np.ndarray:
    pts = np.array(points, dtype=np.float64)
    pts.setflags(write=False)
    return pts


@dataclass(frozen=True)
class PointCloud:
    """An unordered set of 3-D points with an optional class label.

    The coordinate array is copied on construction and marked read-only, so a
    PointCloud can be shared freely between attack/defense stages.
    """

    points: np.ndarray
    label: int | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValueError(f"point cloud must have shape (n, 3) with n >= 1, got {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("point cloud contains non-finite coordinates")
        if self.label is not None and (not isinstance(self.label, (int, np.integer)) or self.label < 0):
            raise ValueError(f"label must be a non-negative int or None, got {self.label!r}")
        object.__setattr__(self, "points", _freeze(pts))
        if self.label is not None:
            object.__setattr__(self, "label", int(self.label))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def with_points(self, points) -> "PointCloud":
        """Same label, new coordinates."""
        return PointCloud(points, self.label)


def _points_of(x, name: str = "cloud") -> np.ndarray:
    """Accept a PointCloud or raw (n, 3) array and return the coordinates."""
    pts = x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
        raise ValueError(f"{name} must have shape (n, 3) with n >= 1, got {pts.shape}")
    return pts


def normalize_unit_sphere(pc: PointCloud) -> PointCloud:
    """Center on the centroid, then scale so the farthest point has norm 1.

    Idempotent to within 1e-9. Raises ValueError on a degenerate cloud whose
    points all coincide (scale would be 0).
    """
    pts = pc.points - pc.points.mean(axis=0)
    radius = math.sqrt(float((pts * pts).sum(axis=1).max()))
    if radius < 1e-12:
        raise ValueError("cannot normalize a degenerate cloud: all points coincide")
    return PointCloud(pts / radius, pc.label)


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact (n, m) matrix of squared distances via explicit differences."""
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def hausdorff_directed(a, b) -> float:
    """max over points of a of the Euclidean distance to the nearest point of b."""
    d2 = _sq_dists(_points_of(a, "a"), _points_of(b, "b"))
    return float(np.sqrt(d2.min(axis=1).max()))


def hausdorff_symmetric(a, b) -> float:
    """max(hausdorff_directed(a, b), hausdorff_directed(b, a))."""
    return max(hausdorff_directed(a, b), hausdorff_directed(b, a))


def chamfer_directed(a, b) -> float:
    """mean over points of a of the squared distance to the nearest point of b."""
    d2 = _sq_dists(_points_of(a, "a"), _points_of(b, "b"))
    return float(d2.min(axis=1).mean())


def chamfer_symmetric(a, b) -> float:
    """chamfer_directed(a, b) + chamfer_directed(b, a)."""
    return chamfer_directed(a, b) + chamfer_directed(b, a)


def l2_shift_norm(a, b) -> float:
    """Euclidean norm of the stacked per-point displacement between index-aligned clouds.

    Both clouds must have identical shape; this is the distortion measure for
    shift attacks, where point i of a corresponds to point i of b.
    """
    pa = _points_of(a, "a")
    pb = _points_of(b, "b")
    if pa.shape != pb.shape:
        raise ValueError(f"l2_shift_norm needs index-aligned clouds, got {pa.shape} vs {pb.shape}")
    return float(np.linalg.norm((pa - pb).ravel()))


# ---------------------------------------------------------------------------
# synthetic shape family


@dataclass(frozen=True)
class ShapeSpec:
    """Recipe for one synthetic cloud: kind, size, noise, pose, and seed."""

    kind: str
    n_points: int = 256
    jitter_sigma: float = 0.01
    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}, expected one of {SHAPE_KINDS}")
        if self.n_points < 8:
            raise ValueError(f"n_points must be >= 8, got {self.n_points}")
        if self.jitter_sigma < 0:
            raise ValueError(f"jitter_sigma must be >= 0, got {self.jitter_sigma}")


def rotation_matrix(rx: float, ry: float, rz: float) -> np.ndarray:
    """Rotation about x, then y, then z (R = Rz @ Ry @ Rx)."""
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    rx_m = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]], dtype=np.float64)
    ry_m = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]], dtype=np.float64)
    rz_m = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]], dtype=np.float64)
    return rz_m @ ry_m @ rx_m


def _sample_sphere(n: int, rng: np.random.Generator) -> np.ndarray:
    # Gaussian directions, then alternate exact centering with re-projection to
    # the unit sphere. Converges quadratically; after it, the centroid is ~1e-15
    # and every norm is exactly 1, so downstream centering preserves equal radii.
    pts = rng.standard_normal((n, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    for _ in range(64):
        pts = pts - pts.mean(axis=0)
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
        if np.abs(pts.mean(axis=0)).max() < 1e-15:
            break
    return pts


def _sample_cube(n: int, rng: np.random.Generator) -> np.ndarray:
    # Axis-aligned box family: unit half-extent on x, the other two drawn per
    # cloud. Every point lands exactly on one face, so one coordinate sits at
    # its axis extreme before jitter/rotation. Faces are weighted by area so
    # elongation does not thin out the large sides.
    half = np.array([1.0, rng.uniform(0.72, 1.0), rng.uniform(0.72, 1.0)])
    face_areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    probs = np.repeat(face_areas / face_areas.sum() / 2.0, 2)
    face = rng.choice(6, n, p=probs)
    uv = rng.uniform(-1.0, 1.0, (n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for i in range(n):
        others = [a for a in range(3) if a != axis[i]]
        pts[i, axis[i]] = sign[i] * half[axis[i]]
        pts[i, others[0]] = uv[i, 0] * half[others[0]]
        pts[i, others[1]] = uv[i, 1] * half[others[1]]
    return pts


def _sample_cylinder(n: int, rng: np.random.Generator) -> np.ndarray:
    # Tall column of radius 1 with caps; height drawn per cloud. The high
    # aspect ratio keeps the family far from the box and frustum families.
    # Areas: lateral 2*pi*h, caps 2*pi.
    h = rng.uniform(3.0, 4.2)
    p_lateral = h / (h + 1.0)
    pts = np.empty((n, 3))
    for i in range(n):
        theta = rng.uniform(0.0, 2.0 * math.pi)
        if rng.uniform() < p_lateral:
            pts[i] = (math.cos(theta), math.sin(theta), rng.uniform(-h / 2, h / 2))
        else:
            r = math.sqrt(rng.uniform())
            z = h / 2 if rng.uniform() < 0.5 else -h / 2
            pts[i] = (r * math.cos(theta), r * math.sin(theta), z)
    return pts


def _sample_cone(n: int, rng: np.random.Generator) -> np.ndarray:
    # Conical frustum family: base radius 1 at z=0 tapering linearly toward an
    # apex at z=h, cut at top radius r_top drawn per cloud (r_top=0 is the full
    # cone). The taper is the class cue and it is carried by every lateral
    # point, so no small subset of points owns the class identity.
    h = rng.uniform(1.6, 2.4)
    r_top = rng.uniform(0.0, 0.45)
    slant = (1.0 - r_top) * math.sqrt(1.0 + h * h)
    areas = np.array([math.pi * (1.0 + r_top) * slant, math.pi, math.pi * r_top**2])
    probs = areas / areas.sum()
    pts = np.empty((n, 3))
    for i in range(n):
        theta = rng.uniform(0.0, 2.0 * math.pi)
        f = rng.choice(3, p=probs)
        if f == 0:
            # Lateral surface: radius density proportional to r on the cone.
            u = rng.uniform()
            r = math.sqrt(r_top**2 + u * (1.0 - r_top**2))
            z = h * (1.0 - r)
        elif f == 1:
            r, z = math.sqrt(rng.uniform()), 0.0
        else:
            r, z = r_top * math.sqrt(rng.uniform()), h * (1.0 - r_top)
        pts[i] = (r * math.cos(theta), r * math.sin(theta), z)
    return pts


def _sample_torus(n: int, rng: np.random.Generator) -> np.ndarray:
    # Major radius 1, tube radius drawn per cloud. The poloidal angle is
    # rejection-sampled with density (1 + r*cos v)/(1 + r), the exact area element.
    r = rng.uniform(0.25, 0.45)
    pts = np.empty((n, 3))
    for i in range(n):
        while True:
            v = rng.uniform(0.0, 2.0 * math.pi)
            if rng.uniform() <= (1.0 + r * math.cos(v)) / (1.0 + r):
                break
        u = rng.uniform(0.0, 2.0 * math.pi)
        ring = 1.0 + r * math.cos(v)
        pts[i] = (ring * math.cos(u), ring * math.sin(u), r * math.sin(v))
    return pts


def _sample_triangle(a, b, c, rng: np.random.Generator) -> np.ndarray:
    u, v = rng.uniform(), rng.uniform()
    su = math.sqrt(u)
    return (1 - su) * a + su * (1 - v) * b + su * v * c


def _sample_pyramid(n: int, rng: np.random.Generator) -> np.ndarray:
    # Square frustum family: base half-side 1 at z=0 tapering toward an apex
    # at z=h, cut at top half-side s_top drawn per cloud (s_top=0 is the full
    # pyramid). Four planar trapezoid sides plus the base and top squares; the
    # square cross-section distinguishes it from the conical frustum at every
    # height, not just at the corners.
    h = rng.uniform(1.4, 2.2)
    s_top = rng.uniform(0.0, 0.45)
    z_top = h * (1.0 - s_top)
    base = [np.array([x, y, 0.0]) for x, y in ((1, 1), (-1, 1), (-1, -1), (1, -1))]
    top = [np.array([x * s_top, y * s_top, z_top]) for x, y in ((1, 1), (-1, 1), (-1, -1), (1, -1))]
    # One lateral trapezoid split into two triangles; all four sides congruent.
    t1 = np.linalg.norm(np.cross(base[1] - base[0], top[0] - base[0])) / 2
    t2 = np.linalg.norm(np.cross(top[0] - top[1], base[1] - top[1])) / 2
    areas = np.array([4.0, (2.0 * s_top) ** 2] + [t1, t2] * 4)
    probs = areas / areas.sum()
    pts = np.empty((n, 3))
    for i in range(n):
        f = rng.choice(10, p=probs)
        if f == 0:
            pts[i] = (rng.uniform(-1, 1), rng.uniform(-1, 1), 0.0)
        elif f == 1:
            pts[i] = (rng.uniform(-s_top, s_top), rng.uniform(-s_top, s_top), z_top)
        else:
            side, half = divmod(f - 2, 2)
            a, b = base[side], base[(side + 1) % 4]
            c, d = top[side], top[(side + 1) % 4]
            if half == 0:
                pts[i] = _sample_triangle(a, b, c, rng)
            else:
                pts[i] = _sample_triangle(c, d, b, rng)
    return pts


def _sample_disk(n: int, rng: np.random.Generator) -> np.ndarray:
    # Flat annular disk in the z=0 plane; inner radius drawn per cloud.
    r_in = rng.uniform(0.15, 0.5)
    u = rng.uniform(size=n)
    r = np.sqrt(r_in**2 + u * (1.0 - r_in**2))
    theta = rng.uniform(0.0, 2.0 * math.pi, n)
    return np.column_stack([r * np.cos(theta), r * np.sin(theta), np.zeros(n)])


def _sample_helix(n: int, rng: np.random.Generator) -> np.ndarray:
    # Coil spring: a circular tube swept along a helical centerline of coil
    # radius 1. Tube radius and turn count are drawn per cloud; the pitch
    # always exceeds the tube diameter so successive turns stay separated.
    # Sampling a tube point off the centerline keeps the family off the shell
    # of any other class. The poloidal angle is rejection-sampled with the
    # exact tube area element (1 - rho*kappa*cos(phi)).
    turns = rng.uniform(2.0, 3.0)
    rho = rng.uniform(0.12, 0.2)
    height = 1.6
    c = height / (2.0 * math.pi * turns)  # rise per radian
    kappa = 1.0 / (1.0 + c * c)  # centerline curvature of the unit-radius helix
    run = math.sqrt(1.0 + c * c)
    pts = np.empty((n, 3))
    for i in range(n):
        t = rng.uniform()
        while True:
            phi = rng.uniform(0.0, 2.0 * math.pi)
            if rng.uniform() <= (1.0 - rho * kappa * math.cos(phi)) / (1.0 + rho * kappa):
                break
        ang = 2.0 * math.pi * turns * t
        center = np.array([math.cos(ang), math.sin(ang), height * (t - 0.5)])
        normal = np.array([-math.cos(ang), -math.sin(ang), 0.0])
        tangent = np.array([-math.sin(ang), math.cos(ang), c]) / run
        binormal = np.cross(tangent, normal)
        pts[i] = center + rho * (math.cos(phi) * normal + math.sin(phi) * binormal)
    return pts


_SAMPLERS = {
    "sphere": _sample_sphere,
    "cube": _sample_cube,
    "cylinder": _sample_cylinder,
    "cone": _sample_cone,
    "torus": _sample_torus,
    "pyramid": _sample_pyramid,
    "disk": _sample_disk,
    "helix": _sample_helix,
}


def sample_surface(kind: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """Raw surface sample of one shape kind: no jitter, no rotation, no normalization.

    Exposed separately so the exact-surface guarantees (cube points on faces,
    sphere points at equal radii) are directly checkable.
    """
    if kind not in _SAMPLERS:
        raise ValueError(f"unknown shape kind {kind!r}, expected one of {SHAPE_KINDS}")
    if n < 1:
        raise ValueError(f"need at least 1 point, got {n}")
    return _SAMPLERS[kind](n, rng)


def generate_shape(spec: ShapeSpec) -> PointCloud:
    """Sample the surface, jitter, rotate, then normalize into the unit sphere.

    Fully deterministic in spec.seed. The label is the kind's index in
    SHAPE_KINDS.
    """
    rng = np.random.default_rng(spec.seed)
    pts = sample_surface(spec.kind, spec.n_points, rng)
    if spec.jitter_sigma > 0:
        pts = pts + rng.normal(0.0, spec.jitter_sigma, size=pts.shape)
    if any(spec.rotation):
        pts = pts @ rotation_matrix(*spec.rotation).T
    return normalize_unit_sphere(PointCloud(pts, SHAPE_KINDS.index(spec.kind)))


def _sample_seed(root_seed: int, class_idx: int, sample_idx: int, stream: int) -> int:
    ss = np.random.SeedSequence(entropy=root_seed, spawn_key=(class_idx, sample_idx, stream))
    return int(ss.generate_state(1, np.uint64)[0])


def build_dataset(
    n_per_class: int,
    seed: int = 0,
    *,
    split: tuple[float, float] = (0.8, 0.2),
    n_points: int = 256,
    jitter_sigma: float = 0.01,
    rotation_scale: float = 0.75,
) -> tuple[list[PointCloud], list[PointCloud]]:
    """Balanced 8-class (train, test) clouds with per-sample randomized specs.

    Every sample owns disjoint SeedSequence streams keyed by (class, index), so
    the splits can never share a cloud and regenerating with the same seed is
    byte-stable regardless of how many samples are requested elsewhere.
    """
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    if len(split) != 2 or min(split) < 0 or abs(sum(split) - 1.0) > 1e-9:
        raise ValueError(f"split must be two non-negative fractions summing to 1, got {split}")
    n_train = round(n_per_class * split[0])
    train: list[PointCloud] = []
    test: list[PointCloud] = []
    for ci, kind in enumerate(SHAPE_KINDS):
        for i in range(n_per_class):
            rot_rng = np.random.default_rng(_sample_seed(seed, ci, i, 1))
            spec = ShapeSpec(
                kind=kind,
                n_points=n_points,
                jitter_sigma=jitter_sigma,
                rotation=tuple(rot_rng.uniform(-rotation_scale, rotation_scale, 3)),
                seed=_sample_seed(seed, ci, i, 0),
            )
            (train if i < n_train else test).append(generate_shape(spec))
    return train, test


# ---------------------------------------------------------------------------
# .xyz text format
#
# Line 1:  n <count> label <int or ->
# Then <count> lines of "x y z" printed with %.17g, which round-trips float64
# exactly.


def save_xyz(path, pc: PointCloud) -> None:
    """Write one cloud to the text .xyz format."""
    label = "-" if pc.label is None else str(pc.label)
    lines = [f"n {pc.n} label {label}"]
    for x, y, z in pc.points:
        lines.append(f"{x:.17g} {y:.17g} {z:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_xyz(path) -> PointCloud:
    """Read one cloud from the text .xyz format, validating the header and count."""
    text = Path(path).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty .xyz file")
    head = lines[0].split()
    if len(head) != 4 or head[0] != "n" or head[2] != "label":
        raise ValueError(f"{path}: malformed header {lines[0]!r}, expected 'n <count> label <int|->'")
    try:
        count = int(head[1])
    except ValueError:
        raise ValueError(f"{path}: point count {head[1]!r} is not an integer") from None
    label = None if head[3] == "-" else int(head[3])
    if len(lines) - 1 != count:
        raise ValueError(f"{path}: header promises {count} points, file has {len(lines) - 1}")
    try:
        pts = np.array([[float(v) for v in ln.split()] for ln in lines[1:]], dtype=np.float64)
    except ValueError:
        raise ValueError(f"{path}: malformed coordinate line") from None
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"{path}: expected 3 coordinates per line")
    return PointCloud(pts, label)


def save_dataset(directory, train: list[PointCloud], test: list[PointCloud]) -> None:
    """Write train/ and test/ subdirectories of numbered .xyz files."""
    root = Path(directory)
    for name, clouds in (("train", train), ("test", test)):
        sub = root / name
        sub.mkdir(parents=True, exist_ok=True)
        for i, pc in enumerate(clouds):
            save_xyz(sub / f"{i:05d}.xyz", pc)


def load_dataset(directory) -> tuple[list[PointCloud], list[PointCloud]]:
    """Read back a save_dataset directory; files load in name order."""
    root = Path(directory)
    out = []
    for name in ("train", "test"):
        sub = root / name
        if not sub.is_dir():
            raise FileNotFoundError(f"{sub} is missing; expected train/ and test/ subdirectories")
        out.append([load_xyz(p) for p in sorted(sub.glob("*.xyz"))])
    return out[0], out[1]
