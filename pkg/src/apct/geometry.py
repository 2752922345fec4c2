"""Point clouds, sampling/grouping, the procedural shape dataset, and cloud I/O."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ClassError, CountError, DegenerateCloudError, FormatError
from .rng import key_seed, keyed_rng

MIN_POINTS = 8
CLASS_NAMES = ("sphere", "cube", "cylinder", "cone", "torus", "table", "pyramid", "helix")
TORUS_MAJOR = 1.0
TORUS_MINOR = 0.35
MAGIC = b"PCB1"
_HEADER = struct.Struct("<4sII")


@dataclass
class PointCloud:
    points: np.ndarray
    label: int = 0
    id: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise DegenerateCloudError(f"points must be N x 3, got {pts.shape}")
        if pts.shape[0] < MIN_POINTS:
            raise CountError(f"a point cloud needs at least {MIN_POINTS} points, got {pts.shape[0]}")
        if not np.all(np.isfinite(pts)):
            raise DegenerateCloudError(f"cloud {self.id!r} has non-finite coordinates")
        self.points = pts.astype(np.float32, copy=False)
        self.label = int(self.label)

    def __len__(self) -> int:
        return self.points.shape[0]

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return PointCloud(points, self.label, self.id)


@dataclass
class PatchSet:
    centers: np.ndarray
    center_indices: np.ndarray
    member_indices: np.ndarray


def normalize_points(points: np.ndarray) -> np.ndarray:
    """Center on the centroid and scale the farthest point to unit norm."""
    pts = np.asarray(points, dtype=np.float64)
    centered = pts - pts.mean(axis=0)
    radius = np.sqrt((centered**2).sum(axis=1)).max()
    # relative threshold: the centroid of identical points is not exact in floating point
    if not radius > 1e-12 * max(1.0, float(np.abs(pts).max())):
        raise DegenerateCloudError("all points coincide; cannot normalize")
    return centered / radius


def normalize_unit_sphere(pc: PointCloud) -> PointCloud:
    return pc.with_points(normalize_points(pc.points))


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return (diff * diff).sum(axis=-1)


def fps(points: np.ndarray, n: int, start_index: int = 0) -> np.ndarray:
    """Greedy farthest-point sampling; ties go to the smallest index."""
    pts = np.asarray(points, dtype=np.float64)
    N = pts.shape[0]
    if n > N:
        raise CountError(f"cannot sample {n} centers from {N} points")
    if not 0 <= start_index < N:
        raise CountError(f"start index {start_index} out of range for {N} points")
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = start_index
    mind = ((pts - pts[start_index]) ** 2).sum(axis=1)
    for i in range(1, n):
        nxt = int(np.argmax(mind))  # first maximum
        chosen[i] = nxt
        mind = np.minimum(mind, ((pts - pts[nxt]) ** 2).sum(axis=1))
    return chosen


def knn_indices(points: np.ndarray, centers: np.ndarray, g: int) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    ctr = np.asarray(centers, dtype=np.float64)
    if g > pts.shape[0]:
        raise CountError(f"group size {g} exceeds {pts.shape[0]} points")
    d = _sq_dists(ctr, pts)
    return np.argsort(d, axis=1, kind="stable")[:, :g]


def knn_group(points: np.ndarray, centers: np.ndarray, g: int, center_indices=None) -> PatchSet:
    idx = knn_indices(points, centers, g)
    if center_indices is None:
        center_indices = np.full(len(centers), -1, dtype=np.int64)
    return PatchSet(np.asarray(centers, dtype=np.float64), np.asarray(center_indices), idx)


def canonical_order(points: np.ndarray, seed: int) -> np.ndarray:
    """Permutation that depends on the point set only, not its input order.

    Points are sorted lexicographically, then shuffled with a stream keyed on
    ``seed`` and the point count.
    """
    pts = np.asarray(points)
    lex = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))
    perm = keyed_rng("fps-shuffle", seed, pts.shape[0]).permutation(pts.shape[0])
    return lex[perm]


def group_cloud(points: np.ndarray, n: int, g: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Split a cloud into ``n`` patches of ``g`` points.

    Returns patch centers (n, 3) and member coordinates relative to their
    center (n, g, 3).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[0] < g:
        raise CountError(f"cloud has {pts.shape[0]} points, fewer than group size {g}")
    pts = pts[canonical_order(pts, seed)]
    centers = pts[fps(pts, n, 0)]
    members = knn_indices(pts, centers, g)
    rel = pts[members] - centers[:, None, :]
    return centers, rel


# procedural shapes -----------------------------------------------------------


def _unit_vectors(rng, n):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sphere(rng, n):
    return _unit_vectors(rng, n)


def _cube(rng, n):
    face = rng.integers(0, 6, n)
    uv = rng.uniform(-1.0, 1.0, (n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for a in range(3):
        sel = axis == a
        others = [b for b in range(3) if b != a]
        pts[sel, a] = sign[sel]
        pts[sel, others[0]] = uv[sel, 0]
        pts[sel, others[1]] = uv[sel, 1]
    return pts


def _disk(rng, n, radius):
    r = radius * np.sqrt(rng.uniform(0.0, 1.0, n))
    t = rng.uniform(0.0, 2 * math.pi, n)
    return r * np.cos(t), r * np.sin(t)


def _cylinder(rng, n, radius=0.5, height=2.0):
    side, cap = 2 * math.pi * radius * height, math.pi * radius**2
    part = rng.choice(3, n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    pts = np.empty((n, 3))
    t = rng.uniform(0.0, 2 * math.pi, n)
    z = rng.uniform(-height / 2, height / 2, n)
    pts[:, 0], pts[:, 1], pts[:, 2] = radius * np.cos(t), radius * np.sin(t), z
    for k, zc in ((1, height / 2), (2, -height / 2)):
        sel = part == k
        x, y = _disk(rng, int(sel.sum()), radius)
        pts[sel] = np.stack([x, y, np.full(sel.sum(), zc)], axis=1)
    return pts


def _cone(rng, n, radius=1.0, height=2.0):
    slant = math.hypot(radius, height)
    side, base = math.pi * radius * slant, math.pi * radius**2
    on_side = rng.uniform(0.0, 1.0, n) < side / (side + base)
    pts = np.empty((n, 3))
    # lateral area grows linearly with distance from the apex
    s = np.sqrt(rng.uniform(0.0, 1.0, n))
    t = rng.uniform(0.0, 2 * math.pi, n)
    pts[:, 0], pts[:, 1] = radius * s * np.cos(t), radius * s * np.sin(t)
    pts[:, 2] = height / 2 - height * s
    x, y = _disk(rng, n, radius)
    pts[~on_side] = np.stack([x, y, np.full(n, -height / 2)], axis=1)[~on_side]
    return pts


def _torus(rng, n, major=TORUS_MAJOR, minor=TORUS_MINOR):
    # rejection on the tube angle for area-uniform samples
    out = np.empty((0, 2))
    while len(out) < n:
        u = rng.uniform(0.0, 2 * math.pi, 2 * n)
        v = rng.uniform(0.0, 2 * math.pi, 2 * n)
        w = rng.uniform(0.0, 1.0, 2 * n)
        keep = w < (major + minor * np.cos(v)) / (major + minor)
        out = np.concatenate([out, np.stack([u[keep], v[keep]], axis=1)])
    u, v = out[:n, 0], out[:n, 1]
    ring = major + minor * np.cos(v)
    return np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], axis=1)


def _box_surface(rng, n, lo, hi):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    size = hi - lo
    areas = np.array([size[1] * size[2], size[0] * size[2], size[0] * size[1]]).repeat(2)
    face = rng.choice(6, n, p=areas / areas.sum())
    pts = lo + rng.uniform(0.0, 1.0, (n, 3)) * size
    axis, top = face // 2, face % 2 == 1
    rows = np.arange(n)
    pts[rows, axis] = np.where(top, hi[axis], lo[axis])
    return pts


def _table(rng, n):
    top_n = n // 2
    legs = [(-0.8, -0.5), (0.8, -0.5), (-0.8, 0.5), (0.8, 0.5)]
    counts = np.bincount(rng.integers(0, 4, n - top_n), minlength=4)
    parts = [_box_surface(rng, top_n, (-1.0, -0.7, 0.35), (1.0, 0.7, 0.45))]
    for (x, y), c in zip(legs, counts):
        parts.append(_box_surface(rng, int(c), (x - 0.06, y - 0.06, -0.8), (x + 0.06, y + 0.06, 0.35)))
    return np.concatenate(parts)


def _pyramid(rng, n, half=1.0, height=1.6):
    apex = np.array([0.0, 0.0, height / 2])
    base = np.array([[-half, -half], [half, -half], [half, half], [-half, half]])
    base = np.concatenate([base, np.full((4, 1), -height / 2)], axis=1)
    tri_area = 0.5 * 2 * half * math.hypot(half, height)
    areas = np.array([(2 * half) ** 2] + [tri_area] * 4)
    part = rng.choice(5, n, p=areas / areas.sum())
    pts = np.empty((n, 3))
    sel = part == 0
    pts[sel] = np.stack(
        [rng.uniform(-half, half, sel.sum()), rng.uniform(-half, half, sel.sum()), np.full(sel.sum(), -height / 2)],
        axis=1,
    )
    for f in range(4):
        sel = part == f + 1
        m = int(sel.sum())
        a, b = rng.uniform(0.0, 1.0, m), rng.uniform(0.0, 1.0, m)
        flip = a + b > 1
        a[flip], b[flip] = 1 - a[flip], 1 - b[flip]
        p0, p1 = base[f], base[(f + 1) % 4]
        pts[sel] = apex + a[:, None] * (p0 - apex) + b[:, None] * (p1 - apex)
    return pts


def _helix(rng, n, radius=0.8, pitch=0.35, turns=3.0, tube=0.08):
    t = rng.uniform(0.0, 2 * math.pi * turns, n)
    curve = np.stack([radius * np.cos(t), radius * np.sin(t), pitch * (t - math.pi * turns) / math.pi], axis=1)
    return curve + tube * _unit_vectors(rng, n)


_BUILDERS = (_sphere, _cube, _cylinder, _cone, _torus, _table, _pyramid, _helix)


def shape_points(class_id: int, rng: np.random.Generator, n_points: int) -> np.ndarray:
    """Raw surface samples for a class in its canonical pose (z up)."""
    if not 0 <= class_id < len(_BUILDERS):
        raise ClassError(f"class id {class_id} outside 0..{len(_BUILDERS) - 1}")
    return _BUILDERS[class_id](rng, n_points)


def gen_shape(class_id: int, seed: int, n_points: int, sample_id: str | None = None) -> PointCloud:
    """One synthetic sample: canonical shape, random yaw, per-axis scale jitter, normalization."""
    if not 0 <= class_id < len(_BUILDERS):
        raise ClassError(f"class id {class_id} outside 0..{len(_BUILDERS) - 1}")
    if n_points < MIN_POINTS:
        raise CountError(f"need at least {MIN_POINTS} points, got {n_points}")
    rng = keyed_rng("shape", class_id, seed, n_points)
    pts = shape_points(class_id, rng, n_points)
    yaw = rng.uniform(0.0, 2 * math.pi)
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    pts = (pts @ rot.T) * rng.uniform(0.9, 1.1, 3)
    sid = sample_id if sample_id is not None else f"{CLASS_NAMES[class_id]}_{seed}"
    return PointCloud(normalize_points(pts), class_id, sid)


# I/O -------------------------------------------------------------------------


def encode_cloud(pc: PointCloud) -> bytes:
    pts = np.ascontiguousarray(pc.points, dtype="<f4")
    return _HEADER.pack(MAGIC, pts.shape[0], pc.label) + pts.tobytes()


def decode_cloud(blob: bytes, sample_id: str = "") -> PointCloud:
    if len(blob) < _HEADER.size:
        raise FormatError("truncated cloud header")
    magic, n, label = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    payload = len(blob) - _HEADER.size
    if payload != n * 12:
        raise FormatError(f"header says {n} points ({n * 12} bytes) but payload has {payload} bytes")
    pts = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(n, 3)
    if not np.all(np.isfinite(pts)):
        raise FormatError("non-finite coordinates in cloud file")
    return PointCloud(pts.astype(np.float32), label, sample_id)


def save_cloud(path, pc: PointCloud) -> None:
    Path(path).write_bytes(encode_cloud(pc))


def load_cloud(path, sample_id: str | None = None) -> PointCloud:
    path = Path(path)
    return decode_cloud(path.read_bytes(), path.stem if sample_id is None else sample_id)


def save_cloud_text(path, pc: PointCloud) -> None:
    np.savetxt(path, pc.points, fmt="%.9g")


def load_cloud_text(path, label: int = 0, sample_id: str | None = None) -> PointCloud:
    path = Path(path)
    try:
        pts = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if pts.shape[1:] != (3,):
        raise FormatError(f"{path}: expected 'x y z' per line")
    return PointCloud(pts, label, path.stem if sample_id is None else sample_id)


# dataset ---------------------------------------------------------------------

DATASET_FORMAT = "apct-dataset/1"


@dataclass
class SampleEntry:
    id: str
    label: int
    path: str


@dataclass
class DatasetManifest:
    classes: list[str]
    seed: int
    points: int
    splits: dict[str, list[SampleEntry]] = field(default_factory=dict)
    root: Path | None = None

    def validate(self) -> None:
        seen = set()
        for split, entries in self.splits.items():
            for e in entries:
                if e.id in seen:
                    raise FormatError(f"duplicate sample id {e.id!r}")
                seen.add(e.id)
                if not 0 <= e.label < len(self.classes):
                    raise FormatError(f"sample {e.id!r} has label {e.label} outside class range")

    def to_dict(self) -> dict:
        return {
            "format": DATASET_FORMAT,
            "classes": list(self.classes),
            "seed": self.seed,
            "points": self.points,
            "splits": {s: [vars(e) for e in es] for s, es in self.splits.items()},
        }

    @classmethod
    def from_dict(cls, doc: dict, root: Path | None = None) -> "DatasetManifest":
        if doc.get("format") != DATASET_FORMAT:
            raise FormatError(f"not a dataset manifest (format={doc.get('format')!r})")
        m = cls(
            classes=list(doc["classes"]),
            seed=int(doc["seed"]),
            points=int(doc["points"]),
            splits={s: [SampleEntry(**e) for e in es] for s, es in doc["splits"].items()},
            root=root,
        )
        m.validate()
        return m

    def load_split(self, split: str) -> list[PointCloud]:
        root = self.root or Path(".")
        return [load_cloud(root / e.path, e.id) for e in self.splits[split]]


def save_manifest(path, manifest: DatasetManifest) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=1) + "\n")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return DatasetManifest.from_dict(doc, root=path.parent)


def generate_dataset(
    out, seed: int = 0, train_per_class: int = 100, test_per_class: int = 20, points: int = 256
) -> DatasetManifest:
    """Write the synthetic dataset under ``out`` and return its manifest."""
    if points < MIN_POINTS:
        raise CountError(f"--points must be at least {MIN_POINTS}, got {points}")
    out = Path(out)
    manifest = DatasetManifest(list(CLASS_NAMES), seed, points, {}, out)
    for split, per_class in (("train", train_per_class), ("test", test_per_class)):
        (out / split).mkdir(parents=True, exist_ok=True)
        entries = []
        for label, name in enumerate(CLASS_NAMES):
            for i in range(per_class):
                sid = f"{split}_{name}_{i:04d}"
                sample_seed = hash_seed(seed, split, i)
                pc = gen_shape(label, sample_seed, points, sid)
                rel = f"{split}/{sid}.pcb"
                save_cloud(out / rel, pc)
                entries.append(SampleEntry(sid, label, rel))
        manifest.splits[split] = entries
    save_manifest(out / "manifest.json", manifest)
    return manifest


def hash_seed(*key) -> int:
    return key_seed(*key) & 0x7FFFFFFF
