"""Seven atomic point-cloud corruptions at five severities, and suite construction."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, SpecError
from .geometry import DatasetManifest, PointCloud, load_cloud, normalize_points, save_cloud
from .rng import key_seed, seeded_rng

KINDS = ("scale", "rotate", "jitter", "drop_global", "drop_local", "add_global", "add_local")
SEVERITIES = (1, 2, 3, 4, 5)

SEVERITY_TABLE = {
    "scale": [1.2, 1.4, 1.6, 1.8, 2.0],
    "rotate": [6.0, 12.0, 18.0, 24.0, 30.0],  # degrees
    "jitter": [0.01, 0.02, 0.03, 0.04, 0.05],
    "drop_global": [0.25, 0.375, 0.5, 0.625, 0.75],
    "drop_local": [0.1, 0.15, 0.2, 0.25, 0.3],
    "add_global": [0.1, 0.2, 0.3, 0.4, 0.5],
    "add_local": [0.1, 0.15, 0.2, 0.25, 0.3],
}
JITTER_CLIP = 0.05
LOCAL_SIGMA = 0.075
MAX_CLUSTERS = 8

SUITE_FORMAT = "apct-suite/1"


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown corruption kind {self.kind!r}; valid kinds: {', '.join(KINDS)}")
        if self.severity not in SEVERITIES:
            raise SpecError(f"severity must be one of 1..5, got {self.severity!r}")


def _param(kind: str, severity: int) -> float:
    if severity not in SEVERITIES:
        raise SpecError(f"severity must be one of 1..5, got {severity!r}")
    return SEVERITY_TABLE[kind][severity - 1]


def _count(n: int, ratio: float) -> int:
    return int(round(n * ratio))


def scale_factors(s: float, rng: np.random.Generator) -> np.ndarray:
    return np.exp(rng.uniform(-math.log(s), math.log(s), 3))


def scale_anisotropic(pc: PointCloud, severity: int, rng: np.random.Generator) -> PointCloud:
    factors = scale_factors(_param("scale", severity), rng)
    return pc.with_points(normalize_points(pc.points.astype(np.float64) * factors))


def rotation_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    x, y, z = axis / np.linalg.norm(axis)
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def random_rotation(theta_max_deg: float, rng: np.random.Generator) -> np.ndarray:
    axis = rng.standard_normal(3)
    while np.linalg.norm(axis) < 1e-12:
        axis = rng.standard_normal(3)
    angle = rng.uniform(0.0, math.radians(theta_max_deg))
    return rotation_matrix(axis, angle)


def rotate_small(pc: PointCloud, severity: int, rng: np.random.Generator) -> PointCloud:
    rot = random_rotation(_param("rotate", severity), rng)
    return pc.with_points(pc.points.astype(np.float64) @ rot.T)


def jitter_gaussian(pc: PointCloud, severity: int, rng: np.random.Generator) -> PointCloud:
    sigma = _param("jitter", severity)
    noise = np.clip(rng.normal(0.0, sigma, pc.points.shape), -JITTER_CLIP, JITTER_CLIP)
    return pc.with_points(pc.points.astype(np.float64) + noise)


def drop_global(pc: PointCloud, severity: int, rng: np.random.Generator) -> PointCloud:
    n = len(pc)
    keep = n - _count(n, _param("drop_global", severity))
    idx = np.sort(rng.choice(n, keep, replace=False))
    return pc.with_points(pc.points[idx])


def split_sizes(total: int, parts: int) -> list[int]:
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def drop_local(
    pc: PointCloud, severity: int, rng: np.random.Generator, clusters: int | None = None
) -> PointCloud:
    """Remove ``round(N*r)`` points as kNN neighborhoods of random anchors.

    Each cluster is taken from the points still present, so clusters never
    overlap and the removed total is exact.
    """
    pts = pc.points.astype(np.float64)
    n = len(pts)
    total = _count(n, _param("drop_local", severity))
    c = int(rng.integers(1, MAX_CLUSTERS + 1)) if clusters is None else clusters
    c = max(1, min(c, total)) if total else 1
    alive = np.ones(n, dtype=bool)
    for size in split_sizes(total, c):
        if size == 0:
            continue
        remaining = np.flatnonzero(alive)
        anchor = remaining[rng.integers(len(remaining))]
        d = ((pts[remaining] - pts[anchor]) ** 2).sum(axis=1)
        nearest = remaining[np.argsort(d, kind="stable")[:size]]
        alive[nearest] = False
    return pc.with_points(pts[alive])


def sample_unit_ball(count: int, rng: np.random.Generator) -> np.ndarray:
    out = np.empty((0, 3))
    while len(out) < count:
        cand = rng.uniform(-1.0, 1.0, (2 * count + 8, 3))
        out = np.concatenate([out, cand[(cand**2).sum(axis=1) <= 1.0]])
    return out[:count]


def add_global(pc: PointCloud, severity: int, rng: np.random.Generator) -> PointCloud:
    extra = sample_unit_ball(_count(len(pc), _param("add_global", severity)), rng)
    return pc.with_points(np.concatenate([pc.points.astype(np.float64), extra]))


def add_local_with_anchors(pc: PointCloud, severity: int, rng: np.random.Generator):
    """Like :func:`add_local` but also returns the anchor index of every added point."""
    pts = pc.points.astype(np.float64)
    total = _count(len(pts), _param("add_local", severity))
    c = int(rng.integers(1, MAX_CLUSTERS + 1))
    anchors = rng.choice(len(pts), size=c, replace=False if c <= len(pts) else True)
    owner = np.repeat(anchors, split_sizes(total, c))
    added = pts[owner] + rng.normal(0.0, LOCAL_SIGMA, (total, 3))
    return pc.with_points(np.concatenate([pts, added])), owner


def add_local(pc: PointCloud, severity: int, rng: np.random.Generator) -> PointCloud:
    return add_local_with_anchors(pc, severity, rng)[0]


_DISPATCH = {
    "scale": scale_anisotropic,
    "rotate": rotate_small,
    "jitter": jitter_gaussian,
    "drop_global": drop_global,
    "drop_local": drop_local,
    "add_global": add_global,
    "add_local": add_local,
}


def corrupt(pc: PointCloud, spec: CorruptionSpec) -> PointCloud:
    if not isinstance(spec, CorruptionSpec):
        raise SpecError(f"expected a CorruptionSpec, got {type(spec).__name__}")
    return _DISPATCH[spec.kind](pc, spec.severity, seeded_rng(spec.seed))


def sample_seed(base_seed: int, kind: str, severity: int, sample_id: str) -> int:
    return key_seed("corrupt", base_seed, kind, severity, sample_id)


def cell_name(kind: str, severity: int) -> str:
    return f"{kind}_{severity}"


def parse_cell(name: str) -> tuple[str, int]:
    kind, _, sev = name.rpartition("_")
    spec = CorruptionSpec(kind, int(sev))
    return spec.kind, spec.severity


@dataclass
class SuiteCell:
    kind: str
    severity: int
    dir: str
    samples: list[dict]


@dataclass
class SuiteManifest:
    source: str
    base_seed: int
    severity_table: dict
    cells: list[SuiteCell]
    root: Path | None = None

    def validate(self) -> None:
        got = sorted((c.kind, c.severity) for c in self.cells)
        want = sorted((k, s) for k in KINDS for s in SEVERITIES)
        if got != want:
            raise FormatError("suite manifest must list every (kind, severity) cell exactly once")

    def cell(self, kind: str, severity: int) -> SuiteCell:
        for c in self.cells:
            if c.kind == kind and c.severity == severity:
                return c
        raise KeyError(cell_name(kind, severity))

    def load_cell(self, kind: str, severity: int) -> list[PointCloud]:
        root = self.root or Path(".")
        return [load_cloud(root / s["path"], s["id"]) for s in self.cell(kind, severity).samples]

    def to_dict(self) -> dict:
        return {
            "format": SUITE_FORMAT,
            "source": self.source,
            "base_seed": self.base_seed,
            "severity_table": self.severity_table,
            "cells": [vars(c) for c in self.cells],
        }

    @classmethod
    def from_dict(cls, doc: dict, root: Path | None = None, complete: bool = True) -> "SuiteManifest":
        if doc.get("format") != SUITE_FORMAT:
            raise FormatError(f"not a suite manifest (format={doc.get('format')!r})")
        m = cls(doc["source"], int(doc["base_seed"]), doc["severity_table"], [SuiteCell(**c) for c in doc["cells"]], root)
        if complete:
            m.validate()
        return m


def load_suite(path, complete: bool = True) -> SuiteManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    return SuiteManifest.from_dict(json.loads(path.read_text()), root=path.parent, complete=complete)


def build_suite(
    dataset: DatasetManifest,
    base_seed: int,
    out,
    split: str = "test",
    cells: list[tuple[str, int]] | None = None,
) -> SuiteManifest:
    """Write corrupted copies of ``split`` for every (kind, severity) cell.

    ``cells`` restricts construction to a subset; the resulting manifest is
    then partial and only loadable with ``complete=False``.
    """
    out = Path(out)
    clouds = dataset.load_split(split)
    todo = cells if cells is not None else [(k, s) for k in KINDS for s in SEVERITIES]
    suite = SuiteManifest(
        source=str(dataset.root.resolve()) if dataset.root else "",
        base_seed=base_seed,
        severity_table={k: list(v) for k, v in SEVERITY_TABLE.items()},
        cells=[],
        root=out,
    )
    for kind, severity in todo:
        CorruptionSpec(kind, severity)
        name = cell_name(kind, severity)
        (out / name).mkdir(parents=True, exist_ok=True)
        samples = []
        for pc in clouds:
            seed = sample_seed(base_seed, kind, severity, pc.id)
            bad = corrupt(pc, CorruptionSpec(kind, severity, seed))
            rel = f"{name}/{pc.id}.pcb"
            save_cloud(out / rel, bad)
            samples.append({"id": pc.id, "label": pc.label, "path": rel, "seed": seed})
        suite.cells.append(SuiteCell(kind, severity, name, samples))
    if cells is None:
        suite.validate()
    (out / "manifest.json").write_text(json.dumps(suite.to_dict(), indent=1) + "\n")
    return suite
