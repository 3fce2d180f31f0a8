"""Binary polygon phantoms: parallelograms, triangles and pentagons."""
from dataclasses import dataclass
import os
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from matplotlib.path import Path

from .config import FULL_GRID
from .errors import ShapeClipped, SpecOutOfRange
from .logging_utils import get_logger, Timer
from .storage import load_array, read_jsonl, save_array, write_jsonl

logger = get_logger("phantom_gen")


class ShapeKind(str, Enum):
    PARALLELOGRAM = "parallelogram"
    TRIANGLE = "triangle"
    PENTAGON = "pentagon"


# circumscribed-circle radius ranges and the fixed center at the 240-pixel grid
RADIUS_RANGES: Dict[ShapeKind, Tuple[float, float]] = {
    ShapeKind.PARALLELOGRAM: (42.0, 51.0),
    ShapeKind.TRIANGLE: (56.0, 89.0),
    ShapeKind.PENTAGON: (56.0, 89.0),
}
REFERENCE_CENTER = (110.0, 130.0)
RHOMBUS_ANGLE_DEG = 60.0


@dataclass(frozen=True)
class ShapeSpec:
    kind: ShapeKind
    radius: float
    rotation: float
    center: Tuple[float, float]


@dataclass
class Phantom:
    image: np.ndarray
    spec: ShapeSpec
    id: str
    seed: Optional[int] = None

    @property
    def grid(self) -> int:
        return self.image.shape[0]


def scale_for(grid: int) -> float:
    return grid / FULL_GRID


def radius_range(kind: ShapeKind, grid: int) -> Tuple[float, float]:
    lo, hi = RADIUS_RANGES[ShapeKind(kind)]
    s = scale_for(grid)
    return lo * s, hi * s


def default_center(grid: int) -> Tuple[float, float]:
    s = scale_for(grid)
    return REFERENCE_CENTER[0] * s, REFERENCE_CENTER[1] * s


def polygon_vertices(spec: ShapeSpec) -> np.ndarray:
    """Vertices (x, y) in pixel coordinates, counter-clockwise before rotation."""
    kind = ShapeKind(spec.kind)
    r = spec.radius
    if kind is ShapeKind.PARALLELOGRAM:
        # rhombus: long half-diagonal r, short half-diagonal r*tan(30deg)
        half_short = r * np.tan(np.deg2rad(RHOMBUS_ANGLE_DEG / 2.0))
        base = np.array([[r, 0.0], [0.0, half_short], [-r, 0.0], [0.0, -half_short]])
    else:
        n = 3 if kind is ShapeKind.TRIANGLE else 5
        t = np.pi / 2 + 2 * np.pi * np.arange(n) / n
        base = np.stack([r * np.cos(t), r * np.sin(t)], axis=1)
    a = np.deg2rad(spec.rotation)
    rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    return base @ rot.T + np.asarray(spec.center, dtype=float)


def check_spec(spec: ShapeSpec, grid: int, tol: float = 1e-9) -> None:
    lo, hi = radius_range(spec.kind, grid)
    if not (lo - tol <= spec.radius <= hi + tol):
        raise SpecOutOfRange(f"{ShapeKind(spec.kind).value} radius {spec.radius} outside [{lo:.3f}, {hi:.3f}] for grid {grid}")
    if not (0.0 <= spec.rotation < 360.0):
        raise SpecOutOfRange(f"rotation {spec.rotation} outside [0, 360)")
    cx, cy = spec.center
    if not (0.0 <= cx <= grid - 1 and 0.0 <= cy <= grid - 1):
        raise SpecOutOfRange(f"center {spec.center} outside the {grid}x{grid} grid")
    verts = polygon_vertices(spec)
    if verts.min() < 0.0 or verts.max() > grid - 1:
        raise ShapeClipped(f"{ShapeKind(spec.kind).value} with radius {spec.radius} exits the {grid}x{grid} grid")


def _pixel_centers(grid: int) -> np.ndarray:
    rows, cols = np.mgrid[0:grid, 0:grid]
    return np.stack([cols.ravel().astype(float), rows.ravel().astype(float)], axis=1)


def generate_phantom(spec: ShapeSpec, grid: int, phantom_id: Optional[str] = None, seed: Optional[int] = None) -> Phantom:
    """Rasterize the polygon by a pixel-center inside test; image[row, col] with x=col, y=row."""
    check_spec(spec, grid)
    verts = polygon_vertices(spec)
    inside = Path(verts).contains_points(_pixel_centers(grid))
    image = inside.reshape(grid, grid).astype(np.float32)
    if phantom_id is None:
        phantom_id = f"{ShapeKind(spec.kind).value}-r{spec.radius:g}-a{spec.rotation:g}"
    return Phantom(image=image, spec=spec, id=phantom_id, seed=seed)


def brute_force_mask(spec: ShapeSpec, grid: int) -> np.ndarray:
    """Independent half-plane test over every pixel center (convex polygons only)."""
    verts = polygon_vertices(spec)
    pts = _pixel_centers(grid)
    inside = np.ones(len(pts), dtype=bool)
    n = len(verts)
    for i in range(n):
        a = verts[i]
        b = verts[(i + 1) % n]
        cross = (b[0] - a[0]) * (pts[:, 1] - a[1]) - (b[1] - a[1]) * (pts[:, 0] - a[0])
        inside &= cross > 0
    return inside.reshape(grid, grid)


def rotation_pool(kind: str = "train") -> List[float]:
    """Integer degrees for training; half-degree offsets for unseen validation rotations."""
    if kind == "train":
        return [float(a) for a in range(360)]
    if kind == "validation":
        return [a + 0.5 for a in range(360)]
    raise ValueError("rotation pool kind must be 'train' or 'validation'")


def sample_dataset(
    seed: int,
    n_per_shape: int,
    grid: int,
    rotation_pool: Sequence[float],
    kinds: Iterable[ShapeKind] = tuple(ShapeKind),
) -> List[Phantom]:
    """n_per_shape phantoms per kind, radius uniform over the scaled range, rotation uniform over the pool."""
    if len(rotation_pool) == 0:
        raise ValueError("rotation_pool must be non-empty")
    timer = Timer()
    rng = np.random.default_rng(seed)
    pool = np.asarray(sorted(rotation_pool), dtype=float)
    center = default_center(grid)
    phantoms: List[Phantom] = []
    for kind in kinds:
        kind = ShapeKind(kind)
        lo, hi = radius_range(kind, grid)
        for i in range(n_per_shape):
            radius = float(rng.uniform(lo, hi))
            rotation = float(pool[rng.integers(len(pool))])
            spec = ShapeSpec(kind=kind, radius=radius, rotation=rotation, center=center)
            phantoms.append(generate_phantom(spec, grid, phantom_id=f"{seed}-{kind.value}-{i:05d}", seed=seed))
    logger.info(
        "Dataset sampled",
        extra={"event": "dataset_sample", "data": {"phantoms": len(phantoms), "grid": grid, "ms": timer.elapsed_ms()}},
    )
    return phantoms


def manifest_record(p: Phantom) -> Dict[str, object]:
    return {
        "id": p.id,
        "kind": ShapeKind(p.spec.kind).value,
        "radius": p.spec.radius,
        "rotation": p.spec.rotation,
        "center": list(p.spec.center),
        "seed": p.seed,
        "grid": p.grid,
    }


def spec_from_record(rec: Dict[str, object]) -> ShapeSpec:
    return ShapeSpec(
        kind=ShapeKind(rec["kind"]),
        radius=float(rec["radius"]),
        rotation=float(rec["rotation"]),
        center=tuple(float(c) for c in rec["center"]),
    )


def save_dataset(phantoms: Sequence[Phantom], out_dir: str) -> str:
    """manifest.jsonl plus one image container per phantom under images/."""
    records = []
    for p in phantoms:
        save_array(os.path.join(out_dir, "images", p.id), p.image, phantom_id=p.id, grid=p.grid)
        records.append(manifest_record(p))
    path = write_jsonl(os.path.join(out_dir, "manifest.jsonl"), records)
    logger.info("Dataset saved", extra={"event": "dataset_save", "data": {"dir": out_dir, "phantoms": len(records)}})
    return path


def load_dataset(out_dir: str) -> List[Phantom]:
    phantoms = []
    for rec in read_jsonl(os.path.join(out_dir, "manifest.jsonl")):
        image, _ = load_array(os.path.join(out_dir, "images", rec["id"]))
        phantoms.append(Phantom(image=image, spec=spec_from_record(rec), id=rec["id"], seed=rec.get("seed")))
    return phantoms
