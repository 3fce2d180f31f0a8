"""Parallel-beam projector, matched backprojector, Gaussian noise model and SIRT."""
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

from .config import GeometryConfig
from .errors import DuplicateAngle, EmptyAngleSet, EmptySinogram, ShapeMismatch
from .logging_utils import get_logger

logger = get_logger("ct_core")


@dataclass(frozen=True)
class Geometry:
    """Integer-degree parallel beam; detector bins centered on the grid."""
    grid: int
    n_angles_total: int = 180
    n_detector: Optional[int] = None
    detector_spacing: float = 1.0
    beam: str = "parallel"

    @property
    def n_bins(self) -> int:
        return self.n_detector if self.n_detector is not None else self.grid

    @classmethod
    def from_config(cls, cfg: GeometryConfig) -> "Geometry":
        return cls(
            grid=cfg.grid,
            n_angles_total=cfg.n_angles_total,
            n_detector=cfg.n_detector,
            detector_spacing=cfg.detector_spacing,
        )

    def all_angles(self) -> Tuple[int, ...]:
        return tuple(range(self.n_angles_total))


@dataclass
class Sinogram:
    angles: Tuple[int, ...]
    data: np.ndarray
    noise_level: float = 0.0

    def __post_init__(self):
        self.angles = tuple(int(a) for a in self.angles)
        if self.data.ndim != 2 or self.data.shape[0] != len(self.angles):
            raise ShapeMismatch(f"sinogram has {self.data.shape} data for {len(self.angles)} angles")
        if len(set(self.angles)) != len(self.angles):
            raise DuplicateAngle(f"duplicate angles in {self.angles}")

    def rows(self, angles: Sequence[int]) -> "Sinogram":
        index = {a: i for i, a in enumerate(self.angles)}
        picked = [index[int(a)] for a in angles]
        return Sinogram(tuple(angles), self.data[picked].copy(), self.noise_level)


@dataclass
class NoiseModel:
    """Additive i.i.d. Gaussian noise with sigma = eta * mean |clean 180-angle sinogram|."""
    eta: float
    sigma: float
    seed: int
    kind: str = "gaussian"

    @classmethod
    def from_clean(cls, clean_full: Sinogram, eta: float, seed: int) -> "NoiseModel":
        sigma = float(eta * np.mean(np.abs(clean_full.data)))
        return cls(eta=eta, sigma=sigma, seed=seed)


def _check_angles(angles: Sequence[int], geom: Geometry) -> Tuple[int, ...]:
    angles = tuple(int(a) for a in angles)
    if not angles:
        raise EmptyAngleSet("at least one projection angle is required")
    if len(set(angles)) != len(angles):
        raise DuplicateAngle(f"duplicate angles in {angles}")
    bad = [a for a in angles if not (0 <= a < geom.n_angles_total)]
    if bad:
        raise ValueError(f"angles {bad} outside [0, {geom.n_angles_total})")
    return angles


@lru_cache(maxsize=8)
def _full_operator(grid: int, n_bins: int, spacing: float, n_angles: int) -> sp.csr_matrix:
    """Stacked per-angle blocks; pixel-driven linear interpolation onto the detector."""
    rows, cols = np.mgrid[0:grid, 0:grid]
    c = (grid - 1) / 2.0
    xs = (cols.ravel() - c).astype(np.float64)
    ys = (c - rows.ravel()).astype(np.float64)
    pix = np.arange(grid * grid)
    det_c = (n_bins - 1) / 2.0
    r_idx: List[np.ndarray] = []
    c_idx: List[np.ndarray] = []
    vals: List[np.ndarray] = []
    for a in range(n_angles):
        t = np.deg2rad(a)
        u = (xs * np.cos(t) + ys * np.sin(t)) / spacing + det_c
        lo = np.floor(u).astype(np.int64)
        w_hi = u - lo
        for b, w in ((lo, 1.0 - w_hi), (lo + 1, w_hi)):
            keep = (b >= 0) & (b < n_bins) & (w > 0)
            r_idx.append(a * n_bins + b[keep])
            c_idx.append(pix[keep])
            vals.append(w[keep] / spacing)
    mat = sp.csr_matrix(
        (np.concatenate(vals).astype(np.float32), (np.concatenate(r_idx), np.concatenate(c_idx))),
        shape=(n_angles * n_bins, grid * grid),
    )
    mat.sum_duplicates()
    logger.info("System matrix built", extra={"event": "system_matrix", "data": {"grid": grid, "bins": n_bins, "nnz": int(mat.nnz)}})
    return mat


def system_matrix(angles: Sequence[int], geom: Geometry) -> sp.csr_matrix:
    """Rows for the requested angles, in the given order."""
    angles = _check_angles(angles, geom)
    full = _full_operator(geom.grid, geom.n_bins, float(geom.detector_spacing), geom.n_angles_total)
    n = geom.n_bins
    idx = (np.asarray(angles)[:, None] * n + np.arange(n)[None, :]).ravel()
    return full[idx]


def project(phantom_image: np.ndarray, angles: Sequence[int], geom: Geometry) -> Sinogram:
    if phantom_image.shape != (geom.grid, geom.grid):
        raise ShapeMismatch(f"image {phantom_image.shape} does not match grid {geom.grid}")
    angles = _check_angles(angles, geom)
    a = system_matrix(angles, geom)
    data = a @ np.asarray(phantom_image, dtype=np.float64).ravel()
    return Sinogram(angles, data.reshape(len(angles), geom.n_bins))


def backproject(sino: Sinogram, geom: Geometry) -> np.ndarray:
    if sino.data.shape != (len(sino.angles), geom.n_bins):
        raise ShapeMismatch(f"sinogram {sino.data.shape} does not match {len(sino.angles)} x {geom.n_bins}")
    a = system_matrix(sino.angles, geom)
    return (a.T @ np.asarray(sino.data, dtype=np.float64).ravel()).reshape(geom.grid, geom.grid)


def noise_field(seed: int, n_bins: int, n_angles_total: int = 180) -> np.ndarray:
    """Standard normal draw per (angle, bin) over all angles; indexing it by angle makes acquisition order irrelevant."""
    return np.random.default_rng(seed).standard_normal((n_angles_total, n_bins))


def add_noise(sino: Sinogram, model: NoiseModel, n_angles_total: int = 180) -> Sinogram:
    if model.eta == 0 or model.sigma == 0:
        return Sinogram(sino.angles, sino.data.copy(), noise_level=model.eta)
    field_ = noise_field(model.seed, sino.data.shape[1], n_angles_total)
    noisy = sino.data + model.sigma * field_[list(sino.angles)]
    return Sinogram(sino.angles, noisy, noise_level=model.eta)


@dataclass
class SirtResult:
    image: np.ndarray
    weighted_residuals: List[float] = field(default_factory=list)
    residuals: List[float] = field(default_factory=list)


def _inverse_sums(v: np.ndarray) -> np.ndarray:
    out = np.zeros_like(v, dtype=np.float64)
    nz = v > 1e-12
    out[nz] = 1.0 / v[nz]
    return out


def sirt_reconstruct(
    sino: Sinogram,
    geom: Geometry,
    iters: int = 150,
    x0: Optional[np.ndarray] = None,
    relaxation: float = 1.0,
    return_trace: bool = False,
) -> Union[np.ndarray, SirtResult]:
    """x <- max(0, x + relaxation * C A^T R (y - A x)); zero row/column sums get zero weight."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if len(sino.angles) == 0 or sino.data.size == 0:
        raise EmptySinogram("cannot reconstruct from an empty sinogram")
    if sino.data.shape != (len(sino.angles), geom.n_bins):
        raise ShapeMismatch(f"sinogram {sino.data.shape} does not match {len(sino.angles)} x {geom.n_bins}")
    a = system_matrix(sino.angles, geom)
    at = a.T.tocsr()
    y = np.asarray(sino.data, dtype=np.float64).ravel()
    r = _inverse_sums(np.asarray(a.sum(axis=1)).ravel())
    c = _inverse_sums(np.asarray(a.sum(axis=0)).ravel())
    if x0 is None:
        x = np.zeros(geom.grid * geom.grid)
    else:
        if x0.shape != (geom.grid, geom.grid):
            raise ShapeMismatch(f"x0 {x0.shape} does not match grid {geom.grid}")
        x = np.asarray(x0, dtype=np.float64).ravel().copy()
    result = SirtResult(image=None)
    for _ in range(iters):
        res = y - a @ x
        if return_trace:
            result.weighted_residuals.append(float(np.sqrt(np.sum(r * res * res))))
            result.residuals.append(float(np.linalg.norm(res)))
        x = x + relaxation * c * (at @ (r * res))
        np.maximum(x, 0.0, out=x)
    image = x.reshape(geom.grid, geom.grid)
    if not return_trace:
        return image
    res = y - a @ x
    result.weighted_residuals.append(float(np.sqrt(np.sum(r * res * res))))
    result.residuals.append(float(np.linalg.norm(res)))
    result.image = image
    return result


def full_angle_reference(sino: Sinogram, geom: Geometry, iters: int = 150, relaxation: float = 1.0) -> np.ndarray:
    """Reconstruction from all angles, used as ground truth for measured scans."""
    if len(sino.angles) != geom.n_angles_total:
        raise ShapeMismatch(f"reference needs all {geom.n_angles_total} angles, got {len(sino.angles)}")
    return sirt_reconstruct(sino, geom, iters=iters, relaxation=relaxation)
