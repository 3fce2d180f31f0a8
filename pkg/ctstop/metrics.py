"""PSNR reward."""
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .errors import ShapeMismatch, ZeroReference

PSNR_CAP_DB = 300.0


@dataclass(frozen=True)
class QualityScore:
    psnr: float
    mse: float
    peak: float


def mse(estimate: np.ndarray, reference: np.ndarray) -> float:
    if estimate.shape != reference.shape:
        raise ShapeMismatch(f"estimate {estimate.shape} vs reference {reference.shape}")
    diff = np.asarray(estimate, dtype=np.float64) - np.asarray(reference, dtype=np.float64)
    return float(np.mean(diff * diff))


def psnr(estimate: np.ndarray, reference: np.ndarray) -> QualityScore:
    """10 log10(peak^2 / mse) with peak = max(reference); an exact match returns the 300 dB cap."""
    err = mse(estimate, reference)
    peak = float(np.max(reference))
    if peak <= 0.0:
        raise ZeroReference("reference image has no positive intensity")
    if err == 0.0:
        return QualityScore(psnr=PSNR_CAP_DB, mse=0.0, peak=peak)
    value = 10.0 * np.log10(peak * peak / err)
    return QualityScore(psnr=float(min(value, PSNR_CAP_DB)), mse=err, peak=peak)


def psnr_curve(estimates: Sequence[np.ndarray], reference: np.ndarray) -> List[float]:
    return [psnr(e, reference).psnr for e in estimates]
