import numpy as np
import pytest

from ctstop.errors import ShapeMismatch, ZeroReference
from ctstop.metrics import PSNR_CAP_DB, mse, psnr, psnr_curve


def _binary():
    ref = np.zeros((16, 16))
    ref[4:12, 4:12] = 1.0
    return ref


def test_identical_images_hit_cap():
    ref = _binary()
    assert psnr(ref, ref).psnr == PSNR_CAP_DB


def test_constant_offset_hand_value():
    ref = _binary()
    score = psnr(ref + 0.1, ref)
    assert score.mse == pytest.approx(0.01)
    assert score.psnr == pytest.approx(20.0)


def test_scale_invariance():
    ref = _binary()
    est = ref * 0.8 + 0.05
    assert psnr(3.0 * est, 3.0 * ref).psnr == pytest.approx(psnr(est, ref).psnr)


def test_psnr_falls_as_mse_grows():
    ref = _binary()
    values = psnr_curve([ref + d for d in (0.01, 0.05, 0.2)], ref)
    assert values[0] > values[1] > values[2]


def test_errors():
    with pytest.raises(ZeroReference):
        psnr(np.ones((4, 4)), np.zeros((4, 4)))
    with pytest.raises(ShapeMismatch):
        mse(np.ones((4, 4)), np.ones((5, 5)))
