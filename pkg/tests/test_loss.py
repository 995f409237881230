import math

import numpy as np
import numpy.testing as npt
import pytest

from ymwml.errors import ConfigError, DataError, ShapeError
from ymwml.loss import (
    ClassWeights,
    WmeParams,
    compute_class_rates,
    cross_entropy_baseline,
    curve_loss_value,
    lambda_of_rate,
    loss_curve,
    wme_batch_loss,
    wme_batch_loss_composed,
    wme_pixel_loss,
    write_loss_curve_csv,
    write_loss_terms_csv,
)
from ymwml.tensor import Rng, Tensor

# Hand-derived single-pixel values, frozen before the implementation existed:
#   uniform p = 0.25, lam = 1:  2*e^-0.25 + e^0.75  = 3.674601583
#   perfect p_i = 1, lam = e^-1: 2*e^-2 + e^0       = 1.270670566
UNIFORM_PIXEL_LOSS = 3.674601583
PERFECT_PIXEL_LOSS = 1.270670566


def test_pixel_loss_uniform_prediction():
    w = ClassWeights(cr=np.zeros(4), lam=np.ones(4))
    loss, t1, t2 = wme_pixel_loss([0.25] * 4, 0, w, WmeParams())
    assert abs(loss - UNIFORM_PIXEL_LOSS) < 1e-9
    assert abs(t1 - 2.0 * math.exp(-0.25)) < 1e-9
    assert abs(t2 - math.exp(0.75)) < 1e-9


def test_pixel_loss_perfect_prediction():
    w = ClassWeights(cr=np.array([1.0, 0, 0, 0]), lam=np.array([math.exp(-1.0), 1, 1, 1]))
    loss, t1, t2 = wme_pixel_loss([1.0, 0.0, 0.0, 0.0], 0, w, WmeParams())
    assert abs(loss - PERFECT_PIXEL_LOSS) < 1e-9
    assert abs(t2 - 1.0) < 1e-12  # no off-class mass


def test_pixel_loss_zero_scales():
    w = ClassWeights.uniform(4)
    loss, t1, t2 = wme_pixel_loss([0.1, 0.2, 0.3, 0.4], 2, w, WmeParams(beta1=0.0, beta2=0.0))
    assert loss == 0.0 and t1 == 0.0 and t2 == 0.0


def test_pixel_loss_validation():
    w = ClassWeights.uniform(4)
    with pytest.raises(ShapeError):
        wme_pixel_loss([0.5, 0.5], 0, w, WmeParams())
    with pytest.raises(ShapeError):
        wme_pixel_loss([0.25] * 4, 4, w, WmeParams())
    with pytest.raises(ConfigError):
        wme_pixel_loss([1.5, -0.5, 0.0, 0.0], 0, w, WmeParams())


# --- class rates and the weight law -------------------------------------------------


def test_rates_degenerate_mask():
    w = compute_class_rates(np.zeros((4, 4), dtype=np.int64), 4)
    npt.assert_allclose(w.cr, [1.0, 0.0, 0.0, 0.0])
    npt.assert_allclose(w.lam, [math.exp(-1.0), 1.0, 1.0, 1.0], atol=1e-15)


def test_rates_worked_example():
    mask = np.array([[0, 0], [1, 2]], dtype=np.int64)
    w = compute_class_rates(mask, 4)
    npt.assert_allclose(w.cr, [0.5, 0.25, 0.25, 0.0])
    npt.assert_allclose(w.lam, [0.606530660, 0.778800783, 0.778800783, 1.0], atol=1e-9)


def test_rates_relabel_symmetry():
    rng = Rng(3)
    mask = np.floor(rng.uniforms(64) * 4).astype(np.int64).reshape(8, 8)
    w = compute_class_rates(mask, 4)
    perm = np.array([2, 0, 3, 1])
    w2 = compute_class_rates(perm[mask], 4)
    npt.assert_allclose(w2.cr[perm], w.cr)
    npt.assert_allclose(w2.lam[perm], w.lam)


def test_rates_validation():
    with pytest.raises(DataError):
        compute_class_rates([], 4)
    with pytest.raises(DataError):
        compute_class_rates(np.array([[0, 5]]), 4)
    with pytest.raises(DataError):
        compute_class_rates(np.array([[0.5, 1.0]]), 4)  # non-integer mask


def test_lambda_law():
    assert lambda_of_rate(0.0) == 1.0
    assert abs(lambda_of_rate(1.0) - math.exp(-1.0)) < 1e-15
    grid = np.linspace(0.0, 1.0, 1000)
    vals = lambda_of_rate(grid)
    assert np.all(np.diff(vals) < 0.0)  # strictly decreasing
    assert np.all((vals >= math.exp(-1.0) - 1e-15) & (vals <= 1.0))


def test_class_weights_validation():
    with pytest.raises(ConfigError):
        ClassWeights.from_rates([0.5, 0.6])  # does not sum to 1
    with pytest.raises(ConfigError):
        ClassWeights.from_rates([1.5, -0.5])
    with pytest.raises(ShapeError):
        ClassWeights.from_rates([1.0])
    u = ClassWeights.uniform(3)
    npt.assert_array_equal(u.lam, np.ones(3))


def test_wme_params_validation():
    with pytest.raises(ConfigError):
        WmeParams(beta1=0.0).validate()
    with pytest.raises(ConfigError):
        WmeParams(beta2=-1.0).validate()
    assert WmeParams().validate().beta1 == 2.0


# --- batch loss ---------------------------------------------------------------------


def test_batch_loss_single_pixel_uniform_logits():
    z = Tensor(np.zeros((1, 4, 1, 1)), requires_grad=True)
    mask = np.zeros((1, 1, 1), dtype=np.int64)
    loss = wme_batch_loss(z, mask, ClassWeights.uniform(4), WmeParams())
    assert abs(loss.item() - UNIFORM_PIXEL_LOSS) < 1e-9


def test_batch_loss_additivity():
    z = Tensor(np.zeros((1, 4, 1, 2)), requires_grad=True)
    mask = np.zeros((1, 1, 2), dtype=np.int64)
    loss = wme_batch_loss(z, mask, ClassWeights.uniform(4), WmeParams())
    assert abs(loss.item() - 2.0 * UNIFORM_PIXEL_LOSS) < 1e-9


def test_batch_loss_mean_is_sum_over_pixels():
    rng = Rng(5)
    z = Tensor((rng.uniforms(2 * 4 * 3 * 3) * 4 - 2).reshape(2, 4, 3, 3), requires_grad=True)
    mask = np.floor(rng.uniforms(2 * 3 * 3) * 4).astype(np.int64).reshape(2, 3, 3)
    w = ClassWeights.from_rates([0.7, 0.1, 0.1, 0.1])
    s = wme_batch_loss(z, mask, w, WmeParams(), "sum").item()
    m = wme_batch_loss(z, mask, w, WmeParams(), "mean").item()
    assert abs(m - s / 18.0) < 1e-12


def test_batch_loss_matches_pixel_loop():
    rng = Rng(6)
    z = Tensor((rng.uniforms(1 * 4 * 2 * 2) * 4 - 2).reshape(1, 4, 2, 2))
    mask = np.array([[[0, 1], [2, 3]]], dtype=np.int64)
    w = ClassWeights.from_rates([0.55, 0.25, 0.15, 0.05])
    got = wme_batch_loss(z, mask, w, WmeParams()).item()
    # independent path: explicit softmax then the scalar pixel rule
    e = np.exp(z.data - z.data.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    want = sum(
        wme_pixel_loss(p[0, :, i, j], int(mask[0, i, j]), w, WmeParams())[0]
        for i in range(2)
        for j in range(2)
    )
    assert abs(got - want) < 1e-9


def test_batch_loss_agrees_with_composed_form():
    rng = Rng(7)
    z = Tensor((rng.uniforms(2 * 4 * 3 * 3) * 4 - 2).reshape(2, 4, 3, 3))
    mask = np.floor(rng.uniforms(2 * 3 * 3) * 4).astype(np.int64).reshape(2, 3, 3)
    w = ClassWeights.from_rates([0.4, 0.3, 0.2, 0.1])
    for reduction in ("sum", "mean"):
        a = wme_batch_loss(z, mask, w, WmeParams(), reduction).item()
        c = wme_batch_loss_composed(z, mask, w, WmeParams(), reduction).item()
        assert abs(a - c) < 1e-9, reduction


def test_batch_loss_validation():
    z = Tensor(np.zeros((1, 4, 2, 2)))
    mask = np.zeros((1, 2, 2), dtype=np.int64)
    with pytest.raises(ShapeError, match="class weights"):
        wme_batch_loss(z, mask, ClassWeights.uniform(3), WmeParams())
    with pytest.raises(ShapeError):
        wme_batch_loss(z, np.zeros((1, 3, 2), dtype=np.int64), ClassWeights.uniform(4), WmeParams())
    with pytest.raises(ShapeError):
        wme_batch_loss(z, mask + 7, ClassWeights.uniform(4), WmeParams())
    with pytest.raises(ConfigError):
        wme_batch_loss(z, mask, ClassWeights.uniform(4), WmeParams(), "median")


# --- cross-entropy baseline -----------------------------------------------------------


def test_cross_entropy_uniform_logits():
    z = Tensor(np.zeros((1, 4, 1, 1)))
    mask = np.zeros((1, 1, 1), dtype=np.int64)
    assert abs(cross_entropy_baseline(z, mask).item() - math.log(4.0)) < 1e-9


def test_cross_entropy_confident_prediction_vanishes():
    z = Tensor(np.zeros((1, 4, 1, 1)))
    z.data[0, 2] = 40.0
    mask = np.full((1, 1, 1), 2, dtype=np.int64)
    assert cross_entropy_baseline(z, mask).item() < 1e-12


# --- curve diagnostics -----------------------------------------------------------------


def test_curve_is_convex_and_decreasing():
    w = ClassWeights.from_rates([0.6, 0.4])
    pts = loss_curve(w, 0, WmeParams())
    assert len(pts) == 99
    for pt in pts:
        assert pt.d2loss > 0.0
        assert pt.dloss < 0.0
        assert abs(pt.loss - curve_loss_value(float(w.lam[0]), WmeParams(), pt.p)) < 1e-12


def test_curve_zero_lambda_isolates_spread_term():
    w = ClassWeights(cr=np.array([np.inf, 0.0]), lam=np.array([0.0, 1.0]))
    for pt in loss_curve(w, 0, WmeParams(), grid=[0.25, 0.5, 0.75]):
        assert abs(pt.loss - math.exp(1.0 - pt.p)) < 1e-12


def test_curve_grid_validation():
    with pytest.raises(ConfigError):
        loss_curve(ClassWeights.uniform(2), 0, WmeParams(), grid=[0.0, 0.5])
    with pytest.raises(ShapeError):
        loss_curve(ClassWeights.uniform(2), 2, WmeParams())


def test_curve_csv_writers(tmp_path):
    w = ClassWeights.from_rates([0.8, 0.2])
    curve_path = tmp_path / "curve.csv"
    write_loss_curve_csv(loss_curve(w, 1, WmeParams()), curve_path)
    lines = curve_path.read_text().strip().splitlines()
    assert lines[0] == "p,loss,dloss,d2loss"
    assert len(lines) == 100

    terms_path = tmp_path / "terms.csv"
    write_loss_terms_csv(w, 1, WmeParams(), terms_path)
    lines = terms_path.read_text().strip().splitlines()
    assert lines[0] == "p,t1,t2"
    assert len(lines) == 100
    p, t1, t2 = (float(v) for v in lines[50].split(","))
    assert abs((t1 + t2) - curve_loss_value(float(w.lam[1]), WmeParams(), p)) < 1e-12
