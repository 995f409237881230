import numpy as np
import numpy.testing as npt
import pytest

from ymwml.errors import ConfigError, ShapeError
from ymwml.metrics import (
    ConfusionCounts,
    confusion,
    dice,
    iou,
    mean_foreground_dice,
    write_report_csv,
)
from ymwml.tensor import Rng


def test_confusion_hand_case():
    gt = np.array([[0, 0, 1], [1, 2, 2]])
    pred = np.array([[0, 1, 1], [1, 2, 0]])
    c = confusion(pred, gt, 3)
    npt.assert_array_equal(c.tp, [1, 2, 1])
    npt.assert_array_equal(c.fp, [1, 1, 0])
    npt.assert_array_equal(c.fn, [1, 0, 1])
    assert abs(dice(c, 0) - 2 / 4) < 1e-15
    assert abs(dice(c, 1) - 4 / 5) < 1e-15
    assert abs(iou(c, 1) - 2 / 3) < 1e-15
    assert abs(dice(c, 2) - 2 / 3) < 1e-15
    assert abs(mean_foreground_dice(c, 3) - (4 / 5 + 2 / 3) / 2) < 1e-15


def test_perfect_and_disjoint_predictions():
    gt = np.array([[1, 1], [0, 0]])
    c = confusion(gt, gt, 2)
    assert dice(c, 0) == 1.0 and dice(c, 1) == 1.0 and iou(c, 1) == 1.0
    flipped = confusion(1 - gt, gt, 2)
    assert dice(flipped, 1) == 0.0 and iou(flipped, 1) == 0.0


def test_absent_class_scores_one():
    gt = np.zeros((3, 3), dtype=np.int64)
    c = confusion(gt, gt, 4)
    for k in (1, 2, 3):
        assert dice(c, k) == 1.0
        assert iou(c, k) == 1.0
    assert mean_foreground_dice(c, 4) == 1.0


def test_dice_iou_identity():
    # D = 2J/(1+J) for every class on random maps
    rng = Rng(5)
    pred = np.floor(rng.uniforms(400) * 4).astype(np.int64).reshape(20, 20)
    gt = np.floor(rng.uniforms(400) * 4).astype(np.int64).reshape(20, 20)
    c = confusion(pred, gt, 4)
    for k in range(4):
        j = iou(c, k)
        assert abs(dice(c, k) - 2.0 * j / (1.0 + j)) < 1e-12


def test_confusion_counts_accumulate():
    a = np.array([[0, 1]])
    b = np.array([[1, 1]])
    total = confusion(a, a, 2) + confusion(b, a, 2)
    npt.assert_array_equal(total.tp, [1, 2])
    npt.assert_array_equal(total.fp, [0, 1])
    npt.assert_array_equal(total.fn, [1, 0])
    assert total.num_classes == 2


def test_confusion_validation():
    with pytest.raises(ShapeError):
        confusion(np.zeros((2, 2), int), np.zeros((2, 3), int), 2)
    with pytest.raises(ShapeError):
        confusion(np.zeros((0,), int), np.zeros((0,), int), 2)
    with pytest.raises(ShapeError):
        confusion(np.full((2, 2), 5), np.zeros((2, 2), int), 4)
    with pytest.raises(ConfigError):
        mean_foreground_dice(ConfusionCounts(np.zeros(1, int), np.zeros(1, int), np.zeros(1, int)), 1)


def test_report_csv(tmp_path):
    path = tmp_path / "report.csv"
    write_report_csv([1.0, 0.5, 0.25, 0.75], [1.0, 1 / 3, 0.2, 0.6], path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "class,dice,iou"
    assert len(lines) == 6
    tag, d, i = lines[-1].split(",")
    assert tag == "mean_fg"
    assert abs(float(d) - 0.5) < 1e-9
    assert abs(float(i) - (1 / 3 + 0.2 + 0.6) / 3) < 1e-9
