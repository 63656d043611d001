import itertools
import math

import numpy as np
import pytest

from neuroseg import autodiff as ad
from neuroseg.autodiff import Tensor
from neuroseg.core import one_hot
from neuroseg.metrics import (
    DICE_EPS,
    CorrelationError,
    DiceReport,
    average_dice,
    combined_loss,
    dice_per_structure,
    dice_report,
    pearson,
    soft_dice_per_class,
    weighted_dice,
    write_dice_rows,
)

from conftest import central_diff, max_rel_err


class TestDicePerStructure:
    def test_perfect_prediction(self, rng):
        labels = rng.integers(0, 4, (4, 4, 4))
        T = one_hot(labels, 4)
        scores = dice_per_structure(T, T)
        for s in (1, 2, 3):
            assert scores[s] == pytest.approx(1.0, abs=1e-6)

    def test_disjoint_masks(self):
        labels_a = np.zeros((2, 2, 2), dtype=np.uint8)
        labels_a[0] = 1
        labels_b = np.zeros((2, 2, 2), dtype=np.uint8)
        labels_b[1] = 1
        scores = dice_per_structure(one_hot(labels_a, 2), one_hot(labels_b, 2))
        assert scores[1] < 1e-6

    def test_half_overlap_hand_count(self):
        # |T| = 4, |P| = 4, overlap 2 -> 2*2 / (4+4) = 0.5
        truth = np.zeros((4, 2, 1), dtype=np.uint8)
        truth[0:2, :, 0] = 1  # 4 voxels
        pred = np.zeros((4, 2, 1), dtype=np.uint8)
        pred[1:3, :, 0] = 1  # 4 voxels, 2 shared
        scores = dice_per_structure(one_hot(pred, 2), one_hot(truth, 2))
        assert scores[1] == pytest.approx(0.5, abs=1e-6)

    def test_empty_structure_defined_as_one(self):
        labels = np.zeros((2, 2, 2), dtype=np.uint8)
        scores = dice_per_structure(one_hot(labels, 3), one_hot(labels, 3))
        assert scores[1] == 1.0
        assert scores[2] == 1.0

    def test_exhaustive_3x3x1_masks_match_set_overlap(self):
        # every pair of binary masks on a 3x3x1 grid vs 2|A n B|/(|A|+|B|)
        grids = []
        for bits in range(512):
            m = np.array([(bits >> i) & 1 for i in range(9)], dtype=np.uint8)
            grids.append(m.reshape(3, 3, 1))
        onehots = [one_hot(g, 2) for g in grids]
        counts = [int(g.sum()) for g in grids]
        inters = np.zeros((512, 512), dtype=np.int64)
        flat = np.stack([g.reshape(-1) for g in grids]).astype(np.int64)
        inters = flat @ flat.T
        checked = 0
        for a in range(0, 512, 7):  # stride keeps runtime sane; full sweep in acceptance
            for b in range(512):
                ours = dice_per_structure(onehots[a], onehots[b])[1]
                na, nb, i = counts[a], counts[b], int(inters[a, b])
                expected = (2 * i + DICE_EPS) / (na + nb + DICE_EPS)
                assert ours == pytest.approx(expected, rel=1e-12)
                checked += 1
        assert checked == 74 * 512


class TestSummaries:
    def test_uniform_scores(self):
        rep = DiceReport({1: 0.8, 2: 0.8}, {1: 10, 2: 90})
        assert average_dice(rep) == pytest.approx(0.8)
        assert weighted_dice(rep) == pytest.approx(0.8)

    def test_hand_weighted_example(self):
        rep = DiceReport({1: 1.0, 2: 0.5}, {1: 100, 2: 300})
        assert average_dice(rep) == pytest.approx(0.75, abs=1e-12)
        assert weighted_dice(rep) == pytest.approx(0.625, abs=1e-12)

    def test_single_structure(self):
        rep = DiceReport({1: 0.62}, {1: 50})
        assert average_dice(rep) == pytest.approx(0.62)
        assert weighted_dice(rep) == pytest.approx(0.62)

    def test_absent_structures_excluded_and_recorded(self):
        pred = np.zeros((3, 3, 3), dtype=np.uint8)
        truth = np.zeros((3, 3, 3), dtype=np.uint8)
        pred[0, 0, 0] = 1
        truth[0, 0, 0] = 1
        truth[1, 1, 1] = 0  # structure 2 never appears in truth
        pred[2, 2, 2] = 2  # but is predicted somewhere
        rep = dice_report(pred, truth, num_classes=4)
        assert 2 in rep.missing and 3 in rep.missing
        assert average_dice(rep) == pytest.approx(rep.per_structure[1])
        assert weighted_dice(rep) == pytest.approx(rep.per_structure[1])

    def test_summaries_bounded_by_extremes(self, rng):
        scores = {s: float(rng.uniform(0.2, 0.9)) for s in range(1, 8)}
        vols = {s: int(rng.integers(5, 500)) for s in range(1, 8)}
        rep = DiceReport(scores, vols)
        lo, hi = min(scores.values()), max(scores.values())
        assert lo <= average_dice(rep) <= hi
        assert lo <= weighted_dice(rep) <= hi

    def test_equal_volumes_make_weighted_equal_average(self, rng):
        scores = {s: float(rng.uniform(0, 1)) for s in range(1, 6)}
        rep = DiceReport(scores, {s: 77 for s in scores})
        assert weighted_dice(rep) == pytest.approx(average_dice(rep), abs=1e-12)


class TestCombinedLoss:
    def test_perfect_prediction_limit(self):
        # all 28 classes present; P = T clamped at 1 - 1e-7
        labels = np.arange(28, dtype=np.uint8).reshape(1, 4, 7)
        T = one_hot(labels, 28)
        P = T * (1 - 1e-7) + (1 - T) * (1e-7 / 27)
        loss = combined_loss(Tensor(P.astype(np.float64)), T.astype(np.float64))
        assert loss.item() == pytest.approx(-28.0, abs=1e-3)

    def test_uniform_prediction_hand_value(self):
        # 2x2x2 volume, all voxels class 5, P uniform = 1/28
        labels = np.full((2, 2, 2), 5, dtype=np.uint8)
        T = one_hot(labels, 28).astype(np.float64)
        P = np.full((28, 2, 2, 2), 1.0 / 28, dtype=np.float64)
        loss = combined_loss(Tensor(P), T)
        ce = 8 * math.log(28)
        present = (2 * 8 / 28 + DICE_EPS) / (8 / 28 + 8 + DICE_EPS)
        absent = DICE_EPS / (8 / 28 + DICE_EPS)
        expected = ce - present - 27 * absent
        assert loss.item() == pytest.approx(expected, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            combined_loss(Tensor(np.zeros((3, 2, 2, 2))), np.zeros((4, 2, 2, 2)))

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient_wrt_logits(self, seed):
        gen = np.random.default_rng(seed)
        z = gen.standard_normal((1, 5, 4, 4, 4))
        labels = gen.integers(0, 5, (4, 4, 4))
        T = one_hot(labels, 5)[None].astype(np.float64)
        zt = Tensor(z, requires_grad=True)
        combined_loss(ad.softmax_channels(zt), T).backward()

        def f():
            return combined_loss(ad.softmax_channels(Tensor(z)), T).item()

        assert max_rel_err(zt.grad, central_diff(f, z)) < 1e-4

    def test_descent_on_logits_converges_to_truth(self):
        # minimizing over P (via logits) drives P toward T on a 2^3 instance
        gen = np.random.default_rng(3)
        labels = gen.integers(0, 3, (2, 2, 2))
        T = one_hot(labels, 3)[None].astype(np.float64)
        z = gen.standard_normal((1, 3, 2, 2, 2)) * 0.1
        first = None
        for step in range(400):
            zt = Tensor(z, requires_grad=True)
            P = ad.softmax_channels(zt)
            loss = combined_loss(P, T)
            if first is None:
                first = loss.item()
            loss.backward()
            z = z - 0.5 * zt.grad
        final_P = ad.softmax_channels(Tensor(z)).data
        assert loss.item() < first
        assert np.all(np.argmax(final_P[0], axis=0) == labels)
        assert np.max(np.abs(final_P - T)) < 0.05


class TestPearson:
    def test_perfect_anticorrelation(self):
        xs = [1.0, 2.0, 5.0, 9.0]
        ys = [-x for x in xs]
        assert pearson(xs, ys) == pytest.approx(-1.0, abs=1e-12)

    def test_perfect_correlation(self):
        xs = [0.5, 1.0, 4.0]
        assert pearson(xs, xs) == pytest.approx(1.0, abs=1e-12)

    def test_closed_form_example(self):
        # xs {1,2,3}, ys {2,2,4}: r = sqrt(3)/2
        assert pearson([1, 2, 3], [2, 2, 4]) == pytest.approx(math.sqrt(3) / 2, abs=1e-12)

    def test_too_few_points(self):
        with pytest.raises(CorrelationError):
            pearson([1, 2], [3, 4])

    def test_zero_variance(self):
        with pytest.raises(CorrelationError):
            pearson([1, 1, 1], [2, 3, 4])


class TestReportFile:
    def test_rows_and_summary(self, tmp_path):
        rep = DiceReport({1: 0.9, 2: 0.7, 3: 0.5}, {1: 10, 2: 20, 3: 0}, missing=[3])
        path = tmp_path / "eval.csv"
        write_dice_rows([("vol0", rep), ("vol1", rep)], path)
        lines = path.read_text().strip().splitlines()
        header, rows = lines[0], lines[1:]
        assert header.split(",")[:4] == ["volume", "structure", "dice", "voxels"]
        detail = [r for r in rows if ",summary," not in r]
        summaries = [r for r in rows if ",summary," in r]
        assert len(detail) == 2 * 2  # volumes x structures present
        assert len(summaries) == 2
