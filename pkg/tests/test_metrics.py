import numpy as np
import pytest

from bronchusnet.metrics import classification_metrics, dice_score


def brute_metrics(pred, gt, n_classes):
    """Independent confusion-matrix script with explicit loops."""
    cm = [[0] * n_classes for _ in range(n_classes)]
    for p, t in zip(pred, gt):
        cm[t][p] += 1
    present = [c for c in range(n_classes) if sum(cm[c]) > 0]
    precs, recs, f1s = [], [], []
    for c in present:
        tp = cm[c][c]
        col = sum(cm[r][c] for r in range(n_classes))
        row = sum(cm[c])
        p = tp / col if col else 0.0
        r = tp / row if row else 0.0
        precs.append(p)
        recs.append(r)
        f1s.append(2 * p * r / (p + r) if p + r else 0.0)
    acc = sum(cm[c][c] for c in range(n_classes)) / len(gt)
    n = len(present)
    return acc, sum(precs) / n, sum(recs) / n, sum(f1s) / n


class TestDice:
    def test_identical(self):
        m = np.zeros((4, 4, 4), np.uint8)
        m[1:3, 1:3, 1:3] = 1
        assert dice_score(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4, 4), np.uint8)
        b = np.zeros_like(a)
        a[0], b[3] = 1, 1
        assert dice_score(a, b) == 0.0

    def test_closed_form(self):
        p = np.zeros(100, np.uint8)
        g = np.zeros(100, np.uint8)
        p[:40] = 1
        g[10:70] = 1
        assert dice_score(p.reshape(4, 5, 5), g.reshape(4, 5, 5)) == pytest.approx(0.6)

    def test_both_empty(self):
        assert dice_score(np.zeros((2, 2, 2)), np.zeros((2, 2, 2))) == 1.0

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            dice_score(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


class TestClassification:
    def test_perfect(self):
        r = classification_metrics([0, 3, 3, 1], [0, 3, 3, 1], 5)
        assert (r.accuracy, r.precision, r.recall, r.f1) == (1.0, 1.0, 1.0, 1.0)

    def test_all_class_zero(self):
        r = classification_metrics([0, 0, 0, 0], [0, 0, 1, 1], 2)
        assert r.accuracy == 0.5 and r.recall == 0.5

    def test_random_matches_brute_force(self, rng):
        gt = rng.integers(0, 7, 100)
        pred = np.where(rng.random(100) < 0.6, gt, rng.integers(0, 7, 100))
        r = classification_metrics(pred, gt, 7)
        np.testing.assert_allclose([r.accuracy, r.precision, r.recall, r.f1], brute_metrics(pred, gt, 7), rtol=1e-12)
        assert all(0 <= v <= 1 for v in r.to_dict().values())

    def test_absent_classes_ignored(self):
        r = classification_metrics([0, 0, 5], [0, 0, 1], 19)
        assert r.recall == pytest.approx(0.5)

    def test_empty(self):
        with pytest.raises(ValueError):
            classification_metrics([], [], 3)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            classification_metrics([0, 1], [0], 3)
