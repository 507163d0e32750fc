import math

import numpy as np
import pytest

from rsfme.errors import DataError, ShapeError
from rsfme.metrics import (ConfusionMatrix, auc_pr, binary_tally, ci_half_width,
                           compute_metrics, feature_projection, one_vs_rest_aucs,
                           pr_curve, write_metrics_csv, write_pr_csv,
                           write_projection_csv)


def brute_force_auc(scores, flags):
    """Independent threshold sweep with explicit loops."""
    n_pos = sum(flags)
    points = []
    for t in sorted(set(scores), reverse=True):
        tp = fp = 0
        for s, f in zip(scores, flags):
            if s >= t:
                if f:
                    tp += 1
                else:
                    fp += 1
        points.append((tp / (tp + fp), tp / n_pos))
    area, prev = 0.0, 0.0
    for precision, recall in points:
        area += (recall - prev) * precision
        prev = recall
    return area


class TestConfusionMatrix:
    def test_from_predictions_orientation(self):
        # rows are the predicted class, columns the true class
        cm = ConfusionMatrix.from_predictions([0, 0, 1, 1, 1], [0, 1, 1, 1, 0],
                                              ["a", "b"])
        np.testing.assert_array_equal(cm.counts, [[1, 1], [1, 2]])

    def test_shape_must_match_names(self):
        with pytest.raises(ShapeError):
            ConfusionMatrix(np.zeros((2, 3), dtype=int), ["a", "b"])

    def test_negative_counts_rejected(self):
        with pytest.raises(DataError):
            ConfusionMatrix(np.array([[1, -1], [0, 2]]), ["a", "b"])

    def test_text_round_trip(self, tmp_path):
        cm = ConfusionMatrix(np.array([[5, 2], [1, 7]]), ["left", "right"])
        path = tmp_path / "cm.txt"
        cm.to_text(path)
        back = ConfusionMatrix.from_text(path)
        assert back.class_names == cm.class_names
        np.testing.assert_array_equal(back.counts, cm.counts)

    def test_malformed_text_rejected(self, tmp_path):
        path = tmp_path / "cm.txt"
        path.write_text("a b\n1 2\n")
        with pytest.raises(DataError):
            ConfusionMatrix.from_text(path)
        path.write_text("a b\n1 x\n2 3\n")
        with pytest.raises(DataError):
            ConfusionMatrix.from_text(path)

    def test_binary_tally_hand_example(self):
        cm = ConfusionMatrix(np.array([[6, 2, 0], [1, 9, 3], [0, 1, 8]]),
                             ["x", "y", "z"])
        tp, fp, fn, tn = binary_tally(cm, 1)
        assert (tp, fp, fn, tn) == (9, 4, 3, 14)
        assert tp + fp + fn + tn == cm.total


class TestConfidenceInterval:
    def test_hand_value(self):
        # 1.96 * sqrt(0.1 * 0.9 / 400) = 1.96 * 0.015 = 0.0294
        assert ci_half_width(0.1, 400) == pytest.approx(0.0294, abs=1e-10)

    def test_zero_at_the_extremes(self):
        assert ci_half_width(0.0, 50) == 0.0
        assert ci_half_width(1.0, 50) == 0.0

    def test_symmetric_in_the_error_rate(self):
        # exact at dyadic rates, where 1 - e is also representable
        for e in (0.25, 0.5, 0.125):
            assert ci_half_width(e, 321) == ci_half_width(1.0 - e, 321)
        assert ci_half_width(0.3, 777) == pytest.approx(
            ci_half_width(0.7, 777), rel=1e-12)

    def test_width_shrinks_with_n(self):
        assert ci_half_width(0.2, 1000) < ci_half_width(0.2, 100)

    def test_bad_inputs_rejected(self):
        with pytest.raises(DataError):
            ci_half_width(1.2, 10)
        with pytest.raises(DataError):
            ci_half_width(0.5, 0)


class TestComputeMetrics:
    def two_class(self):
        # predicted rows: [[8, 1], [2, 9]] -> 17 of 20 correct
        return ConfusionMatrix(np.array([[8, 1], [2, 9]]), ["neg", "pos"])

    def test_per_class_rates_hand_checked(self):
        rep = compute_metrics(self.two_class())
        pos = rep.row("pos")
        assert pos.sensitivity == pytest.approx(90.0)      # 9 / 10
        assert pos.precision == pytest.approx(9 / 11 * 100)
        assert pos.specificity == pytest.approx(80.0)      # 8 / 10
        assert pos.accuracy == pytest.approx(85.0)
        f = 2 * pos.precision * pos.sensitivity / (pos.precision + pos.sensitivity)
        assert pos.f_score == pytest.approx(f)

    def test_summary_row_semantics(self):
        rep = compute_metrics(self.two_class())
        s = rep.summary
        assert s.accuracy == pytest.approx(85.0)  # whole-set accuracy
        rows = rep.rows
        assert s.sensitivity == pytest.approx(
            (rows[0].sensitivity + rows[1].sensitivity) / 2)
        assert s.precision == pytest.approx(
            (rows[0].precision + rows[1].precision) / 2)
        assert s.f_score == pytest.approx(
            2 * s.precision * s.sensitivity / (s.precision + s.sensitivity))

    def test_ci_column_uses_whole_set_error(self):
        rep = compute_metrics(self.two_class())
        want = 100.0 * 1.96 * math.sqrt(0.15 * 0.85 / 20)
        assert rep.summary.ci_half == pytest.approx(want)

    def test_zero_denominator_shows_undef_not_nan(self, tmp_path):
        # nothing predicted as class b -> precision undefined
        cm = ConfusionMatrix(np.array([[3, 2], [0, 0]]), ["a", "b"])
        rep = compute_metrics(cm)
        assert rep.row("b").precision is None
        assert rep.row("b").f_score is None
        path = tmp_path / "m.csv"
        write_metrics_csv(rep, path)
        text = path.read_text()
        assert "undef" in text and "nan" not in text.lower()

    def test_csv_schema(self, tmp_path):
        rep = compute_metrics(self.two_class(), aucs=[0.5, 0.75])
        path = tmp_path / "m.csv"
        write_metrics_csv(rep, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "class,acc,sen,spec,pre,f,ci_half,auc_pr"
        assert len(lines) == 4 and lines[-1].startswith("macro,")
        assert lines[1].split(",")[0] == "neg"
        assert lines[1].count(",") == 7


class TestPrCurve:
    def test_hand_example(self):
        scores = np.array([0.9, 0.8, 0.7, 0.6])
        flags = np.array([True, False, True, False])
        points = pr_curve(scores, flags)
        assert [(p, r) for _, p, r in points] == [
            (1.0, 0.5), (0.5, 0.5), (2 / 3, 1.0), (0.5, 1.0)]
        assert auc_pr(points) == pytest.approx(0.5 + 0.5 * 2 / 3)

    def test_thresholds_descend_and_recall_never_drops(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            n = int(rng.integers(4, 30))
            scores = rng.random(n)
            flags = rng.random(n) < 0.4
            if flags.all() or not flags.any():
                continue
            points = pr_curve(scores, flags)
            ts = [t for t, _, _ in points]
            rs = [r for _, _, r in points]
            assert ts == sorted(ts, reverse=True)
            assert all(b >= a for a, b in zip(rs, rs[1:]))
            assert rs[-1] == 1.0

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            n = int(rng.integers(3, 20))
            scores = np.round(rng.random(n), 2)  # force some ties
            flags = rng.random(n) < 0.5
            if flags.all() or not flags.any():
                continue
            got = auc_pr(pr_curve(scores, flags))
            want = brute_force_auc(list(scores), list(flags))
            assert got == pytest.approx(want, abs=1e-12)

    def test_single_class_is_undefined(self):
        assert pr_curve(np.array([0.2, 0.4]), np.array([True, True])) is None
        assert pr_curve(np.array([0.2, 0.4]), np.array([False, False])) is None
        assert auc_pr(None) is None

    def test_identical_scores_collapse_to_prevalence_point(self):
        scores = np.full(8, 0.5)
        flags = np.array([True] * 3 + [False] * 5)
        points = pr_curve(scores, flags)
        assert len(points) == 1
        t, p, r = points[0]
        assert (p, r) == (3 / 8, 1.0)
        assert auc_pr(points) == pytest.approx(3 / 8)

    def test_one_vs_rest_shapes(self):
        rng = np.random.default_rng(3)
        scores = rng.random((12, 3))
        labels = rng.integers(0, 3, 12)
        aucs = one_vs_rest_aucs(scores, labels, 3)
        assert len(aucs) == 3
        with pytest.raises(ShapeError):
            one_vs_rest_aucs(scores, labels, 4)

    def test_pr_csv_schema(self, tmp_path):
        points = pr_curve(np.array([0.9, 0.1]), np.array([True, False]))
        path = tmp_path / "pr.csv"
        write_pr_csv({"only": points, "empty": None}, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "class,threshold,precision,recall"
        assert all(ln.startswith("only,") for ln in lines[1:])


class TestFeatureProjection:
    def test_line_collapses_to_first_axis(self):
        t = np.linspace(-2, 2, 9)
        feats = np.stack([3 * t, -t, 2 * t], axis=1)
        coords = feature_projection(feats)
        assert coords.shape == (9, 2)
        np.testing.assert_allclose(coords[:, 1], 0.0, atol=1e-9)
        assert np.std(coords[:, 0]) > 1.0

    def test_projection_is_centered(self):
        rng = np.random.default_rng(4)
        coords = feature_projection(rng.random((20, 5)) + 7.0)
        np.testing.assert_allclose(coords.mean(axis=0), 0.0, atol=1e-9)

    def test_sign_convention_fixes_output(self):
        rng = np.random.default_rng(5)
        feats = rng.random((15, 4))
        a = feature_projection(feats)
        b = feature_projection(feats.copy())
        np.testing.assert_array_equal(a, b)

    def test_variance_ordering(self):
        rng = np.random.default_rng(6)
        base = rng.random((30, 3))
        base[:, 0] *= 10.0  # dominant direction
        coords = feature_projection(base)
        assert coords[:, 0].var() >= coords[:, 1].var()

    def test_zero_variance_is_undefined(self):
        assert feature_projection(np.ones((5, 4))) is None

    def test_too_few_vectors_rejected(self):
        with pytest.raises(ShapeError):
            feature_projection(np.ones((2, 4)))
        with pytest.raises(ShapeError):
            feature_projection(np.ones((5, 1)))

    def test_projection_csv_schema(self, tmp_path):
        rng = np.random.default_rng(7)
        coords = feature_projection(rng.random((4, 3)))
        path = tmp_path / "p.csv"
        write_projection_csv(["s1", "s2", "s3", "s4"], ["a", "a", "b", "b"],
                             coords, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "sample_id,label,pc1,pc2"
        assert len(lines) == 5
        assert lines[1].split(",")[:2] == ["s1", "a"]
