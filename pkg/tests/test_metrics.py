"""Ranking metrics against brute-force oracles, plus the normal quantile
and the macro report assembled by compute_metrics."""

from __future__ import annotations

import math

import numpy as np
import pytest

from wavetag.metrics import (
    MetricsReport,
    average_precision,
    compute_metrics,
    d_prime,
    normal_quantile,
    roc_auc,
)

from .oracles import average_precision_bruteforce, roc_auc_bruteforce

# Published (AUC, d-prime) anchor pairs; AUC is rounded to 3 decimals, so
# the derived d-prime carries +/- 0.02 of slack.
DPRIME_ANCHORS = [
    (0.959, 2.452),
    (0.965, 2.558),
    (0.962, 2.510),
    (0.968, 2.614),
    (0.970, 2.660),
]


class TestAveragePrecision:
    def test_worked_example(self):
        # ranked truth 1,0,1,0 -> positives at ranks 1 and 3
        ap = average_precision([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0])
        assert ap == pytest.approx((1 / 1 + 2 / 3) / 2, abs=1e-12)

    def test_perfect_ranking(self):
        assert average_precision([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_worst_ranking(self):
        # single positive at the bottom of 4 -> precision 1/4
        assert average_precision([0.1, 0.8, 0.7, 0.6], [1, 0, 0, 0]) == pytest.approx(0.25)

    def test_all_equal_scores_stable_tie_rule(self):
        # equal scores rank by original index, so the positive keeps rank 1
        assert average_precision([0.5, 0.5], [1, 0]) == 1.0
        assert average_precision([0.5, 0.5], [0, 1]) == 0.5

    def test_no_positives_returns_skip_signal(self):
        assert average_precision([0.9, 0.1], [0, 0]) is None

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            average_precision([0.9, 0.1], [1, 0, 0])
        with pytest.raises(ValueError):
            average_precision([[0.9], [0.1]], [1, 0])


class TestRocAuc:
    def test_worked_example(self):
        # pairs: (0.9,0.8) win, (0.9,0.6) win, (0.7,0.8) loss, (0.7,0.6) win
        assert roc_auc([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]) == pytest.approx(0.75, abs=1e-12)

    def test_perfect_separation(self):
        assert roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_reversal_symmetry(self):
        rng = np.random.default_rng(5)
        scores = rng.uniform(size=20)  # continuous, ties almost surely absent
        truth = (rng.uniform(size=20) < 0.4).astype(int)
        truth[0], truth[1] = 1, 0
        assert roc_auc(1.0 - scores, truth) == pytest.approx(1.0 - roc_auc(scores, truth), abs=1e-12)

    def test_all_tied_scores_give_half(self):
        assert roc_auc([0.3, 0.3, 0.3, 0.3], [1, 0, 1, 0]) == pytest.approx(0.5)

    def test_single_class_returns_skip_signal(self):
        assert roc_auc([0.9, 0.1], [1, 1]) is None
        assert roc_auc([0.9, 0.1], [0, 0]) is None


class TestOracleEquivalence:
    def test_200_random_instances(self, rng):
        """AP and AUC match the exhaustive oracles to 1e-9; half the
        instances quantize scores so tie handling is exercised."""
        checked_ap = checked_auc = 0
        for case in range(200):
            b = int(rng.integers(2, 51))
            scores = rng.uniform(size=b)
            if case % 2 == 0:
                scores = np.round(scores * 5) / 5  # heavy ties
            truth = (rng.uniform(size=b) < rng.uniform(0.1, 0.9)).astype(int)
            ap, ap_oracle = average_precision(scores, truth), average_precision_bruteforce(scores, truth)
            auc, auc_oracle = roc_auc(scores, truth), roc_auc_bruteforce(scores, truth)
            if ap_oracle is None:
                assert ap is None
            else:
                assert ap == pytest.approx(ap_oracle, abs=1e-9)
                checked_ap += 1
            if auc_oracle is None:
                assert auc is None
            else:
                assert auc == pytest.approx(auc_oracle, abs=1e-9)
                checked_auc += 1
        # the sampler must actually produce evaluable instances
        assert checked_ap > 150 and checked_auc > 150

    def test_monotone_transform_invariance(self, rng):
        # rank metrics cannot move under a strictly increasing transform;
        # scores stay in (-1, 1) so sigmoid does not collapse values
        for _ in range(20):
            scores = rng.uniform(-1, 1, size=30)
            scores[:10] = np.round(scores[:10], 1)  # inject ties
            truth = (rng.uniform(size=30) < 0.5).astype(int)
            truth[0], truth[1] = 1, 0
            for transform in (lambda s: s**3, lambda s: 1 / (1 + np.exp(-5 * s))):
                assert average_precision(transform(scores), truth) == pytest.approx(
                    average_precision(scores, truth), abs=1e-12
                )
                assert roc_auc(transform(scores), truth) == pytest.approx(
                    roc_auc(scores, truth), abs=1e-12
                )


class TestNormalQuantile:
    def test_median_and_known_points(self):
        assert normal_quantile(0.5) == 0.0
        assert normal_quantile(0.975) == pytest.approx(1.959963984540054, abs=1e-9)
        assert normal_quantile(0.841344746068543) == pytest.approx(1.0, abs=1e-9)

    def test_symmetry(self):
        # the two-sided tail branches agree within the 1e-9 accuracy contract
        for p in (1e-6, 0.01, 0.2, 0.45, 0.49999):
            assert normal_quantile(1.0 - p) == pytest.approx(-normal_quantile(p), abs=1e-9)

    def test_against_scipy_over_full_range(self):
        stats = pytest.importorskip("scipy.stats")
        ps = np.concatenate([
            np.logspace(-8, -2, 200),
            np.linspace(0.01, 0.99, 500),
            1.0 - np.logspace(-8, -2, 200),
        ])
        worst = max(abs(normal_quantile(float(p)) - float(stats.norm.ppf(p))) for p in ps)
        assert worst < 1e-9

    def test_round_trip_through_erfc(self):
        # Phi(Phi^-1(p)) == p using the complementary error function
        for p in (1e-7, 0.001, 0.3, 0.5, 0.9, 0.999, 1 - 1e-7):
            x = normal_quantile(p)
            phi = 0.5 * math.erfc(-x / math.sqrt(2.0))
            assert phi == pytest.approx(p, rel=1e-9, abs=1e-15)

    def test_domain_errors(self):
        for bad in (0.0, 1.0, -0.1, 1.5):
            with pytest.raises(ValueError):
                normal_quantile(bad)


class TestDPrime:
    def test_half_maps_to_zero(self):
        assert d_prime(0.5) == 0.0

    @pytest.mark.parametrize("auc,expected", DPRIME_ANCHORS)
    def test_published_anchors(self, auc, expected):
        assert d_prime(auc) == pytest.approx(expected, abs=0.02)

    def test_strictly_increasing_on_grid(self):
        grid = np.linspace(0.001, 0.999, 1000)
        values = [d_prime(float(a)) for a in grid]
        assert all(b > a for a, b in zip(values, values[1:]))

    def test_domain_errors(self):
        for bad in (0.0, 1.0, -0.2, 1.2):
            with pytest.raises(ValueError):
                d_prime(bad)


class TestComputeMetrics:
    def test_exact_predictions_are_perfect(self):
        truth = np.array([[1, 0], [0, 1], [1, 1], [0, 0]], dtype=np.float64)
        report = compute_metrics(truth.copy(), truth, ["a", "b"])
        assert report.map == 1.0
        assert report.auc == 1.0
        assert report.d_prime is None  # AUC == 1 sits outside (0,1)

    def test_random_scores_balanced_truth_null(self, rng):
        scores = rng.uniform(size=(10_000, 2))
        truth = (rng.uniform(size=(10_000, 2)) < 0.5).astype(np.float64)
        report = compute_metrics(scores, truth, ["a", "b"])
        assert report.auc == pytest.approx(0.5, abs=0.02)
        assert report.d_prime == pytest.approx(0.0, abs=0.1)

    def test_skipped_class_listed_and_excluded(self):
        scores = np.array([[0.9, 0.4], [0.1, 0.6], [0.8, 0.5]])
        truth = np.array([[1, 0], [0, 0], [1, 0]])  # class b has no positives
        report = compute_metrics(scores, truth, ["a", "b"])
        assert report.skipped_ap == ["b"]
        assert report.skipped_auc == ["b"]
        assert report.evaluated_ap_classes == 1
        assert report.per_class["b"] == {"ap": None, "auc": None}
        assert report.map == average_precision(scores[:, 0], truth[:, 0])

    def test_every_class_skipped_raises(self):
        scores = np.array([[0.9], [0.1]])
        with pytest.raises(ValueError, match="skipped"):
            compute_metrics(scores, np.zeros((2, 1)), ["a"])

    def test_non_binary_truth_rejected(self):
        with pytest.raises(ValueError, match="binary"):
            compute_metrics(np.ones((2, 1)), np.array([[0.5], [1.0]]), ["a"])

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            compute_metrics(np.ones((2, 2)), np.ones((2, 3)), ["a", "b"])
        with pytest.raises(ValueError):
            compute_metrics(np.ones((2, 2)), np.ones((2, 2)), ["a"])

    def test_report_schema(self):
        truth = np.array([[1, 0], [0, 1]], dtype=np.float64)
        scores = np.array([[0.8, 0.3], [0.2, 0.7]])
        payload = compute_metrics(scores, truth, ["a", "b"]).to_dict()
        assert set(payload) == {"mAP", "AUC", "d_prime", "per_class", "evaluated_classes", "skipped"}
        assert set(payload["per_class"]) == {"a", "b"}
        assert payload["evaluated_classes"] == {"ap": 2, "auc": 2}

    def test_report_is_plain_dataclass(self):
        report = MetricsReport(map=0.5, auc=0.5, d_prime=0.0)
        assert report.to_dict()["mAP"] == 0.5
