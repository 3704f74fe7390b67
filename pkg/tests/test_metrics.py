import csv

import numpy as np
import pytest

from ebmkit import energy as en
from ebmkit import metrics
from ebmkit import nn
from oracles import brute_force_ece, pair_count_auroc


class TestEce:
    def test_perfectly_confident_and_correct(self):
        report = metrics.ece(np.ones(50), np.ones(50, dtype=bool), 10)
        assert report.value == 0.0

    def test_perfectly_confident_and_wrong(self):
        report = metrics.ece(np.ones(50), np.zeros(50, dtype=bool), 10)
        assert report.value == 1.0

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = int(rng.integers(5, 200))
            n_bins = int(rng.integers(1, 30))
            conf = rng.uniform(0, 1, size=n)
            correct = rng.uniform(0, 1, size=n) < conf
            got = metrics.ece(conf, correct, n_bins).value
            want = brute_force_ece(conf, correct, n_bins)
            assert abs(got - want) < 1e-12

    def test_one_bin_equals_overall_gap(self):
        rng = np.random.default_rng(1)
        conf = rng.uniform(0, 1, size=100)
        correct = rng.uniform(0, 1, size=100) < 0.5
        got = metrics.ece(conf, correct, 1).value
        assert got == pytest.approx(abs(correct.mean() - conf.mean()), abs=1e-12)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(2)
        conf = rng.uniform(0, 1, size=80)
        correct = rng.uniform(0, 1, size=80) < conf
        perm = rng.permutation(80)
        assert metrics.ece(conf, correct, 15).value == \
            pytest.approx(metrics.ece(conf[perm], correct[perm], 15).value, abs=1e-15)

    def test_report_recomputes_and_counts_sum(self):
        rng = np.random.default_rng(3)
        conf = rng.uniform(0, 1, size=64)
        correct = rng.uniform(0, 1, size=64) < conf
        report = metrics.ece(conf, correct, 12)
        assert sum(b.count for b in report.bins) == 64
        assert report.recompute() == pytest.approx(report.value, abs=1e-12)
        assert 0.0 <= report.value <= 1.0

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            metrics.ece([], [], 10)

    def test_out_of_range_confidence_rejected(self):
        with pytest.raises(ValueError):
            metrics.ece([1.2], [True], 10)


class TestAuroc:
    def test_perfect_separation(self):
        assert metrics.auroc([0.9, 0.8], [0.1, 0.2]).auroc == 1.0

    def test_identical_distributions_exactly_half(self):
        scores = [0.3, 0.5, 0.7]
        assert metrics.auroc(scores, scores).auroc == 0.5

    def test_matches_pair_counting_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            s_in = rng.normal(0.5, 1.0, size=50)
            s_out = rng.normal(0.0, 1.0, size=50)
            got = metrics.auroc(s_in, s_out).auroc
            want = pair_count_auroc(list(s_in), list(s_out))
            assert abs(got - want) < 1e-12

    def test_antisymmetry_without_ties(self):
        rng = np.random.default_rng(5)
        s_in = rng.normal(size=30)
        s_out = rng.normal(size=40)
        a = metrics.auroc(s_in, s_out).auroc
        b = metrics.auroc(s_out, s_in).auroc
        assert a == pytest.approx(1.0 - b, abs=1e-12)

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(6)
        s_in = rng.normal(size=25)
        s_out = rng.normal(size=25)
        base = metrics.auroc(s_in, s_out).auroc
        warped = metrics.auroc(np.exp(s_in), np.exp(s_out)).auroc
        assert base == pytest.approx(warped, abs=1e-12)

    def test_curve_shape(self):
        rng = np.random.default_rng(7)
        result = metrics.auroc(rng.normal(1, 1, 20), rng.normal(0, 1, 20))
        curve = result.curve
        assert curve[0] == (0.0, 0.0)
        assert curve[-1] == (1.0, 1.0)
        fprs = [p[0] for p in curve]
        tprs = [p[1] for p in curve]
        assert all(b >= a for a, b in zip(fprs, fprs[1:]))
        assert all(b >= a for a, b in zip(tprs, tprs[1:]))
        assert 0.0 <= result.auroc <= 1.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            metrics.auroc([], [1.0])


class TestHistogram:
    def test_single_repeated_value_one_bin(self):
        hist = metrics.histogram(np.full(20, 3.0), 5)
        assert int((hist.density > 0).sum()) == 1

    def test_uniform_grid_density_near_one(self):
        hist = metrics.histogram(np.linspace(0, 1, 10_001), 10, (0.0, 1.0))
        assert np.all(np.abs(hist.density - 1.0) < 0.01)

    def test_integrates_to_one(self):
        rng = np.random.default_rng(8)
        hist = metrics.histogram(rng.normal(size=500), 17)
        widths = np.diff(hist.edges)
        assert float(np.sum(hist.density * widths)) == pytest.approx(1.0, abs=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            metrics.histogram([], 5)


class FixedLogitModel:
    """Returns constant logits regardless of input."""

    def __init__(self, logits_row):
        self.row = np.asarray(logits_row, dtype=np.float64)

    def __call__(self, params, x):
        from ebmkit import autodiff as ad
        return ad.broadcast(ad.Tensor(self.row.reshape(1, -1)),
                            (x.shape[0], self.row.size))


class TestScoreDataset:
    def test_max_softmax_on_uniform_model(self):
        model = FixedLogitModel(np.zeros(4))
        scores = metrics.score_dataset(model, {}, np.zeros((10, 3)),
                                       en.ScoreKind.MAX_SOFTMAX)
        assert np.allclose(scores, 0.25, atol=1e-12)

    def test_approximate_mass_constant_for_linear_model(self):
        spec = nn.ModelSpec(layers=(nn.Dense(2, 1),), input_shape=(2,), classes=1)
        params = nn.Parameters({"layer0.w": np.array([[3.0], [4.0]]),
                                "layer0.b": np.zeros(1)})
        scores = metrics.score_dataset(spec, params,
                                       np.random.default_rng(0).normal(size=(7, 2)),
                                       en.ScoreKind.APPROXIMATE_MASS)
        assert np.allclose(scores, -5.0, atol=1e-12)

    def test_batch_size_independence(self):
        spec = nn.ModelSpec.mlp(2, [5], 3)
        params = nn.init(spec, 9)
        x = np.random.default_rng(9).normal(size=(23, 2))
        a = metrics.score_dataset(spec, params, x, en.ScoreKind.LOG_DENSITY_PROXY,
                                  batch_size=4)
        b = metrics.score_dataset(spec, params, x, en.ScoreKind.LOG_DENSITY_PROXY,
                                  batch_size=23)
        assert np.array_equal(a, b)

    def test_invalid_kind(self):
        with pytest.raises(ValueError):
            metrics.score_dataset(None, {}, np.zeros((1, 2)), "not-a-kind")


class TestCsvEmission:
    def test_ece_csv_roundtrip(self, tmp_path):
        rng = np.random.default_rng(10)
        conf = rng.uniform(0, 1, 40)
        report = metrics.ece(conf, rng.uniform(0, 1, 40) < conf, 8)
        path = tmp_path / "ece.csv"
        metrics.ece_to_csv(report, path)
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 8
        assert sum(int(r["count"]) for r in rows) == 40

    def test_roc_csv(self, tmp_path):
        result = metrics.auroc([1.0, 2.0], [0.0, 0.5])
        path = tmp_path / "roc.csv"
        metrics.roc_to_csv(result, path)
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        assert rows[0]["fpr"] == "0" and rows[-1]["tpr"] == "1"

    def test_histogram_csv(self, tmp_path):
        hist = metrics.histogram(np.random.default_rng(11).normal(size=100), 6)
        path = tmp_path / "hist.csv"
        metrics.histogram_to_csv(hist, path)
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        total = sum(float(r["density"]) * (float(r["bin_upper"]) - float(r["bin_lower"]))
                    for r in rows)
        assert total == pytest.approx(1.0, abs=1e-9)
