import itertools

import numpy as np
import pytest

from ebmkit import attacks
from ebmkit import nn
from ebmkit.attacks import AttackConfig, Norm


def two_class_linear():
    """Logits [w.x, -w.x] for w = (1, -1): decision boundary x1 = x2."""
    spec = nn.ModelSpec(layers=(nn.Dense(2, 2),), input_shape=(2,), classes=2)
    params = nn.Parameters({"layer0.w": np.array([[1.0, -1.0], [-1.0, 1.0]]),
                            "layer0.b": np.zeros(2)})
    return spec, params


class TestProject:
    def test_inside_ball_unchanged(self):
        delta = np.array([[0.1, -0.2]])
        assert np.array_equal(attacks.project(delta, Norm.L2, 1.0), delta)
        assert np.array_equal(attacks.project(delta, Norm.LINF, 0.5), delta)

    def test_l2_rescale(self):
        out = attacks.project(np.array([[3.0, 4.0]]), Norm.L2, 1.0)
        assert np.allclose(out, [[0.6, 0.8]], atol=1e-12)

    def test_linf_clamp(self):
        out = attacks.project(np.array([[2.0, -0.5]]), Norm.LINF, 1.0)
        assert np.array_equal(out, [[1.0, -0.5]])

    def test_rowwise_l2(self):
        delta = np.array([[3.0, 4.0], [0.1, 0.0]])
        out = attacks.project(delta, Norm.L2, 1.0)
        assert np.allclose(np.linalg.norm(out[0]), 1.0)
        assert np.array_equal(out[1], delta[1])


class TestPgd:
    def test_epsilon_zero_identity(self):
        spec, params = two_class_linear()
        x = np.array([[0.3, -0.1]])
        cfg = AttackConfig(norm=Norm.LINF, epsilon=0.0)
        out = attacks.pgd(spec, params, x, np.array([0]), cfg)
        assert np.array_equal(out, x)

    def test_single_step_linf_hand_computation(self):
        # one sign-step of size min(step, eps) from a linear model
        spec, params = two_class_linear()
        x = np.array([[0.2, 0.1]])
        y = np.array([0])
        cfg = AttackConfig(norm=Norm.LINF, epsilon=0.05, n_steps=1,
                           step_size=0.3, random_start=False)
        out = attacks.pgd(spec, params, x, y, cfg)
        # CE for label 0 increases along -(logit0 - logit1) direction:
        # grad_x CE = -(1 - p0) * 2w with w = (1, -1) -> sign = (-1, +1)
        want = np.clip(x + 0.05 * np.array([[-1.0, 1.0]]), -1.0, 1.0)
        assert np.allclose(out, want, atol=1e-12)

    def test_budget_postcondition_linf(self):
        rng = np.random.default_rng(0)
        spec = nn.ModelSpec.mlp(2, [8], 2)
        params = nn.init(spec, 0)
        x = rng.uniform(-1, 1, size=(20, 2))
        y = rng.integers(0, 2, size=20)
        cfg = AttackConfig(norm=Norm.LINF, epsilon=0.1, n_steps=10)
        out = attacks.pgd(spec, params, x, y, cfg, rng=1)
        assert np.max(np.abs(out - x)) <= 0.1
        assert np.all(out >= -1.0) and np.all(out <= 1.0)

    def test_budget_postcondition_l2(self):
        rng = np.random.default_rng(1)
        spec = nn.ModelSpec.mlp(3, [8], 3)
        params = nn.init(spec, 1)
        x = rng.uniform(-1, 1, size=(20, 3))
        y = rng.integers(0, 3, size=20)
        cfg = AttackConfig(norm=Norm.L2, epsilon=0.5, n_steps=10)
        out = attacks.pgd(spec, params, x, y, cfg, rng=2)
        assert np.all(np.linalg.norm(out - x, axis=1) <= 0.5 + 1e-9)

    def test_deterministic_without_random_start(self):
        spec, params = two_class_linear()
        x = np.array([[0.2, -0.3], [0.1, 0.4]])
        y = np.array([0, 1])
        cfg = AttackConfig(norm=Norm.L2, epsilon=0.2, n_steps=5, random_start=False)
        a = attacks.pgd(spec, params, x, y, cfg, rng=0)
        b = attacks.pgd(spec, params, x, y, cfg, rng=99)
        assert np.array_equal(a, b)

    def test_linear_model_one_step_solves_inner_max(self):
        # brute-force corners of the L-inf ball confirm the sign step is optimal
        spec, params = two_class_linear()
        x = np.array([[0.05, 0.0]])
        y = np.array([0])
        eps = 0.1
        cfg = AttackConfig(norm=Norm.LINF, epsilon=eps, n_steps=1,
                           step_size=eps, random_start=False)
        adv = attacks.pgd(spec, params, x, y, cfg)

        def margin(pt):
            logits = nn.forward(spec, params, pt.reshape(1, -1)).value[0]
            return logits[0] - logits[1]   # attack minimizes the true-class margin

        corners = [x[0] + eps * np.array(s) for s in itertools.product((-1, 1), repeat=2)]
        best = min(margin(c) for c in corners)
        assert margin(adv[0]) == pytest.approx(best, abs=1e-12)


class TestAttackSweep:
    def test_epsilon_zero_matches_clean(self):
        spec, params = two_class_linear()
        rng = np.random.default_rng(3)
        x = rng.uniform(-1, 1, size=(30, 2))
        y = (x[:, 0] > x[:, 1]).astype(np.int64)
        report = attacks.attack_sweep(spec, params, (x, y), Norm.LINF, [0.0])
        assert report.adversarial_accuracy[0] == report.clean_accuracy

    def test_untrained_model_near_chance(self):
        rng = np.random.default_rng(4)
        spec = nn.ModelSpec.mlp(2, [8], 2)
        params = nn.init(spec, 1234)
        x = rng.uniform(-1, 1, size=(400, 2))
        y = rng.integers(0, 2, size=400)
        report = attacks.attack_sweep(spec, params, (x, y), Norm.L2, [0.1],
                                      config=AttackConfig(norm=Norm.L2, n_steps=5))
        # labels are independent of the model: accuracy ~ Binomial(400, 1/2)
        assert abs(report.adversarial_accuracy[0] - 0.5) < 0.1

    def test_accuracy_non_increasing_on_separable_task(self):
        spec, params = two_class_linear()
        rng = np.random.default_rng(5)
        x = rng.uniform(-1, 1, size=(100, 2))
        y = (x[:, 0] > x[:, 1]).astype(np.int64)
        report = attacks.attack_sweep(spec, params, (x, y), Norm.L2,
                                      [0.0, 0.1, 0.3, 0.6], seed=7)
        accs = report.adversarial_accuracy
        assert all(b <= a + 0.01 for a, b in zip(accs, accs[1:]))

    def test_unsorted_epsilons_rejected(self):
        spec, params = two_class_linear()
        with pytest.raises(ValueError):
            attacks.attack_sweep(spec, params, (np.zeros((2, 2)), np.zeros(2, dtype=int)),
                                 Norm.L2, [0.3, 0.1])

    def test_csv_emission(self, tmp_path):
        spec, params = two_class_linear()
        rng = np.random.default_rng(6)
        x = rng.uniform(-1, 1, size=(20, 2))
        y = (x[:, 0] > x[:, 1]).astype(np.int64)
        report = attacks.attack_sweep(spec, params, (x, y), Norm.LINF, [0.0, 0.2])
        path = tmp_path / "attack.csv"
        attacks.attack_report_to_csv(report, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "norm,epsilon,clean_accuracy,adversarial_accuracy,n_examples"
        assert len(lines) == 3
