import math

import numpy as np
import pytest
import torch

from dasgan.data import IGNORE
from dasgan.errors import InvalidInputError, TrainingDivergenceError
from dasgan.losses import (
    LossReport,
    LossWeights,
    adversarial_loss_d,
    adversarial_loss_g,
    cross_entropy_term,
    cycle_loss,
    segmentation_loss,
    total_loss,
)

EPS = 1e-7


# ---------------------------------------------------------------------------
# Scalar-loop oracles (pure python floats, no tensor ops)
# ---------------------------------------------------------------------------

def _clamp(x):
    return min(max(x, EPS), 1.0 - EPS)


def adv_d_oracle(real, fake):
    r = [math.log(_clamp(v)) for v in np.asarray(real).ravel()]
    f = [math.log(_clamp(1.0 - v)) for v in np.asarray(fake).ravel()]
    return -(sum(r) / len(r) + sum(f) / len(f))


def adv_g_oracle(fake):
    f = [math.log(_clamp(v)) for v in np.asarray(fake).ravel()]
    return -sum(f) / len(f)


def cycle_oracle(x_a, cyc_a, x_b, cyc_b):
    total = 0.0
    for orig, cyc in ((x_a, cyc_a), (x_b, cyc_b)):
        diffs = [abs(a - b) for a, b in zip(np.asarray(orig).ravel(), np.asarray(cyc).ravel())]
        total += sum(diffs) / len(diffs)
    return total


def ce_oracle(labels, probs):
    lab = np.asarray(labels).ravel()
    p = np.asarray(probs).reshape(-1, np.asarray(probs).shape[-1])
    terms = []
    for l, row in zip(lab, p):
        if l == IGNORE:
            continue
        terms.append(-math.log(max(row[l], EPS)))
    return sum(terms) / len(terms) if terms else 0.0


def _random_probs(rng, shape):
    raw = rng.random(shape + (3,)) + 0.01
    return raw / raw.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Adversarial losses
# ---------------------------------------------------------------------------

class TestAdversarial:
    def test_uninformative_discriminator(self):
        real = np.full((2, 3), 0.5)
        fake = np.full((2, 3), 0.5)
        assert float(adversarial_loss_d(real, fake)) == pytest.approx(2 * math.log(2), abs=1e-9)

    def test_perfect_discriminator_clamped(self):
        loss = float(adversarial_loss_d(np.ones((2, 2)), np.zeros((2, 2))))
        assert loss == pytest.approx(0.0, abs=1e-5)

    def test_generator_at_half(self):
        assert float(adversarial_loss_g(np.full(4, 0.5))) == pytest.approx(math.log(2), abs=1e-9)

    def test_generator_optimum(self):
        assert float(adversarial_loss_g(np.ones(4))) == pytest.approx(0.0, abs=1e-5)

    def test_matches_oracle_on_random(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            real = rng.uniform(0.001, 0.999, size=(2, 4, 4))
            fake = rng.uniform(0.001, 0.999, size=(2, 4, 4))
            assert float(adversarial_loss_d(real, fake)) == pytest.approx(
                adv_d_oracle(real, fake), abs=1e-9)
            assert float(adversarial_loss_g(fake)) == pytest.approx(
                adv_g_oracle(fake), abs=1e-9)


class TestCycle:
    def test_identity_is_zero(self):
        x = np.random.default_rng(1).random((2, 4, 4, 3))
        y = np.random.default_rng(2).random((2, 4, 4, 3))
        assert float(cycle_loss(x, x, y, y)) == 0.0

    def test_stated_example(self):
        x_a = np.array([0.2, 0.8])
        cyc_a = np.array([0.1, 0.6])
        zero = np.zeros(2)
        assert float(cycle_loss(x_a, cyc_a, zero, zero)) == pytest.approx(0.15, abs=1e-9)

    def test_shape_mismatch_raises(self):
        with pytest.raises(InvalidInputError):
            cycle_loss(np.zeros(3), np.zeros(4), np.zeros(2), np.zeros(2))

    def test_matches_oracle_on_random(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            args = [rng.random((2, 4, 4, 3)) for _ in range(4)]
            assert float(cycle_loss(*args)) == pytest.approx(cycle_oracle(*args), abs=1e-9)


class TestSegmentation:
    def test_single_pixel(self):
        labels = np.array([[1]])
        probs = np.array([[[0.25, 0.25, 0.5]]])
        got = float(cross_entropy_term(labels, probs))
        assert got == pytest.approx(-math.log(0.25), abs=1e-9)

    def test_all_ignored_is_zero(self):
        labels = np.full((3, 3), IGNORE)
        probs = _random_probs(np.random.default_rng(4), (3, 3))
        assert float(segmentation_loss(labels, probs, labels, probs)) == 0.0

    def test_matches_oracle_on_random(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            la = rng.choice([0, 1, 2, IGNORE], size=(2, 4, 4))
            lb = rng.choice([0, 1, 2, IGNORE], size=(2, 4, 4))
            pa = _random_probs(rng, (2, 4, 4))
            pb = _random_probs(rng, (2, 4, 4))
            got = float(segmentation_loss(la, pa, lb, pb))
            assert got == pytest.approx(ce_oracle(la, pa) + ce_oracle(lb, pb), abs=1e-9)

    def test_invariant_to_added_ignore_pixels(self):
        rng = np.random.default_rng(6)
        labels = rng.choice([0, 1, 2], size=(4, 4))
        probs = _random_probs(rng, (4, 4))
        base = float(cross_entropy_term(labels, probs))
        padded_labels = np.concatenate([labels, np.full((2, 4), IGNORE)])
        padded_probs = np.concatenate([probs, _random_probs(rng, (2, 4))])
        assert float(cross_entropy_term(padded_labels, padded_probs)) == pytest.approx(
            base, abs=1e-12)


class TestTotal:
    def test_stated_weights(self):
        w = LossWeights()
        assert float(total_loss(1.0, 1.0, 0.5, 2.0, w)) == pytest.approx(9.0)

    def test_zero_case(self):
        assert float(total_loss(0.0, 0.0, 0.0, 0.0, LossWeights())) == 0.0

    def test_weight_ablation(self):
        w = LossWeights(lambda_cycle=0.0, lambda_seg=0.0)
        assert float(total_loss(0.7, 0.9, 5.0, 3.0, w)) == pytest.approx(1.6)

    def test_non_finite_raises(self):
        with pytest.raises(TrainingDivergenceError):
            total_loss(float("nan"), 0.0, 0.0, 0.0, LossWeights())

    def test_report_invariant(self):
        w = LossWeights()
        report = LossReport.from_components(0.3, 0.4, 0.1, 0.2, w)
        assert report.total == pytest.approx(
            report.gan_ab + report.gan_ba + 10 * report.cycle + report.seg, abs=1e-6)

    def test_weights_must_be_non_negative(self):
        with pytest.raises(InvalidInputError):
            LossWeights(lambda_cycle=-1.0)


class TestNonNegativity:
    def test_losses_non_negative_and_finite(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            scores = rng.uniform(0, 1, size=(3, 3))
            assert 0.0 <= float(adversarial_loss_d(scores, scores)) < float("inf")
            assert 0.0 <= float(adversarial_loss_g(scores)) < float("inf")
            labels = rng.choice([0, 1, 2, IGNORE], size=(3, 3))
            probs = _random_probs(rng, (3, 3))
            assert 0.0 <= float(cross_entropy_term(labels, probs)) < float("inf")


class TestGradientFlow:
    def test_losses_differentiable(self):
        torch.manual_seed(0)
        scores = torch.rand(2, 3, requires_grad=True)
        loss = adversarial_loss_g(scores * 0.8 + 0.1)
        loss.backward()
        assert scores.grad is not None and torch.isfinite(scores.grad).all()
