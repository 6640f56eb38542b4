import math

import numpy as np
import pytest

from midol import tensorcore as tc
from midol.losses import (
    LOG_FLOOR,
    aggregate_contrastive_loss,
    intra_contrastive_loss_expert,
    routing_consistency_loss,
    total_loss,
)


def route_oracle(a_s, a_t, m):
    b = a_s.shape[0] // m
    total = 0.0
    for img in range(b):
        for j in range(m):
            for g in range(m):
                if g == j:
                    continue
                for i in range(a_s.shape[1]):
                    total -= a_s[img * m + j, i] * math.log(max(a_t[img * m + g, i], LOG_FLOOR))
    return total / (b * m * (m - 1))


def cosine(u, v):
    return float(u @ v / (math.sqrt(u @ u) * math.sqrt(v @ v)))


def cst_oracle(x, y, m, tau):
    b = x.shape[0] // m
    total = 0.0
    for img in range(b):
        for j in range(m):
            xj = x[img * m + j]
            num = sum(math.exp(cosine(xj, y[img * m + k]) / tau) for k in range(m) if k != j)
            den = sum(math.exp(cosine(xj, y[beta * m + k]) / tau) for beta in range(b) for k in range(m) if k != j)
            total -= math.log(num / den)
    return total / (b * m)


def probs(rng, rows, n):
    return rng.dirichlet(np.ones(n), size=rows)


class TestRoutingConsistency:
    def test_against_loop_oracle(self):
        rng = np.random.default_rng(0)
        a_s, a_t = probs(rng, 12, 3), probs(rng, 12, 3)
        got = routing_consistency_loss(a_s, a_t, 4).item()
        assert got == pytest.approx(route_oracle(a_s, a_t, 4), abs=1e-13)

    def test_one_hot_agreement_is_zero(self):
        a = np.eye(2)[[0, 0, 1, 1]]
        assert routing_consistency_loss(a, a, 2).item() == pytest.approx(0.0, abs=1e-15)

    def test_disagreement_hits_log_floor(self):
        s = np.array([[1.0, 0.0], [1.0, 0.0]])
        t = np.array([[0.0, 1.0], [0.0, 1.0]])
        assert routing_consistency_loss(s, t, 2).item() == pytest.approx(-math.log(LOG_FLOOR), rel=1e-12)

    def test_uniform_teacher_gives_log_n(self):
        rng = np.random.default_rng(1)
        got = routing_consistency_loss(probs(rng, 8, 4), np.full((8, 4), 0.25), 4).item()
        assert got == pytest.approx(math.log(4), abs=1e-14)

    def test_teacher_gets_no_gradient(self):
        rng = np.random.default_rng(2)
        s = tc.Node(probs(rng, 4, 2), requires_grad=True)
        t = tc.Node(probs(rng, 4, 2), requires_grad=True)
        tc.backward(routing_consistency_loss(s, t, 2))
        assert np.all(t.grad == 0) and np.any(s.grad != 0)

    def test_rejects_single_view(self):
        with pytest.raises(ValueError):
            routing_consistency_loss(np.ones((2, 2)) / 2, np.ones((2, 2)) / 2, 1)

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            routing_consistency_loss(np.ones((4, 2)) / 2, np.ones((4, 3)) / 3, 2)


class TestIntraContrastive:
    def test_against_loop_oracle(self):
        rng = np.random.default_rng(3)
        x, y = rng.standard_normal((12, 5)), rng.standard_normal((12, 5))
        got = intra_contrastive_loss_expert(x, y, 4, tau=0.04).item()
        assert got == pytest.approx(cst_oracle(x, y, 4, 0.04), rel=1e-11)

    def test_single_image_is_zero(self):
        rng = np.random.default_rng(4)
        x, y = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
        assert intra_contrastive_loss_expert(x, y, 3).item() == pytest.approx(0.0, abs=1e-12)

    def test_identical_directions_give_log_images(self):
        # every similarity equal -> log(#images)
        x = np.ones((10, 3))
        assert intra_contrastive_loss_expert(x, x, 2).item() == pytest.approx(math.log(5), abs=1e-12)

    def test_separated_images_near_zero(self):
        y = np.repeat(np.eye(4), 2, axis=0)
        assert intra_contrastive_loss_expert(y, y, 2, tau=0.04).item() < 1e-9

    def test_scale_invariant_inputs(self):
        rng = np.random.default_rng(5)
        x, y = rng.standard_normal((8, 4)), rng.standard_normal((8, 4))
        a = intra_contrastive_loss_expert(x, y, 2).item()
        b = intra_contrastive_loss_expert(3.0 * x, 0.5 * y, 2).item()
        assert a == pytest.approx(b, rel=1e-12)

    def test_teacher_side_is_stop_gradient(self):
        rng = np.random.default_rng(6)
        x = tc.Node(rng.standard_normal((6, 3)), requires_grad=True)
        y = tc.Node(rng.standard_normal((6, 3)), requires_grad=True)
        tc.backward(intra_contrastive_loss_expert(x, y, 3))
        assert np.all(y.grad == 0) and np.any(x.grad != 0)

    def test_bad_tau(self):
        with pytest.raises(ValueError):
            intra_contrastive_loss_expert(np.ones((4, 2)), np.ones((4, 2)), 2, tau=0.0)

    def test_rows_not_multiple_of_views(self):
        with pytest.raises(ValueError):
            intra_contrastive_loss_expert(np.ones((5, 2)), np.ones((5, 2)), 2)


class TestAggregate:
    def test_mean_over_all_experts(self):
        out = aggregate_contrastive_loss([tc.Node(1.0), None, tc.Node(2.0)], 3)
        assert out.item() == pytest.approx(1.0, abs=1e-15)

    def test_all_empty(self):
        assert aggregate_contrastive_loss([None, None], 2).item() == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            aggregate_contrastive_loss([tc.Node(1.0)], 2)


class TestTotal:
    def test_additive(self):
        out = total_loss(0.25, 1.5)
        assert out.total == 1.75
        assert out.as_record(3) == {"step": 3, "l_route": 0.25, "l_cst": 1.5, "total": 1.75}

    def test_nonfinite(self):
        with pytest.raises(FloatingPointError):
            total_loss(float("nan"), 0.0)
