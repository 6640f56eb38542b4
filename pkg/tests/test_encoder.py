import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from midol import tensorcore as tc
from midol.encoder import (
    CHECKPOINT_MAGIC,
    MlpParams,
    MomentumSchedule,
    ema_update,
    load_checkpoint,
    mlp_forward,
    momentum_at,
    save_checkpoint,
)


def oracle_forward(p, x):
    out = np.zeros((x.shape[0], p.w2.shape[1]))
    for r in range(x.shape[0]):
        hidden = [max(sum(x[r, i] * p.w1[i, j] for i in range(x.shape[1])) + p.b1[0, j], 0.0) for j in range(p.w1.shape[1])]
        for k in range(p.w2.shape[1]):
            out[r, k] = sum(hidden[j] * p.w2[j, k] for j in range(len(hidden))) + p.b2[0, k]
    return out


class TestMlpParams:
    def test_default_shapes(self):
        p = MlpParams.init(np.random.default_rng(0))
        assert p.w1.shape == (32, 64) and p.w2.shape == (64, 16)
        assert p.b1.shape == (1, 64) and p.b2.shape == (1, 16)

    def test_init_bound(self):
        p = MlpParams.init(np.random.default_rng(1), 8, 4, 2)
        assert np.abs(p.w1).max() <= 1 / math.sqrt(8)
        assert np.abs(p.w2).max() <= 1 / math.sqrt(4)

    def test_rejects_nonconforming(self):
        with pytest.raises(ValueError):
            MlpParams(np.ones((3, 4)), np.zeros((1, 4)), np.ones((5, 2)), np.zeros((1, 2)))


class TestForward:
    def test_zero_params(self):
        p = MlpParams(np.zeros((3, 4)), np.zeros((1, 4)), np.zeros((4, 2)), np.zeros((1, 2)))
        np.testing.assert_array_equal(mlp_forward(p, np.ones((5, 3))).value, np.zeros((5, 2)))

    def test_identity_passthrough(self):
        eye = np.eye(3)
        p = MlpParams(eye, np.zeros((1, 3)), eye, np.zeros((1, 3)))
        x = np.abs(np.random.default_rng(2).standard_normal((4, 3)))
        np.testing.assert_array_equal(mlp_forward(p, x).value, x)

    def test_against_loop_oracle(self):
        rng = np.random.default_rng(3)
        p = MlpParams.init(rng, 5, 6, 3)
        p.b1 = rng.standard_normal((1, 6))
        p.b2 = rng.standard_normal((1, 3))
        x = rng.standard_normal((4, 5))
        np.testing.assert_allclose(mlp_forward(p, x).value, oracle_forward(p, x), atol=1e-14)
        np.testing.assert_allclose(mlp_forward(p, x, differentiable=False).value, oracle_forward(p, x), atol=1e-14)

    def test_width_mismatch(self):
        with pytest.raises(ValueError):
            mlp_forward(MlpParams.init(np.random.default_rng(0), 4, 3, 2), np.ones((2, 5)))

    def test_teacher_branch_has_no_gradient_path(self):
        rng = np.random.default_rng(4)
        p = MlpParams.init(rng, 4, 3, 2).map(lambda v: tc.Node(v, requires_grad=True))
        out = mlp_forward(p, rng.standard_normal((2, 4)), differentiable=False)
        assert out.is_leaf and not out.requires_grad
        tc.backward(tc.sum(tc.mul(out, out)))
        for leaf in p.named().values():
            assert np.all(leaf.grad == 0)


class TestEma:
    def test_momentum_one_keeps_teacher(self):
        t = {"w": np.array([1.0, 2.0])}
        out = ema_update(t, {"w": np.array([5.0, 5.0])}, 1.0)
        np.testing.assert_array_equal(out["w"], t["w"])

    def test_momentum_zero_copies_student(self):
        s = {"w": np.array([0.1, 0.3])}
        np.testing.assert_array_equal(ema_update({"w": np.zeros(2)}, s, 0.0)["w"], s["w"])

    def test_midpoint(self):
        assert ema_update({"w": np.array(2.0)}, {"w": np.array(4.0)}, 0.5)["w"] == 3.0

    @pytest.mark.parametrize("lam", [-0.1, 1.5])
    def test_bad_momentum(self, lam):
        with pytest.raises(ValueError):
            ema_update({"w": np.zeros(1)}, {"w": np.zeros(1)}, lam)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ema_update({"w": np.zeros(2)}, {"w": np.zeros(3)}, 0.5)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=2, max_size=20), st.floats(0.01, 0.99))
    def test_stays_in_convex_hull(self, student_values, lam):
        t = {"w": np.array(0.0)}
        seen = [0.0]
        for v in student_values:
            t = ema_update(t, {"w": np.array(v)}, lam)
            seen.append(v)
            assert min(seen) - 1e-12 <= float(t["w"]) <= max(seen) + 1e-12


class TestMomentumSchedule:
    def test_start_value(self):
        assert momentum_at(MomentumSchedule(0.996, 1.0, 100), 0) == pytest.approx(0.996, abs=1e-15)

    def test_end_value(self):
        assert momentum_at(MomentumSchedule(0.996, 1.0, 100), 100) == 1.0

    def test_midpoint(self):
        assert momentum_at(MomentumSchedule(0.996, 1.0, 100), 50) == pytest.approx(0.998, abs=1e-15)

    def test_monotone(self):
        s = MomentumSchedule(0.996, 1.0, 500)
        vals = [momentum_at(s, t) for t in range(501)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            momentum_at(MomentumSchedule(total_steps=10), 11)


class TestCheckpoint:
    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(5)
        arrays = {"a": rng.standard_normal((3, 4)), "b": np.array([1e-300, -0.1, 1 / 3])}
        path = save_checkpoint(tmp_path / "ck.midol", arrays, {"step": 7})
        with open(path, encoding="utf-8") as fh:
            assert fh.readline() == CHECKPOINT_MAGIC + "\n"
        loaded, meta = load_checkpoint(path)
        assert meta == {"step": 7}
        for k in arrays:
            np.testing.assert_array_equal(loaded[k], arrays[k])

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x"
        p.write_text("NOPE\n{}\n")
        with pytest.raises(ValueError, match="MIDOL1"):
            load_checkpoint(p)

    def test_no_temp_file_left(self, tmp_path):
        save_checkpoint(tmp_path / "ck", {"a": np.zeros(2)})
        assert sorted(p.name for p in tmp_path.iterdir()) == ["ck"]
