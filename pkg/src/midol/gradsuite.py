"""Finite-difference sweep over every differentiable primitive and both losses.

Each case maps a seeded random point to a scalar through one primitive (or
a full loss) and compares the reverse-mode gradient with central
differences. Non-scalar outputs are reduced with a fixed random weighting
so that every output entry contributes to the checked gradient.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from midol import tensorcore as tc
from midol.losses import aggregate_contrastive_loss, intra_contrastive_loss_expert, routing_consistency_loss
from midol.moe import MoeParams, expert_forward, route_student
from midol.seeding import stream

TOLERANCE = 1e-5
DEFAULT_POINTS = 100


@dataclass(frozen=True)
class Case:
    name: str
    shape: tuple[int, ...]
    build: Callable[[np.random.Generator], Callable[[tc.Node], tc.Node]]
    sample: Callable[[np.random.Generator, tuple[int, ...]], np.ndarray]


def _away_from_zero(rng, shape):
    # keeps relu and the norm floor away from their kinks
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 1.5, size=shape)


def _positive(rng, shape):
    return rng.uniform(0.2, 2.0, size=shape)


def _weighted(out_fn, rng, out_shape):
    w = rng.standard_normal(out_shape)
    return lambda x: tc.sum(tc.mul(out_fn(x), w))


def _build_matmul(rng):
    b = rng.standard_normal((4, 2))
    return _weighted(lambda x: tc.matmul(x, b), rng, (3, 2))


def _build_matmul_right(rng):
    a = rng.standard_normal((2, 3))
    return _weighted(lambda x: tc.matmul(a, x), rng, (2, 4))


def _build_add(rng):
    other = rng.standard_normal((3, 4))
    return _weighted(lambda x: tc.add(other, x), rng, (3, 4))


def _build_mul(rng):
    other = rng.standard_normal((3, 4))
    return _weighted(lambda x: tc.mul(tc.mul(x, other), x), rng, (3, 4))


def _build_scale(rng):
    c = float(rng.uniform(-2, 2))
    return _weighted(lambda x: tc.scale(x, c), rng, (3, 4))


def _build_sub(rng):
    other = rng.standard_normal((3, 4))
    return _weighted(lambda x: tc.sub(other, tc.mul(x, x)), rng, (3, 4))


def _build_elementwise(op):
    def build(rng):
        return _weighted(op, rng, (3, 4))

    return build


def _build_sum_axis(rng):
    return _weighted(lambda x: tc.sum(tc.mul(x, x), axis=1), rng, (3, 1))


def _build_mean(rng):
    return lambda x: tc.mean(tc.mul(x, x))


def _build_transpose(rng):
    return _weighted(tc.transpose, rng, (4, 3))


def _build_take_rows(rng):
    index = np.array([2, 0, 2, 1])
    return _weighted(lambda x: tc.take_rows(x, index), rng, (4, 4))


def _build_normalize(rng):
    return _weighted(tc.l2_normalize_rows, rng, (3, 4))


def _build_cosine(rng):
    other = rng.standard_normal((2, 4))
    return _weighted(lambda x: tc.cosine_similarity_matrix(x, other), rng, (3, 2))


def _build_softmax(rng):
    temp = float(rng.uniform(0.5, 2.0))
    return _weighted(lambda x: tc.softmax(x, temp), rng, (3, 4))


# 2 images x 2 views, 2 experts, 3-wide features


def _micro_moe(rng) -> MoeParams:
    return MoeParams.init(rng, d_in=3, n_experts=2, expert_hidden=5, d_out=4)


def _build_route_loss(rng):
    params = _micro_moe(rng)
    teacher = rng.dirichlet(np.ones(2), size=4)

    def f(h):
        return routing_consistency_loss(route_student(params, h).node, teacher, 2)

    return f


def _build_cst_loss(rng):
    params = _micro_moe(rng)
    y = rng.standard_normal((4, 4))

    def f(h):
        # both images in expert 0, expert 1 empty
        x = expert_forward(params, h, 0)
        return aggregate_contrastive_loss([intra_contrastive_loss_expert(x, y, 2), None], 2)

    return f


def _sample_features(rng, shape):
    return rng.uniform(-1.5, 1.5, size=shape)


CASES: tuple[Case, ...] = (
    Case("matmul", (3, 4), _build_matmul, lambda r, s: r.standard_normal(s)),
    Case("matmul_right", (3, 4), _build_matmul_right, lambda r, s: r.standard_normal(s)),
    Case("add", (3, 4), _build_add, lambda r, s: r.standard_normal(s)),
    Case("add_broadcast", (1, 4), _build_add, lambda r, s: r.standard_normal(s)),
    Case("sub", (3, 4), _build_sub, lambda r, s: r.standard_normal(s)),
    Case("mul", (3, 4), _build_mul, lambda r, s: r.standard_normal(s)),
    Case("scale", (3, 4), _build_scale, lambda r, s: r.standard_normal(s)),
    Case("exp", (3, 4), _build_elementwise(tc.exp), lambda r, s: r.standard_normal(s)),
    Case("log", (3, 4), _build_elementwise(tc.log), _positive),
    Case("relu", (3, 4), _build_elementwise(tc.relu), _away_from_zero),
    Case("sum", (3, 4), _build_sum_axis, lambda r, s: r.standard_normal(s)),
    Case("mean", (3, 4), _build_mean, lambda r, s: r.standard_normal(s)),
    Case("transpose", (3, 4), _build_transpose, lambda r, s: r.standard_normal(s)),
    Case("take_rows", (3, 4), _build_take_rows, lambda r, s: r.standard_normal(s)),
    Case("l2_normalize_rows", (3, 4), _build_normalize, _away_from_zero),
    Case("cosine_similarity_matrix", (3, 4), _build_cosine, _away_from_zero),
    Case("softmax", (3, 4), _build_softmax, lambda r, s: 2 * r.standard_normal(s)),
    Case("l_route", (4, 3), _build_route_loss, _sample_features),
    Case("l_cst", (4, 3), _build_cst_loss, _sample_features),
)


def check_case(case: Case, seed: int = 0, n_points: int = DEFAULT_POINTS, eps: float = 1e-6) -> float:
    """Worst relative error of ``case`` over ``n_points`` seeded points."""
    worst = 0.0
    for k in range(n_points):
        rng = stream(seed, "gradcheck", zlib.crc32(case.name.encode()), k)
        f = case.build(rng)
        worst = max(worst, tc.grad_check(f, case.sample(rng, case.shape), eps))
    return worst


def run_suite(seed: int = 0, n_points: int = DEFAULT_POINTS, tolerance: float = TOLERANCE) -> list[dict]:
    """One ``{op, max_rel_error, pass}`` row per case."""
    rows = []
    for case in CASES:
        err = check_case(case, seed, n_points)
        rows.append({"op": case.name, "max_rel_error": float(err), "pass": bool(err < tolerance)})
    return rows
