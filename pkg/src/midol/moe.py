"""Mixture-of-experts projector: softmax / Sinkhorn routers, top-1 experts."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from midol import tensorcore as tc
from midol.encoder import MlpParams, init_uniform, mlp_forward

STUDENT = "student-softmax"
TEACHER = "teacher-sinkhorn"

# exp(-700) is still a normal double; keeps every Sinkhorn input strictly positive
_MIN_EXPONENT = -700.0


@dataclass
class MoeParams:
    """Router, ``N`` expert FFNs (E -> P -> E) and a shared projection E -> E_out.

    A single-expert instance is the plain projection head used when the
    mixture is ablated away; routing functions require ``N >= 2``.
    """

    router: Any
    experts: list[MlpParams]
    proj_w: Any
    proj_b: Any = field(default=None)

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        d_in: int = 16,
        n_experts: int = 5,
        expert_hidden: int = 32,
        d_out: int = 16,
    ) -> "MoeParams":
        router = init_uniform(rng, d_in, (d_in, n_experts))
        experts = [MlpParams.init(rng, d_in, expert_hidden, d_in) for _ in range(n_experts)]
        return cls(
            router=router,
            experts=experts,
            proj_w=init_uniform(rng, d_in, (d_in, d_out)),
            proj_b=np.zeros((1, d_out)),
        )

    def __post_init__(self):
        if self.proj_b is None:
            self.proj_b = np.zeros((1, self.proj_w.shape[1]))
        d_in, n = self.router.shape
        if n != len(self.experts) or n < 1:
            raise ValueError(f"router has {n} columns for {len(self.experts)} experts")
        for e in self.experts:
            if e.d_in != d_in or e.d_out != d_in:
                raise ValueError("expert widths must match the router input width")
        if tuple(self.proj_w.shape)[0] != d_in or tuple(self.proj_b.shape) != (1, self.proj_w.shape[1]):
            raise ValueError("projection shapes do not conform")

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @property
    def d_in(self) -> int:
        return self.router.shape[0]

    def named(self) -> dict[str, Any]:
        out = {"router": self.router, "proj_w": self.proj_w, "proj_b": self.proj_b}
        for i, e in enumerate(self.experts):
            out.update({f"experts.{i}.{k}": v for k, v in e.named().items()})
        return out

    @classmethod
    def from_named(cls, named: dict[str, Any]) -> "MoeParams":
        n = 1 + max(int(k.split(".")[1]) for k in named if k.startswith("experts."))
        experts = [
            MlpParams(**{k: named[f"experts.{i}.{k}"] for k in ("w1", "b1", "w2", "b2")}) for i in range(n)
        ]
        return cls(router=named["router"], experts=experts, proj_w=named["proj_w"], proj_b=named["proj_b"])

    def map(self, fn: Callable[[Any], Any]) -> "MoeParams":
        return MoeParams.from_named({k: fn(v) for k, v in self.named().items()})


@dataclass
class RoutingMatrix:
    """batch x N routing scores; ``node`` carries the graph for student routing."""

    scores: np.ndarray
    mode: str
    node: tc.Node | None = None

    def validate(self, atol: float | None = None) -> None:
        s = self.scores
        if np.any(s < 0):
            raise ValueError("routing scores must be nonnegative")
        if self.mode == STUDENT:
            np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=atol or 1e-12, rtol=0)
        elif self.mode == TEACHER:
            tol = atol or 1e-6
            np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=tol, rtol=0)
            np.testing.assert_allclose(s.sum(axis=0), s.shape[0] / s.shape[1], atol=tol, rtol=0)
        else:
            raise ValueError(f"unknown routing mode {self.mode!r}")

    def selections(self) -> np.ndarray:
        return np.array([select_expert(row) for row in self.scores], dtype=int)


def _router_logits(params: MoeParams, features):
    if params.n_experts < 2:
        raise ValueError("routing needs at least two experts")
    width = features.shape[1]
    if width != params.d_in:
        raise ValueError(f"router expects width {params.d_in}, got {width}")
    return tc.matmul(features, params.router)


def route_student(params: MoeParams, features) -> RoutingMatrix:
    """Softmax over router logits; differentiable w.r.t. router and features."""
    probs = tc.softmax(_router_logits(params, tc.as_node(features)))
    return RoutingMatrix(probs.value, STUDENT, probs)


def sinkhorn_knopp(scores, iters: int = 3, row_target: float = 1.0, col_target: float | None = None) -> np.ndarray:
    """Balance a positive batch x N matrix.

    Each round rescales columns to ``col_target`` (default batch/N) and then
    rows to ``row_target``; the result always ends on the row step.
    """
    q = np.array(scores, dtype=np.float64)
    if q.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {q.shape}")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if not np.all(q > 0) or not np.all(np.isfinite(q)):
        raise ValueError("Sinkhorn-Knopp needs strictly positive finite entries")
    batch, n = q.shape
    if batch < n:
        raise ValueError(f"batch {batch} smaller than expert count {n}: column targets unattainable")
    if col_target is None:
        col_target = batch / n
    for _ in range(iters):
        q *= col_target / q.sum(axis=0, keepdims=True)
        q *= row_target / q.sum(axis=1, keepdims=True)
    return q


def route_teacher(params: MoeParams, features, eps: float = 0.05, iters: int = 3) -> RoutingMatrix:
    """Sinkhorn-balanced routing from ``exp(logits / eps)``; outside the graph."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    f = features.value if isinstance(features, tc.Node) else np.asarray(features, dtype=np.float64)
    router = params.router.value if isinstance(params.router, tc.Node) else params.router
    if params.n_experts < 2:
        raise ValueError("routing needs at least two experts")
    if f.shape[1] != params.d_in:
        raise ValueError(f"router expects width {params.d_in}, got {f.shape[1]}")
    z = (f @ router) / eps
    # a global shift is a uniform rescaling, which Sinkhorn ignores
    z = np.maximum(z - z.max(), _MIN_EXPONENT)
    return RoutingMatrix(sinkhorn_knopp(np.exp(z), iters), TEACHER)


def select_expert(routing_row) -> int:
    """Top-1 expert; ties go to the lowest index."""
    return int(np.argmax(np.asarray(routing_row)))


def expert_forward(params: MoeParams, features, index: int) -> tc.Node:
    """``l2_normalize(proj(expert_index(features)))``.

    Only the chosen expert appears in the graph, so the others get no gradient.
    """
    if not 0 <= index < params.n_experts:
        raise ValueError(f"expert index {index} out of range for {params.n_experts} experts")
    h = mlp_forward(params.experts[index], features)
    out = tc.add(tc.matmul(h, params.proj_w), params.proj_b)
    return tc.l2_normalize_rows(out)
