"""Exact entropies and mutual informations of a discrete (X, Y, Z) table.

All quantities are in nats. ``0 log 0`` is taken as 0. The three-way
interaction term is evaluated directly from its log-ratio definition and
checked against its bivariate and entropy-based rewrites.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

MAX_CARDINALITY = 64
_AXES = {"x": 0, "y": 1, "z": 2}


@dataclass(frozen=True)
class JointTable:
    """Joint distribution p(x, y, z) as a 3-d array."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 3:
            raise ValueError(f"joint table must be 3-dimensional, got shape {p.shape}")
        if any(n < 1 or n > MAX_CARDINALITY for n in p.shape):
            raise ValueError(f"cardinalities must lie in [1, {MAX_CARDINALITY}], got {p.shape}")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValueError("joint table has negative or non-finite entries")
        if abs(p.sum() - 1.0) > 1e-12:
            raise ValueError(f"joint table sums to {p.sum()!r}, not 1")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.probs.shape

    @classmethod
    def from_counts(cls, counts) -> "JointTable":
        c = np.asarray(counts, dtype=np.float64)
        return cls(c / c.sum())


@dataclass(frozen=True)
class DecompositionReport:
    i_xy: float
    i_xz: float
    i_x_yz: float
    i_xyz: float
    h_x: float
    h_x_given_y: float
    h_x_given_z: float
    h_x_given_yz: float
    residual_eq5: float
    residual_eq7: float
    residual_eq8: float

    @property
    def max_abs_residual(self) -> float:
        return max(abs(self.residual_eq5), abs(self.residual_eq7), abs(self.residual_eq8))


def _axes(variables) -> tuple[int, ...]:
    if isinstance(variables, str):
        variables = tuple(variables)
    elif isinstance(variables, int):
        variables = (variables,)
    out = []
    for v in variables:
        if isinstance(v, str):
            try:
                v = _AXES[v.lower()]
            except KeyError:
                raise ValueError(f"unknown variable {v!r}; use x, y or z") from None
        if v not in (0, 1, 2):
            raise ValueError(f"axis {v} out of range")
        out.append(int(v))
    return tuple(sorted(set(out)))


def marginalize(table: JointTable, keep: Iterable) -> np.ndarray:
    """Sum out every variable not in ``keep``; kept axes stay in x, y, z order."""
    kept = _axes(keep)
    if not kept:
        raise ValueError("keep-set is empty")
    dropped = tuple(a for a in range(3) if a not in kept)
    return table.probs.sum(axis=dropped) if dropped else np.array(table.probs)


def entropy(dist) -> float:
    """Shannon entropy ``-sum p log p`` of any-shaped probability array."""
    p = np.asarray(dist, dtype=np.float64).ravel()
    if np.any(p < 0):
        raise ValueError("probability array has negative entries")
    nz = p[p > 0]
    return float(max(-(nz * np.log(nz)).sum(), 0.0))


def _joint_entropy(table: JointTable, variables: tuple[int, ...]) -> float:
    return entropy(marginalize(table, variables)) if variables else 0.0


def conditional_entropy(table: JointTable, target, given=()) -> float:
    """H(target | given) = H(target, given) - H(given)."""
    t = _axes(target)
    g = _axes(given) if given != () else ()
    if set(t) & set(g):
        raise ValueError("target variable appears in the conditioning set")
    return _joint_entropy(table, tuple(sorted(t + g))) - _joint_entropy(table, g)


def _mi_unclamped(table: JointTable, a, b) -> float:
    return conditional_entropy(table, a) - conditional_entropy(table, a, b)


def mutual_information(table: JointTable, a, b) -> float:
    """I(a; b) for a single variable ``a`` and a variable or pair ``b``."""
    if set(_axes(a)) & set(_axes(b)):
        raise ValueError("mutual information needs disjoint variable sets")
    mi = _mi_unclamped(table, a, b)
    return 0.0 if -1e-12 <= mi < 0 else mi


def trivariate_mi(table: JointTable) -> float:
    """Interaction information from its log-ratio definition.

    ``E[log p(x,y)p(x,z)p(y,z) / (p(x,y,z)p(x)p(y)p(z))]``; negative values
    indicate synergy.
    """
    p = table.probs
    pxy = p.sum(axis=2)[:, :, None]
    pxz = p.sum(axis=1)[:, None, :]
    pyz = p.sum(axis=0)[None, :, :]
    px = p.sum(axis=(1, 2))[:, None, None]
    py = p.sum(axis=(0, 2))[None, :, None]
    pz = p.sum(axis=(0, 1))[None, None, :]
    support = p > 0
    num = np.broadcast_to(pxy * pxz * pyz, p.shape)[support]
    den = (p * px * py * pz)[support]
    return float((p[support] * np.log(num / den)).sum())


def verify_decomposition(table: JointTable) -> DecompositionReport:
    """Every quantity of the decomposition plus the three identity residuals."""
    i_xy = _mi_unclamped(table, "x", "y")
    i_xz = _mi_unclamped(table, "x", "z")
    i_x_yz = _mi_unclamped(table, "x", ("y", "z"))
    i_xyz = trivariate_mi(table)
    h_x = conditional_entropy(table, "x")
    h_x_y = conditional_entropy(table, "x", "y")
    h_x_z = conditional_entropy(table, "x", "z")
    h_x_yz = conditional_entropy(table, "x", ("y", "z"))
    return DecompositionReport(
        i_xy=i_xy,
        i_xz=i_xz,
        i_x_yz=i_x_yz,
        i_xyz=i_xyz,
        h_x=h_x,
        h_x_given_y=h_x_y,
        h_x_given_z=h_x_z,
        h_x_given_yz=h_x_yz,
        residual_eq5=i_xyz - (i_xy + i_xz - i_x_yz),
        residual_eq7=i_xyz - (h_x - h_x_y - h_x_z + h_x_yz),
        residual_eq8=(i_xy - i_xyz) - (h_x_z - h_x_yz),
    )


def random_table(rng: np.random.Generator, max_card: int = 4, sparsity: float = 0.0) -> JointTable:
    """Dirichlet-distributed table with random shape and optional zeroed cells."""
    shape = tuple(int(n) for n in rng.integers(1, max_card + 1, size=3))
    p = rng.dirichlet(np.full(int(np.prod(shape)), 0.5))
    if sparsity > 0:
        p = np.where(rng.random(p.size) < sparsity, 0.0, p)
        if p.sum() == 0:
            p[rng.integers(p.size)] = 1.0
    p = p / p.sum()
    return JointTable(p.reshape(shape))


def xor_table() -> JointTable:
    """X, Y independent fair bits and Z = X xor Y."""
    p = np.zeros((2, 2, 2))
    for x in (0, 1):
        for y in (0, 1):
            p[x, y, x ^ y] = 0.25
    return JointTable(p)


def identity_sweep(n_tables: int = 1000, max_card: int = 4, seed: int = 0) -> dict:
    """Check all three identities on ``n_tables`` seeded random tables."""
    rng = np.random.default_rng(seed)
    worst = {"eq5": 0.0, "eq7": 0.0, "eq8": 0.0}
    for k in range(n_tables):
        table = random_table(rng, max_card, sparsity=0.3 if k % 3 == 0 else 0.0)
        rep = verify_decomposition(table)
        worst["eq5"] = max(worst["eq5"], abs(rep.residual_eq5))
        worst["eq7"] = max(worst["eq7"], abs(rep.residual_eq7))
        worst["eq8"] = max(worst["eq8"], abs(rep.residual_eq8))
    return {
        "tables_checked": n_tables,
        "max_abs_residual_eq5": worst["eq5"],
        "max_abs_residual_eq7": worst["eq7"],
        "max_abs_residual_eq8": worst["eq8"],
    }
