"""Siamese MLP encoders, EMA teacher updates and the momentum schedule."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np

from midol import tensorcore as tc

CHECKPOINT_MAGIC = "MIDOL1"


def init_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class MlpParams:
    """input D -> hidden H -> embedding E; fields hold arrays or graph leaves."""

    w1: Any
    b1: Any
    w2: Any
    b2: Any

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int = 32, hidden: int = 64, d_out: int = 16) -> "MlpParams":
        return cls(
            w1=init_uniform(rng, d_in, (d_in, hidden)),
            b1=np.zeros((1, hidden)),
            w2=init_uniform(rng, hidden, (hidden, d_out)),
            b2=np.zeros((1, d_out)),
        )

    def __post_init__(self):
        w1, b1, w2, b2 = (_shape(v) for v in (self.w1, self.b1, self.w2, self.b2))
        if len(w1) != 2 or len(w2) != 2 or b1 != (1, w1[1]) or w2[0] != w1[1] or b2 != (1, w2[1]):
            raise ValueError(f"non-conforming MLP shapes {w1}, {b1}, {w2}, {b2}")

    @property
    def d_in(self) -> int:
        return _shape(self.w1)[0]

    @property
    def d_out(self) -> int:
        return _shape(self.w2)[1]

    def named(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def map(self, fn: Callable[[Any], Any]) -> "MlpParams":
        return MlpParams(**{k: fn(v) for k, v in self.named().items()})


def _shape(v) -> tuple[int, ...]:
    return tuple(v.shape)


def _value(v) -> np.ndarray:
    return v.value if isinstance(v, tc.Node) else np.asarray(v, dtype=np.float64)


def mlp_forward(params: MlpParams, x, differentiable: bool = True) -> tc.Node:
    """linear -> relu -> linear.

    With ``differentiable=False`` the result is computed outside the graph
    and returned as a constant leaf, so nothing upstream receives gradient.
    """
    xv = _value(x)
    if xv.ndim != 2 or xv.shape[1] != params.d_in:
        raise ValueError(f"expected input of width {params.d_in}, got shape {xv.shape}")
    if not differentiable:
        p = params.map(_value)
        h = np.maximum(xv @ p.w1 + p.b1, 0.0)
        return tc.Node(h @ p.w2 + p.b2)
    h = tc.relu(tc.add(tc.matmul(x, params.w1), params.b1))
    return tc.add(tc.matmul(h, params.w2), params.b2)


def ema_update(teacher: Mapping[str, np.ndarray], student: Mapping[str, np.ndarray], momentum: float) -> dict[str, np.ndarray]:
    """``teacher <- momentum * teacher + (1 - momentum) * student`` per named array."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"EMA momentum must lie in [0, 1], got {momentum}")
    if teacher.keys() != student.keys():
        raise ValueError("teacher and student parameter names differ")
    out = {}
    for name, t in teacher.items():
        s = student[name]
        if np.shape(t) != np.shape(s):
            raise ValueError(f"shape mismatch for {name}: {np.shape(t)} vs {np.shape(s)}")
        if momentum == 1.0:
            out[name] = np.array(t, dtype=np.float64)
        elif momentum == 0.0:
            out[name] = np.array(s, dtype=np.float64)
        else:
            out[name] = momentum * np.asarray(t) + (1.0 - momentum) * np.asarray(s)
    return out


@dataclass(frozen=True)
class MomentumSchedule:
    """Cosine ramp of the EMA coefficient from ``base`` to ``final``."""

    base: float = 0.996
    final: float = 1.0
    total_steps: int = 2000

    def __post_init__(self):
        if not 0.0 <= self.base <= self.final <= 1.0:
            raise ValueError(f"need 0 <= base <= final <= 1, got {self.base}, {self.final}")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


def momentum_at(schedule: MomentumSchedule, step: int) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    ramp = (math.cos(math.pi * step / schedule.total_steps) + 1.0) / 2.0
    return schedule.final - (schedule.final - schedule.base) * ramp


# ----------------------------------------------------------------------
# checkpoint file: a magic line followed by one JSON document
# ----------------------------------------------------------------------


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> Path:
    """Write named arrays atomically.

    Layout: ``MIDOL1\\n`` then JSON ``{"meta": ..., "arrays": {name:
    {"shape": [...], "data": [...]}}}``. Floats are written with ``repr``
    precision, so loading reproduces every value exactly.
    """
    path = Path(path)
    doc = {
        "meta": dict(meta or {}),
        "arrays": {
            name: {"shape": list(np.shape(a)), "data": np.asarray(a, dtype=np.float64).ravel().tolist()}
            for name, a in arrays.items()
        },
    }
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(CHECKPOINT_MAGIC + "\n")
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    with open(path, encoding="utf-8") as fh:
        magic = fh.readline().rstrip("\n")
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a {CHECKPOINT_MAGIC} checkpoint (found {magic!r})")
        doc = json.load(fh)
    arrays = {
        name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in doc["arrays"].items()
    }
    return arrays, doc.get("meta", {})
