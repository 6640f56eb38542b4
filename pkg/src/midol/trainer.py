"""Siamese student/teacher training loop with AdamW and EMA teacher updates."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from midol import metrics, synthdata
from midol import tensorcore as tc
from midol.encoder import MlpParams, MomentumSchedule, ema_update, load_checkpoint, mlp_forward, momentum_at, save_checkpoint
from midol.losses import (
    LossBreakdown,
    aggregate_contrastive_loss,
    intra_contrastive_loss_expert,
    routing_consistency_loss,
    total_loss,
)
from midol.moe import MoeParams, expert_forward, route_student, route_teacher
from midol.seeding import stream

log = logging.getLogger(__name__)

ADAM_EPS = 1e-8


class TrainingError(RuntimeError):
    """A step produced a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    steps: int = 2000
    batch: int = 60
    lr: float = 1e-4
    weight_decay: float = 0.04
    beta1: float = 0.9
    beta2: float = 0.95
    ema_base: float = 0.996
    sinkhorn_iters: int = 3
    sinkhorn_eps: float = 0.05
    tau: float = 0.04
    seed: int = 0
    enable_moe: bool = True
    enable_route: bool = True
    enable_cst: bool = True
    n_experts: int = 3
    n_modalities: int = 3
    n_subclusters: int = 4
    n_views: int = 8
    n_global_views: int = 2
    input_dim: int = 32
    hidden_dim: int = 64
    embed_dim: int = 16
    expert_hidden: int = 32
    out_dim: int = 16
    spacing: float = 10.0
    r_sub: float = 1.5
    sigma_in: float = 0.3
    sigma_aug: float = 0.2
    grad_clip: float = 5.0
    eval_every: int = 500
    eval_per_modality: int = 200

    def validate(self) -> "TrainConfig":
        checks = {
            "lr": self.lr > 0,
            "tau": self.tau > 0,
            "steps": self.steps >= 1,
            "batch": self.batch >= 1 and self.batch % self.n_modalities == 0,
            "weight_decay": self.weight_decay >= 0,
            "beta1": 0 <= self.beta1 < 1,
            "beta2": 0 <= self.beta2 < 1,
            "ema_base": 0 <= self.ema_base <= 1,
            "sinkhorn_iters": self.sinkhorn_iters >= 1,
            "sinkhorn_eps": self.sinkhorn_eps > 0,
            "n_experts": self.n_experts >= 2,
            "n_views": self.n_views >= 2,
            "n_global_views": 0 <= self.n_global_views <= self.n_views,
            "grad_clip": self.grad_clip > 0,
            "eval_every": self.eval_every >= 0,
            "eval_per_modality": self.eval_per_modality >= 2,
        }
        bad = [k for k, ok in checks.items() if not ok]
        if bad:
            raise ValueError(f"invalid config value for {', '.join(bad)}: " + ", ".join(f"{k}={getattr(self, k)!r}" for k in bad))
        if self.enable_moe and self.batch * self.n_views < self.n_experts:
            raise ValueError("batch: fewer routed rows than experts")
        return self

    @classmethod
    def field_types(cls) -> dict[str, type]:
        return {f.name: type(f.default) for f in fields(cls)}


@dataclass
class Branch:
    encoder: MlpParams
    moe: MoeParams

    def named(self) -> dict[str, Any]:
        out = {f"encoder.{k}": v for k, v in self.encoder.named().items()}
        out.update({f"moe.{k}": v for k, v in self.moe.named().items()})
        return out

    @classmethod
    def from_named(cls, named: dict[str, Any]) -> "Branch":
        enc = {k.split(".", 1)[1]: v for k, v in named.items() if k.startswith("encoder.")}
        moe = {k.split(".", 1)[1]: v for k, v in named.items() if k.startswith("moe.")}
        return cls(MlpParams(**enc), MoeParams.from_named(moe))


@dataclass
class ModelState:
    student: Branch
    teacher: Branch
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"student.{k}": v for k, v in self.student.named().items()}
        out.update({f"teacher.{k}": v for k, v in self.teacher.named().items()})
        out.update({f"adam_m.{k}": v for k, v in self.m.items()})
        out.update({f"adam_v.{k}": v for k, v in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], step: int) -> "ModelState":
        def group(prefix):
            return {k[len(prefix) :]: v for k, v in arrays.items() if k.startswith(prefix)}

        return cls(
            Branch.from_named(group("student.")),
            Branch.from_named(group("teacher.")),
            group("adam_m."),
            group("adam_v."),
            step,
        )


def init_state(config: TrainConfig) -> ModelState:
    """Student from the ``init`` stream; the teacher starts as an exact copy."""
    rng = stream(config.seed, "init")
    encoder = MlpParams.init(rng, config.input_dim, config.hidden_dim, config.embed_dim)
    n = config.n_experts if config.enable_moe else 1
    moe = MoeParams.init(rng, config.embed_dim, n, config.expert_hidden, config.out_dim)
    student = Branch(encoder, moe)
    named = student.named()
    teacher = Branch.from_named({k: v.copy() for k, v in named.items()})
    zeros = {k: np.zeros_like(v) for k, v in named.items()}
    return ModelState(student, teacher, zeros, {k: z.copy() for k, z in zeros.items()}, 0)


def make_specs(config: TrainConfig) -> list[synthdata.ModalitySpec]:
    return synthdata.make_modalities(
        stream(config.seed, "geometry"),
        config.n_modalities,
        config.n_subclusters,
        config.input_dim,
        config.spacing,
        config.r_sub,
        config.sigma_in,
    )


def batch_for_step(specs, config: TrainConfig, step: int) -> synthdata.SyntheticBatch:
    return synthdata.sample_batch(
        specs, config.batch, config.n_views, stream(config.seed, "data", step), config.sigma_aug, config.n_global_views
    )


def image_experts(scores: np.ndarray, n_views: int) -> np.ndarray:
    """Top-1 expert per image from its view-averaged routing row."""
    rows, n = scores.shape
    mean = scores.reshape(rows // n_views, n_views, n).mean(axis=1)
    return np.argmax(mean, axis=1)


def _view_rows(images: np.ndarray, n_views: int) -> np.ndarray:
    return (images[:, None] * n_views + np.arange(n_views)[None, :]).ravel()


def adamw_update(params, grads, m, v, lr, beta1, beta2, weight_decay, step):
    """One bias-corrected AdamW step with decoupled weight decay.

    ``step`` counts from 1. Returns new ``(params, m, v)`` dictionaries.
    """
    if step < 1:
        raise ValueError("AdamW step counter starts at 1")
    new_p, new_m, new_v = {}, {}, {}
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    for name, p in params.items():
        g = grads[name]
        if np.shape(g) != np.shape(p) or np.shape(m[name]) != np.shape(p) or np.shape(v[name]) != np.shape(p):
            raise ValueError(f"shape mismatch for {name}")
        mt = beta1 * m[name] + (1.0 - beta1) * g
        vt = beta2 * v[name] + (1.0 - beta2) * g * g
        update = (mt / c1) / (np.sqrt(vt / c2) + ADAM_EPS) + weight_decay * p
        new_p[name] = p - lr * update
        new_m[name] = mt
        new_v[name] = vt
    return new_p, new_m, new_v


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm <= max_norm:
        return grads, norm
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}, norm


@dataclass
class StepInfo:
    losses: LossBreakdown
    mismatch: float
    grad_norm: float
    student_experts: np.ndarray = field(repr=False)


def _teacher_embeddings(teacher: Branch, h_t: np.ndarray, experts: np.ndarray, n_views: int) -> np.ndarray:
    y = np.zeros((h_t.shape[0], teacher.moe.proj_w.shape[1]))
    for i in np.unique(experts):
        rows = _view_rows(np.flatnonzero(experts == i), n_views)
        y[rows] = expert_forward(teacher.moe, h_t[rows], int(i)).value
    return y


def train_step(state: ModelState, batch: synthdata.SyntheticBatch, config: TrainConfig) -> tuple[ModelState, StepInfo]:
    """Forward both branches over all views, backpropagate through the
    student only, take an AdamW step and move the teacher by EMA."""
    m_views = batch.n_views
    views = batch.flat_views()
    moe_on = config.enable_moe
    route_on = moe_on and config.enable_route
    # without the mixture, the single-head contrastive objective is the baseline
    cst_on = config.enable_cst if moe_on else True
    n_groups = config.n_experts if moe_on else 1

    try:
        h_t = mlp_forward(state.teacher.encoder, views, differentiable=False).value
        a_t = None
        t_sel = np.zeros(batch.size, dtype=int)
        if moe_on:
            a_t = route_teacher(state.teacher.moe, h_t, config.sinkhorn_eps, config.sinkhorn_iters).scores
            t_sel = image_experts(a_t, m_views)
        y = _teacher_embeddings(state.teacher, h_t, t_sel, m_views) if cst_on else None

        leaves = {k: tc.Node(v, requires_grad=True) for k, v in state.student.named().items()}
        student = Branch.from_named(leaves)
        h_s = mlp_forward(student.encoder, views)
        s_sel = np.zeros(batch.size, dtype=int)
        route_node = cst_node = None
        if moe_on:
            r_s = route_student(student.moe, h_s)
            s_sel = image_experts(r_s.scores, m_views)
            if route_on:
                route_node = routing_consistency_loss(r_s.node, a_t, m_views)
        if cst_on:
            per_expert = []
            for i in range(n_groups):
                images = np.flatnonzero(s_sel == i)
                if images.size == 0:
                    per_expert.append(None)
                    continue
                rows = _view_rows(images, m_views)
                x = expert_forward(student.moe, tc.take_rows(h_s, rows), i)
                per_expert.append(intra_contrastive_loss_expert(x, y[rows], m_views, config.tau))
            cst_node = aggregate_contrastive_loss(per_expert, n_groups)
    except (tc.NonFiniteError, ValueError) as exc:
        raise TrainingError(f"step {state.step}: forward pass failed: {exc}") from exc

    losses = total_loss(
        route_node.item() if route_node is not None else 0.0,
        cst_node.item() if cst_node is not None else 0.0,
    )
    if not math.isfinite(losses.total):
        raise TrainingError(f"step {state.step}: non-finite loss {losses}")

    active = [n for n in (route_node, cst_node) if n is not None and n.requires_grad]
    params = {k: leaf.value for k, leaf in leaves.items()}
    grad_norm = 0.0
    new_m, new_v = state.m, state.v
    if active:
        objective = active[0] if len(active) == 1 else tc.add(active[0], active[1])
        tc.backward(objective)
        grads = {k: leaf.grad for k, leaf in leaves.items()}
        grads, grad_norm = clip_global_norm(grads, config.grad_clip)
        if not math.isfinite(grad_norm):
            raise TrainingError(f"step {state.step}: non-finite gradient norm")
        params, new_m, new_v = adamw_update(
            params, grads, state.m, state.v, config.lr, config.beta1, config.beta2, config.weight_decay, state.step + 1
        )

    schedule = MomentumSchedule(config.ema_base, 1.0, config.steps)
    lam = momentum_at(schedule, min(state.step, config.steps))
    teacher = ema_update(state.teacher.named(), params, lam)
    new_state = ModelState(Branch.from_named(params), Branch.from_named(teacher), new_m, new_v, state.step + 1)
    info = StepInfo(losses, float(np.mean(s_sel != t_sel)) if moe_on else 0.0, grad_norm, s_sel)
    return new_state, info


# ----------------------------------------------------------------------
# evaluation on held-out raw samples, teacher branch only
# ----------------------------------------------------------------------


@dataclass
class EvalData:
    features: np.ndarray
    modality: np.ndarray
    subcluster: np.ndarray
    n_subclusters: int

    @property
    def fine(self) -> np.ndarray:
        return self.modality * self.n_subclusters + self.subcluster


def eval_data(config: TrainConfig, specs=None) -> EvalData:
    specs = specs or make_specs(config)
    x, mod, sub = synthdata.sample_raw(specs, config.eval_per_modality, stream(config.seed, "eval"))
    return EvalData(x, mod, sub, config.n_subclusters)


def teacher_outputs(state: ModelState, x: np.ndarray) -> dict[str, np.ndarray]:
    """Encoder embeddings, plain-softmax routing and projector embeddings."""
    t = state.teacher
    h = mlp_forward(t.encoder, x, differentiable=False).value
    if t.moe.n_experts >= 2:
        probs = route_student(t.moe, h).scores
        experts = np.argmax(probs, axis=1)
    else:
        probs = np.ones((x.shape[0], 1))
        experts = np.zeros(x.shape[0], dtype=int)
    proj = np.zeros((x.shape[0], t.moe.proj_w.shape[1]))
    for i in np.unique(experts):
        rows = np.flatnonzero(experts == i)
        proj[rows] = expert_forward(t.moe, h[rows], int(i)).value
    return {"encoder": h, "probs": probs, "experts": experts, "projector": proj}


def evaluate(state: ModelState, config: TrainConfig, data: EvalData | None = None) -> dict:
    data = data or eval_data(config)
    out = teacher_outputs(state, data.features)
    routing = metrics.routing_report(data.modality, out["experts"], state.teacher.moe.n_experts)
    probe = metrics.probe_report(out["encoder"], data.modality, data.fine, stream(config.seed, "probe"))
    return metrics.as_dict(routing, probe)


# ----------------------------------------------------------------------
# full runs
# ----------------------------------------------------------------------


@dataclass
class RunResult:
    state: ModelState
    records: list[dict]
    evaluation: dict
    paths: dict[str, str]


def _dumps(record: dict) -> str:
    return json.dumps(record, sort_keys=True)


def save_state(path, state: ModelState, config: TrainConfig) -> Path:
    return save_checkpoint(path, state.arrays(), {"step": state.step, "config": asdict(config)})


def load_state(path) -> tuple[ModelState, TrainConfig]:
    arrays, meta = load_checkpoint(path)
    return ModelState.from_arrays(arrays, int(meta["step"])), TrainConfig(**meta["config"])


def run_training(config: TrainConfig, out_dir=None, dump_routing=None, dump_data=None) -> RunResult:
    """Train for ``config.steps`` steps; with ``out_dir`` write
    ``metrics.ndjson``, ``checkpoint.midol``, ``final_metrics.json`` and the
    teacher embedding exports."""
    config.validate()
    specs = make_specs(config)
    data = eval_data(config, specs)
    state = init_state(config)
    records: list[dict] = []
    paths: dict[str, str] = {}
    out = Path(out_dir) if out_dir is not None else None
    stream_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        paths["metrics"] = str(out / "metrics.ndjson")
        try:
            stream_fh = open(paths["metrics"], "w", encoding="utf-8")
        except OSError as exc:
            raise OSError(f"cannot open metrics stream {paths['metrics']}: {exc}") from exc

    def emit(record):
        records.append(record)
        if stream_fh is not None:
            stream_fh.write(_dumps(record) + "\n")

    try:
        for step in range(config.steps):
            batch = batch_for_step(specs, config, step)
            if step == 0 and dump_data is not None:
                paths["data"] = str(synthdata.dump_data(dump_data, batch))
            state, info = train_step(state, batch, config)
            emit(info.losses.as_record(step) | {"mismatch": info.mismatch})
            if config.eval_every and (step + 1) % config.eval_every == 0 and step + 1 < config.steps:
                emit({"step": step, "eval": evaluate(state, config, data)})
        final = evaluate(state, config, data)
        emit({"step": config.steps - 1, "eval": final})
    finally:
        if stream_fh is not None:
            stream_fh.close()

    if out is not None:
        paths["checkpoint"] = str(save_state(out / "checkpoint.midol", state, config))
        with open(out / "final_metrics.json", "w", encoding="utf-8") as fh:
            fh.write(_dumps(final) + "\n")
        paths["final_metrics"] = str(out / "final_metrics.json")
        paths.update(export_all(state, data, out))
    if dump_routing is not None:
        paths["routing"] = str(write_routing(dump_routing, state, data))
    log.info("finished %d steps: %s", config.steps, final)
    return RunResult(state, records, final, paths)


def export_all(state: ModelState, data: EvalData, out_dir) -> dict[str, str]:
    """Teacher projector embeddings (routing analysis) and encoder embeddings (probing)."""
    out_dir = Path(out_dir)
    t = teacher_outputs(state, data.features)
    p1 = metrics.export_embeddings(out_dir / "embeddings_projector.csv", t["projector"], data.modality, data.subcluster, t["experts"])
    p2 = metrics.export_embeddings(out_dir / "embeddings_encoder.csv", t["encoder"], data.modality, data.subcluster, t["experts"])
    return {"embeddings_projector": str(p1), "embeddings_encoder": str(p2)}


def write_routing(path, state: ModelState, data: EvalData) -> Path:
    t = teacher_outputs(state, data.features)
    return metrics.dump_routing(path, data.modality, t["experts"], t["probs"].max(axis=1))
