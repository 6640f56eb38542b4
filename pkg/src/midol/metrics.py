"""Routing specificity, expert balance and linear-probe diagnostics."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

COLLAPSE_SHARE = 0.6
PROBE_ITERS = 500
PROBE_LR = 0.1
WHITEN_FLOOR = 1e-10


@dataclass(frozen=True)
class RoutingReport:
    purity: float
    load_entropy: float
    collapse_flag: bool


@dataclass(frozen=True)
class ProbeReport:
    modality_accuracy: float
    subcluster_accuracy: float


def _check_nonempty(*arrays):
    if any(len(a) == 0 for a in arrays):
        raise ValueError("metric needs at least one assignment")


def routing_purity(modality, expert) -> float:
    """Mean over modalities of the largest share sent to a single expert."""
    modality, expert = np.asarray(modality), np.asarray(expert)
    _check_nonempty(modality)
    shares = []
    for m in np.unique(modality):
        _, counts = np.unique(expert[modality == m], return_counts=True)
        shares.append(counts.max() / counts.sum())
    return float(np.mean(shares))


def expert_load_entropy(expert, n_experts: int | None = None) -> float:
    """Entropy (nats) of the expert usage histogram."""
    expert = np.asarray(expert, dtype=int)
    _check_nonempty(expert)
    counts = np.bincount(expert, minlength=n_experts or 0)
    p = counts[counts > 0] / counts.sum()
    return float(max(-(p * np.log(p)).sum(), 0.0))


def collapse_flag(expert, threshold: float = COLLAPSE_SHARE) -> bool:
    expert = np.asarray(expert, dtype=int)
    _check_nonempty(expert)
    return bool(np.bincount(expert).max() / expert.size > threshold)


def routing_report(modality, expert, n_experts: int | None = None) -> RoutingReport:
    return RoutingReport(
        purity=routing_purity(modality, expert),
        load_entropy=expert_load_entropy(expert, n_experts),
        collapse_flag=collapse_flag(expert),
    )


def whitening(train_x, rel_floor: float = WHITEN_FLOOR) -> tuple[np.ndarray, np.ndarray]:
    """Mean and whitening matrix ``W`` from train statistics.

    Directions with variance below ``rel_floor`` times the largest are
    scaled as if they had that floor variance, so constant or near-constant
    directions are not blown up.
    """
    x = np.asarray(train_x, dtype=np.float64)
    mu = x.mean(axis=0)
    cov = np.atleast_2d(np.cov(x - mu, rowvar=False, bias=True))
    w, v = np.linalg.eigh(cov)
    w = np.maximum(w, rel_floor * max(float(w.max()), 1e-300))
    return mu, v / np.sqrt(w)


def linear_probe(train_x, train_y, test_x, test_y, iters: int = PROBE_ITERS, lr: float = PROBE_LR) -> float:
    """Held-out accuracy of a multinomial logistic regression.

    Features are whitened with train-split mean and covariance, so plain
    gradient descent sees a unit-conditioned problem and the score reflects
    linear separability rather than embedding scale. Weights start at zero
    and take ``iters`` full-batch steps on the mean cross-entropy without
    regularization.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    classes, y = np.unique(np.asarray(train_y), return_inverse=True)
    if classes.size < 2:
        raise ValueError("linear probe needs at least two classes in the train split")
    mu, wm = whitening(train_x)
    xs = (train_x - mu) @ wm
    n, d = xs.shape
    onehot = np.eye(classes.size)[y]
    w = np.zeros((d, classes.size))
    b = np.zeros(classes.size)
    for _ in range(iters):
        z = xs @ w + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        w -= lr * (xs.T @ g)
        b -= lr * g.sum(axis=0)
    pred = classes[np.argmax(((test_x - mu) @ wm) @ w + b, axis=1)]
    return float(np.mean(pred == np.asarray(test_y)))


def split_half(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(n)
    return order[: n // 2], order[n // 2 :]


def probe_report(embeddings, modality, fine_labels, rng: np.random.Generator) -> ProbeReport:
    tr, te = split_half(len(modality), rng)
    e = np.asarray(embeddings)
    return ProbeReport(
        modality_accuracy=linear_probe(e[tr], modality[tr], e[te], modality[te]),
        subcluster_accuracy=linear_probe(e[tr], fine_labels[tr], e[te], fine_labels[te]),
    )


def export_embeddings(path, embeddings, modality, subcluster, expert) -> Path:
    """CSV rows ``sample_id, modality, subcluster, selected_expert, e_0..``.

    Values use 17 significant digits, so parsing returns the exact doubles.
    """
    path = Path(path)
    e = np.asarray(embeddings, dtype=np.float64)
    width = e.shape[1] if e.ndim == 2 else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "modality", "subcluster", "selected_expert"] + [f"e_{i}" for i in range(width)])
        for i in range(len(modality)):
            w.writerow(
                [i, int(modality[i]), int(subcluster[i]), int(expert[i])] + [f"{v:.17g}" for v in e[i]]
            )
    return path


def dump_routing(path, modality, expert, max_probability) -> Path:
    """CSV rows ``sample_id, true_modality, selected_expert, max_probability``."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "true_modality", "selected_expert", "max_probability"])
        for i in range(len(modality)):
            w.writerow([i, int(modality[i]), int(expert[i]), f"{max_probability[i]:.17g}"])
    return path


def as_dict(routing: RoutingReport, probe: ProbeReport) -> dict:
    return asdict(routing) | asdict(probe)
