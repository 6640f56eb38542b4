"""Synthetic multimodal data: K separated modalities, each with C sub-clusters.

Modality centers are scaled sign patterns (rows of a Hadamard matrix when
D is a power of two), so every center has the same magnitude in every
coordinate. Zeroing coordinates for a "local" view then removes the same
amount of mass from every candidate center and never favours a wrong one.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import hadamard

GLOBAL = "global"
LOCAL = "local"
LOCAL_KEEP_RANGE = (0.3, 0.6)


@dataclass(frozen=True)
class ModalitySpec:
    modality: int
    center: np.ndarray
    sub_centers: np.ndarray  # C x D, absolute positions
    sigma_in: float
    r_sub: float
    spacing: float

    def __post_init__(self):
        if not self.spacing > 4 * (self.r_sub + self.sigma_in):
            raise ValueError(
                f"spacing {self.spacing} must exceed 4 * (r_sub + sigma_in) = {4 * (self.r_sub + self.sigma_in)}"
            )

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    @property
    def n_subclusters(self) -> int:
        return self.sub_centers.shape[0]


@dataclass(frozen=True)
class SyntheticBatch:
    features: np.ndarray  # B x D raw samples
    modality: np.ndarray  # B
    subcluster: np.ndarray  # B, index within the modality
    views: np.ndarray  # B x M x D

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def n_views(self) -> int:
        return self.views.shape[1]

    def flat_views(self) -> np.ndarray:
        """Views as (B*M) x D rows, image-major."""
        b, m, d = self.views.shape
        return self.views.reshape(b * m, d)

    def fine_labels(self, n_subclusters: int) -> np.ndarray:
        return self.modality * n_subclusters + self.subcluster


def _sign_patterns(k: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    if dim & (dim - 1) == 0 and k < dim:
        return hadamard(dim)[1 : k + 1].astype(np.float64)
    for _ in range(10_000):
        pats = rng.choice([-1.0, 1.0], size=(k, dim))
        ham = (pats[:, None, :] != pats[None, :, :]).sum(-1)
        if k == 1 or ham[~np.eye(k, dtype=bool)].min() >= dim // 4:
            return pats
    raise RuntimeError("could not draw well separated sign patterns")


def make_modalities(
    rng: np.random.Generator,
    n_modalities: int = 3,
    n_subclusters: int = 4,
    dim: int = 32,
    spacing: float = 10.0,
    r_sub: float = 1.5,
    sigma_in: float = 0.3,
) -> list[ModalitySpec]:
    """Centers exactly ``spacing`` apart (Hadamard case) or at least that far."""
    pats = _sign_patterns(n_modalities, dim, rng)
    if n_modalities > 1:
        ham = (pats[:, None, :] != pats[None, :, :]).sum(-1)
        min_ham = ham[~np.eye(n_modalities, dtype=bool)].min()
    else:
        min_ham = dim
    amplitude = spacing / (2.0 * np.sqrt(min_ham))
    specs = []
    for k in range(n_modalities):
        center = amplitude * pats[k]
        q, _ = np.linalg.qr(rng.standard_normal((dim, n_subclusters)))
        offsets = r_sub * q[:, :n_subclusters].T
        specs.append(ModalitySpec(k, center, center + offsets, sigma_in, r_sub, spacing))
    return specs


def _augment_rows(x: np.ndarray, kinds: np.ndarray, rng: np.random.Generator, sigma_aug: float, keep_fraction=None):
    n, d = x.shape
    out = x.copy()
    local = kinds == LOCAL
    if keep_fraction is not None and keep_fraction >= 1.0:
        local = np.zeros_like(local)
    n_local = int(local.sum())
    if n_local:
        if keep_fraction is None:
            frac = rng.uniform(*LOCAL_KEEP_RANGE, size=n_local)
        else:
            frac = np.full(n_local, float(keep_fraction))
        keep = np.clip(np.rint(frac * d).astype(int), 1, d)
        # rank of a uniform key gives a random coordinate permutation per row
        ranks = rng.random((n_local, d)).argsort(axis=1).argsort(axis=1)
        mask = ranks < keep[:, None]
        out[local] = out[local] * mask
    if sigma_aug > 0:
        out += sigma_aug * rng.standard_normal((n, d))
    return out


def augment_view(sample, kind: str, rng: np.random.Generator, sigma_aug: float = 0.2, keep_fraction=None) -> np.ndarray:
    """Global view: additive noise. Local view: keep a random 30-60% of
    coordinates (zero the rest), then add noise."""
    if kind not in (GLOBAL, LOCAL):
        raise ValueError(f"unknown view kind {kind!r}")
    x = np.asarray(sample, dtype=np.float64)[None, :]
    return _augment_rows(x, np.array([kind]), rng, sigma_aug, keep_fraction)[0]


def sample_raw(specs: list[ModalitySpec], per_modality: int, rng: np.random.Generator):
    """Un-augmented samples, modality-balanced and shuffled."""
    modality = np.repeat(np.arange(len(specs)), per_modality)
    c = specs[0].n_subclusters
    sub = rng.integers(0, c, size=modality.size)
    centers = np.stack([specs[m].sub_centers[s] for m, s in zip(modality, sub)]) if modality.size else np.zeros((0, specs[0].dim))
    sigma = np.array([specs[m].sigma_in for m in modality])[:, None]
    x = centers + sigma * rng.standard_normal(centers.shape)
    order = rng.permutation(modality.size)
    return x[order], modality[order], sub[order]


def sample_batch(
    specs: list[ModalitySpec],
    batch: int,
    n_views: int = 8,
    rng: np.random.Generator | int = 0,
    sigma_aug: float = 0.2,
    n_global: int = 2,
) -> SyntheticBatch:
    """``batch / K`` samples per modality, each with ``n_global`` global and
    ``n_views - n_global`` local views."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    k = len(specs)
    if batch % k:
        raise ValueError(f"batch {batch} is not divisible by {k} modalities")
    if not 0 <= n_global <= n_views:
        raise ValueError("n_global must lie in [0, n_views]")
    x, modality, sub = sample_raw(specs, batch // k, rng)
    kinds = np.array([GLOBAL] * n_global + [LOCAL] * (n_views - n_global))
    flat = np.repeat(x, n_views, axis=0)
    views = _augment_rows(flat, np.tile(kinds, batch), rng, sigma_aug)
    return SyntheticBatch(x, modality, sub, views.reshape(batch, n_views, -1))


def dump_data(path, batch: SyntheticBatch) -> Path:
    """CSV: sample_id, modality, subcluster, feature_0..feature_{D-1}."""
    path = Path(path)
    d = batch.features.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "modality", "subcluster"] + [f"feature_{i}" for i in range(d)])
        for i in range(batch.size):
            w.writerow([i, int(batch.modality[i]), int(batch.subcluster[i])] + [f"{v:.17g}" for v in batch.features[i]])
    return path
