"""Synthetic clustered embedding sets for self-contained experiments.

Each class (or class-within-domain) gets a random unit-norm center scaled to a
fixed radius; sample rows are the center plus isotropic noise on every token
position. Separation is controlled by center_scale / noise.
"""

from __future__ import annotations

import numpy as np

from .numkit import RngStream
from .store import EmbeddingRecord


def _centers(n: int, h: int, rng: RngStream, scale: float) -> np.ndarray:
    c = rng.normal((n, h))
    c /= np.linalg.norm(c, axis=1, keepdims=True)
    return c * scale


def make_clustered_records(n_classes: int, per_class: int, *, t: int = 4,
                           h: int = 16, seed: int = 0, center_scale: float = 3.0,
                           noise: float = 0.25, shared_scale: float = 0.0,
                           split: str = "train", domain_id: int = 0) -> list:
    """Class-clustered records: every sample of class c sits near center c.

    shared_scale adds a fixed direction of that magnitude to every sample,
    mimicking the anisotropy of real frozen-encoder embeddings (high pairwise
    cosine between class means while staying linearly separable).
    """
    rng = RngStream(seed).derive(f"clusters-{split}")
    centers = _centers(n_classes, h, RngStream(seed).derive("centers"), center_scale)
    if shared_scale != 0.0:
        centers = centers + _centers(1, h, RngStream(seed).derive("shared"),
                                     shared_scale)[0]
    records = []
    for c in range(n_classes):
        for i in range(per_class):
            z = centers[c] + noise * rng.normal((t, h))
            records.append(EmbeddingRecord(
                sample_id=f"{split}-c{c}-{i}", z=z.astype(np.float32), label=c,
                domain_id=domain_id, valid_tokens=t))
    return records


def make_domain_records(n_domains: int, n_classes: int, per_cell: int, *,
                        t: int = 4, h: int = 16, seed: int = 0,
                        center_scale: float = 3.0, noise: float = 0.25,
                        split: str = "train") -> list:
    """Domain-incremental toy set: each (domain, class) cell has its own
    cluster, labels are shared across domains."""
    centers = _centers(n_domains * n_classes, h, RngStream(seed).derive("centers"),
                       center_scale)
    rng = RngStream(seed).derive(f"domains-{split}")
    records = []
    for d in range(n_domains):
        for c in range(n_classes):
            center = centers[d * n_classes + c]
            for i in range(per_cell):
                z = center + noise * rng.normal((t, h))
                records.append(EmbeddingRecord(
                    sample_id=f"{split}-d{d}-c{c}-{i}", z=z.astype(np.float32),
                    label=c, domain_id=d, valid_tokens=t))
    return records


def make_corpus_records(n_clusters: int, per_cluster: int, *, t: int = 4,
                        h: int = 16, seed: int = 0, center_scale: float = 3.0,
                        noise: float = 0.25) -> list:
    """Unlabeled-style corpus (labels all 0) for generic key initialization."""
    centers = _centers(n_clusters, h, RngStream(seed).derive("corpus-centers"),
                       center_scale)
    rng = RngStream(seed).derive("corpus")
    records = []
    for c in range(n_clusters):
        for i in range(per_cluster):
            z = centers[c] + noise * rng.normal((t, h))
            records.append(EmbeddingRecord(
                sample_id=f"corpus-{c}-{i}", z=z.astype(np.float32), label=0,
                valid_tokens=t))
    return records
