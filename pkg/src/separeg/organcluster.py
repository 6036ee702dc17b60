"""Grouping regions into pseudo-organ subsets.

Regions are embedded with the frozen contrastive encoder + projector and
clustered with k-means on the (by default L2-normalized) embeddings. Each
cluster becomes its own region subset for the per-subset pretraining
stage.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .contrastive import load_region_tensor
from .errors import FormatError, ValidationError
from .nets import Checkpoint, make_encoder, make_projector
from .superpixel import RegionSetManifest


@dataclass
class ClusterModel:
    """Fitted centroids plus the settings that produced them."""

    centroids: np.ndarray  # (k, d)
    seed: int
    normalize: bool
    inertia: float

    @property
    def k(self) -> int:
        return int(self.centroids.shape[0])

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        doc = {
            "kind": "cluster_model",
            "seed": self.seed,
            "normalize": self.normalize,
            "inertia": self.inertia,
            "centroids": [[float(v) for v in row] for row in self.centroids],
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(doc, f, sort_keys=True, separators=(",", ":"))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "ClusterModel":
        path = Path(path)
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
        if doc.get("kind") != "cluster_model":
            raise FormatError(f"{path}: not a cluster model file")
        return cls(
            centroids=np.array(doc["centroids"], dtype=np.float64),
            seed=doc["seed"],
            normalize=doc["normalize"],
            inertia=doc["inertia"],
        )


def l2_normalize_rows(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, eps)


def embed_regions(
    manifest: RegionSetManifest,
    ckpt: Checkpoint,
    out_size: int,
    batch_size: int = 64,
) -> np.ndarray:
    """Project every region crop, in manifest order, without augmentation."""
    if len(manifest.records) == 0:
        raise ValidationError("region set is empty")
    encoder = make_encoder(ckpt.spec)
    projector = make_projector(ckpt.spec)
    ckpt.load_into("encoder", encoder)
    ckpt.load_into("projector", projector)
    encoder.eval()
    projector.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(manifest.records), batch_size):
            chunk = manifest.records[start : start + batch_size]
            x = torch.stack([load_region_tensor(r, manifest.root, out_size) for r in chunk])
            out.append(projector(encoder(x)).numpy())
    return np.concatenate(out, axis=0).astype(np.float64)


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]), dtype=np.float64)
    centroids[0] = x[rng.integers(n)]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            probs = d2 / total
            idx = rng.choice(n, p=probs)
        else:
            idx = rng.integers(n)
        centroids[j] = x[idx]
        d2 = np.minimum(d2, ((x - centroids[j]) ** 2).sum(axis=1))
    return centroids


def _lloyd(
    x: np.ndarray, centroids: np.ndarray, max_iter: int
) -> tuple[np.ndarray, np.ndarray, float]:
    k = centroids.shape[0]
    labels = np.full(x.shape[0], -1, dtype=np.int64)
    for _ in range(max_iter):
        d = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_labels = d.argmin(axis=1)
        # an empty cluster grabs the point farthest from its own centroid
        for j in range(k):
            if not (new_labels == j).any():
                far = int(d[np.arange(len(x)), new_labels].argmax())
                new_labels[far] = j
                d[far, :] = np.inf
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            sel = labels == j
            if sel.any():
                centroids[j] = x[sel].mean(axis=0)
    inertia = float(((x - centroids[labels]) ** 2).sum())
    return centroids, labels, inertia


def kmeans(
    x: np.ndarray,
    k: int,
    seed: int = 0,
    n_restarts: int = 10,
    max_iter: int = 100,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Best-of-restarts k-means; returns (centroids, labels, inertia)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError("x must be 2-d (n_samples, n_features)")
    if k < 1:
        raise ValidationError("k must be >= 1")
    if x.shape[0] < k:
        raise ValidationError(f"need at least k={k} samples, got {x.shape[0]}")
    best: Optional[tuple[np.ndarray, np.ndarray, float]] = None
    for r in range(n_restarts):
        rng = np.random.default_rng(seed + r)
        init = _kmeans_pp_init(x, k, rng)
        cents, labels, inertia = _lloyd(x, init.copy(), max_iter)
        if best is None or inertia < best[2]:
            best = (cents, labels, inertia)
    assert best is not None
    return best


def fit_cluster_model(
    embeddings: np.ndarray,
    k: int,
    seed: int = 0,
    normalize: bool = True,
    n_restarts: int = 10,
) -> tuple[ClusterModel, np.ndarray]:
    """Cluster region embeddings; returns the model and per-region labels."""
    x = np.asarray(embeddings, dtype=np.float64)
    if normalize:
        x = l2_normalize_rows(x)
    centroids, labels, inertia = kmeans(x, k, seed=seed, n_restarts=n_restarts)
    return ClusterModel(centroids=centroids, seed=seed, normalize=normalize, inertia=inertia), labels


def assign_clusters(model: ClusterModel, embeddings: np.ndarray) -> np.ndarray:
    x = np.asarray(embeddings, dtype=np.float64)
    if model.normalize:
        x = l2_normalize_rows(x)
    d = ((x[:, None, :] - model.centroids[None, :, :]) ** 2).sum(axis=2)
    return d.argmin(axis=1)


def split_region_set(
    manifest: RegionSetManifest,
    labels: Sequence[int],
    out_dir: Optional[str | Path] = None,
) -> list[Path]:
    """Write back cluster ids and emit one subset manifest per cluster.

    Subset manifests reference the same crop files as the master; record
    order inside each subset follows the master order. Returns the subset
    manifest paths indexed by cluster id (an empty cluster still gets a
    manifest with zero records).
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != len(manifest.records):
        raise ValidationError(
            f"{len(labels)} labels for {len(manifest.records)} records"
        )
    if labels.size and labels.min() < 0:
        raise ValidationError("cluster labels must be non-negative")
    root = Path(out_dir) if out_dir is not None else manifest.root
    if root is None:
        raise ValidationError("manifest has no root directory and out_dir was not given")
    for rec, lab in zip(manifest.records, labels):
        rec.cluster_id = int(lab)
    manifest.save(root / "regions.jsonl")

    k = int(labels.max()) + 1 if labels.size else 0
    paths = []
    for j in range(k):
        sub = RegionSetManifest(
            records=[r for r, lab in zip(manifest.records, labels) if lab == j],
            shuffle_seed=manifest.shuffle_seed,
            slic_config=manifest.slic_config,
            separation=manifest.separation,
            root=root,
        )
        paths.append(sub.save(root / f"regions_cluster{j}.jsonl"))
    return paths


def cluster_purity(cluster_labels: Sequence[int], class_labels: Sequence[int]) -> float:
    """Fraction of samples whose cluster's dominant class matches their own."""
    cl = np.asarray(cluster_labels)
    cs = np.asarray(class_labels)
    if cl.shape != cs.shape or cl.ndim != 1:
        raise ValidationError("label arrays must be 1-d and the same length")
    if cl.size == 0:
        raise ValidationError("label arrays must be non-empty")
    total = 0
    for j in np.unique(cl):
        members = cs[cl == j]
        counts = np.bincount(members)
        total += int(counts.max())
    return total / cl.size
