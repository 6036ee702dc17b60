"""Embedding clustering: k-means core, model persistence, subset splitting."""

import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from separeg.errors import ValidationError
from separeg.nets import Checkpoint, NetworkSpec, make_encoder, make_projector
from separeg.organcluster import (
    ClusterModel,
    assign_clusters,
    cluster_purity,
    embed_regions,
    fit_cluster_model,
    kmeans,
    l2_normalize_rows,
    split_region_set,
)
from separeg.superpixel import RegionSetManifest

TINY = NetworkSpec.tiny()


def _best_inertia_by_enumeration(x, k):
    """Exhaustive optimum of the k-means objective for tiny inputs."""
    n = len(x)
    best = np.inf
    for labels in itertools.product(range(k), repeat=n):
        total = 0.0
        for j in range(k):
            pts = x[np.array(labels) == j]
            if len(pts):
                mu = pts.mean(axis=0)
                total += float(((pts - mu) ** 2).sum())
        best = min(best, total)
    return best


class TestKMeans:
    def test_matches_enumeration_optimum(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            x = rng.normal(size=(8, 3))
            centroids, labels, inertia = kmeans(x, k=2, seed=seed, n_restarts=16)
            want = _best_inertia_by_enumeration(x, 2)
            assert inertia == pytest.approx(want, rel=1e-9), f"seed {seed}"

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(30, 4))
        a = kmeans(x, k=3, seed=5)
        b = kmeans(x, k=3, seed=5)
        assert np.array_equal(a[0], b[0])
        assert np.array_equal(a[1], b[1])
        assert a[2] == b[2]

    def test_no_cluster_left_empty(self):
        # five coincident points plus three far outliers force rescue logic
        x = np.concatenate([np.zeros((5, 2)), np.full((3, 2), 100.0) + np.arange(3)[:, None]])
        centroids, labels, _ = kmeans(x, k=3, seed=0, n_restarts=4)
        assert set(labels.tolist()) == {0, 1, 2}

    def test_fewer_points_than_clusters_rejected(self):
        with pytest.raises(ValidationError):
            kmeans(np.zeros((2, 2)), k=3)

    def test_separated_blobs_recovered(self):
        rng = np.random.default_rng(1)
        blob_a = rng.normal(0, 0.05, size=(10, 2))
        blob_b = rng.normal(5, 0.05, size=(10, 2))
        _, labels, _ = kmeans(np.vstack([blob_a, blob_b]), k=2, seed=0)
        assert len(set(labels[:10])) == 1
        assert len(set(labels[10:])) == 1
        assert labels[0] != labels[10]

    @settings(max_examples=20, deadline=None)
    @given(
        x=arrays(np.float64, (12, 3), elements=st.floats(-5, 5)),
        k=st.sampled_from([1, 2, 3]),
    )
    def test_inertia_identity(self, x, k):
        centroids, labels, inertia = kmeans(x, k=k, seed=0, n_restarts=2)
        recomputed = float(((x - centroids[labels]) ** 2).sum())
        assert inertia == pytest.approx(recomputed, rel=1e-9, abs=1e-9)
        assert labels.shape == (12,)
        assert set(labels.tolist()) <= set(range(k))


class TestNormalization:
    def test_rows_have_unit_norm(self):
        rng = np.random.default_rng(0)
        x = l2_normalize_rows(rng.normal(size=(6, 4)))
        assert np.allclose(np.linalg.norm(x, axis=1), 1.0)

    def test_zero_row_is_kept_finite(self):
        x = l2_normalize_rows(np.zeros((2, 3)))
        assert np.isfinite(x).all()


class TestClusterModel:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        model, _ = fit_cluster_model(rng.normal(size=(20, 5)), k=3, seed=1)
        p = model.save(tmp_path / "cluster.json")
        back = ClusterModel.load(p)
        assert np.array_equal(back.centroids, model.centroids)
        assert back.seed == model.seed
        assert back.normalize == model.normalize
        assert back.k == 3

    def test_save_is_byte_stable(self, tmp_path):
        rng = np.random.default_rng(3)
        model, _ = fit_cluster_model(rng.normal(size=(12, 4)), k=2, seed=0)
        a = model.save(tmp_path / "a.json").read_bytes()
        b = model.save(tmp_path / "b.json").read_bytes()
        assert a == b

    def test_assignment_is_nearest_centroid(self):
        rng = np.random.default_rng(4)
        model, _ = fit_cluster_model(rng.normal(size=(30, 4)), k=3, seed=2)
        q = rng.normal(size=(10, 4))
        got = assign_clusters(model, q)
        qn = l2_normalize_rows(q) if model.normalize else q
        want = ((qn[:, None, :] - model.centroids[None]) ** 2).sum(-1).argmin(1)
        assert np.array_equal(got, want)


class TestEmbedding:
    def _ckpt(self):
        torch.manual_seed(0)
        return Checkpoint.from_modules(
            "inter", TINY, {"encoder": make_encoder(TINY), "projector": make_projector(TINY)}
        )

    def test_shapes_and_order(self, session_region_set):
        emb = embed_regions(session_region_set, self._ckpt(), out_size=16, batch_size=3)
        assert emb.shape == (len(session_region_set.records), TINY.proj_out)
        assert emb.dtype == np.float64
        again = embed_regions(session_region_set, self._ckpt(), out_size=16, batch_size=7)
        assert np.allclose(emb, again, atol=1e-6)

    def test_empty_manifest_rejected(self, session_region_set):
        empty = RegionSetManifest(
            records=[], shuffle_seed=0, separation="slic", root=session_region_set.root
        )
        with pytest.raises(ValidationError):
            embed_regions(empty, self._ckpt(), out_size=16)


class TestSplit:
    def test_partition_and_write_back(self, region_set, tmp_path):
        n = len(region_set.records)
        labels = np.arange(n) % 2
        paths = split_region_set(region_set, labels)
        subsets = [RegionSetManifest.load(p) for p in paths]
        assert sum(len(s.records) for s in subsets) == n
        for j, sub in enumerate(subsets):
            for rec in sub.records:
                assert rec.cluster_id == j
        master = RegionSetManifest.load(region_set.root / "regions.jsonl")
        assert all(r.cluster_id is not None for r in master.records)

    def test_empty_middle_cluster_gets_empty_manifest(self, region_set):
        # assignments may skip an id entirely: cluster 1 ends up empty
        labels = (np.arange(len(region_set.records)) % 2) * 2
        paths = split_region_set(region_set, labels)
        subsets = [RegionSetManifest.load(p) for p in paths]
        assert len(paths) == 3
        assert len(subsets[1].records) == 0
        assert len(subsets[0].records) + len(subsets[2].records) == len(region_set.records)

    def test_length_mismatch_rejected(self, region_set):
        with pytest.raises(ValidationError):
            split_region_set(region_set, np.zeros(1, dtype=int))


class TestPurity:
    def test_perfect_clustering(self):
        assert cluster_purity([0, 0, 1, 1], [5, 5, 7, 7]) == 1.0

    def test_single_cluster_majority(self):
        # majority class fraction: 3 of 4
        assert cluster_purity([0, 0, 0, 0], [1, 1, 1, 2]) == pytest.approx(0.75)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            cluster_purity([0, 1], [0])
