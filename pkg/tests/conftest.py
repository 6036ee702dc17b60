"""Shared fixtures: small synthetic volumes, slices, and region sets."""

import numpy as np
import pytest

from separeg.imaging_io import (
    ImageSlice,
    SyntheticSpec,
    extract_slices,
    generate_synthetic_dataset,
)
from separeg.nets import NetworkSpec
from separeg.superpixel import SlicConfig, build_region_set


@pytest.fixture(scope="session")
def tiny_net_spec():
    return NetworkSpec.tiny()


@pytest.fixture(scope="session")
def small_volumes():
    spec = SyntheticSpec(image_size=24, depth=4, seed=5)
    return generate_synthetic_dataset(spec, 2)


@pytest.fixture(scope="session")
def small_slices(small_volumes):
    slices = []
    for vol in small_volumes:
        slices.extend(extract_slices(vol, axis=2, normalize_window=(0.0, 1000.0)))
    return slices


@pytest.fixture()
def region_set(tmp_path, small_slices):
    cfg = SlicConfig(n_centers=6)
    return build_region_set(small_slices, cfg, shuffle_seed=0, out_dir=tmp_path / "rs")


@pytest.fixture(scope="session")
def session_region_set(tmp_path_factory, small_slices):
    # a read-only region set shared by training smoke tests
    cfg = SlicConfig(n_centers=6)
    root = tmp_path_factory.mktemp("shared_rs")
    return build_region_set(small_slices, cfg, shuffle_seed=0, out_dir=root)


def random_mask_pair(rng, shape=(8, 8, 4), p=0.3):
    a = (rng.random(shape) < p).astype(np.uint8)
    b = (rng.random(shape) < p).astype(np.uint8)
    return a, b


@pytest.fixture()
def flat_slice():
    return ImageSlice(np.full((16, 16), 0.5, dtype=np.float32), source=("flat", 2, 0))
