"""Volume ingestion, slice extraction, and synthetic desk-scale datasets.

Volumes are stored in a two-part container: one line of JSON metadata
followed by raw little-endian voxel bytes, then mask bytes when present.
The format is documented in the README and kept bit-stable so that a
save/load round trip reproduces the payload exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import FormatError, ValidationError

# CT-style soft tissue window applied before normalization; synthetic data
# is generated in [0, 1] and scaled by INTENSITY_SCALE, so pipelines on
# synthetic volumes use the (0, INTENSITY_SCALE) window instead.
DEFAULT_WINDOW = (-200.0, 300.0)
INTENSITY_SCALE = 1000

SPLIT_TAGS = ("pretrain", "train", "val", "test")


@dataclass
class Volume:
    """A 3D scan with spacing metadata and an optional label mask."""

    voxels: np.ndarray
    spacing: tuple[float, float, float]
    patient_id: str
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.int16)
        if self.voxels.ndim != 3:
            raise ValidationError(f"voxels must be 3D, got shape {self.voxels.shape}")
        if not self.patient_id:
            raise ValidationError("patient_id must be non-empty")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValidationError(f"spacing must be 3 positive reals, got {self.spacing}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=np.uint8)
            if self.mask.shape != self.voxels.shape:
                raise ValidationError(
                    f"mask shape {self.mask.shape} does not match voxels {self.voxels.shape}"
                )

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass
class ImageSlice:
    """A 2D grayscale slice with pixels normalized to [0, 1]."""

    pixels: np.ndarray
    source: tuple[str, int, int]  # (patient_id, axis, index)
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 2:
            raise ValidationError(f"slice pixels must be 2D, got {self.pixels.shape}")
        if self.pixels.size and (self.pixels.min() < 0 or self.pixels.max() > 1):
            raise ValidationError("slice pixels must lie in [0, 1]")
        if self.mask is not None and self.mask.shape != self.pixels.shape:
            raise ValidationError(
                f"slice mask shape {self.mask.shape} does not match pixels {self.pixels.shape}"
            )


@dataclass
class SyntheticSpec:
    """Recipe for a deterministic synthetic dataset of blob 'organs'.

    Per-class size priors shrink with the class index so higher classes
    are tiny organs: they cover fewer pixels and therefore yield fewer
    regions downstream.  ``seed`` fully determines the output.
    """

    image_size: int = 32
    n_organ_classes: int = 2
    shapes_per_image: int = 3
    intensity_ranges: Sequence[tuple[float, float]] = ((0.35, 0.50), (0.70, 0.85))
    noise_sigma: float = 0.05
    seed: int = 0
    depth: int = 8
    min_gap: float = 0.02

    def __post_init__(self):
        if self.image_size < 4:
            raise ValidationError("image_size must be >= 4")
        if self.n_organ_classes < 1:
            raise ValidationError("n_organ_classes must be >= 1")
        if self.shapes_per_image < self.n_organ_classes:
            raise ValidationError(
                "shapes_per_image must be >= n_organ_classes so every class can appear"
            )
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be non-negative")
        ranges = [tuple(map(float, r)) for r in self.intensity_ranges]
        if len(ranges) != self.n_organ_classes:
            raise ValidationError(
                f"need {self.n_organ_classes} intensity ranges, got {len(ranges)}"
            )
        for lo, hi in ranges:
            if not (0.0 <= lo < hi <= 1.0):
                raise ValidationError(f"intensity range [{lo}, {hi}] not inside [0, 1]")
        ordered = sorted(ranges)
        for (lo_a, hi_a), (lo_b, _) in zip(ordered, ordered[1:]):
            if lo_b - hi_a < self.min_gap:
                raise ValidationError(
                    f"intensity ranges [{lo_a}, {hi_a}] and [{lo_b}, ...] closer than "
                    f"min_gap={self.min_gap}"
                )
        self.intensity_ranges = ranges


def save_volume(volume: Volume, path: str | Path) -> Path:
    """Write a volume to the two-part container format."""
    path = Path(path)
    header = {
        "dtype": "int16",
        "has_mask": volume.mask is not None,
        "mask_dtype": "uint8",
        "mask_shape": list(volume.shape),
        "patient_id": volume.patient_id,
        "shape": list(volume.shape),
        "spacing": list(volume.spacing),
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        f.write(volume.voxels.astype("<i2").tobytes(order="C"))
        if volume.mask is not None:
            f.write(volume.mask.astype(np.uint8).tobytes(order="C"))
    return path


def _header_field(header: dict, name: str, kind) -> object:
    if name not in header:
        raise FormatError(f"volume header missing field '{name}'")
    value = header[name]
    if kind is not None and not isinstance(value, kind):
        raise FormatError(f"volume header field '{name}' has wrong type: {value!r}")
    return value


def load_volume(path: str | Path) -> Volume:
    """Load a volume from the two-part container format.

    Raises FormatError for a malformed header or a truncated payload and
    ValidationError when the stored mask shape disagrees with the voxels.
    """
    path = Path(path)
    with open(path, "rb") as f:
        header_line = f.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: volume header is not valid JSON: {exc}") from exc
        if not isinstance(header, dict):
            raise FormatError(f"{path}: volume header must be a JSON object")

        dtype = _header_field(header, "dtype", str)
        if dtype != "int16":
            raise FormatError(f"{path}: header field 'dtype' must be 'int16', got {dtype!r}")
        shape = _header_field(header, "shape", list)
        if len(shape) != 3 or not all(isinstance(s, int) and s > 0 for s in shape):
            raise FormatError(f"{path}: header field 'shape' must be 3 positive ints")
        spacing = _header_field(header, "spacing", list)
        if len(spacing) != 3 or not all(isinstance(s, (int, float)) and s > 0 for s in spacing):
            raise FormatError(f"{path}: header field 'spacing' must be 3 positive reals")
        patient_id = _header_field(header, "patient_id", str)
        if not patient_id:
            raise FormatError(f"{path}: header field 'patient_id' must be non-empty")
        has_mask = _header_field(header, "has_mask", bool)
        mask_shape = header.get("mask_shape", shape)
        if not isinstance(mask_shape, list) or not all(isinstance(s, int) for s in mask_shape):
            raise FormatError(f"{path}: header field 'mask_shape' must be a list of ints")

        n_vox = int(np.prod(shape))
        raw = f.read(2 * n_vox)
        if len(raw) != 2 * n_vox:
            raise FormatError(
                f"{path}: truncated voxel payload, expected {2 * n_vox} bytes got {len(raw)}"
            )
        voxels = np.frombuffer(raw, dtype="<i2").reshape(shape)

        mask = None
        if has_mask:
            if list(mask_shape) != list(shape):
                raise ValidationError(
                    f"{path}: mask shape {mask_shape} does not match voxels {shape}"
                )
            n_mask = int(np.prod(mask_shape))
            raw_mask = f.read(n_mask)
            if len(raw_mask) != n_mask:
                raise FormatError(
                    f"{path}: truncated mask payload, expected {n_mask} bytes got {len(raw_mask)}"
                )
            mask = np.frombuffer(raw_mask, dtype=np.uint8).reshape(mask_shape)

    return Volume(voxels=voxels.copy(), spacing=tuple(spacing), patient_id=patient_id,
                  mask=None if mask is None else mask.copy())


def extract_slices(
    volume: Volume,
    axis: int = 2,
    normalize_window: tuple[float, float] = DEFAULT_WINDOW,
) -> list[ImageSlice]:
    """Cut a volume into 2D slices along ``axis``, windowed and mapped to [0, 1].

    Intensities are clamped to the window then affinely mapped so the lower
    edge becomes 0 and the upper edge 1.  Masks are sliced in lockstep.
    """
    lo, hi = float(normalize_window[0]), float(normalize_window[1])
    if lo >= hi:
        raise ValidationError(f"normalize_window must satisfy lo < hi, got ({lo}, {hi})")
    if axis not in (0, 1, 2):
        raise ValidationError(f"axis must be 0, 1 or 2, got {axis}")

    slices = []
    for idx in range(volume.shape[axis]):
        vox2d = np.take(volume.voxels, idx, axis=axis).astype(np.float32)
        pixels = (np.clip(vox2d, lo, hi) - lo) / (hi - lo)
        mask2d = None
        if volume.mask is not None:
            mask2d = np.take(volume.mask, idx, axis=axis).copy()
        slices.append(ImageSlice(pixels=pixels, source=(volume.patient_id, axis, idx), mask=mask2d))
    return slices


def _class_radius_fraction(cls: int) -> tuple[float, float]:
    # class 1 is the largest organ; each further class halves, and the
    # bands stay disjoint so a later (smaller) organ cannot erase an
    # earlier (larger) one completely
    scale = 0.5 ** (cls - 1)
    return 0.14 * scale, 0.26 * scale


def _paint_volume(
    rng: np.random.Generator, spec: SyntheticSpec
) -> tuple[np.ndarray, np.ndarray]:
    size, depth = spec.image_size, spec.depth
    img = np.zeros((size, size, depth), dtype=np.float64)
    labels = np.zeros((size, size, depth), dtype=np.uint8)
    rr, cc, zz = np.ogrid[:size, :size, :depth]
    shapes = list(range(1, spec.n_organ_classes + 1))
    shapes += [
        int(rng.integers(1, spec.n_organ_classes + 1))
        for _ in range(spec.shapes_per_image - spec.n_organ_classes)
    ]
    # paint large classes first so small organs stay on top
    for cls in sorted(shapes):
        lo_frac, hi_frac = _class_radius_fraction(cls)
        a = rng.uniform(lo_frac, hi_frac) * size
        b = rng.uniform(lo_frac, hi_frac) * size
        c = min(rng.uniform(lo_frac, hi_frac) * depth + 0.5, depth / 2)
        cr = rng.uniform(a, size - a)
        ccol = rng.uniform(b, size - b)
        cz = rng.uniform(c, depth - c)
        inside = ((rr - cr) / a) ** 2 + ((cc - ccol) / b) ** 2 + ((zz - cz) / c) ** 2 <= 1.0
        lo_i, hi_i = spec.intensity_ranges[cls - 1]
        img[inside] = rng.uniform(lo_i, hi_i)
        labels[inside] = cls
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0), labels


def generate_synthetic_dataset(spec: SyntheticSpec, n_volumes: int) -> list[Volume]:
    """Generate ``n_volumes`` volumes of ellipsoid organs on a noisy background.

    Each organ is an axis-aligned 3D ellipsoid painted with a flat intensity
    drawn from its class band; the mask records exact class labels.  Every
    volume contains at least one organ of every class.  Output is a pure
    function of (spec, n_volumes).
    """
    if n_volumes < 1:
        raise ValidationError("n_volumes must be >= 1")
    rng = np.random.default_rng(spec.seed)
    volumes = []
    wanted = set(range(1, spec.n_organ_classes + 1))
    for i in range(n_volumes):
        for _ in range(20):
            img, labels = _paint_volume(rng, spec)
            if wanted <= set(np.unique(labels)):
                break
        else:
            raise ValidationError(
                "could not place every organ class in 20 attempts; adjust the spec"
            )
        voxels = np.round(img * INTENSITY_SCALE).astype(np.int16)
        volumes.append(
            Volume(
                voxels=voxels,
                spacing=(1.0, 1.0, 1.0),
                patient_id=f"synth{spec.seed:04d}-{i:03d}",
                mask=labels,
            )
        )
    return volumes


@dataclass
class DatasetManifest:
    """Volume paths tagged with split membership."""

    entries: list[dict] = field(default_factory=list)

    def add(self, path: str | Path, splits: Sequence[str]) -> None:
        splits = list(splits)
        for tag in splits:
            if tag not in SPLIT_TAGS:
                raise ValidationError(f"unknown split tag {tag!r}, expected one of {SPLIT_TAGS}")
        self.entries.append({"path": str(path), "splits": splits})

    def paths_for(self, tag: str) -> list[Path]:
        if tag not in SPLIT_TAGS:
            raise ValidationError(f"unknown split tag {tag!r}")
        return [Path(e["path"]) for e in self.entries if tag in e["splits"]]

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.entries, f, sort_keys=True, indent=1)
            f.write("\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        with open(path, "r", encoding="utf-8") as f:
            entries = json.load(f)
        if not isinstance(entries, list):
            raise FormatError(f"{path}: dataset manifest must be a JSON list")
        manifest = cls()
        for e in entries:
            if not isinstance(e, dict) or "path" not in e or "splits" not in e:
                raise FormatError(f"{path}: manifest entries need 'path' and 'splits'")
            manifest.add(e["path"], e["splits"])
        return manifest
