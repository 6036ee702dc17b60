"""Structure-aware image separation: SLIC superpixels and region sets.

Each slice is partitioned into superpixels by a grid-seeded local k-means
over (intensity, row, col). Every superpixel becomes a zero-padded square
crop; crops from all slices are pooled and shuffled into one region set
that is persisted as 16-bit PNGs plus a JSON-lines manifest.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import FormatError, ValidationError
from .imaging_io import ImageSlice

_CONN4 = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=np.uint8)


@dataclass
class SlicConfig:
    """Parameters of the superpixel stage.

    ``compactness`` trades intensity affinity against spatial regularity on
    [0, 1]-normalized images; the spatial term is scaled by the grid
    interval so the default behaves consistently across image sizes.
    """

    n_centers: int = 32
    compactness: float = 0.1
    max_iterations: int = 10
    convergence_shift: float = 1.0
    min_region_frac: float = 0.25

    def __post_init__(self):
        if self.n_centers < 1:
            raise ValidationError("n_centers must be >= 1")
        if self.compactness <= 0:
            raise ValidationError("compactness must be positive")
        if self.max_iterations < 1:
            raise ValidationError("max_iterations must be >= 1")
        if self.convergence_shift < 0:
            raise ValidationError("convergence_shift must be non-negative")
        if not (0 <= self.min_region_frac < 1):
            raise ValidationError("min_region_frac must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {
            "n_centers": self.n_centers,
            "compactness": self.compactness,
            "max_iterations": self.max_iterations,
            "convergence_shift": self.convergence_shift,
            "min_region_frac": self.min_region_frac,
        }


@dataclass
class SuperpixelLabelMap:
    """Result of segmenting one slice.

    ``inertia_history`` records the summed assignment score after each
    assign step, before connectivity enforcement; it is non-increasing.
    """

    labels: np.ndarray
    n_regions: int
    centers: list[tuple[float, float, float]]
    iterations_run: int
    inertia_history: list[float] = field(default_factory=list)


@dataclass
class RegionRecord:
    """One zero-padded square crop plus provenance.

    The crop side equals the longer bbox side; pixels outside
    ``foreground_mask`` are exactly zero. Arrays may be None for
    disk-backed records, in which case the *_path fields locate them.
    """

    source: tuple[str, int]  # (patient_id, slice_index)
    superpixel_id: int
    bbox: tuple[int, int, int, int]  # (r0, c0, r1, c1), half-open
    crop: Optional[np.ndarray] = None
    foreground_mask: Optional[np.ndarray] = None
    cluster_id: Optional[int] = None
    crop_path: Optional[str] = None
    mask_path: Optional[str] = None

    def __post_init__(self):
        r0, c0, r1, c1 = self.bbox
        if not (r0 < r1 and c0 < c1):
            raise ValidationError(f"degenerate bbox {self.bbox}")
        side = max(r1 - r0, c1 - c0)
        if self.crop is not None:
            self.crop = np.asarray(self.crop, dtype=np.float32)
            if self.crop.shape != (side, side):
                raise ValidationError(
                    f"crop shape {self.crop.shape} must be ({side}, {side}) for bbox {self.bbox}"
                )
        if self.foreground_mask is not None:
            self.foreground_mask = np.asarray(self.foreground_mask, dtype=bool)
            if self.crop is not None:
                if self.foreground_mask.shape != self.crop.shape:
                    raise ValidationError("foreground_mask shape must match crop")
                if np.any(self.crop[~self.foreground_mask] != 0):
                    raise ValidationError("crop must be exactly zero outside foreground")

    @property
    def side(self) -> int:
        r0, c0, r1, c1 = self.bbox
        return max(r1 - r0, c1 - c0)

    def content_offset(self) -> tuple[int, int]:
        """Top-left position of the bbox content inside the square crop."""
        r0, c0, r1, c1 = self.bbox
        return (self.side - (r1 - r0)) // 2, (self.side - (c1 - c0)) // 2

    def load_crop(self, root: Optional[Path] = None) -> np.ndarray:
        if self.crop is not None:
            return self.crop
        if self.crop_path is None:
            raise ValidationError("record has neither an in-memory crop nor a crop_path")
        return load_region_png(_resolve(self.crop_path, root))

    def load_foreground(self, root: Optional[Path] = None) -> np.ndarray:
        if self.foreground_mask is not None:
            return self.foreground_mask
        if self.mask_path is None:
            raise ValidationError("record has neither a foreground_mask nor a mask_path")
        return load_mask_png(_resolve(self.mask_path, root))


def _resolve(p: str, root: Optional[Path]) -> Path:
    path = Path(p)
    if not path.is_absolute() and root is not None:
        path = Path(root) / path
    return path


@dataclass
class RegionSetManifest:
    """The shuffled region set: record order is a seeded permutation."""

    records: list[RegionRecord]
    shuffle_seed: int
    slic_config: Optional[SlicConfig] = None
    separation: str = "slic"
    root: Optional[Path] = None

    def __len__(self) -> int:
        return len(self.records)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        meta = {
            "kind": "region_set",
            "separation": self.separation,
            "shuffle_seed": self.shuffle_seed,
            "slic_config": self.slic_config.to_dict() if self.slic_config else None,
        }
        with open(path, "w", encoding="utf-8") as f:
            f.write(json.dumps(meta, sort_keys=True, separators=(",", ":")) + "\n")
            for rec in self.records:
                row = {
                    "bbox": list(rec.bbox),
                    "cluster_id": rec.cluster_id,
                    "crop_path": rec.crop_path,
                    "mask_path": rec.mask_path,
                    "patient_id": rec.source[0],
                    "slice_index": rec.source[1],
                    "superpixel_id": rec.superpixel_id,
                }
                f.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "RegionSetManifest":
        path = Path(path)
        with open(path, "r", encoding="utf-8") as f:
            lines = [ln for ln in f.read().splitlines() if ln.strip()]
        if not lines:
            raise FormatError(f"{path}: empty region manifest")
        meta = json.loads(lines[0])
        if meta.get("kind") != "region_set":
            raise FormatError(f"{path}: first line is not a region_set header")
        records = []
        for ln in lines[1:]:
            row = json.loads(ln)
            records.append(
                RegionRecord(
                    source=(row["patient_id"], row["slice_index"]),
                    superpixel_id=row["superpixel_id"],
                    bbox=tuple(row["bbox"]),
                    cluster_id=row["cluster_id"],
                    crop_path=row["crop_path"],
                    mask_path=row["mask_path"],
                )
            )
        cfg = meta.get("slic_config")
        return cls(
            records=records,
            shuffle_seed=meta["shuffle_seed"],
            slic_config=SlicConfig(**cfg) if cfg else None,
            separation=meta.get("separation", "slic"),
            root=path.parent,
        )


def _gradient_magnitude(pixels: np.ndarray) -> np.ndarray:
    # |central difference| in rows plus cols, borders replicated
    padded = np.pad(pixels, 1, mode="edge")
    g_row = np.abs(padded[2:, 1:-1] - padded[:-2, 1:-1])
    g_col = np.abs(padded[1:-1, 2:] - padded[1:-1, :-2])
    return g_row + g_col


def _seed_centers(pixels: np.ndarray, n_centers: int) -> np.ndarray:
    """Grid-seed centers, then snap each to a strictly lower-gradient pixel
    in the 3x3 neighborhood of its nearest pixel (ties keep the seed)."""
    h, w = pixels.shape
    interval = math.sqrt(h * w / n_centers)
    n_rows = max(1, round(h / interval))
    n_cols = max(1, round(w / interval))
    rows = (np.arange(n_rows) + 0.5) * h / n_rows - 0.5
    cols = (np.arange(n_cols) + 0.5) * w / n_cols - 0.5
    grad = _gradient_magnitude(pixels)

    centers = []
    for r in rows:
        for c in cols:
            ar = min(max(int(round(r)), 0), h - 1)
            ac = min(max(int(round(c)), 0), w - 1)
            best = grad[ar, ac]
            pos = (float(r), float(c))
            anchor = (ar, ac)
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    nr, nc = ar + dr, ac + dc
                    if 0 <= nr < h and 0 <= nc < w and grad[nr, nc] < best:
                        best = grad[nr, nc]
                        pos = (float(nr), float(nc))
                        anchor = (nr, nc)
            centers.append((pos[0], pos[1], float(pixels[anchor])))
    return np.array(centers, dtype=np.float64)


def slic_segment(img: ImageSlice, cfg: SlicConfig, seed: int = 0) -> SuperpixelLabelMap:
    """Segment one slice into superpixels.

    Assignment scores squared intensity distance plus the squared spatial
    distance weighted by (compactness / interval)^2; centers update to the
    cluster means, which keeps the summed score non-increasing round over
    round. Each pixel always retains its current center as a candidate so
    the windowed search can never force a worse assignment. The procedure
    is fully deterministic; ``seed`` is reserved for stochastic variants.
    """
    del seed
    pixels = np.asarray(img.pixels, dtype=np.float64)
    h, w = pixels.shape
    if h < 3 or w < 3:
        raise ValidationError(f"image must be at least 3x3, got {h}x{w}")
    if cfg.n_centers > h * w:
        raise ValidationError(f"n_centers={cfg.n_centers} exceeds pixel count {h * w}")

    interval = math.sqrt(h * w / cfg.n_centers)
    weight2 = (cfg.compactness / interval) ** 2
    centers = _seed_centers(pixels, cfg.n_centers)
    k = len(centers)

    rr = np.arange(h, dtype=np.float64)[:, None]
    cc = np.arange(w, dtype=np.float64)[None, :]
    labels = np.full((h, w), -1, dtype=np.int64)
    inertia_history: list[float] = []
    iterations_run = 0

    for it in range(cfg.max_iterations):
        if it > 0:
            # current assignment stays available as the fallback candidate
            prev = labels
            dist = (
                (pixels - centers[prev, 2]) ** 2
                + weight2 * ((rr - centers[prev, 0]) ** 2 + (cc - centers[prev, 1]) ** 2)
            )
            new_labels = prev.copy()
        else:
            dist = np.full((h, w), np.inf)
            new_labels = np.full((h, w), -1, dtype=np.int64)

        for ki in range(k):
            cr, ccol, ci = centers[ki]
            r0 = max(0, int(math.ceil(cr - interval)))
            r1 = min(h, int(math.floor(cr + interval)) + 1)
            c0 = max(0, int(math.ceil(ccol - interval)))
            c1 = min(w, int(math.floor(ccol + interval)) + 1)
            if r0 >= r1 or c0 >= c1:
                continue
            win = pixels[r0:r1, c0:c1]
            d = (
                (win - ci) ** 2
                + weight2 * ((rr[r0:r1] - cr) ** 2 + (cc[:, c0:c1] - ccol) ** 2)
            )
            better = d < dist[r0:r1, c0:c1]
            dist[r0:r1, c0:c1][better] = d[better]
            new_labels[r0:r1, c0:c1][better] = ki

        orphan = new_labels < 0
        if orphan.any():
            # pathological window coverage: fall back to a full scan
            ys, xs = np.nonzero(orphan)
            d_all = (
                (pixels[ys, xs][:, None] - centers[None, :, 2]) ** 2
                + weight2
                * (
                    (ys[:, None] - centers[None, :, 0]) ** 2
                    + (xs[:, None] - centers[None, :, 1]) ** 2
                )
            )
            new_labels[ys, xs] = np.argmin(d_all, axis=1)
            dist[ys, xs] = np.min(d_all, axis=1)

        inertia_history.append(float(dist.sum()))
        labels = new_labels
        iterations_run += 1

        shift = 0.0
        new_centers = centers.copy()
        for ki in range(k):
            sel = labels == ki
            if not sel.any():
                continue
            ys, xs = np.nonzero(sel)
            new_centers[ki] = (ys.mean(), xs.mean(), pixels[sel].mean())
            shift = max(
                shift,
                math.hypot(new_centers[ki, 0] - centers[ki, 0], new_centers[ki, 1] - centers[ki, 1]),
            )
        centers = new_centers
        if shift < cfg.convergence_shift:
            break

    min_size = cfg.min_region_frac * (h * w / cfg.n_centers)
    labels = _enforce_connectivity(labels, min_size)

    return SuperpixelLabelMap(
        labels=labels,
        n_regions=int(labels.max()) + 1,
        centers=[tuple(c) for c in centers],
        iterations_run=iterations_run,
        inertia_history=inertia_history,
    )


def _enforce_connectivity(labels: np.ndarray, min_size: float) -> np.ndarray:
    """Split disconnected labels into components, absorb the small ones.

    Components smaller than ``min_size`` merge into their largest 4-adjacent
    neighbor (a component with no neighbor is kept). The result is compacted
    to consecutive ids ordered by first row-major occurrence.
    """
    h, w = labels.shape
    comp = np.full((h, w), -1, dtype=np.int64)
    n_comp = 0
    for lab in range(int(labels.max()) + 1):
        m = labels == lab
        if not m.any():
            continue
        cc_map, n_cc = ndimage.label(m, structure=_CONN4)
        for j in range(1, n_cc + 1):
            comp[cc_map == j] = n_comp
            n_comp += 1

    while True:
        sizes = np.bincount(comp.ravel(), minlength=n_comp)
        small = [i for i in range(n_comp) if 0 < sizes[i] < min_size]
        if not small:
            break
        small.sort(key=lambda i: (sizes[i], i))
        target = small[0]
        neighbors: dict[int, int] = {}
        sel = comp == target
        # collect 4-adjacent neighbor components without wrap-around
        ys, xs = np.nonzero(sel)
        for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            ny, nx = ys + dy, xs + dx
            ok = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
            for v in np.unique(comp[ny[ok], nx[ok]]):
                if v != target:
                    neighbors[int(v)] = int(sizes[v])
        if not neighbors:
            break
        best = max(neighbors.items(), key=lambda kv: (kv[1], -kv[0]))[0]
        comp[sel] = best

    # compact ids in first-occurrence order
    flat = comp.ravel()
    _, first_idx = np.unique(flat, return_index=True)
    order = flat[np.sort(first_idx)]
    remap = np.full(n_comp, -1, dtype=np.int64)
    for new_id, old_id in enumerate(order):
        remap[old_id] = new_id
    return remap[comp]


def extract_regions(img: ImageSlice, sp: SuperpixelLabelMap) -> list[RegionRecord]:
    """Turn every superpixel into a centered, zero-padded square crop."""
    pixels = np.asarray(img.pixels, dtype=np.float32)
    if sp.labels.shape != pixels.shape:
        raise ValidationError(
            f"label map shape {sp.labels.shape} does not match image {pixels.shape}"
        )
    patient_id, _, slice_index = img.source
    records = []
    for lab in range(sp.n_regions):
        ys, xs = np.nonzero(sp.labels == lab)
        r0, r1 = int(ys.min()), int(ys.max()) + 1
        c0, c1 = int(xs.min()), int(xs.max()) + 1
        hgt, wid = r1 - r0, c1 - c0
        side = max(hgt, wid)
        off_r, off_c = (side - hgt) // 2, (side - wid) // 2
        inside = sp.labels[r0:r1, c0:c1] == lab
        crop = np.zeros((side, side), dtype=np.float32)
        fg = np.zeros((side, side), dtype=bool)
        crop[off_r : off_r + hgt, off_c : off_c + wid][inside] = pixels[r0:r1, c0:c1][inside]
        fg[off_r : off_r + hgt, off_c : off_c + wid] = inside
        records.append(
            RegionRecord(
                source=(patient_id, slice_index),
                superpixel_id=lab,
                bbox=(r0, c0, r1, c1),
                crop=crop,
                foreground_mask=fg,
            )
        )
    return records


def regular_separation(img: ImageSlice, grid: int) -> list[RegionRecord]:
    """Split a slice into a grid of tiles with full foreground.

    Tiles are RegionRecords like superpixel crops; when the image size is
    not divisible the trailing tiles absorb the remainder.
    """
    if grid < 1:
        raise ValidationError("grid must be >= 1")
    pixels = np.asarray(img.pixels, dtype=np.float32)
    h, w = pixels.shape
    patient_id, _, slice_index = img.source
    row_edges = [i * h // grid for i in range(grid + 1)]
    col_edges = [i * w // grid for i in range(grid + 1)]
    records = []
    tile_id = 0
    for gi in range(grid):
        for gj in range(grid):
            r0, r1 = row_edges[gi], row_edges[gi + 1]
            c0, c1 = col_edges[gj], col_edges[gj + 1]
            hgt, wid = r1 - r0, c1 - c0
            side = max(hgt, wid)
            off_r, off_c = (side - hgt) // 2, (side - wid) // 2
            crop = np.zeros((side, side), dtype=np.float32)
            fg = np.zeros((side, side), dtype=bool)
            crop[off_r : off_r + hgt, off_c : off_c + wid] = pixels[r0:r1, c0:c1]
            fg[off_r : off_r + hgt, off_c : off_c + wid] = True
            records.append(
                RegionRecord(
                    source=(patient_id, slice_index),
                    superpixel_id=tile_id,
                    bbox=(r0, c0, r1, c1),
                    crop=crop,
                    foreground_mask=fg,
                )
            )
            tile_id += 1
    return records


def reconstruct_from_regions(records: Sequence[RegionRecord], shape: tuple[int, int]) -> np.ndarray:
    """Paste foreground pixels of all records back via their bboxes."""
    out = np.zeros(shape, dtype=np.float32)
    for rec in records:
        crop = rec.load_crop()
        fg = rec.load_foreground()
        r0, c0, r1, c1 = rec.bbox
        off_r, off_c = rec.content_offset()
        window = fg[off_r : off_r + (r1 - r0), off_c : off_c + (c1 - c0)]
        out[r0:r1, c0:c1][window] = crop[off_r : off_r + (r1 - r0), off_c : off_c + (c1 - c0)][window]
    return out


def save_region_png(crop: np.ndarray, path: Path) -> None:
    arr = np.round(np.clip(crop, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(arr).save(path)


def load_region_png(path: Path) -> np.ndarray:
    try:
        arr = np.array(Image.open(path))
    except OSError as exc:
        raise FormatError(f"cannot read region crop {path}: {exc}") from exc
    return arr.astype(np.float32) / 65535.0


def save_mask_png(mask: np.ndarray, path: Path) -> None:
    Image.fromarray(mask.astype(np.uint8) * 255).save(path)


def load_mask_png(path: Path) -> np.ndarray:
    try:
        arr = np.array(Image.open(path))
    except OSError as exc:
        raise FormatError(f"cannot read region mask {path}: {exc}") from exc
    return arr > 127


def _write_region_set(
    records: list[RegionRecord],
    shuffle_seed: int,
    out_dir: Path,
    separation: str,
    slic_config: Optional[SlicConfig],
) -> RegionSetManifest:
    out_dir = Path(out_dir)
    region_dir = out_dir / "regions"
    region_dir.mkdir(parents=True, exist_ok=True)
    for rec in records:
        stem = f"{rec.source[0]}_s{rec.source[1]:03d}_r{rec.superpixel_id:03d}"
        crop_path = region_dir / f"{stem}.png"
        mask_path = region_dir / f"{stem}_mask.png"
        try:
            save_region_png(rec.crop, crop_path)
            save_mask_png(rec.foreground_mask, mask_path)
        except OSError as exc:
            raise OSError(f"failed writing region files for {stem} under {region_dir}") from exc
        rec.crop_path = str(crop_path.relative_to(out_dir))
        rec.mask_path = str(mask_path.relative_to(out_dir))

    perm = np.random.default_rng(shuffle_seed).permutation(len(records))
    shuffled = [records[i] for i in perm]
    manifest = RegionSetManifest(
        records=shuffled,
        shuffle_seed=shuffle_seed,
        slic_config=slic_config,
        separation=separation,
        root=out_dir,
    )
    manifest.save(out_dir / "regions.jsonl")
    return manifest


def build_region_set(
    slices: Sequence[ImageSlice],
    cfg: SlicConfig,
    shuffle_seed: int,
    out_dir: str | Path,
) -> RegionSetManifest:
    """Run SLIC on every slice, persist all crops, shuffle the union."""
    if not slices:
        raise ValidationError("slice list must be non-empty")
    records: list[RegionRecord] = []
    for sl in slices:
        sp = slic_segment(sl, cfg, seed=shuffle_seed)
        records.extend(extract_regions(sl, sp))
    return _write_region_set(records, shuffle_seed, Path(out_dir), "slic", cfg)


def build_regular_region_set(
    slices: Sequence[ImageSlice],
    grid: int,
    shuffle_seed: int,
    out_dir: str | Path,
) -> RegionSetManifest:
    """Regular-grid ablation: tile every slice into grid x grid squares."""
    if not slices:
        raise ValidationError("slice list must be non-empty")
    records: list[RegionRecord] = []
    for sl in slices:
        records.extend(regular_separation(sl, grid))
    return _write_region_set(records, shuffle_seed, Path(out_dir), "regular", None)


def build_unseparated_region_set(
    slices: Sequence[ImageSlice],
    shuffle_seed: int,
    out_dir: str | Path,
) -> RegionSetManifest:
    """No-separation ablation: each full slice becomes a single region."""
    if not slices:
        raise ValidationError("slice list must be non-empty")
    records: list[RegionRecord] = []
    for sl in slices:
        records.extend(regular_separation(sl, 1))
    return _write_region_set(records, shuffle_seed, Path(out_dir), "none", None)
