"""Segmentation fine-tuning and patient-level evaluation.

The U-Net trains on 2D slices with soft Dice loss; model selection uses
mean validation DSC. Evaluation is volumetric and per patient: slice
predictions are restacked into a volume, then DSC and HD95 are computed
per foreground class against the stored mask.

HD95 conventions: a boundary voxel is a foreground voxel with at least
one background or out-of-bounds face neighbor; distances from both
boundaries are pooled and the 95th percentile taken. Two empty masks
give 0.0; exactly one empty mask gives the sentinel inf, which reports
exclude from aggregates while counting the exclusions.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import FormatError, ValidationError
from .imaging_io import Volume, extract_slices
from .nets import Checkpoint, NetworkSpec, UNet, make_unet, save_checkpoint

HD95_SENTINEL = float("inf")


@dataclass
class FinetuneConfig:
    """Optimization schedule for segmentation fine-tuning."""

    epochs: int = 200
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    axis: int = 2
    window: tuple[float, float] = (0.0, 1000.0)  # synthetic intensity scale
    val_every: int = 1
    init: str = "auto"  # auto: use the pretrained encoder; random: train from scratch

    def __post_init__(self):
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.val_every < 1:
            raise ValidationError("val_every must be >= 1")
        if self.init not in ("auto", "random"):
            raise ValidationError("init must be 'auto' or 'random'")

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["window"] = list(self.window)
        return d


def dice_loss(logits: torch.Tensor, target: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Soft Dice loss over foreground classes.

    Overlap sums run over the whole batch; the loss is one minus the mean
    foreground-class Dice.
    """
    if logits.ndim != 4:
        raise ValidationError("logits must be (B, C, H, W)")
    n_classes = logits.shape[1]
    if n_classes < 2:
        raise ValidationError("need at least 2 classes")
    if target.shape != (logits.shape[0], logits.shape[2], logits.shape[3]):
        raise ValidationError(
            f"target shape {tuple(target.shape)} does not match logits {tuple(logits.shape)}"
        )
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= n_classes):
        raise ValidationError(
            f"target labels must lie in [0, {n_classes}), got "
            f"[{int(target.min())}, {int(target.max())}]"
        )
    probs = F.softmax(logits, dim=1)
    onehot = F.one_hot(target.long(), n_classes).permute(0, 3, 1, 2).to(probs.dtype)
    dims = (0, 2, 3)
    inter = (probs * onehot).sum(dim=dims)
    denom = probs.sum(dim=dims) + onehot.sum(dim=dims)
    dice = (2 * inter + eps) / (denom + eps)
    return 1.0 - dice[1:].mean()


def dsc(pred: np.ndarray, gt: np.ndarray) -> float:
    """Dice similarity of two binary masks; two empty masks agree fully."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValidationError(f"shape mismatch {pred.shape} vs {gt.shape}")
    p, g = int(pred.sum()), int(gt.sum())
    if p + g == 0:
        return 1.0
    inter = int(np.logical_and(pred, gt).sum())
    return 2.0 * inter / (p + g)


def _boundary(mask: np.ndarray) -> np.ndarray:
    # face-connected erosion; out-of-bounds counts as background
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    eroded = ndimage.binary_erosion(mask, structure=structure, border_value=0)
    return mask & ~eroded


def hd95(
    pred: np.ndarray, gt: np.ndarray, spacing: Optional[Sequence[float]] = None
) -> float:
    """95th percentile of pooled symmetric boundary distances.

    Distances are in voxel units unless ``spacing`` scales each axis.
    Both masks empty returns 0.0; exactly one empty returns the inf
    sentinel.
    """
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValidationError(f"shape mismatch {pred.shape} vs {gt.shape}")
    p_any, g_any = bool(pred.any()), bool(gt.any())
    if not p_any and not g_any:
        return 0.0
    if p_any != g_any:
        return HD95_SENTINEL
    if spacing is None:
        scale = np.ones(pred.ndim, dtype=np.float64)
    else:
        scale = np.asarray(spacing, dtype=np.float64)
        if scale.shape != (pred.ndim,) or (scale <= 0).any():
            raise ValidationError(f"spacing must be {pred.ndim} positive values")
    bp = np.argwhere(_boundary(pred)).astype(np.float64) * scale
    bg = np.argwhere(_boundary(gt)).astype(np.float64) * scale
    d_pg = cKDTree(bg).query(bp)[0]
    d_gp = cKDTree(bp).query(bg)[0]
    return float(np.percentile(np.concatenate([d_pg, d_gp]), 95))


@dataclass
class MetricsReport:
    """Per-patient metrics plus aggregates; serializes canonically.

    The JSON form carries no timestamps and sorts every key, so equal
    results produce byte-equal files. Sentinel HD95 values appear as
    null with their count in ``hd95_excluded``.
    """

    per_patient: dict[str, dict]
    aggregate: dict
    config_hash: str = ""
    seeds: list[int] = field(default_factory=list)
    spacing_mode: str = "voxel"

    def to_dict(self) -> dict:
        return {
            "kind": "metrics_report",
            "per_patient": self.per_patient,
            "aggregate": self.aggregate,
            "config_hash": self.config_hash,
            "seeds": self.seeds,
            "spacing_mode": self.spacing_mode,
        }

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.canonical_json(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if doc.get("kind") != "metrics_report":
            raise FormatError(f"{path}: not a metrics report")
        return cls(
            per_patient=doc["per_patient"],
            aggregate=doc["aggregate"],
            config_hash=doc.get("config_hash", ""),
            seeds=doc.get("seeds", []),
            spacing_mode=doc.get("spacing_mode", "voxel"),
        )

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["patient_id", "dsc", "hd95"])
            for pid in sorted(self.per_patient):
                row = self.per_patient[pid]
                w.writerow([pid, row["dsc"], "" if row["hd95"] is None else row["hd95"]])
            w.writerow([])
            w.writerow(["aggregate_dsc_mean", self.aggregate["dsc_mean"]])
            w.writerow(["aggregate_dsc_stderr", self.aggregate["dsc_stderr"]])
            w.writerow(["aggregate_hd95_mean", self.aggregate["hd95_mean"]])
            w.writerow(["aggregate_hd95_stderr", self.aggregate["hd95_stderr"]])
            w.writerow(["hd95_excluded", self.aggregate["hd95_excluded"]])
        return path

    def plot(self, path: str | Path) -> Path:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        pids = sorted(self.per_patient)
        vals = [self.per_patient[p]["dsc"] for p in pids]
        fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(pids)), 3.5))
        ax.bar(range(len(pids)), vals, color="#4878a8")
        ax.axhline(self.aggregate["dsc_mean"], color="#c44e52", linestyle="--", label="mean")
        ax.set_xticks(range(len(pids)))
        ax.set_xticklabels(pids, rotation=45, ha="right", fontsize=7)
        ax.set_ylabel("DSC")
        ax.set_ylim(0, 1)
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
        return Path(path)


def _mean_stderr(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return float("nan"), float("nan")
    mean = float(arr.mean())
    stderr = float(arr.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else 0.0
    return mean, stderr


def build_report(
    per_patient_raw: dict[str, dict],
    config_hash: str = "",
    seeds: Optional[list[int]] = None,
    spacing_mode: str = "voxel",
) -> MetricsReport:
    """Aggregate per-patient, per-class metrics into a report.

    ``per_patient_raw`` maps patient id to dsc_per_class / hd95_per_class
    lists where a sentinel (non-finite) HD95 marks an excluded pair.
    """
    per_patient = {}
    excluded_total = 0
    for pid, row in per_patient_raw.items():
        dscs = row["dsc_per_class"]
        hds = row["hd95_per_class"]
        finite = [h for h in hds if h is not None and math.isfinite(h)]
        excluded = len(hds) - len(finite)
        excluded_total += excluded
        per_patient[pid] = {
            "dsc": float(np.mean(dscs)),
            "hd95": float(np.mean(finite)) if finite else None,
            "dsc_per_class": [float(d) for d in dscs],
            "hd95_per_class": [
                None if (h is None or not math.isfinite(h)) else float(h) for h in hds
            ],
            "hd95_excluded": excluded,
        }
    dsc_mean, dsc_stderr = _mean_stderr([r["dsc"] for r in per_patient.values()])
    hd_vals = [r["hd95"] for r in per_patient.values() if r["hd95"] is not None]
    hd_mean, hd_stderr = _mean_stderr(hd_vals) if hd_vals else (float("nan"), float("nan"))
    aggregate = {
        "dsc_mean": dsc_mean,
        "dsc_stderr": dsc_stderr,
        "hd95_mean": None if hd_vals == [] else hd_mean,
        "hd95_stderr": None if hd_vals == [] else hd_stderr,
        "hd95_excluded": excluded_total,
        "n_patients": len(per_patient),
    }
    return MetricsReport(
        per_patient=per_patient,
        aggregate=aggregate,
        config_hash=config_hash,
        seeds=seeds or [],
        spacing_mode=spacing_mode,
    )


def _slices_to_tensors(
    volumes: Sequence[Volume], axis: int, window: tuple[float, float]
) -> tuple[torch.Tensor, torch.Tensor]:
    xs, ys = [], []
    for vol in volumes:
        if vol.mask is None:
            raise ValidationError(f"volume {vol.patient_id} has no mask")
        for sl in extract_slices(vol, axis=axis, normalize_window=window):
            xs.append(torch.from_numpy(sl.pixels)[None])
            ys.append(torch.from_numpy(sl.mask.astype(np.int64)))
    return torch.stack(xs), torch.stack(ys)


def predict_volume(
    model: UNet,
    volume: Volume,
    window: tuple[float, float],
    axis: int = 2,
    batch_size: int = 8,
) -> np.ndarray:
    """Segment a volume slice by slice and restack along the same axis."""
    slices = extract_slices(volume, axis=axis, normalize_window=window)
    model.eval()
    preds = []
    with torch.no_grad():
        for start in range(0, len(slices), batch_size):
            chunk = slices[start : start + batch_size]
            x = torch.stack([torch.from_numpy(s.pixels)[None] for s in chunk])
            logits = model(x)
            preds.extend(logits.argmax(dim=1).numpy().astype(np.uint8))
    return np.stack(preds, axis=axis)


def _mean_val_dsc(
    model: UNet,
    val_volumes: Sequence[Volume],
    n_classes: int,
    window: tuple[float, float],
    axis: int,
    batch_size: int,
) -> float:
    scores = []
    for vol in val_volumes:
        pred = predict_volume(model, vol, window, axis, batch_size)
        scores.extend(dsc(pred == c, vol.mask == c) for c in range(1, n_classes))
    return float(np.mean(scores))


def finetune(
    train_volumes: Sequence[Volume],
    val_volumes: Sequence[Volume],
    net_spec: NetworkSpec,
    n_classes: int,
    cfg: FinetuneConfig,
    out_dir: str | Path,
    encoder_init: Optional[Checkpoint] = None,
    val_metric_fn: Optional[Callable[[UNet], float]] = None,
    config_hash: str = "",
) -> Checkpoint:
    """Train the U-Net with Dice loss, keeping the best-validation weights.

    ``val_metric_fn`` defaults to mean validation DSC over foreground
    classes; a higher value is better and ties keep the earlier epoch.
    Writes finetuned.ckpt and a JSON-lines log under out_dir.
    """
    if not train_volumes:
        raise ValidationError("train volume list is empty")
    if not val_volumes and val_metric_fn is None:
        raise ValidationError("need validation volumes or an explicit val_metric_fn")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(cfg.seed)
    model = make_unet(net_spec, n_classes, encoder_init=encoder_init)
    x_train, y_train = _slices_to_tensors(train_volumes, cfg.axis, cfg.window)
    if int(y_train.max()) >= n_classes:
        raise ValidationError(
            f"mask labels reach {int(y_train.max())} but n_classes={n_classes}"
        )
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)

    def default_metric(m: UNet) -> float:
        return _mean_val_dsc(m, val_volumes, n_classes, cfg.window, cfg.axis, cfg.batch_size)

    metric_fn = val_metric_fn or default_metric
    best_val = -float("inf")
    best_epoch = -1
    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    log_path = out_dir / "finetune_log.jsonl"

    with open(log_path, "w", encoding="utf-8") as log:
        if cfg.epochs == 0:
            best_val = float(metric_fn(model))
            best_epoch = 0
        for epoch in range(cfg.epochs):
            model.train()
            perm = rng.permutation(len(x_train))
            losses = []
            for start in range(0, len(perm), cfg.batch_size):
                sel = torch.from_numpy(perm[start : start + cfg.batch_size])
                logits = model(x_train[sel])
                loss = dice_loss(logits, y_train[sel])
                opt.zero_grad()
                loss.backward()
                opt.step()
                losses.append(float(loss.item()))
            entry = {"epoch": epoch + 1, "train_loss": float(np.mean(losses))}
            if (epoch + 1) % cfg.val_every == 0 or epoch == cfg.epochs - 1:
                val = float(metric_fn(model))
                entry["val_dsc"] = val
                if val > best_val:
                    best_val = val
                    best_epoch = epoch + 1
                    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            log.write(json.dumps(entry, sort_keys=True) + "\n")

    model.load_state_dict(best_state)
    model.eval()
    ckpt = Checkpoint.from_modules(
        "finetuned",
        net_spec,
        {"unet": model},
        config_hash=config_hash,
        meta={
            "n_classes": n_classes,
            "epochs": cfg.epochs,
            "seed": cfg.seed,
            "best_epoch": best_epoch,
            "best_val_dsc": best_val,
            "init": "pretrained" if encoder_init is not None else "random",
        },
    )
    save_checkpoint(ckpt, out_dir / "finetuned.ckpt")
    return ckpt


def unet_from_checkpoint(ckpt: Checkpoint) -> UNet:
    if ckpt.stage != "finetuned":
        raise ValidationError(f"expected a finetuned checkpoint, got stage {ckpt.stage!r}")
    if "n_classes" not in ckpt.meta:
        raise FormatError("finetuned checkpoint misses n_classes metadata")
    model = make_unet(ckpt.spec, int(ckpt.meta["n_classes"]))
    ckpt.load_into("unet", model)
    model.eval()
    return model


def evaluate(
    ckpt: Checkpoint,
    volumes: Sequence[Volume],
    window: tuple[float, float] = (0.0, 1000.0),
    axis: int = 2,
    use_spacing: bool = False,
    batch_size: int = 8,
    config_hash: str = "",
    seeds: Optional[list[int]] = None,
) -> MetricsReport:
    """Patient-level DSC and HD95 for every volume against its mask."""
    if not volumes:
        raise ValidationError("volume list is empty")
    model = unet_from_checkpoint(ckpt)
    n_classes = int(ckpt.meta["n_classes"])
    raw = {}
    for vol in volumes:
        if vol.mask is None:
            raise ValidationError(f"volume {vol.patient_id} has no mask")
        pred = predict_volume(model, vol, window, axis, batch_size)
        spacing = vol.spacing if use_spacing else None
        dscs, hds = [], []
        for c in range(1, n_classes):
            dscs.append(dsc(pred == c, vol.mask == c))
            hds.append(hd95(pred == c, vol.mask == c, spacing))
        raw[vol.patient_id] = {"dsc_per_class": dscs, "hd95_per_class": hds}
    return build_report(
        raw,
        config_hash=config_hash,
        seeds=seeds,
        spacing_mode="spacing" if use_spacing else "voxel",
    )
