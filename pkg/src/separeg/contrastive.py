"""Region-level contrastive pretraining.

Two augmented views of the same region crop are pushed together by a
predictor/stop-gradient pair: L = 1/2 (D(q1, z2) + D(q2, z1)) where D is
negative cosine similarity and the targets z are detached. A collapse
monitor tracks the per-dimension std of the normalized embeddings, which
sits near 1/sqrt(d) for healthy training and near 0 on collapse.

All randomness flows through explicit generators so two runs with the
same seed produce identical batches, augmentations, and updates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ValidationError
from .nets import Checkpoint, NetworkSpec, make_encoder, make_predictor, make_projector, save_checkpoint
from .superpixel import RegionRecord, RegionSetManifest


@dataclass
class AugmentationPolicy:
    """View sampling for one region crop, driven by a torch.Generator."""

    out_size: int = 128
    crop_scale: tuple[float, float] = (0.2, 1.0)
    flip_prob: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    blur_kernel: int = 3

    def __post_init__(self):
        if self.out_size < 4:
            raise ValidationError("out_size must be >= 4")
        lo, hi = self.crop_scale
        if not (0 < lo <= hi <= 1):
            raise ValidationError("crop_scale must satisfy 0 < lo <= hi <= 1")
        if self.blur_kernel % 2 != 1:
            raise ValidationError("blur_kernel must be odd")

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        # JSON has no tuples; emit lists so a reloaded config compares equal
        d["crop_scale"] = list(self.crop_scale)
        d["blur_sigma"] = list(self.blur_sigma)
        return d

    def _uniform(self, lo: float, hi: float, gen: torch.Generator) -> float:
        return float(torch.empty(1).uniform_(lo, hi, generator=gen).item())

    def _random_resized_crop(self, img: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
        h, w = img.shape[-2:]
        area = h * w
        top, left, ch, cw = 0, 0, h, w
        for _ in range(10):
            target = self._uniform(self.crop_scale[0], self.crop_scale[1], gen) * area
            ratio = math.exp(self._uniform(math.log(3 / 4), math.log(4 / 3), gen))
            ch = int(round(math.sqrt(target / ratio)))
            cw = int(round(math.sqrt(target * ratio)))
            if 0 < ch <= h and 0 < cw <= w:
                top = int(torch.randint(0, h - ch + 1, (1,), generator=gen).item())
                left = int(torch.randint(0, w - cw + 1, (1,), generator=gen).item())
                break
        else:
            side = min(h, w)
            top, left, ch, cw = (h - side) // 2, (w - side) // 2, side, side
        crop = img[:, top : top + ch, left : left + cw]
        return F.interpolate(
            crop[None], size=(self.out_size, self.out_size), mode="bilinear", align_corners=False
        )[0]

    def _blur(self, img: torch.Tensor, sigma: float) -> torch.Tensor:
        k = self.blur_kernel
        xs = torch.arange(k, dtype=torch.float32) - (k - 1) / 2
        kernel = torch.exp(-(xs**2) / (2 * sigma * sigma))
        kernel = kernel / kernel.sum()
        pad = k // 2
        col = F.conv2d(F.pad(img[None], (0, 0, pad, pad), mode="reflect"), kernel.view(1, 1, k, 1))
        row = F.conv2d(F.pad(col, (pad, pad, 0, 0), mode="reflect"), kernel.view(1, 1, 1, k))
        return row[0]

    def apply(self, img: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
        """Sample one view: crop, flip, intensity jitter, optional blur."""
        if img.ndim == 2:
            img = img[None]
        view = self._random_resized_crop(img, gen)
        if self._uniform(0.0, 1.0, gen) < self.flip_prob:
            view = torch.flip(view, dims=[-1])
        if self.brightness > 0:
            view = view + self._uniform(-self.brightness, self.brightness, gen)
        if self.contrast > 0:
            factor = 1.0 + self._uniform(-self.contrast, self.contrast, gen)
            mean = view.mean()
            view = (view - mean) * factor + mean
        if self.blur_prob > 0 and self._uniform(0.0, 1.0, gen) < self.blur_prob:
            sigma = self._uniform(self.blur_sigma[0], self.blur_sigma[1], gen)
            view = self._blur(view, sigma)
        return view.clamp(0.0, 1.0)


@dataclass
class PretrainConfig:
    """Optimization schedule for the contrastive stage."""

    iterations: int = 100_000
    batch_size: int = 32
    lr_base: float = 0.05  # scaled by batch_size / 256
    momentum: float = 0.9
    weight_decay: float = 1e-4
    stop_gradient: bool = True
    seed: int = 0
    log_every: int = 50
    collapse_warn_frac: float = 0.5  # warn below this fraction of 1/sqrt(d)
    aug: AugmentationPolicy = field(default_factory=AugmentationPolicy)

    def __post_init__(self):
        if self.iterations < 0:
            raise ValidationError("iterations must be >= 0")
        if self.batch_size < 2:
            raise ValidationError("batch_size must be >= 2 (batch norm needs it)")
        if self.log_every < 1:
            raise ValidationError("log_every must be >= 1")

    @property
    def lr(self) -> float:
        return self.lr_base * self.batch_size / 256

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["aug"] = self.aug.to_dict()
        return d


def cosine_similarity_loss(q: torch.Tensor, z: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Negative cosine similarity, averaged over the batch.

    Norms are floored at ``eps``; with eps=0 a zero-norm row is an error
    rather than a silent division by zero.
    """
    if q.shape != z.shape:
        raise ValidationError(f"shape mismatch {tuple(q.shape)} vs {tuple(z.shape)}")
    qn = q.norm(dim=1)
    zn = z.norm(dim=1)
    if eps == 0.0:
        if bool((qn == 0).any()) or bool((zn == 0).any()):
            raise ValidationError("zero-norm embedding with eps=0")
        denom = qn * zn
    else:
        denom = qn.clamp_min(eps) * zn.clamp_min(eps)
    return -((q * z).sum(dim=1) / denom).mean()


def simsiam_loss(
    q_a: torch.Tensor,
    z_b: torch.Tensor,
    q_b: torch.Tensor,
    z_a: torch.Tensor,
    stop_gradient: bool = True,
    eps: float = 1e-12,
) -> torch.Tensor:
    """Symmetric view-matching loss; targets are detached when
    ``stop_gradient`` is set."""
    if stop_gradient:
        z_a = z_a.detach()
        z_b = z_b.detach()
    return 0.5 * (cosine_similarity_loss(q_a, z_b, eps) + cosine_similarity_loss(q_b, z_a, eps))


def collapse_metric(z: torch.Tensor) -> float:
    """Mean per-dimension std of the L2-normalized embeddings."""
    zn = F.normalize(z.detach(), dim=1)
    return float(zn.std(dim=0).mean().item())


def load_region_tensor(
    rec: RegionRecord, root: Optional[Path], out_size: int
) -> torch.Tensor:
    """Load a crop at native size and resize bilinearly to out_size."""
    crop = rec.load_crop(root)
    t = torch.from_numpy(np.ascontiguousarray(crop, dtype=np.float32))[None]
    if t.shape[-1] != out_size or t.shape[-2] != out_size:
        t = F.interpolate(t[None], size=(out_size, out_size), mode="bilinear", align_corners=False)[0]
    return t


def _cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 0:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total))


def pretrain_inter(
    manifest: RegionSetManifest,
    net_spec: NetworkSpec,
    cfg: PretrainConfig,
    out_dir: str | Path,
    stage: str = "inter",
    log_name: Optional[str] = None,
    config_hash: str = "",
) -> Checkpoint:
    """Train encoder + projector + predictor on the shuffled region set.

    Writes ``<stage>.ckpt`` and a JSON-lines training log under out_dir
    and returns the checkpoint. With iterations=0 the seeded initial
    networks are checkpointed without any update.
    """
    if len(manifest.records) == 0:
        raise ValidationError("region set is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(cfg.seed)
    encoder = make_encoder(net_spec)
    projector = make_projector(net_spec)
    predictor = make_predictor(net_spec)

    params = (
        list(encoder.parameters()) + list(projector.parameters()) + list(predictor.parameters())
    )
    opt = torch.optim.SGD(
        params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )
    sampler = np.random.default_rng(cfg.seed)
    aug_gen = torch.Generator().manual_seed(cfg.seed)

    log_path = out_dir / (log_name or f"pretrain_{stage}_log.jsonl")
    collapse_floor = cfg.collapse_warn_frac / math.sqrt(net_spec.proj_out)
    last_loss, last_std = float("nan"), float("nan")

    with open(log_path, "w", encoding="utf-8") as log:
        for step in range(cfg.iterations):
            lr = _cosine_lr(cfg.lr, step, cfg.iterations)
            for group in opt.param_groups:
                group["lr"] = lr

            idx = sampler.integers(0, len(manifest.records), size=cfg.batch_size)
            v1, v2 = [], []
            for i in idx:
                rec = manifest.records[int(i)]
                img = load_region_tensor(rec, manifest.root, cfg.aug.out_size)
                v1.append(cfg.aug.apply(img, aug_gen))
                v2.append(cfg.aug.apply(img, aug_gen))
            x1 = torch.stack(v1)
            x2 = torch.stack(v2)

            encoder.train(), projector.train(), predictor.train()
            z1 = projector(encoder(x1))
            z2 = projector(encoder(x2))
            q1 = predictor(z1)
            q2 = predictor(z2)
            loss = simsiam_loss(q1, z2, q2, z1, stop_gradient=cfg.stop_gradient)

            opt.zero_grad()
            loss.backward()
            opt.step()

            last_loss = float(loss.item())
            last_std = collapse_metric(z1)
            if (step + 1) % cfg.log_every == 0 or step == cfg.iterations - 1:
                log.write(
                    json.dumps(
                        {
                            "iteration": step + 1,
                            "loss": last_loss,
                            "collapse_std": last_std,
                            "lr": lr,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
            if last_std < collapse_floor:
                log.write(
                    json.dumps(
                        {
                            "event": "collapse_warning",
                            "iteration": step + 1,
                            "collapse_std": last_std,
                            "threshold": collapse_floor,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )

    encoder.eval(), projector.eval(), predictor.eval()
    ckpt = Checkpoint.from_modules(
        stage,
        net_spec,
        {"encoder": encoder, "projector": projector, "predictor": predictor},
        config_hash=config_hash,
        meta={
            "iterations": cfg.iterations,
            "seed": cfg.seed,
            "final_loss": last_loss,
            "final_collapse_std": last_std,
            "n_regions": len(manifest.records),
        },
    )
    save_checkpoint(ckpt, out_dir / f"{stage}.ckpt")
    return ckpt
