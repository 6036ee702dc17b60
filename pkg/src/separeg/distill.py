"""Per-subset pretraining and knowledge integration.

Each cluster's regions train their own contrastive model (the intra
teachers). A student encoder then learns from all teachers at once
through two losses on encoder features:

  intra: KL(softmax(f_student / T) || softmax(f_teacher / T)), where the
         teacher is the intra model of the region's own cluster;
  inter: negative cosine similarity between a trainable projection of the
         student features and the frozen projection produced by the
         inter-organ model on the same input.

Teachers stay frozen throughout; the student encoder and its projector
copy are the only trainable parts.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .contrastive import (
    AugmentationPolicy,
    PretrainConfig,
    cosine_similarity_loss,
    load_region_tensor,
    pretrain_inter,
)
from .errors import ValidationError
from .nets import Checkpoint, NetworkSpec, make_encoder, make_projector, save_checkpoint
from .superpixel import RegionSetManifest


@dataclass
class DistillConfig:
    """Optimization schedule for the knowledge-integration stage."""

    iterations: int = 100_000
    batch_size: int = 32
    temperature: float = 1.0
    w_intra: float = 1.0
    w_inter: float = 1.0
    lr_base: float = 0.05  # scaled by batch_size / 256
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    log_every: int = 50
    aug: AugmentationPolicy = field(default_factory=AugmentationPolicy)

    def __post_init__(self):
        if self.iterations < 0:
            raise ValidationError("iterations must be >= 0")
        if self.batch_size < 2:
            raise ValidationError("batch_size must be >= 2 (batch norm needs it)")
        if self.temperature <= 0:
            raise ValidationError("temperature must be positive")
        if self.w_intra < 0 or self.w_inter < 0:
            raise ValidationError("loss weights must be non-negative")

    @property
    def lr(self) -> float:
        return self.lr_base * self.batch_size / 256

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["aug"] = self.aug.to_dict()
        return d


@dataclass
class TeacherBundle:
    """Frozen inter-organ model plus one intra teacher per cluster.

    A slot may be None when its cluster was empty at the intra stage; no
    region routes to such a slot because cluster ids come from the same
    clustering.
    """

    inter: Checkpoint
    intra: list[Optional[Checkpoint]]

    def __post_init__(self):
        if self.inter.stage != "inter":
            raise ValidationError(f"inter teacher has stage {self.inter.stage!r}")
        if not self.intra:
            raise ValidationError("at least one intra teacher slot is required")
        for j, ck in enumerate(self.intra):
            if ck is None:
                continue
            if ck.stage != f"intra_{j}":
                raise ValidationError(
                    f"intra teacher slot {j} has stage {ck.stage!r}, expected intra_{j}"
                )
            if ck.spec != self.inter.spec:
                raise ValidationError(f"intra teacher {j} spec differs from inter spec")
        if all(ck is None for ck in self.intra):
            raise ValidationError("all intra teacher slots are empty")


def pretrain_intra(
    subsets: Sequence[RegionSetManifest],
    net_spec: NetworkSpec,
    cfg: PretrainConfig,
    out_dir: str | Path,
    config_hash: str = "",
) -> list[Optional[Checkpoint]]:
    """Train one contrastive model per cluster subset.

    Subset k uses seed cfg.seed + k and stage tag intra_<k>. Empty
    subsets are skipped with a logged warning; if every subset is empty
    that is an error.
    """
    if all(len(s.records) == 0 for s in subsets):
        raise ValidationError("every cluster subset is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    teachers: list[Optional[Checkpoint]] = []
    warn_path = out_dir / "pretrain_intra_warnings.jsonl"
    warnings = []
    for k, subset in enumerate(subsets):
        if len(subset.records) == 0:
            warnings.append({"event": "empty_subset_skipped", "cluster_id": k})
            teachers.append(None)
            continue
        sub_cfg = PretrainConfig(
            iterations=cfg.iterations,
            batch_size=cfg.batch_size,
            lr_base=cfg.lr_base,
            momentum=cfg.momentum,
            weight_decay=cfg.weight_decay,
            stop_gradient=cfg.stop_gradient,
            seed=cfg.seed + k,
            log_every=cfg.log_every,
            collapse_warn_frac=cfg.collapse_warn_frac,
            aug=cfg.aug,
        )
        ck = pretrain_inter(
            subset,
            net_spec,
            sub_cfg,
            out_dir,
            stage=f"intra_{k}",
            config_hash=config_hash,
        )
        ck.meta["cluster_id"] = k
        teachers.append(ck)
    if warnings:
        with open(warn_path, "w", encoding="utf-8") as f:
            for w in warnings:
                f.write(json.dumps(w, sort_keys=True) + "\n")
    return teachers


def intra_loss(
    f_student: torch.Tensor, f_teacher: torch.Tensor, temperature: float = 1.0
) -> torch.Tensor:
    """KL divergence between tempered softmaxes of encoder features,
    student distribution first, averaged over the batch."""
    if f_student.shape != f_teacher.shape:
        raise ValidationError(
            f"shape mismatch {tuple(f_student.shape)} vs {tuple(f_teacher.shape)}"
        )
    if temperature <= 0:
        raise ValidationError("temperature must be positive")
    log_p = F.log_softmax(f_student / temperature, dim=1)
    log_q = F.log_softmax(f_teacher / temperature, dim=1)
    return (log_p.exp() * (log_p - log_q)).sum(dim=1).mean()


def inter_loss(
    f_student: torch.Tensor,
    z_target: torch.Tensor,
    projector: torch.nn.Module,
    eps: float = 1e-12,
) -> torch.Tensor:
    """Negative cosine similarity between the projected student features
    and the frozen inter-organ embedding of the same input."""
    return cosine_similarity_loss(projector(f_student), z_target.detach(), eps)


def _state_sha(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode("utf-8"))
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def distill(
    manifest: RegionSetManifest,
    teachers: TeacherBundle,
    net_spec: NetworkSpec,
    cfg: DistillConfig,
    out_dir: str | Path,
    config_hash: str = "",
) -> Checkpoint:
    """Integrate all teachers into one student encoder.

    The student starts from the inter-organ weights and its projector
    copy from the inter-organ projector; both are the only trainable
    modules. Every batch routes each region to the intra teacher of its
    own cluster. Writes student.ckpt plus a JSON-lines log whose entries
    decompose the loss into its two terms.
    """
    if len(manifest.records) == 0:
        raise ValidationError("region set is empty")
    for rec in manifest.records:
        if rec.cluster_id is None:
            raise ValidationError(
                f"record {rec.source}/{rec.superpixel_id} has no cluster_id; run clustering first"
            )
        if rec.cluster_id >= len(teachers.intra) or teachers.intra[rec.cluster_id] is None:
            raise ValidationError(
                f"record {rec.source}/{rec.superpixel_id} routes to missing teacher {rec.cluster_id}"
            )
    if net_spec != teachers.inter.spec:
        raise ValidationError("net_spec differs from the teacher spec")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)

    student = make_encoder(net_spec)
    teachers.inter.load_into("encoder", student)
    student_proj = make_projector(net_spec)
    teachers.inter.load_into("projector", student_proj)

    inter_enc = make_encoder(net_spec)
    inter_proj = make_projector(net_spec)
    teachers.inter.load_into("encoder", inter_enc)
    teachers.inter.load_into("projector", inter_proj)
    inter_enc.eval(), inter_proj.eval()
    for p in list(inter_enc.parameters()) + list(inter_proj.parameters()):
        p.requires_grad_(False)

    intra_encs: list[Optional[torch.nn.Module]] = []
    for ck in teachers.intra:
        if ck is None:
            intra_encs.append(None)
            continue
        enc = make_encoder(net_spec)
        ck.load_into("encoder", enc)
        enc.eval()
        for p in enc.parameters():
            p.requires_grad_(False)
        intra_encs.append(enc)

    teacher_hashes = [_state_sha(inter_enc), _state_sha(inter_proj)] + [
        _state_sha(e) for e in intra_encs if e is not None
    ]

    opt = torch.optim.SGD(
        list(student.parameters()) + list(student_proj.parameters()),
        lr=cfg.lr,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )
    sampler = np.random.default_rng(cfg.seed)
    aug_gen = torch.Generator().manual_seed(cfg.seed)
    log_path = out_dir / "distill_log.jsonl"
    last = {"loss": float("nan"), "intra": float("nan"), "inter": float("nan")}

    with open(log_path, "w", encoding="utf-8") as log:
        for step in range(cfg.iterations):
            idx = sampler.integers(0, len(manifest.records), size=cfg.batch_size)
            views, clusters = [], []
            for i in idx:
                rec = manifest.records[int(i)]
                img = load_region_tensor(rec, manifest.root, cfg.aug.out_size)
                views.append(cfg.aug.apply(img, aug_gen))
                clusters.append(rec.cluster_id)
            x = torch.stack(views)
            clusters_arr = np.asarray(clusters)

            student.train(), student_proj.train()
            f_s = student(x)

            with torch.no_grad():
                z_hat = inter_proj(inter_enc(x))
                f_t = torch.empty_like(f_s)
                for j in np.unique(clusters_arr):
                    sel = np.nonzero(clusters_arr == j)[0]
                    enc = intra_encs[int(j)]
                    assert enc is not None
                    f_t[torch.from_numpy(sel)] = enc(x[torch.from_numpy(sel)])

            li = intra_loss(f_s, f_t, cfg.temperature)
            le = inter_loss(f_s, z_hat, student_proj)
            loss = cfg.w_intra * li + cfg.w_inter * le

            opt.zero_grad()
            loss.backward()
            opt.step()

            li_val, le_val = float(li.item()), float(le.item())
            # log the total from the logged parts so the identity is exact
            last = {
                "loss": cfg.w_intra * li_val + cfg.w_inter * le_val,
                "intra": li_val,
                "inter": le_val,
            }
            if (step + 1) % cfg.log_every == 0 or step == cfg.iterations - 1:
                log.write(json.dumps({"iteration": step + 1, **last}, sort_keys=True) + "\n")

    after = [_state_sha(inter_enc), _state_sha(inter_proj)] + [
        _state_sha(e) for e in intra_encs if e is not None
    ]
    if after != teacher_hashes:
        raise ValidationError("teacher parameters changed during distillation")

    student.eval(), student_proj.eval()
    ckpt = Checkpoint.from_modules(
        "student",
        net_spec,
        {"encoder": student, "projector": student_proj},
        config_hash=config_hash,
        meta={
            "iterations": cfg.iterations,
            "seed": cfg.seed,
            "final_loss": last["loss"],
            "final_intra": last["intra"],
            "final_inter": last["inter"],
            "n_teachers": sum(1 for e in intra_encs if e is not None),
        },
    )
    save_checkpoint(ckpt, out_dir / "student.ckpt")
    return ckpt
