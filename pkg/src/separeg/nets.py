"""Network builders and the portable single-file checkpoint container.

Two encoder families share one interface: a ResNet-50 trunk with its
classifier head removed (2048-d features) for full-scale runs, and a
four-stage convolutional net (128-d) for desk-scale runs. Both expose
per-stage feature maps so the same trunk can seed a U-Net.

Checkpoints are a single file: one JSON header line describing named
arrays, followed by their raw little-endian bytes. Saving the same state
twice produces identical bytes.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.models import resnet50

from .errors import FormatError, ValidationError

BACKBONES = ("resnet50_trunc", "tiny_conv")
_STAGE_RE = re.compile(r"^(inter|student|finetuned|intra_\d+)$")


@dataclass(frozen=True)
class NetworkSpec:
    """Shapes of the encoder and its projection heads."""

    backbone: str = "resnet50_trunc"
    in_channels: int = 1
    feature_dim: int = 2048
    proj_hidden: int = 4096
    proj_out: int = 256

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValidationError(f"unknown backbone {self.backbone!r}, expected one of {BACKBONES}")
        for name in ("in_channels", "feature_dim", "proj_hidden", "proj_out"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.backbone == "resnet50_trunc" and self.feature_dim != 2048:
            raise ValidationError("resnet50_trunc fixes feature_dim at 2048")
        if self.backbone == "tiny_conv" and self.feature_dim % 8 != 0:
            raise ValidationError("tiny_conv requires feature_dim divisible by 8")

    @classmethod
    def tiny(cls) -> "NetworkSpec":
        return cls(backbone="tiny_conv", feature_dim=128, proj_hidden=256, proj_out=64)

    def to_dict(self) -> dict:
        return {
            "backbone": self.backbone,
            "in_channels": self.in_channels,
            "feature_dim": self.feature_dim,
            "proj_hidden": self.proj_hidden,
            "proj_out": self.proj_out,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)


class ResNetTruncEncoder(nn.Module):
    """ResNet-50 with the classifier head removed; pooled 2048-d output."""

    def __init__(self, in_channels: int = 1):
        super().__init__()
        r = resnet50(weights=None)
        conv1 = nn.Conv2d(in_channels, 64, kernel_size=7, stride=2, padding=3, bias=False)
        self.stem = nn.Sequential(conv1, r.bn1, r.relu)
        self.maxpool = r.maxpool
        self.layer1 = r.layer1
        self.layer2 = r.layer2
        self.layer3 = r.layer3
        self.layer4 = r.layer4
        self.feature_dim = 2048
        self.skip_channels = [64, 256, 512, 1024, 2048]

    def forward_features(self, x: torch.Tensor) -> list[torch.Tensor]:
        s0 = self.stem(x)
        s1 = self.layer1(self.maxpool(s0))
        s2 = self.layer2(s1)
        s3 = self.layer3(s2)
        s4 = self.layer4(s3)
        return [s0, s1, s2, s3, s4]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        s4 = self.forward_features(x)[-1]
        return torch.flatten(F.adaptive_avg_pool2d(s4, 1), 1)


class TinyConvEncoder(nn.Module):
    """Four stride-2 conv stages; pooled feature_dim-d output."""

    def __init__(self, in_channels: int = 1, feature_dim: int = 128):
        super().__init__()
        chans = [feature_dim // 8, feature_dim // 4, feature_dim // 2, feature_dim]
        stages = []
        prev = in_channels
        for ch in chans:
            stages.append(
                nn.Sequential(
                    nn.Conv2d(prev, ch, kernel_size=3, stride=2, padding=1, bias=False),
                    nn.BatchNorm2d(ch),
                    nn.ReLU(inplace=True),
                )
            )
            prev = ch
        self.stages = nn.ModuleList(stages)
        self.feature_dim = feature_dim
        self.skip_channels = chans

    def forward_features(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        s_last = self.forward_features(x)[-1]
        return torch.flatten(F.adaptive_avg_pool2d(s_last, 1), 1)


def make_encoder(spec: NetworkSpec) -> nn.Module:
    if spec.backbone == "resnet50_trunc":
        return ResNetTruncEncoder(spec.in_channels)
    return TinyConvEncoder(spec.in_channels, spec.feature_dim)


def _mlp_head(d_in: int, d_hidden: int, d_out: int) -> nn.Module:
    return nn.Sequential(
        nn.Linear(d_in, d_hidden),
        nn.BatchNorm1d(d_hidden),
        nn.ReLU(inplace=True),
        nn.Linear(d_hidden, d_out),
    )


def make_projector(spec: NetworkSpec) -> nn.Module:
    """Feature vector -> embedding used for the contrastive loss."""
    return _mlp_head(spec.feature_dim, spec.proj_hidden, spec.proj_out)


def make_predictor(spec: NetworkSpec) -> nn.Module:
    """Embedding -> prediction of the other view's embedding."""
    return _mlp_head(spec.proj_out, spec.proj_hidden, spec.proj_out)


class _DecoderBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, kernel_size=3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.block(x)


class UNet(nn.Module):
    """Segmentation net: shared encoder trunk plus a skip-connected decoder."""

    def __init__(self, encoder: nn.Module, n_classes: int):
        super().__init__()
        if n_classes < 2:
            raise ValidationError("n_classes must be >= 2 (background plus foreground)")
        self.encoder = encoder
        chans = encoder.skip_channels
        blocks = []
        for i in range(len(chans) - 1, 0, -1):
            blocks.append(_DecoderBlock(chans[i] + chans[i - 1], chans[i - 1]))
        self.decoder = nn.ModuleList(blocks)
        self.head = nn.Conv2d(chans[0], n_classes, kernel_size=1)
        self.n_classes = n_classes

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = self.encoder.forward_features(x)
        y = feats[-1]
        for block, skip in zip(self.decoder, reversed(feats[:-1])):
            y = F.interpolate(y, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            y = block(torch.cat([y, skip], dim=1))
        y = F.interpolate(y, size=x.shape[-2:], mode="bilinear", align_corners=False)
        return self.head(y)


@dataclass
class Checkpoint:
    """Named network states plus provenance.

    ``stage`` is one of inter, intra_<k>, student, finetuned. ``state``
    maps component name (encoder, projector, ...) to a parameter dict of
    numpy arrays.
    """

    stage: str
    spec: NetworkSpec
    state: dict[str, dict[str, np.ndarray]]
    config_hash: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not _STAGE_RE.match(self.stage):
            raise ValidationError(
                f"stage {self.stage!r} must be inter, student, finetuned, or intra_<k>"
            )

    @staticmethod
    def state_of(module: nn.Module) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}

    @classmethod
    def from_modules(
        cls,
        stage: str,
        spec: NetworkSpec,
        modules: dict[str, nn.Module],
        config_hash: str = "",
        meta: Optional[dict] = None,
    ) -> "Checkpoint":
        state = {comp: cls.state_of(m) for comp, m in modules.items()}
        return cls(stage=stage, spec=spec, state=state, config_hash=config_hash, meta=meta or {})

    def load_into(self, component: str, module: nn.Module) -> None:
        """Copy a stored component into a module, requiring an exact key match."""
        if component not in self.state:
            raise ValidationError(
                f"checkpoint has no component {component!r}; available: {sorted(self.state)}"
            )
        stored = self.state[component]
        target_keys = set(module.state_dict().keys())
        stored_keys = set(stored.keys())
        if stored_keys != target_keys:
            missing = sorted(target_keys - stored_keys)
            unexpected = sorted(stored_keys - target_keys)
            raise ValidationError(
                f"parameter mapping mismatch for {component!r}: "
                f"missing {missing[:5]}{'...' if len(missing) > 5 else ''}, "
                f"unexpected {unexpected[:5]}{'...' if len(unexpected) > 5 else ''}"
            )
        module.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in stored.items()})


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    """Write header line plus concatenated raw arrays; byte-stable."""
    path = Path(path)
    entries = []
    blobs = []
    offset = 0
    for comp in sorted(ckpt.state):
        for name in sorted(ckpt.state[comp]):
            orig = ckpt.state[comp][name]
            # ascontiguousarray promotes 0-d to 1-d, so keep the true shape
            arr = np.ascontiguousarray(orig)
            if arr.dtype.byteorder == ">":
                arr = arr.astype(arr.dtype.newbyteorder("<"))
            buf = arr.tobytes()
            entries.append(
                {
                    "name": f"{comp}/{name}",
                    "dtype": arr.dtype.str,
                    "shape": list(orig.shape),
                    "offset": offset,
                    "nbytes": len(buf),
                }
            )
            blobs.append(buf)
            offset += len(buf)
    header = {
        "arrays": entries,
        "config_hash": ckpt.config_hash,
        "kind": "checkpoint",
        "meta": ckpt.meta,
        "spec": ckpt.spec.to_dict(),
        "stage": ckpt.stage,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8"))
        f.write(b"\n")
        for buf in blobs:
            f.write(buf)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        with open(path, "rb") as f:
            header_line = f.readline()
            payload = f.read()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed checkpoint header: {exc}") from exc
    if header.get("kind") != "checkpoint":
        raise FormatError(f"{path}: not a checkpoint file")
    state: dict[str, dict[str, np.ndarray]] = {}
    for entry in header["arrays"]:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(payload):
            raise FormatError(f"{path}: truncated payload for array {entry['name']!r}")
        arr = np.frombuffer(payload[start : start + n], dtype=np.dtype(entry["dtype"]))
        arr = arr.reshape(entry["shape"]).copy()
        comp, name = entry["name"].split("/", 1)
        state.setdefault(comp, {})[name] = arr
    try:
        spec = NetworkSpec.from_dict(header["spec"])
    except (TypeError, KeyError) as exc:
        raise FormatError(f"{path}: bad network spec in header: {exc}") from exc
    return Checkpoint(
        stage=header["stage"],
        spec=spec,
        state=state,
        config_hash=header.get("config_hash", ""),
        meta=header.get("meta", {}),
    )


def make_unet(
    spec: NetworkSpec,
    n_classes: int,
    encoder_init: Optional[Checkpoint] = None,
) -> UNet:
    """Build the segmentation net, optionally seeding the encoder.

    ``encoder_init`` must come from the inter-organ stage or the distilled
    student; the copy is exact, bit for bit.
    """
    encoder = make_encoder(spec)
    unet = UNet(encoder, n_classes)
    if encoder_init is not None:
        if encoder_init.stage not in ("inter", "student"):
            raise ValidationError(
                f"encoder_init stage must be 'inter' or 'student', got {encoder_init.stage!r}"
            )
        if encoder_init.spec != spec:
            raise ValidationError(
                f"encoder_init spec {encoder_init.spec} does not match requested spec {spec}"
            )
        encoder_init.load_into("encoder", unet.encoder)
    return unet
