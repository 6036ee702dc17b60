"""Segmentation training, Dice/HD95 metrics, and report aggregation."""

import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from separeg.errors import ValidationError
from separeg.finetune_eval import (
    HD95_SENTINEL,
    FinetuneConfig,
    MetricsReport,
    build_report,
    dice_loss,
    dsc,
    evaluate,
    finetune,
    hd95,
    predict_volume,
    unet_from_checkpoint,
)
from separeg.nets import NetworkSpec

TINY = NetworkSpec.tiny()


def _brute_boundary(mask):
    """Independent boundary: fg voxel with a face neighbor that is bg or
    out of bounds."""
    mask = mask.astype(bool)
    out = np.zeros_like(mask)
    for idx in np.argwhere(mask):
        on_edge = False
        for ax in range(mask.ndim):
            for step in (-1, 1):
                nb = idx.copy()
                nb[ax] += step
                if (nb[ax] < 0) or (nb[ax] >= mask.shape[ax]) or not mask[tuple(nb)]:
                    on_edge = True
        if on_edge:
            out[tuple(idx)] = True
    return out


def _brute_hd95(a, b, spacing=None):
    a, b = a.astype(bool), b.astype(bool)
    if not a.any() and not b.any():
        return 0.0
    if a.any() != b.any():
        return float("inf")
    scale = np.ones(a.ndim) if spacing is None else np.asarray(spacing, dtype=np.float64)
    pa = np.argwhere(_brute_boundary(a)).astype(np.float64) * scale
    pb = np.argwhere(_brute_boundary(b)).astype(np.float64) * scale
    d_ab = [min(np.sqrt(((p - q) ** 2).sum()) for q in pb) for p in pa]
    d_ba = [min(np.sqrt(((q - p) ** 2).sum()) for p in pa) for q in pb]
    return float(np.percentile(np.array(d_ab + d_ba), 95))


def _pair(rng, p=0.3):
    a = (rng.random((8, 8, 4)) < p).astype(np.uint8)
    b = (rng.random((8, 8, 4)) < p).astype(np.uint8)
    return a, b


class TestDSC:
    def test_identical_masks(self):
        m = np.ones((4, 4), dtype=bool)
        assert dsc(m, m) == 1.0

    def test_disjoint_masks(self):
        a = np.zeros((4, 4), dtype=bool)
        a[:2] = True
        assert dsc(a, ~a) == 0.0

    def test_both_empty_is_perfect(self):
        z = np.zeros((3, 3), dtype=bool)
        assert dsc(z, z) == 1.0

    def test_half_overlap_closed_form(self):
        a = np.zeros((4, 4), dtype=bool)
        b = np.zeros((4, 4), dtype=bool)
        a[0, :2] = True  # |A| = 2
        b[0, 1:3] = True  # |B| = 2, overlap 1
        assert dsc(a, b) == pytest.approx(2 * 1 / 4)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            dsc(np.zeros((2, 2)), np.zeros((3, 3)))

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_bounded_and_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        a, b = _pair(rng)
        v = dsc(a, b)
        assert 0.0 <= v <= 1.0
        assert v == dsc(b, a)
        assert dsc(a, a) == 1.0


class TestHD95:
    def test_matches_brute_force_exactly(self):
        hits = 0
        for seed in range(30):
            rng = np.random.default_rng(seed)
            a, b = _pair(rng)
            got = hd95(a, b)
            want = _brute_hd95(a, b)
            assert got == want, f"seed {seed}: {got} != {want}"
            hits += 1
        assert hits == 30

    def test_symmetric(self):
        rng = np.random.default_rng(100)
        a, b = _pair(rng)
        assert hd95(a, b) == hd95(b, a)

    def test_spacing_scales_linearly(self):
        rng = np.random.default_rng(101)
        a, b = _pair(rng)
        base = hd95(a, b, spacing=(1.0, 1.0, 1.0))
        doubled = hd95(a, b, spacing=(2.0, 2.0, 2.0))
        assert doubled == pytest.approx(2.0 * base, rel=1e-12)

    def test_anisotropic_spacing_matches_brute_force(self):
        rng = np.random.default_rng(102)
        a, b = _pair(rng)
        sp = (0.7, 1.3, 2.5)
        assert hd95(a, b, spacing=sp) == pytest.approx(_brute_hd95(a, b, sp), rel=1e-12)

    def test_both_empty(self):
        z = np.zeros((4, 4, 2), dtype=bool)
        assert hd95(z, z) == 0.0

    def test_one_empty_returns_sentinel(self):
        z = np.zeros((4, 4, 2), dtype=bool)
        o = z.copy()
        o[1, 1, 1] = True
        assert hd95(z, o) == HD95_SENTINEL
        assert math.isinf(hd95(o, z))

    def test_identical_masks_give_zero(self):
        rng = np.random.default_rng(103)
        a = (rng.random((6, 6, 3)) < 0.4).astype(bool)
        if a.any():
            assert hd95(a, a) == 0.0

    def test_bad_spacing_rejected(self):
        a = np.ones((3, 3), dtype=bool)
        with pytest.raises(ValidationError):
            hd95(a, a, spacing=(1.0, -2.0))


class TestDiceLoss:
    def test_uniform_probabilities_half_foreground(self):
        # logits all equal -> softmax 0.5 per class; gt half fg:
        # per-class dice = (2*0.5*q + eps)/(0.5*n + q + eps) with q = n/2
        logits = torch.zeros(1, 2, 4, 4, dtype=torch.float64)
        target = torch.zeros(1, 4, 4, dtype=torch.long)
        target[:, :2] = 1
        loss = dice_loss(logits, target).item()
        assert loss == pytest.approx(0.5, abs=1e-6)

    def test_perfect_prediction_is_near_zero(self):
        target = torch.zeros(1, 4, 4, dtype=torch.long)
        target[:, :2] = 1
        logits = torch.full((1, 2, 4, 4), -60.0, dtype=torch.float64)
        logits[0, 1, :2] = 60.0
        logits[0, 0, 2:] = 60.0
        assert dice_loss(logits, target).item() == pytest.approx(0.0, abs=1e-5)

    def test_worst_prediction_is_near_one(self):
        target = torch.zeros(1, 4, 4, dtype=torch.long)
        target[:, :2] = 1
        logits = torch.full((1, 2, 4, 4), -60.0, dtype=torch.float64)
        logits[0, 0, :2] = 60.0  # predicts bg where gt is fg
        logits[0, 1, 2:] = 60.0
        assert dice_loss(logits, target).item() == pytest.approx(1.0, abs=1e-5)

    def test_finite_difference_gradient(self):
        torch.manual_seed(0)
        logits = torch.randn(2, 3, 4, 4, dtype=torch.float64, requires_grad=True)
        target = torch.randint(0, 3, (2, 4, 4))
        dice_loss(logits, target).backward()
        h = 1e-6
        base = logits.detach().clone()
        fd = torch.zeros_like(base)
        flat, fdf = base.reshape(-1), fd.reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            hi = dice_loss(base, target).item()
            flat[i] = orig - h
            lo = dice_loss(base, target).item()
            flat[i] = orig
            fdf[i] = (hi - lo) / (2 * h)
        rel = float((logits.grad - fd).norm() / fd.norm())
        assert rel < 1e-4

    def test_label_out_of_range_rejected(self):
        logits = torch.zeros(1, 2, 4, 4)
        target = torch.full((1, 4, 4), 5, dtype=torch.long)
        with pytest.raises(ValidationError):
            dice_loss(logits, target)


class TestReport:
    def _raw(self):
        return {
            "p0": {"dsc_per_class": [0.8, 0.6], "hd95_per_class": [1.0, 2.0]},
            "p1": {"dsc_per_class": [0.4, 0.2], "hd95_per_class": [float("inf"), 3.0]},
        }

    def test_sentinel_exclusion(self):
        rep = build_report(self._raw())
        assert rep.per_patient["p1"]["hd95_per_class"][0] is None
        assert rep.per_patient["p1"]["hd95"] == pytest.approx(3.0)
        assert rep.per_patient["p1"]["hd95_excluded"] == 1
        assert rep.aggregate["hd95_excluded"] == 1

    def test_aggregates(self):
        rep = build_report(self._raw())
        assert rep.aggregate["n_patients"] == 2
        assert rep.aggregate["dsc_mean"] == pytest.approx((0.7 + 0.3) / 2)
        # stderr of [0.7, 0.3] with ddof=1: std = 0.2828..., / sqrt(2)
        assert rep.aggregate["dsc_stderr"] == pytest.approx(
            np.std([0.7, 0.3], ddof=1) / np.sqrt(2)
        )

    def test_single_patient_stderr_is_zero(self):
        rep = build_report({"p0": {"dsc_per_class": [0.5], "hd95_per_class": [1.0]}})
        assert rep.aggregate["dsc_stderr"] == 0.0

    def test_all_hd95_excluded(self):
        rep = build_report(
            {"p0": {"dsc_per_class": [0.5], "hd95_per_class": [float("inf")]}}
        )
        assert rep.per_patient["p0"]["hd95"] is None
        assert rep.aggregate["hd95_mean"] is None

    def test_round_trip_and_byte_stability(self, tmp_path):
        rep = build_report(self._raw(), config_hash="abc", seeds=[1, 2])
        p = rep.save(tmp_path / "report.json")
        back = MetricsReport.load(p)
        assert back.canonical_json() == rep.canonical_json()
        assert back.aggregate == rep.aggregate
        assert back.seeds == [1, 2]
        a = rep.save(tmp_path / "x.json").read_bytes()
        b = rep.save(tmp_path / "y.json").read_bytes()
        assert a == b

    def test_csv_has_patient_rows_and_aggregates(self, tmp_path):
        rep = build_report(self._raw())
        text = rep.to_csv(tmp_path / "r.csv").read_text()
        lines = text.strip().splitlines()
        assert lines[0].startswith("patient_id")
        assert lines[1].startswith("p0,")
        assert lines[2].startswith("p1,")
        assert any(ln.startswith("aggregate_dsc_mean") for ln in lines)


class TestFinetuneLoop:
    def _cfg(self, **kw):
        base = dict(epochs=2, batch_size=4, lr=1e-3, seed=0, window=(0.0, 1000.0))
        base.update(kw)
        return FinetuneConfig(**base)

    def test_smoke(self, tmp_path, small_volumes):
        train, val = small_volumes[:1], small_volumes[1:]
        ckpt = finetune(train, val, TINY, n_classes=3, cfg=self._cfg(), out_dir=tmp_path)
        assert ckpt.stage == "finetuned"
        assert ckpt.meta["n_classes"] == 3
        assert (tmp_path / "finetuned.ckpt").exists()
        rows = [
            json.loads(ln)
            for ln in (tmp_path / "finetune_log.jsonl").read_text().splitlines()
        ]
        epochs = [r for r in rows if "epoch" in r]
        assert len(epochs) == 2
        for r in epochs:
            assert math.isfinite(r["train_loss"])

    def test_constant_metric_keeps_earliest_epoch(self, tmp_path, small_volumes):
        train, val = small_volumes[:1], small_volumes[1:]
        ckpt = finetune(
            train, val, TINY, n_classes=3, cfg=self._cfg(epochs=3),
            out_dir=tmp_path, val_metric_fn=lambda m: 0.125,
        )
        assert ckpt.meta["best_epoch"] == 1

    def test_predict_volume_shape(self, tmp_path, small_volumes):
        train, val = small_volumes[:1], small_volumes[1:]
        ckpt = finetune(train, val, TINY, n_classes=3, cfg=self._cfg(), out_dir=tmp_path)
        model = unet_from_checkpoint(ckpt)
        pred = predict_volume(model, val[0], window=(0.0, 1000.0))
        assert pred.shape == val[0].shape
        assert pred.dtype == np.uint8
        assert pred.max() < 3

    def test_evaluate_reports_every_patient(self, tmp_path, small_volumes):
        train, val = small_volumes[:1], small_volumes[1:]
        ckpt = finetune(train, val, TINY, n_classes=3, cfg=self._cfg(), out_dir=tmp_path)
        rep = evaluate(ckpt, small_volumes, window=(0.0, 1000.0))
        assert set(rep.per_patient) == {v.patient_id for v in small_volumes}
        for row in rep.per_patient.values():
            assert len(row["dsc_per_class"]) == 2
            assert len(row["hd95_per_class"]) == 2
            assert all(0.0 <= d <= 1.0 for d in row["dsc_per_class"])

    def test_mask_labels_must_fit_classes(self, tmp_path, small_volumes):
        train, val = small_volumes[:1], small_volumes[1:]
        with pytest.raises(ValidationError):
            finetune(train, val, TINY, n_classes=2, cfg=self._cfg(), out_dir=tmp_path)

    def test_bad_init_mode_rejected(self):
        with pytest.raises(ValidationError):
            FinetuneConfig(init="imagenet")
