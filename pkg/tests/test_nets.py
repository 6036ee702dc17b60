"""Encoders, heads, U-Net, and the checkpoint container."""

import numpy as np
import pytest
import torch

from separeg.errors import FormatError, ValidationError
from separeg.nets import (
    Checkpoint,
    NetworkSpec,
    UNet,
    load_checkpoint,
    make_encoder,
    make_predictor,
    make_projector,
    make_unet,
    save_checkpoint,
)

TINY = NetworkSpec.tiny()


class TestNetworkSpec:
    def test_round_trip(self):
        spec = NetworkSpec.tiny()
        assert NetworkSpec.from_dict(spec.to_dict()) == spec

    def test_resnet_fixes_feature_dim(self):
        with pytest.raises(ValidationError):
            NetworkSpec(backbone="resnet50_trunc", feature_dim=512)

    def test_unknown_backbone_rejected(self):
        with pytest.raises(ValidationError):
            NetworkSpec(backbone="vgg")

    def test_tiny_feature_dim_divisibility(self):
        with pytest.raises(ValidationError):
            NetworkSpec(backbone="tiny_conv", feature_dim=100, proj_hidden=64, proj_out=32)


class TestEncoders:
    def test_resnet_trunk_parameter_count(self):
        torch.manual_seed(0)
        enc = make_encoder(NetworkSpec())
        n = sum(p.numel() for p in enc.parameters())
        assert n == 23_501_760

    def test_resnet_forward_shapes(self):
        torch.manual_seed(0)
        enc = make_encoder(NetworkSpec())
        x = torch.randn(2, 1, 64, 64)
        feats = enc.forward_features(x)
        assert [f.shape[1] for f in feats] == enc.skip_channels
        assert enc(x).shape == (2, 2048)

    def test_tiny_forward_shapes(self):
        torch.manual_seed(0)
        enc = make_encoder(TINY)
        x = torch.randn(3, 1, 32, 32)
        assert enc(x).shape == (3, TINY.feature_dim)
        feats = enc.forward_features(x)
        assert len(feats) == len(enc.skip_channels)
        # each stage halves the spatial size
        sizes = [f.shape[-1] for f in feats]
        assert sizes == sorted(sizes, reverse=True)

    def test_heads_shapes(self):
        torch.manual_seed(0)
        proj = make_projector(TINY)
        pred = make_predictor(TINY)
        z = proj(torch.randn(4, TINY.feature_dim))
        assert z.shape == (4, TINY.proj_out)
        assert pred(z).shape == (4, TINY.proj_out)


class TestUNet:
    def test_output_shape(self):
        torch.manual_seed(0)
        net = UNet(make_encoder(TINY), n_classes=3)
        y = net(torch.randn(2, 1, 32, 32))
        assert y.shape == (2, 3, 32, 32)

    def test_odd_input_sizes(self):
        torch.manual_seed(0)
        net = UNet(make_encoder(TINY), n_classes=2)
        y = net(torch.randn(1, 1, 33, 29))
        assert y.shape == (1, 2, 33, 29)

    def test_needs_two_classes(self):
        with pytest.raises(ValidationError):
            UNet(make_encoder(TINY), n_classes=1)


def _small_ckpt(seed=0, stage="inter"):
    torch.manual_seed(seed)
    enc = make_encoder(TINY)
    proj = make_projector(TINY)
    return Checkpoint.from_modules(stage, TINY, {"encoder": enc, "projector": proj}), enc, proj


class TestCheckpoint:
    def test_round_trip_exact(self, tmp_path):
        ckpt, enc, _ = _small_ckpt()
        p = save_checkpoint(ckpt, tmp_path / "c.ckpt")
        back = load_checkpoint(p)
        assert back.stage == ckpt.stage
        assert back.spec == ckpt.spec
        assert set(back.state) == set(ckpt.state)
        for comp in ckpt.state:
            assert set(back.state[comp]) == set(ckpt.state[comp])
            for name, arr in ckpt.state[comp].items():
                got = back.state[comp][name]
                assert got.dtype == arr.dtype
                assert got.shape == arr.shape
                assert np.array_equal(got, arr)

    def test_zero_dim_entries_survive(self, tmp_path):
        # BatchNorm's num_batches_tracked is a 0-d int64 tensor
        ckpt, _, _ = _small_ckpt()
        zero_d = [
            (c, n) for c in ckpt.state for n, a in ckpt.state[c].items() if a.shape == ()
        ]
        assert zero_d, "expected at least one 0-d array in a BN-bearing model"
        back = load_checkpoint(save_checkpoint(ckpt, tmp_path / "c.ckpt"))
        for comp, name in zero_d:
            assert back.state[comp][name].shape == ()

    def test_byte_stable(self, tmp_path):
        ckpt, _, _ = _small_ckpt()
        a = save_checkpoint(ckpt, tmp_path / "a.ckpt").read_bytes()
        b = save_checkpoint(ckpt, tmp_path / "b.ckpt").read_bytes()
        assert a == b

    def test_load_into_restores_forward(self, tmp_path):
        ckpt, enc, _ = _small_ckpt(seed=1)
        back = load_checkpoint(save_checkpoint(ckpt, tmp_path / "c.ckpt"))
        torch.manual_seed(99)
        other = make_encoder(TINY)
        back.load_into("encoder", other)
        x = torch.randn(2, 1, 32, 32)
        enc.eval(), other.eval()
        with torch.no_grad():
            assert torch.equal(enc(x), other(x))

    def test_load_into_key_mismatch(self):
        ckpt, _, _ = _small_ckpt()
        with pytest.raises(ValidationError):
            ckpt.load_into("encoder", make_projector(TINY))

    def test_unknown_component_rejected(self):
        ckpt, _, _ = _small_ckpt()
        with pytest.raises(ValidationError):
            ckpt.load_into("decoder", make_encoder(TINY))

    def test_bad_stage_tag_rejected(self):
        torch.manual_seed(0)
        with pytest.raises(ValidationError):
            Checkpoint.from_modules("warmup", TINY, {"encoder": make_encoder(TINY)})

    def test_intra_stage_tags_accepted(self):
        torch.manual_seed(0)
        ckpt = Checkpoint.from_modules("intra_3", TINY, {"encoder": make_encoder(TINY)})
        assert ckpt.stage == "intra_3"

    def test_corrupt_file_rejected(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b'{"kind": "not_a_checkpoint"}\n')
        with pytest.raises(FormatError):
            load_checkpoint(p)

    def test_truncated_payload_rejected(self, tmp_path):
        ckpt, _, _ = _small_ckpt()
        p = save_checkpoint(ckpt, tmp_path / "c.ckpt")
        p.write_bytes(p.read_bytes()[:-33])
        with pytest.raises(FormatError):
            load_checkpoint(p)


class TestUNetFromPretrained:
    def test_encoder_transfer_bit_exact(self):
        ckpt, enc, _ = _small_ckpt(seed=2)
        net = make_unet(TINY, n_classes=3, encoder_init=ckpt)
        for (na, pa), (nb, pb) in zip(
            sorted(enc.state_dict().items()), sorted(net.encoder.state_dict().items())
        ):
            assert na == nb
            assert torch.equal(pa, pb)

    def test_wrong_stage_rejected(self):
        torch.manual_seed(0)
        ckpt = Checkpoint.from_modules("intra_0", TINY, {"encoder": make_encoder(TINY)})
        with pytest.raises(ValidationError):
            make_unet(TINY, n_classes=2, encoder_init=ckpt)

    def test_spec_mismatch_rejected(self):
        ckpt, _, _ = _small_ckpt()
        other = NetworkSpec(backbone="tiny_conv", feature_dim=64, proj_hidden=64, proj_out=32)
        with pytest.raises(ValidationError):
            make_unet(other, n_classes=2, encoder_init=ckpt)

    def test_random_init_when_no_checkpoint(self):
        torch.manual_seed(0)
        net = make_unet(TINY, n_classes=2, encoder_init=None)
        assert isinstance(net, UNet)
