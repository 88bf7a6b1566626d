import pytest
import torch

from qgn.backbone import BackboneConfig, SiameseEncoder, count_parameters, encode_pair, rotate_batch


def test_resnet18_qsse_overhead():
    plain = count_parameters(SiameseEncoder(BackboneConfig(arch="resnet18", use_qsse=False)))
    gated = count_parameters(SiameseEncoder(BackboneConfig(arch="resnet18", use_qsse=True)))
    assert 11_000_000 < plain < 11_300_000
    assert plain < gated <= 1.03 * plain


def test_output_shapes_and_norm():
    enc = SiameseEncoder(BackboneConfig(arch="tiny", embed_dim=24)).eval()
    q, g = torch.randn(3, 3, 32, 32), torch.randn(3, 3, 32, 32)
    out = encode_pair(q, g, enc)
    assert out.f_q.shape == out.f_g.shape == (3, 24)
    assert torch.allclose(out.f_q.norm(dim=1), torch.ones(3))
    assert len(out.gates) == 3 and out.map_q is None


def test_without_qsse_streams_are_independent():
    torch.manual_seed(0)
    enc = SiameseEncoder(BackboneConfig(arch="tiny")).eval()
    q, g = torch.randn(2, 3, 32, 32), torch.randn(2, 3, 32, 32)
    a = enc(q, g, use_qsse=False)
    b = enc(q, torch.randn(2, 3, 32, 32), use_qsse=False)
    assert torch.allclose(a.f_q, b.f_q, atol=1e-6)
    single, _, _ = enc.encode_single(q)
    assert torch.allclose(single, a.f_q, atol=1e-6)
    c = enc(q, torch.randn(2, 3, 32, 32), use_qsse=True)
    d = enc(q, g, use_qsse=True)
    assert not torch.allclose(c.f_q, d.f_q)


def test_zero_gate_equals_fixed_zero_gate():
    torch.manual_seed(1)
    enc = SiameseEncoder(BackboneConfig(arch="tiny")).eval()
    for gate in enc.gates.values():
        with torch.no_grad():
            gate.fc2.weight.zero_()
            gate.fc2.bias.fill_(-1e4)
    q, g = torch.randn(2, 3, 32, 32), torch.randn(2, 3, 32, 32)
    gated = enc(q, g)
    skip = enc(q, g, use_qsse=False, fixed_gate=0.0)
    assert torch.allclose(gated.f_q, skip.f_q, atol=1e-6)
    assert torch.allclose(gated.f_g, skip.f_g, atol=1e-6)


def test_stage_mask():
    enc = SiameseEncoder(BackboneConfig(arch="resnet10", qsse_stage_mask=(False, False, True, True)))
    assert sorted(enc.gates) == ["2", "3"]
    with pytest.raises(ValueError):
        BackboneConfig(arch="tiny", qsse_stage_mask=(True,))
    with pytest.raises(ValueError):
        BackboneConfig(arch="vgg")


def test_detection_mode_maps():
    cfg = BackboneConfig(arch="tiny", detection_mode=True)
    assert cfg.feature_stride == 8
    enc = SiameseEncoder(cfg).eval()
    out = enc(torch.randn(1, 3, 96, 128), torch.randn(1, 3, 96, 128))
    assert out.map_g.shape == (1, 64, 12, 16)
    assert BackboneConfig(arch="resnet18", detection_mode=True).feature_stride == 16


def test_rotate_batch():
    x = torch.arange(8.0).reshape(2, 1, 2, 2)
    imgs, labels, rots = rotate_batch(x, torch.tensor([5, 6]))
    assert imgs.shape == (8, 1, 2, 2)
    assert labels.tolist() == [5, 6] * 4
    assert rots.tolist() == [0, 0, 1, 1, 2, 2, 3, 3]
    assert torch.equal(imgs[2], torch.rot90(x[0], 1, dims=(-2, -1)))
    assert torch.equal(torch.rot90(imgs[6], 1, dims=(-2, -1)), x[0])
    with pytest.raises(ValueError):
        rotate_batch(torch.zeros(1, 1, 2, 3), torch.tensor([0]))


def test_mismatched_pair_sizes():
    enc = SiameseEncoder(BackboneConfig())
    with pytest.raises(ValueError):
        enc(torch.zeros(1, 3, 32, 32), torch.zeros(1, 3, 16, 16))
