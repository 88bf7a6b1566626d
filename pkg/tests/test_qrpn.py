import numpy as np
import pytest
import torch

from qgn.boxgeom import BBox, anchor_boxes, iou
from qgn.qrpn import QRPN, QueryGate, RPNHead, fuse_and_propose, fuse_scores, qrpn_loss, query_gate


def test_gate_scales_gallery_only():
    torch.manual_seed(0)
    gate = QueryGate(16, pool_size=7, reduction=4, stride=8)
    gallery, query = torch.randn(16, 6, 8), torch.randn(16, 6, 8)
    q_before = query.clone()
    gated, s = query_gate(gallery, query, BBox(8, 8, 40, 40), gate)
    assert torch.equal(query, q_before)
    assert s.shape == (16,) and torch.all((s > 0) & (s < 1))
    assert torch.allclose(gated, gallery * s[:, None, None])
    assert gate.fc1.in_features == 16 * 49


def test_gate_depends_on_query_box():
    torch.manual_seed(1)
    gate = QueryGate(16, reduction=4, stride=8)
    gallery, query = torch.randn(16, 6, 8), torch.randn(16, 6, 8)
    _, a = gate(gallery, query, [0, 0, 24, 40])
    _, b = gate(gallery, query, [32, 0, 64, 40])
    assert not torch.allclose(a, b)


def test_query_box_bounds():
    gate = QueryGate(16, reduction=4, stride=8)
    fmap = torch.randn(16, 6, 8)
    with pytest.raises(ValueError):
        gate(fmap, fmap, [0, 0, 65, 10])
    with pytest.raises(ValueError):
        gate(fmap, fmap, [10, 10, 10, 20])


def test_rpn_head_layout_matches_anchor_order():
    head = RPNHead(4, num_anchors=2)
    with torch.no_grad():
        head.conv.weight.zero_()
        head.conv.bias.fill_(1.0)
        head.cls.weight.zero_()
        head.cls.bias.copy_(torch.tensor([0.0, 5.0]))
        head.reg.weight.zero_()
        head.reg.bias.copy_(torch.arange(8.0))
    logits, deltas = head(torch.zeros(4, 3, 5))
    assert logits.shape == (30,) and deltas.shape == (30, 4)
    assert logits[:4].tolist() == [0.0, 5.0, 0.0, 5.0]
    assert deltas[1].tolist() == [4.0, 5.0, 6.0, 7.0]
    assert len(anchor_boxes(3, 5, 8, [1.0], [1.0, 2.0])) == len(logits)
    assert RPNHead(4, 2, regression=False)(torch.zeros(4, 3, 5))[1] is None


def test_qrpn_module():
    q = QRPN(16, num_anchors=6, reduction=4, stride=8)
    logits, gate = q(torch.randn(16, 4, 4), torch.randn(16, 4, 4), [0, 0, 16, 32])
    assert logits.shape == (96,) and gate.shape == (16,)
    assert q.head.reg is None


def test_fuse_scores():
    obj, sim = torch.tensor([0.0, 2.0]), torch.tensor([1.0, -1.0])
    assert fuse_scores(obj, sim)[2].tolist() == [1.0, 1.0]
    assert fuse_scores(obj, None)[2].tolist() == [0.0, 2.0]
    p = fuse_scores(obj, sim, "probability")[2]
    assert torch.allclose(p, torch.sigmoid(obj) + torch.sigmoid(sim))
    with pytest.raises(ValueError):
        fuse_scores(obj, sim, "max")
    with pytest.raises(ValueError):
        fuse_scores(obj, sim[:1])


def test_query_similarity_reorders_proposals():
    anchors = np.array([[0, 0, 10, 20], [30, 0, 40, 20], [60, 0, 70, 20]], dtype=float)
    obj = np.array([3.0, 2.0, 1.0])
    sim = np.array([-5.0, 0.0, 5.0])
    offsets = np.zeros((3, 4))
    plain = fuse_and_propose(obj, None, anchors, offsets, 3, 0.7, (80, 40))
    guided = fuse_and_propose(obj, sim, anchors, offsets, 3, 0.7, (80, 40))
    assert [p.box.x1 for p in plain] == [0, 30, 60]
    assert [p.box.x1 for p in guided] == [60, 30, 0]
    assert guided[0].query_similarity == 5.0 and guided[0].objectness == 1.0
    assert len(fuse_and_propose(obj, sim, anchors, offsets, 2, 0.7, (80, 40))) == 2


def test_proposals_clipped_and_suppressed():
    anchors = np.array([[-5, -5, 10, 20], [-5, -4, 10, 21], [50, 0, 90, 30]], dtype=float)
    props = fuse_and_propose(np.array([1.0, 0.9, 0.1]), None, anchors, np.zeros((3, 4)), 10, 0.7,
                             (80, 40))
    assert len(props) == 2
    assert all(p.box.inside(80, 40) for p in props)
    assert iou(props[0].box, props[1].box) < 0.7


def test_qrpn_loss():
    logits = torch.tensor([2.0, -1.0], dtype=torch.float64)
    expect = (np.log1p(np.exp(-2.0)) + np.log1p(np.exp(-1.0))) / 2
    assert abs(float(qrpn_loss(logits, torch.tensor([1, 0]))) - expect) < 1e-12
    with pytest.raises(ValueError):
        qrpn_loss(logits, torch.tensor([1, 2]))
    with pytest.raises(ValueError):
        qrpn_loss(torch.zeros(0), torch.zeros(0))
