import numpy as np
import pytest
import torch

from qgn.boxgeom import (BBox, Proposal, anchor_boxes, box_iou, decode_deltas, encode_deltas,
                         generate_anchors, iou, jitter_box, nms, nms_indices, sample_qrpn_anchors,
                         sample_rpn_anchors)


def scalar_iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def greedy_nms_oracle(boxes, scores, thr):
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        if all(scalar_iou(boxes[i], boxes[j]) <= thr for j in kept):
            kept.append(i)
    return kept


def random_boxes(rng, n, size=100.0):
    xy = rng.uniform(0, size, (n, 2))
    wh = rng.uniform(2, 40, (n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


class TestBBox:
    def test_rejects_degenerate(self):
        with pytest.raises(ValueError):
            BBox(1, 0, 1, 2)
        with pytest.raises(ValueError):
            BBox(0, 0, float("nan"), 2)

    def test_round_trip(self):
        b = BBox.from_list([1, 2, 3.5, 4])
        assert b.to_list() == [1, 2, 3.5, 4]
        assert b.area == 2.5 * 2

    def test_fused_score(self):
        assert Proposal(BBox(0, 0, 1, 1), 0.5).fused_score == 0.5
        assert Proposal(BBox(0, 0, 1, 1), 0.5, 1.25).fused_score == 1.75


class TestIoU:
    def test_hand_cases(self):
        assert iou(BBox(0, 0, 2, 2), BBox(0, 0, 2, 2)) == 1.0
        assert iou(BBox(0, 0, 1, 1), BBox(5, 5, 6, 6)) == 0.0
        assert iou(BBox(0, 0, 2, 2), BBox(1, 0, 3, 2)) == pytest.approx(1 / 3, abs=1e-15)
        # touching edges share no area under the half-open convention
        assert iou(BBox(0, 0, 2, 2), BBox(2, 0, 4, 2)) == 0.0
        # nested: 4 / 16
        assert iou(BBox(0, 0, 4, 4), BBox(1, 1, 3, 3)) == pytest.approx(0.25, abs=1e-15)

    def test_symmetry_and_range(self, rng):
        b = random_boxes(rng, 200)
        m = box_iou(b, b)
        assert np.allclose(m, m.T)
        assert np.all((m >= 0) & (m <= 1))
        assert np.all(np.diag(m) == 1.0)

    def test_matrix_matches_scalar(self, rng):
        a, b = random_boxes(rng, 20), random_boxes(rng, 30)
        m = box_iou(a, b)
        for i in range(20):
            for j in range(30):
                assert abs(m[i, j] - scalar_iou(a[i], b[j])) < 1e-12


class TestNMS:
    def test_oracle_equivalence(self, rng):
        for trial in range(1000):
            n = int(rng.integers(1, 51))
            boxes = random_boxes(rng, n)
            scores = rng.random(n)
            if trial % 10 == 0:  # ties exercise the stable ordering
                scores = np.round(scores, 1)
            thr = float(rng.uniform(0.05, 1.0))
            assert list(nms_indices(boxes, scores, thr)) == greedy_nms_oracle(boxes, scores, thr)

    def test_examples(self):
        p = Proposal(BBox(0, 0, 2, 2), 0.9)
        assert nms([p], 0.5) == [p]
        q = Proposal(BBox(0, 0, 2, 2), 0.8)
        assert nms([q, p], 0.5, "objectness") == [p]
        assert nms([], 0.5) == []

    def test_threshold_range(self):
        with pytest.raises(ValueError):
            nms_indices(np.zeros((1, 4)) + [0, 0, 1, 1], np.ones(1), 0.0)

    def test_idempotent_and_sorted(self, rng):
        boxes = random_boxes(rng, 40)
        props = [Proposal(BBox(*b), float(s), float(t))
                 for b, s, t in zip(boxes, rng.random(40), rng.random(40))]
        once = nms(props, 0.4, "similarity")
        assert nms(once, 0.4, "similarity") == once
        sims = [p.query_similarity for p in once]
        assert sims == sorted(sims, reverse=True)
        for i, a in enumerate(once):
            for b in once[i + 1:]:
                assert iou(a.box, b.box) <= 0.4


class TestAnchors:
    def test_counts_and_centres(self):
        a = generate_anchors(1, 1, 16, [1.0], [1.0])
        assert len(a) == 1 and a[0].box.center == (8.0, 8.0)
        assert len(generate_anchors(2, 3, 16, [1, 2, 3], [0.5, 1, 2])) == 54

    def test_area_and_order(self):
        boxes = anchor_boxes(2, 3, 8, [2.0, 4.0], [1.0, 2.0])
        areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
        assert np.allclose(areas.reshape(6, 2, 2)[:, 0, :], 16 ** 2)
        assert np.allclose(areas.reshape(6, 2, 2)[:, 1, :], 32 ** 2)
        anchors = generate_anchors(2, 3, 8, [2.0, 4.0], [1.0, 2.0])
        assert [(x.cell_row, x.cell_col, x.scale_index, x.ratio_index) for x in anchors[:5]] == \
            [(0, 0, 0, 0), (0, 0, 0, 1), (0, 0, 1, 0), (0, 0, 1, 1), (0, 1, 0, 0)]
        # ratio is height / width
        w, h = boxes[1, 2] - boxes[1, 0], boxes[1, 3] - boxes[1, 1]
        assert h / w == pytest.approx(2.0)

    def test_deterministic(self):
        assert np.array_equal(anchor_boxes(4, 5, 8, [3, 4], [2]), anchor_boxes(4, 5, 8, [3, 4], [2]))


class TestDeltas:
    def test_round_trip(self, rng):
        ref = torch.from_numpy(random_boxes(rng, 50))
        gt = torch.from_numpy(random_boxes(rng, 50))
        for w in ((1, 1, 1, 1), (10, 10, 5, 5)):
            back = decode_deltas(ref, encode_deltas(ref, gt, w), w)
            assert torch.allclose(back, gt, atol=1e-9)

    def test_identity(self, rng):
        ref = torch.from_numpy(random_boxes(rng, 5))
        assert torch.all(encode_deltas(ref, ref) == 0)


class TestJitter:
    def test_zero_shift_is_identity(self, rng):
        t = BBox(10, 10, 30, 60)
        assert jitter_box(t, 100, 100, rng, 0.0) == t

    def test_property_over_draws(self, rng):
        for _ in range(10_000):
            w, h = 128, 96
            x1, y1 = rng.uniform(0, w - 10), rng.uniform(0, h - 10)
            t = BBox(x1, y1, min(w, x1 + rng.uniform(5, 60)), min(h, y1 + rng.uniform(5, 60)))
            j = jitter_box(t, w, h, rng, 0.2)
            assert j.inside(w, h)
            assert iou(j, t) >= 0.5

    def test_corner_box_stays_inside(self, rng):
        t = BBox(0, 0, 20, 40)
        for _ in range(500):
            assert jitter_box(t, 20, 40, rng, 0.2).inside(20, 40)


class TestAnchorSampling:
    def layout(self):
        anchors = anchor_boxes(12, 16, 8, [3.0, 3.75, 4.5], [2.0, 2.6])
        target = BBox(20, 20, 40, 70)
        others = [BBox(60, 25, 80, 72), BBox(95, 30, 113, 75)]
        return anchors, target, others

    def test_target_equal_anchor_is_positive(self, rng):
        anchors, _, others = self.layout()
        target = BBox(*anchors[500])
        s = sample_qrpn_anchors(anchors, target, others, rng, batch=128)
        assert 500 in s.indices[s.labels == 1] or s.num_positive == 32

    def test_negatives_never_cover_other_people(self, rng):
        anchors, target, others = self.layout()
        cover = box_iou(anchors, np.array([o.to_list() for o in others])).max(axis=1)
        for _ in range(200):
            s = sample_qrpn_anchors(anchors, target, others, rng, image_size=(128, 96))
            neg = s.indices[s.labels == 0]
            assert np.all(cover[neg] < 0.3)
            assert len(s.indices) <= 128
            assert s.num_positive <= 32
            t_iou = box_iou(anchors[s.indices[s.labels == 1]],
                            np.array([t.to_list() for t in s.targets])).max(axis=1)
            assert np.all(t_iou >= 0.6)

    def test_high_overlap_person_anchor_excluded(self, rng):
        anchors, target, others = self.layout()
        covering = np.flatnonzero(box_iou(anchors, np.array([others[0].to_list()]))[:, 0] >= 0.9)
        person = BBox(*anchors[covering[0]]) if len(covering) else others[0]
        cover_idx = np.flatnonzero(box_iou(anchors, np.array([person.to_list()]))[:, 0] >= 0.3)
        for _ in range(100):
            s = sample_qrpn_anchors(anchors, target, [person], rng)
            assert not set(s.indices[s.labels == 0]) & set(cover_idx)

    def test_positive_fraction_exceeds_standard_policy(self):
        anchors, target, others = self.layout()
        q = sample_qrpn_anchors(anchors, target, others, np.random.default_rng(0),
                                image_size=(128, 96))
        r = sample_rpn_anchors(anchors, [target], np.random.default_rng(0))
        assert q.positive_fraction > r.positive_fraction

    def test_no_positive_is_flagged(self, rng):
        anchors = anchor_boxes(2, 2, 8, [1.0], [1.0])
        s = sample_qrpn_anchors(anchors, BBox(60, 60, 90, 90), [], rng)
        assert s.no_positive and s.num_positive == 0 and len(s.indices) > 0

    def test_rpn_best_match_positive(self, rng):
        anchors, target, _ = self.layout()
        gt = BBox(3, 3, 9, 9)  # small box: no anchor reaches 0.7
        s = sample_rpn_anchors(anchors, [gt, target], rng)
        best = int(np.argmax(box_iou(anchors, np.array([gt.to_list()]))[:, 0]))
        assert best in s.indices[s.labels == 1]
        assert len(s.indices) <= 256 and s.num_positive <= 128


def test_nms_limit_is_prefix(rng):
    for _ in range(100):
        boxes = random_boxes(rng, 40)
        scores = rng.random(40)
        full = nms_indices(boxes, scores, 0.5)
        assert list(nms_indices(boxes, scores, 0.5, limit=5)) == list(full[:5])
