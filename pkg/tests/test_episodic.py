import json

import numpy as np
import pytest

from qgn.episodic import (DatasetSplit, Episode, classify_scores, episode_seeds, evaluate_protocol,
                          make_train_pairs, sample_episode, summarize, write_manifest)


def pool(n_classes=8, per_class=20):
    return {c: [f"c{c}/{i}" for i in range(per_class)] for c in range(n_classes)}


def test_episode_disjoint_over_many_draws():
    p = pool()
    for seed in range(10_000):
        ep = sample_episode(p, c_novel=5, k=1 + seed % 5, l=15, seed=seed)
        assert len(set(ep.classes)) == 5
        q = {ref for _, ref in ep.queries}
        g = {ref for _, ref in ep.gallery}
        assert not q & g
        assert len(q) == 5 * ep.k and len(g) == 75
        for c in ep.classes:
            assert len(ep.queries_for(c)) == ep.k
        assert all(ref.startswith(f"c{c}/") for c, ref in ep.queries + ep.gallery)


def test_episode_deterministic():
    assert sample_episode(pool(), seed=7) == sample_episode(pool(), seed=7)
    assert sample_episode(pool(), seed=7) != sample_episode(pool(), seed=8)


def test_small_classes_skipped():
    p = pool(6)
    p[0] = p[0][:3]
    for s in range(50):
        assert 0 not in sample_episode(p, 5, 1, 15, s).classes
    p[1] = p[1][:3]
    with pytest.raises(ValueError):
        sample_episode(p, 5, 1, 15, 0)


def test_gallery_targets():
    ep = Episode((3, 1), ((3, "a"), (1, "b")), ((1, "x"), (3, "y")), 1, 1, 0)
    assert ep.gallery_targets().tolist() == [1, 0]


def test_split_rejects_overlap():
    with pytest.raises(ValueError):
        DatasetSplit(train={1: ["a"]}, test={1: ["b"]})
    with pytest.raises(ValueError):
        DatasetSplit(train={}).pool("dev")


def test_tie_break_lowest_index():
    scores = np.array([[0.5, 0.5, 0.1], [0.2, 0.7, 0.7]])
    res = classify_scores(scores, np.array([0, 2]))
    assert res.predictions.tolist() == [0, 1]
    assert res.accuracy == 0.5


def test_summarize():
    mean, ci = summarize([1.0, 0.0, 1.0, 0.0])
    assert mean == 0.5 and ci == pytest.approx(1.96 * 0.5 / 2)
    with pytest.raises(ValueError):
        summarize([])


class OracleScorer:
    """Knows the true class of each item; scores it 1, all others 0."""

    def episode_scores(self, ep):
        return np.array([[float(ref.startswith(f"c{c}/")) for c in ep.classes] for _, ref in ep.gallery])


class ConstantScorer:
    def episode_scores(self, ep):
        return np.zeros((len(ep.gallery), len(ep.classes)))


def test_protocol_extremes():
    p = pool()
    assert evaluate_protocol(OracleScorer(), p, episodes=20).mean == 1.0
    res = evaluate_protocol(ConstantScorer(), p, episodes=20)
    assert res.mean == pytest.approx(0.2) and res.to_dict()["episodes"] == 20
    with pytest.raises(ValueError):
        evaluate_protocol(OracleScorer(), p, episodes=0)


def test_episode_seeds_reproducible():
    assert episode_seeds(1, 5) == episode_seeds(1, 5)
    assert episode_seeds(1, 5) != episode_seeds(2, 5)


def test_train_pairs_ratio(rng):
    p = pool(4, 5)
    pairs = make_train_pairs(p, batch=16, neg_ratio=3, rng=rng)
    assert sum(pr.same for pr in pairs) == 4
    for pr in pairs:
        assert pr.query in p[pr.query_class] and pr.gallery in p[pr.gallery_class]
        if pr.same:
            assert pr.query != pr.gallery
    with pytest.raises(ValueError):
        make_train_pairs(p, batch=6, neg_ratio=3, rng=rng)
    with pytest.raises(ValueError):
        make_train_pairs({0: ["a", "b"]}, batch=4, rng=rng)


def test_manifest_round_trip(tmp_path):
    eps = [sample_episode(pool(), seed=s) for s in range(3)]
    write_manifest(eps, tmp_path / "m.json")
    data = json.loads((tmp_path / "m.json").read_text())
    assert data["episodes"][1]["classes"] == list(eps[1].classes)
