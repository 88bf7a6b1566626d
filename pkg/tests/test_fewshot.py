import dataclasses

import numpy as np
import pytest
import torch

from qgn.backbone import BackboneConfig
from qgn.datasets import ImageStore
from qgn.episodic import sample_episode
from qgn.fewshot import (EpisodeEvaluator, FewShotModelConfig, FewShotQGN, FewShotTrainConfig,
                         FewShotTrainer, augment)
from qgn.losses import FEWSHOT_TERMS


def build(qsse=True, qsim=True, seed=0):
    torch.manual_seed(seed)
    cfg = FewShotModelConfig(BackboneConfig(use_qsse=qsse, gate_bias=3.0), use_qsimnet=qsim)
    return FewShotQGN(cfg, num_train_classes=6, seed=seed)


def test_augment_shapes_and_determinism():
    x = torch.randn(4, 3, 32, 32)
    a = augment(x, np.random.default_rng(0))
    b = augment(x, np.random.default_rng(0))
    assert a.shape == x.shape and torch.equal(a, b)
    assert torch.equal(augment(x, np.random.default_rng(0), pad=0, jitter=0, flip=False), x)


def test_training_losses(finegrained_small):
    root, split = finegrained_small
    model = build()
    tr = FewShotTrainer(model, split, ImageStore(root), FewShotTrainConfig(batch_pairs=8))
    q, g, lq, lg = tr.batch()
    comps = model.training_losses(q, g, lq, lg)
    assert set(comps) == set(FEWSHOT_TERMS)
    assert all(torch.isfinite(v) for v in comps.values())
    baseline = build(qsse=False, qsim=False)
    comps = baseline.training_losses(q, g, lq, lg)
    assert comps["sim"].item() == 0.0 and comps["oim"].item() > 0


def test_trainer_validation(finegrained_small):
    root, split = finegrained_small
    with pytest.raises(ValueError):
        FewShotTrainer(build(), split, ImageStore(root), FewShotTrainConfig(batch_pairs=6))
    with pytest.raises(ValueError):
        FewShotTrainer(build(), split, ImageStore(root), FewShotTrainConfig(optimizer="lbfgs"))
    with pytest.raises(ValueError):
        FewShotTrainer(build(), split, ImageStore(root), FewShotTrainConfig(qsim_weight_decay=-1))


def test_weight_decay_reaches_similarity_head_only(finegrained_small):
    root, split = finegrained_small
    model = build()
    tr = FewShotTrainer(model, split, ImageStore(root), FewShotTrainConfig(qsim_weight_decay=0.5))
    rest, head = tr.optimizer.param_groups
    assert rest["weight_decay"] == 0.0 and head["weight_decay"] == 0.5
    assert {id(p) for p in head["params"]} == {id(p) for p in model.qsim.parameters()}
    assert len(rest["params"]) + len(head["params"]) == len(list(model.parameters()))
    plain = FewShotTrainer(build(qsim=False), split, ImageStore(root), FewShotTrainConfig())
    assert type(plain.optimizer) is torch.optim.Adam
    assert len(plain.optimizer.param_groups) == 1


def test_uncoupled_evaluator_matches_single_stream(finegrained_small):
    root, split = finegrained_small
    store = ImageStore(root)
    model = build(qsse=True)
    model.qsse_enabled = False
    ev = EpisodeEvaluator(model, store)
    assert not ev.coupled
    refs = next(iter(split.test.values()))[:2]
    f_q, f_g = ev.pair_features(refs[0], refs[1])
    with torch.no_grad():
        direct = model.encoder.encode_single(torch.stack([store(r) for r in refs]))[0]
    assert torch.allclose(f_q, direct[0], atol=1e-6) and torch.allclose(f_g, direct[1], atol=1e-6)


def test_coupled_features_depend_on_partner(finegrained_small):
    root, split = finegrained_small
    ev = EpisodeEvaluator(build(), ImageStore(root))
    assert ev.coupled
    a, b, c = next(iter(split.test.values()))[:3]
    assert not torch.allclose(ev.pair_features(a, c)[1], ev.pair_features(b, c)[1])


@pytest.mark.parametrize("qsse", [False, True])
def test_five_shot_order_invariant(finegrained_small, qsse):
    root, split = finegrained_small
    ev = EpisodeEvaluator(build(qsse=qsse), ImageStore(root))
    ep = sample_episode(split.test, c_novel=3, k=5, l=3, seed=4)
    rng = np.random.default_rng(0)
    shuffled = dataclasses.replace(ep, queries=tuple(ep.queries[i] for i in rng.permutation(len(ep.queries))))
    assert np.allclose(ev.episode_scores(ep), ev.episode_scores(shuffled), atol=1e-6)


def test_episode_scores_shape(finegrained_small):
    root, split = finegrained_small
    ev = EpisodeEvaluator(build(qsim=False), ImageStore(root))
    ep = sample_episode(split.test, c_novel=3, k=1, l=4, seed=0)
    scores = ev.episode_scores(ep)
    assert scores.shape == (12, 3)
    assert np.all(np.abs(scores) <= 1 + 1e-6)  # cosine without QSimNet


def test_training_reduces_loss(finegrained_small):
    root, split = finegrained_small
    model = build()
    tr = FewShotTrainer(model, split, ImageStore(root), FewShotTrainConfig(batch_pairs=8, seed=1))
    recs = tr.fit(max_steps=40)
    assert len(recs) == 40
    assert np.mean([r["loss"] for r in recs[-10:]]) < np.mean([r["loss"] for r in recs[:10]])
