import hashlib
import math
import random

import numpy as np
import pytest
import torch

from convrec import converse as cv
from convrec import reasoner as rs
from convrec import trainer as tr
from convrec.kg import ReasonPath
from convrec.trainer import (
    TrainConfig,
    bridge_knowledge_reward,
    bridge_semantic_reward,
    run_stage,
)
from convrec.util import ConfigError, StageOrderError


def test_defaults_match_reported_constants():
    c = TrainConfig()
    assert c.alpha == 0.006 and c.gamma == 0.006 and c.beta == 0.001
    assert c.batch_size == 32 and c.lr == 1e-4
    assert c.n_paths == 10 and c.history == 1
    assert c.max_path_len == 3 and c.action_cap == 250
    assert c.kg_dim == 128 and c.word_dim == 300
    assert c.enc_hidden == 800 and c.enc_layers == 2
    assert c.ratio == (7.0, 1.5, 1.5)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(alpha=0.6, beta=0.3, gamma=0.2).validate()
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(reward_transform="square").validate()
    with pytest.raises(ConfigError):
        TrainConfig(stage="warmup").validate()


def test_config_file_roundtrip(tmp_path):
    c = TrainConfig(seed=3, lr=0.5, stage="gen", detach_q=True, n_paths=4)
    path = tmp_path / "run.cfg"
    c.save(path)
    assert TrainConfig.load(path) == c


def test_config_overrides_and_unknown_key(tmp_path):
    base = TrainConfig()
    got = base.with_overrides({"seed": "9", "lr": "0.25", "detach_q": "true"})
    assert got.seed == 9 and got.lr == 0.25 and got.detach_q is True
    with pytest.raises(ConfigError):
        base.with_overrides({"nonsense": "1"})


# -- bridge rewards -----------------------------------------------------------------


def test_transform_values():
    assert tr._transform(0.5, "logit") == pytest.approx(0.0)
    assert tr._transform(0.5, "as-written") == pytest.approx(2 * math.log(0.5), abs=1e-9)
    assert tr._transform(0.9, "as-written") == pytest.approx(
        math.log(0.9) + math.log(0.1), abs=1e-6
    )
    assert tr._transform(0.9, "logit") == pytest.approx(math.log(9), abs=1e-6)


def test_knowledge_reward_off_beam_is_zero():
    beam = [ReasonPath((0, 1), (0,)), ReasonPath((0, 2), (1,))]
    off = ReasonPath((0, 3), (0,))
    assert bridge_knowledge_reward(off, beam, [0.5, 0.5]) == 0.0


def test_knowledge_reward_transforms():
    beam = [ReasonPath((0, 1), (0,))]
    path = ReasonPath((0, 1), (0,))
    assert bridge_knowledge_reward(path, beam, [0.5], "logit") == pytest.approx(0.0)
    assert bridge_knowledge_reward(path, beam, [0.5], "as-written") == pytest.approx(
        2 * math.log(0.5), abs=1e-9
    )


def test_semantic_reward_missing_gold_is_zero():
    assert bridge_semantic_reward(("a", "b"), None, None, None) == 0.0
    assert bridge_semantic_reward((), torch.ones(2), None, None) == 0.0


def test_semantic_reward_plumbs_through_discriminator():
    from convrec.corpus import SPECIALS, Vocabulary

    vocab = Vocabulary(list(SPECIALS) + ["alpha", "near", "beta", "."])
    torch.manual_seed(0)
    model = cv.ConverseModel(len(vocab), word_dim=3, enc_hidden=4, enc_layers=1,
                             max_context_tokens=6, pad_index=vocab.pad)
    o_u = torch.randn(4)
    tokens = ("alpha", "near", "beta", ".")
    got = bridge_semantic_reward(tokens, o_u, model, vocab, "logit")
    with torch.no_grad():
        o_seg = model.encode(vocab.encode(tokens), "semantic").summary
        score = float(model.semantic_score(o_seg, o_u))
    assert got == pytest.approx(math.log(score) - math.log(1 - score), abs=1e-6)


# -- stages ----------------------------------------------------------------------------


def test_stage_ordering_enforced(tmp_path, micro_world, micro_config):
    kg, dialogs = micro_world
    with pytest.raises(StageOrderError, match="imitation"):
        run_stage("gen", kg, dialogs, micro_config, tmp_path)
    with pytest.raises(StageOrderError, match="rec"):
        run_stage("imitation", kg, dialogs, micro_config, tmp_path)
    with pytest.raises(StageOrderError, match="gen"):
        run_stage("joint", kg, dialogs, micro_config, tmp_path)


@pytest.fixture(scope="module")
def micro_run(tmp_path_factory, micro_world, micro_config):
    kg, dialogs = micro_world
    out = tmp_path_factory.mktemp("micro_run")
    results = run_stage("all", kg, dialogs, micro_config, out)
    return out, results


def test_all_stages_emit_checkpoints(micro_run):
    out, results = micro_run
    for name in ("emb.bin", "rec.pt", "imitation.pt", "gen.pt", "joint_rec.pt",
                 "joint_gen.pt", "vocab.txt"):
        assert (out / name).exists(), name
    assert set(results) == {"rec", "imitation", "gen", "joint"}


def test_stage_logs_written(micro_run):
    out, _ = micro_run
    for name in ("rec_log.csv", "imitation_log.csv", "gen_log.csv", "joint_log.csv"):
        lines = (out / name).read_text().strip().splitlines()
        assert len(lines) >= 2
    assert lines[0].startswith("epoch,")


def test_joint_logs_hit_before_after(micro_run):
    out, results = micro_run
    assert "hit_before" in results["joint"]
    assert "hit_after" in results["joint"]


def test_joint_does_not_mutate_world(micro_world, micro_config, tmp_path_factory):
    kg, dialogs = micro_world

    def world_hash():
        h = hashlib.sha256()
        for t in sorted(kg.triplets):
            h.update(repr(t).encode())
        for d in dialogs:
            h.update(repr(d).encode())
        return h.hexdigest()

    before = world_hash()
    out = tmp_path_factory.mktemp("mutcheck")
    run_stage("all", kg, dialogs, micro_config, out)
    assert world_hash() == before


def test_joint_with_zero_bridge_weights_matches_stage_one(micro_world, micro_emb,
                                                          micro_splits, micro_config):
    """With beta=gamma=0 the joint reasoner epoch reproduces the plain one."""
    kg, _ = micro_world
    train, _, _ = micro_splits
    usable = rs.usable_examples(train)
    config = tr.TrainConfig(**{**micro_config.__dict__, "beta": 0.0, "gamma": 0.0})

    def one_epoch(bridge):
        torch.manual_seed(1)
        nets = rs.PolicyNetworks(16, 1, kg.n_relations, kg.n_entities, 32)
        opt = torch.optim.Adam(nets.parameters(), lr=config.lr)
        gen = torch.Generator().manual_seed(5)
        shuffle = np.random.default_rng(5)
        rs.rec_epoch(nets, kg, micro_emb, usable, config, opt, gen, shuffle,
                     joint_bridge=bridge)
        return nets

    plain = one_epoch(None)
    bridged = one_epoch(lambda ex, ep: (123.0, [7.0] * len(ep.steps)))
    for a, b in zip(plain.parameters(), bridged.parameters()):
        assert torch.equal(a, b)


def test_refresh_cache_and_bridge(micro_run, micro_world, micro_config):
    out, _ = micro_run
    kg, dialogs = micro_world
    world = tr.prepare_world(kg, dialogs, micro_config, out)
    nets = rs.load_policy(out / "rec.pt")
    model, vocab = cv.load_converse(out / "gen.pt")
    usable = rs.usable_examples(world.train)[:5]
    cache, preps = tr.refresh_joint_cache(nets, model, vocab, world, usable, micro_config)
    assert len(cache) == 5 and len(preps) == 5
    bridge = tr.make_joint_bridge(model, vocab, world, micro_config, cache)
    ex = usable[0]
    episode = rs.rollout(nets, world.kg, world.emb, np.zeros(16),
                         ex.context_entities[-1], mode="greedy")
    r_know, r_sem = bridge(ex, episode)
    assert math.isfinite(r_know)
    assert len(r_sem) == len(episode.steps)
    assert all(math.isfinite(x) for x in r_sem)
    # the agent's own beam path should be on-beam for a trained policy
    _, beam, mu, _ = cache[id(ex)]
    top = beam[0]
    assert bridge_knowledge_reward(top, beam, mu) != 0.0 or mu[0] == 0.5


def test_gen_loss_total_is_component_sum(micro_run):
    import csv

    out, _ = micro_run
    with open(out / "gen_log.csv") as f:
        rows = list(csv.DictReader(f))
    for row in rows:
        total = float(row["total"])
        parts = sum(float(row[k]) for k in ("kl", "bow", "bce", "nll"))
        assert total == pytest.approx(parts, abs=1e-9)
