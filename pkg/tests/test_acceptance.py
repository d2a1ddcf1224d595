"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The heavyweight toy-world pipeline (criteria 4-6 and 9) is trained once per
session and shared; everything else runs at desk scale.
"""

import math
import random
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from convrec import converse as cv
from convrec import metrics as mx
from convrec import reasoner as rs
from convrec import trainer as tr
from convrec.cli import main as cli_main
from convrec.corpus import generate_toy_world
from convrec.kg import ReasonPath, context_preference, load_kg
from convrec.trainer import TrainConfig
from conftest import diag_embedding
from gradcheck import assert_grads_match
from oracles import enumerate_episodes
from test_converse import fd_model_and_preps, tiny_model, tiny_vocab
from test_metrics import load_fixture
from test_reasoner import make_nets, two_action_world

ROOT = Path(__file__).resolve().parent.parent
TOY_CFG = ROOT / "configs" / "toy.cfg"
MICRO_CFG = ROOT / "configs" / "micro.cfg"


def verdict(n, desc, ok):
    print(f"ACCEPTANCE {n} {'PASS' if ok else 'FAIL'}: {desc}")
    assert ok, f"criterion {n} failed: {desc}"


# ---------------------------------------------------------------------------
# Criterion 1: invariant suite (< 2 min)


def test_criterion_1_invariants():
    start = time.time()
    gen = torch.Generator().manual_seed(0)

    kg, dialogs = generate_toy_world(3, 30, 3, 60)
    emb = diag_embedding(8, kg.n_entities, kg.n_relations)
    nets = rs.PolicyNetworks(8, 1, kg.n_relations, kg.n_entities, 16)

    ok = True
    # policy output: normalized, supported exactly on the candidate set
    for e in range(0, kg.n_entities, 3):
        path = ReasonPath((e,), ())
        space = rs.action_space(kg, path, np.zeros(8), emb)
        with torch.no_grad():
            probs = nets.policy(rs.encode_state(np.zeros(8), path, 1, emb), space)
        ok &= abs(float(probs.sum()) - 1.0) <= 1e-6
        ok &= probs.shape[0] == len(space.candidates)
        ok &= bool((probs >= 0).all())
        ok &= space.candidates[-1][0] == rs.SELF_LOOP
        visited = set(path.entities)
        ok &= all(t not in visited for r, t in space.candidates[:-1])

    # discriminator clamp and logit reward identity
    with torch.no_grad():
        score = rs.disc_path_score(nets, np.ones(32) * 50, (0, 1))
    ok &= 1e-6 <= float(score) <= 1 - 1e-6
    ok &= rs.path_reward(0.5) == 0.0

    # beam validity: KG-valid paths, scores sorted non-increasing
    beam = rs.beam_search(nets, kg, emb, np.zeros(8), 0, width=8, n_paths=8)
    ok &= all(p.is_valid(kg) for p in beam)
    ok &= all(beam[i].score >= beam[i + 1].score for i in range(len(beam) - 1))

    # converse: KL identity, decode normalization, gate ranges, copy support
    vocab = tiny_vocab(extra=["alpha", "near"])
    model = tiny_model(vocab, dtype=torch.float)
    from test_converse import decode_once, tiny_prep

    p = torch.tensor([0.3, 0.7])
    with torch.no_grad():
        kl, _ = model.knowledge_losses(
            cv.PathDistribution(p, p.clone()), [torch.randn(4) for _ in range(2)], [6]
        )
    ok &= abs(float(kl)) <= 1e-9
    prep = tiny_prep(vocab)
    with torch.no_grad():
        step = decode_once(model, vocab, prep)
    ok &= abs(float(step.dist.sum()) - 1.0) <= 1e-6
    ok &= 0.0 < float(step.pointer_gate) < 1.0
    ok &= 0.0 < float(step.fusion_gate) < 1.0
    in_paths = {i for ids in prep.path_copy_ids for i in ids}
    ok &= all(
        float(step.p_copy[i]) == 0.0 for i in range(step.p_copy.shape[0]) if i not in in_paths
    )

    # recall monotonicity over random ranked lists
    rng = random.Random(0)
    for _ in range(200):
        ranked = rng.sample(range(40), 12)
        gold = {rng.randrange(40)}
        r = [mx.recall_at_k(ranked, gold, k) for k in (1, 10, 25)]
        ok &= r[0] <= r[1] <= r[2]

    elapsed = time.time() - start
    verdict(1, f"invariant suite in {elapsed:.1f}s (< 120s)", ok and elapsed < 120)


# ---------------------------------------------------------------------------
# Criterion 2: gradient checks (< 5 min)


def test_criterion_2_gradient_checks():
    start = time.time()
    worst = 0.0

    kg, emb = two_action_world()
    nets = make_nets(dim=2, hidden=4, n_rel=2, n_ent=3)
    gen = torch.Generator().manual_seed(0)
    episode = rs.rollout(nets, kg, emb, np.ones(2) * 0.5, 0, mode="sample", generator=gen)
    targets = rs.bellman_targets(nets, episode, [0.5] * len(episode.steps))
    worst = max(worst, assert_grads_match(
        lambda: rs.actor_critic_loss(nets, episode, targets), nets))

    state = rs.encode_state(np.ones(2), ReasonPath((0,), ()), 1, emb)
    worst = max(worst, assert_grads_match(
        lambda: rs.disc_loss(nets.disc_scores(state, [(0, 1)]),
                             nets.disc_scores(state, [(1, 2)])), nets))

    model, _, preps = fd_model_and_preps()
    worst = max(worst, assert_grads_match(
        lambda: cv.teacher_forced_losses(model, preps[0], False)["kl"], model))
    worst = max(worst, assert_grads_match(
        lambda: cv.teacher_forced_losses(model, preps[0], False)["bow"], model))

    def bce():
        return cv.batch_losses(model, preps, random.Random(0), include_nll=False)["bce"]

    worst = max(worst, assert_grads_match(bce, model))
    worst = max(worst, assert_grads_match(
        lambda: cv.teacher_forced_losses(model, preps[0], True)["nll"], model))

    elapsed = time.time() - start
    verdict(2, f"six losses vs central differences, worst rel {worst:.2e} "
               f"in {elapsed:.0f}s (< 300s)", elapsed < 300)


# ---------------------------------------------------------------------------
# Criterion 3: metric oracle equivalence


def test_criterion_3_metric_oracles():
    kg, records, expected, _ = load_fixture()
    report = mx.compute_report(records, kg)
    mismatches = [
        name for name in expected
        if getattr(report, name) != expected[name]
    ]
    verdict(3, "all metrics equal brute-force oracles exactly on the fixture",
            not mismatches)


# ---------------------------------------------------------------------------
# The shared toy-world pipeline (criteria 4, 5, 6, 9)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy_pipeline")
    config = TrainConfig.load(TOY_CFG)
    kg, dialogs = generate_toy_world(7, 200, 5, 500)
    kg.save_tsv(out / "kg.tsv")

    t0 = time.time()
    tr.run_stage("rec", kg, dialogs, config, out)
    rec_seconds = time.time() - t0

    world = tr.prepare_world(kg, dialogs, config, out)
    nets = rs.load_policy(out / "rec.pt")
    recall1 = rs.greedy_recall1(nets, kg, world.emb, world.test, config)

    tr.run_stage("imitation", kg, dialogs, config, out)
    tr.run_stage("gen", kg, dialogs, config, out)
    model, vocab = cv.load_converse(out / "gen.pt")
    pre_records = mx.build_eval_records(nets, model, vocab, world, config)
    pre_report = mx.compute_report(pre_records, kg)

    tr.run_stage("joint", kg, dialogs, config, out)
    nets_j = rs.load_policy(out / "joint_rec.pt")
    model_j, vocab_j = cv.load_converse(out / "joint_gen.pt")
    post_records = mx.build_eval_records(nets_j, model_j, vocab_j, world, config)
    post_report = mx.compute_report(post_records, kg)

    return {
        "out": out, "config": config, "kg": kg, "world": world,
        "nets": nets, "nets_joint": nets_j, "model": model_j, "vocab": vocab_j,
        "rec_seconds": rec_seconds, "recall1": recall1,
        "pre_report": pre_report, "post_report": post_report,
    }


def test_criterion_4_toy_recommendation_learning(pipeline):
    baseline = 1.0 / pipeline["kg"].n_entities
    ok = (
        pipeline["recall1"] >= 0.8
        and pipeline["rec_seconds"] < 900
        and baseline <= 0.01
        and pipeline["recall1"] > 10 * baseline
    )
    verdict(4, f"stage-1 greedy recall@1 {pipeline['recall1']:.3f} >= 0.8 in "
               f"{pipeline['rec_seconds']:.0f}s (< 900s), baseline {baseline:.4f}", ok)


def test_criterion_5_discriminator_accuracy(pipeline):
    kg, world, config = pipeline["kg"], pipeline["world"], pipeline["config"]
    nets = pipeline["nets"]
    gen = torch.Generator().manual_seed(123)
    correct, total = 0, 0
    for ex in world.test[:150]:
        u = context_preference(ex.context_entities, world.emb)
        gold = ex.gold_path.path
        segments = rs.gold_segments(gold, u, world.emb, nets.history)
        prefix = ReasonPath((gold.entities[0],), ())
        for t, (state, g_action) in enumerate(segments):
            with torch.no_grad():
                s_real = float(nets.disc_scores(state, [g_action])[0])
            correct += s_real > 0.5
            total += 1
            space = rs.action_space(kg, prefix, u, world.emb, config.action_cap)
            idx = int(torch.randint(len(space), (1,), generator=gen))
            if space.candidates[idx] == g_action:
                idx = (idx + 1) % len(space)
            with torch.no_grad():
                s_rand = float(nets.disc_scores(state, [space.candidates[idx]])[0])
            correct += s_rand <= 0.5
            total += 1
            if t < gold.length:
                prefix = ReasonPath(prefix.entities + (gold.entities[t + 1],),
                                    prefix.relations + (gold.relations[t],))
    accuracy = correct / total
    verdict(5, f"gold-vs-random segment accuracy {accuracy:.3f} >= 0.9", accuracy >= 0.9)


def test_criterion_6_toy_end_to_end(pipeline):
    pre, post = pipeline["pre_report"], pipeline["post_report"]
    ok = (
        post.hit is not None
        and post.hit >= 0.7
        and post.p_inter >= 0.6
        and post.hit >= pre.hit - 0.02
    )
    verdict(6, f"post-joint hit {post.hit:.3f} >= 0.7, p_inter {post.p_inter:.3f} "
               f">= 0.6, non-regression vs pre-joint hit {pre.hit:.3f}", ok)


# ---------------------------------------------------------------------------
# Criterion 7: beam-search oracle


def test_criterion_7_beam_oracle():
    rng = random.Random(0)
    n = 40
    records = []
    for i in range(n):
        fanout = rng.randint(1, 3)  # plus the self-loop stays within branching 4
        tails = rng.sample([j for j in range(n) if j != i], fanout)
        for t in tails:
            records.append((f"e{i}", f"r{rng.randrange(3)}", f"e{t}"))
    kg = load_kg(records)
    assert max(len(kg.outgoing(e)) for e in range(kg.n_entities)) <= 4
    emb = diag_embedding(4, kg.n_entities, kg.n_relations)
    torch.manual_seed(3)
    nets = rs.PolicyNetworks(4, 1, kg.n_relations, kg.n_entities, 8)
    u = np.ones(4, dtype=np.float32) * 0.2
    agree = 0
    for trial in range(100):
        start = rng.randrange(kg.n_entities)
        episodes = enumerate_episodes(kg, emb, nets, u, start, max_len=3, cap=250)
        best = max(episodes, key=lambda e: (e[2], (e[0], e[1])))
        beam = rs.beam_search(nets, kg, emb, u, start, width=16, n_paths=3)
        if beam[0].key() == (best[0], best[1]) and math.isclose(
            beam[0].score, best[2], abs_tol=1e-6
        ):
            agree += 1
    verdict(7, f"beam top-1 equals exhaustive argmax on {agree}/100 starts", agree == 100)


# ---------------------------------------------------------------------------
# Criterion 8: determinism


def test_criterion_8_determinism(tmp_path_factory):
    outs = []
    for tag in ("run1", "run2"):
        out = tmp_path_factory.mktemp(tag)
        args = ["--kg", str(out / "kg.tsv"), "--corpus", str(out / "corpus.jsonl")]
        assert cli_main(["toygen", "--seed", "11", "--entities", "40",
                         "--relations", "3", "--dialogs", "80", "--out", str(out)]) == 0
        assert cli_main(["train", "--stage", "all", "--seed", "7",
                         "--config", str(MICRO_CFG), "--out", str(out)] + args) == 0
        assert cli_main(["eval", "--checkpoint", str(out), "--config", str(MICRO_CFG),
                         "--seed", "7", "--split", "test",
                         "--report", str(out / "report.txt")] + args) == 0
        outs.append((out / "report.txt").read_bytes())
    verdict(8, "two `train --stage all --seed 7` runs give byte-identical reports",
            outs[0] == outs[1])


# ---------------------------------------------------------------------------
# Criterion 9: path-count sweep trend


def test_criterion_9_sweep_trend(pipeline):
    world, config, kg = pipeline["world"], pipeline["config"], pipeline["kg"]
    nets, model, vocab = pipeline["nets_joint"], pipeline["model"], pipeline["vocab"]
    held_out = world.valid + world.test
    by_np = {}
    for n in (1, 5, 10):
        records = mx.build_eval_records(nets, model, vocab, world, config,
                                        examples=held_out, n_paths=n)
        by_np[n] = mx.compute_report(records, kg)
    ok = True
    for a, b in ((1, 5), (5, 10)):
        ok &= by_np[b].p_inter >= by_np[a].p_inter - 0.02
        ok &= by_np[b].p_inner >= by_np[a].p_inner - 0.02
    seq = {m: [getattr(by_np[n], m) for n in (1, 5, 10)] for m in ("p_inter", "p_inner")}
    verdict(9, f"P-Inter {seq['p_inter']} and P-Inner {seq['p_inner']} "
               f"non-decreasing (+-0.02) over N_p 1->5->10", ok)


# ---------------------------------------------------------------------------
# Supplementary toy-world trend checks (share the pipeline fixture)


def read_csv_rows(path):
    import csv

    with open(path) as f:
        return list(csv.DictReader(f))


def test_toy_gen_losses_decrease(pipeline):
    rows = read_csv_rows(pipeline["out"] / "gen_log.csv")
    for key in ("kl", "bow", "bce", "nll"):
        vals = [float(r[key]) for r in rows]
        head = sum(vals[:3]) / 3
        tail = sum(vals[-3:]) / 3
        assert tail < head, f"{key} did not decrease: {head:.4f} -> {tail:.4f}"


def test_toy_terminal_success_trends_up(pipeline):
    rows = read_csv_rows(pipeline["out"] / "rec_log.csv")
    rewards = [float(r["reward"]) for r in rows]
    assert sum(rewards[-5:]) / 5 > sum(rewards[:5]) / 5
    recalls = [float(r["recall1"]) for r in rows if r["recall1"] not in ("", "nan")]
    assert recalls[-1] > recalls[0]
