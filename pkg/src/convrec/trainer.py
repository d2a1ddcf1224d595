"""Staged training schedule: recommendation RL, imitation pretraining,
generation, and the bidirectional joint stage that feeds conversation-side
rewards back into the path-reasoning agent."""

from __future__ import annotations

import csv
import math
import random
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch

from convrec import converse as cv
from convrec import reasoner as rs
from convrec.corpus import (
    build_examples,
    build_vocabulary,
    split_corpus,
    tokenize_path,
)
from convrec.kg import EmbeddingTable, context_preference, train_embeddings
from convrec.util import ConfigError, StageOrderError, seed_everything

STAGES = ("rec", "imitation", "gen", "joint")
PREREQUISITE = {"rec": None, "imitation": "rec", "gen": "imitation", "joint": "gen"}
STAGE_CHECKPOINT = {
    "rec": "rec.pt",
    "imitation": "imitation.pt",
    "gen": "gen.pt",
    "joint": "joint_gen.pt",
}

CLAMP = rs.PROB_EPS


@dataclass
class TrainConfig:
    stage: str = "all"
    seed: int = 7
    batch_size: int = 32
    lr: float = 1e-4
    joint_lr: float = 0.0  # 0 means "use lr"
    rec_epochs: int = 10
    imitation_epochs: int = 3
    gen_epochs: int = 10
    joint_epochs: int = 3
    alpha: float = 0.006
    beta: float = 0.001
    gamma: float = 0.006
    n_paths: int = 10
    history: int = 1
    max_path_len: int = 3
    action_cap: int = 250
    kg_dim: int = 128
    emb_epochs: int = 100
    emb_lr: float = 0.01
    margin: float = 1.0
    policy_hidden: int = 256
    entropy_weight: float = 0.01
    detach_q: bool = False
    demo_prob: float = 0.0
    discount: float = 1.0
    word_dim: int = 300
    word_vectors: str = ""  # optional pretrained embedding file
    enc_hidden: int = 800
    enc_layers: int = 2
    max_context_tokens: int = 64
    min_freq: int = 2
    beam_width: int = 32
    max_tokens: int = 30
    reward_transform: str = "logit"
    split_train: float = 7.0
    split_valid: float = 1.5
    split_test: float = 1.5

    @property
    def ratio(self):
        return (self.split_train, self.split_valid, self.split_test)

    def validate(self):
        if min(self.alpha, self.beta, self.gamma) < 0 or self.alpha + self.beta + self.gamma > 1:
            raise ConfigError("reward weights must be non-negative and sum to <= 1")
        for name in ("batch_size", "rec_epochs", "imitation_epochs", "gen_epochs",
                     "joint_epochs", "n_paths", "history", "max_path_len",
                     "action_cap", "kg_dim", "emb_epochs", "beam_width", "max_tokens"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.reward_transform not in ("logit", "as-written"):
            raise ConfigError(f"unknown reward transform {self.reward_transform!r}")
        if self.stage not in STAGES + ("all",):
            raise ConfigError(f"unknown stage {self.stage!r}")
        return self

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for fld in fields(self):
                f.write(f"{fld.name}={getattr(self, fld.name)}\n")

    @classmethod
    def load(cls, path):
        raw = {}
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path} line {lineno}: expected key=value")
                key, value = line.split("=", 1)
                raw[key.strip()] = value.strip()
        return cls().with_overrides(raw)

    def with_overrides(self, overrides: dict):
        typed = {}
        by_name = {f.name: f for f in fields(self)}
        for key, value in overrides.items():
            if value is None:
                continue
            if key not in by_name:
                raise ConfigError(f"unknown config key {key!r}")
            current = getattr(self, key)
            if isinstance(current, bool):
                typed[key] = str(value).lower() in ("1", "true", "yes")
            elif isinstance(current, int):
                typed[key] = int(value)
            elif isinstance(current, float):
                typed[key] = float(value)
            else:
                typed[key] = str(value)
        return replace(self, **typed).validate()


def write_csv(path, rows, fieldnames):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in fieldnames})


# ---------------------------------------------------------------------------
# World preparation


@dataclass
class World:
    kg: object
    emb: EmbeddingTable
    train: list
    valid: list
    test: list
    templates: dict | None = None


def prepare_world(kg, dialogs, config: TrainConfig, out_dir) -> World:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    emb_path = out / "emb.bin"
    if emb_path.exists():
        emb = EmbeddingTable.load(emb_path)
        if emb.dim != config.kg_dim or emb.entity_vectors.shape[0] != kg.n_entities:
            raise ConfigError(f"{emb_path} does not match the KG / configured dim")
    else:
        emb = train_embeddings(
            kg, config.kg_dim, config.emb_epochs, config.margin, config.seed,
            config.emb_lr,
        )
        emb.save(emb_path)
    templates = None
    template_path = out / "templates.tsv"
    if template_path.exists():
        from convrec.corpus import load_templates_tsv

        templates = load_templates_tsv(template_path)
    train_d, valid_d, test_d = split_corpus(dialogs, config.ratio, config.seed)
    return World(
        kg=kg,
        emb=emb,
        train=build_examples(train_d, kg, config.max_path_len, templates),
        valid=build_examples(valid_d, kg, config.max_path_len, templates),
        test=build_examples(test_d, kg, config.max_path_len, templates),
        templates=templates,
    )


def candidate_paths(nets, world: World, example, config: TrainConfig, n_paths=None):
    u = context_preference(example.context_entities, world.emb)
    return rs.beam_search(
        nets, world.kg, world.emb, u, example.context_entities[-1],
        width=config.beam_width, n_paths=n_paths or config.n_paths,
        max_len=config.max_path_len, cap=config.action_cap,
    )


def build_prepared(nets, world: World, vocab, examples, config: TrainConfig):
    """Beam-search candidate paths for every example and pre-tokenize them."""
    prepared, beams = [], []
    for ex in examples:
        paths = candidate_paths(nets, world, ex, config)
        tokens = [tokenize_path(p, world.kg, world.templates) for p in paths]
        prepared.append(cv.prepare_example(ex, tokens, vocab, config.max_context_tokens))
        beams.append(paths)
    return prepared, beams


# ---------------------------------------------------------------------------
# Converse-side epochs


def converse_epoch(model, preps, config: TrainConfig, opt, shuffle_rng, mim_rng,
                   include_nll: bool):
    order = list(range(len(preps)))
    shuffle_rng.shuffle(order)
    sums = {"kl": 0.0, "bow": 0.0, "bce": 0.0, "nll": 0.0}
    n = 0
    batches = [order[i : i + config.batch_size] for i in range(0, len(order), config.batch_size)]
    if len(batches) >= 2 and len(batches[-1]) < 2:
        batches[-2].extend(batches.pop())
    for batch in batches:
        if len(batch) < 2:
            continue
        losses = cv.batch_losses(model, [preps[i] for i in batch], mim_rng, include_nll)
        if include_nll:
            total = losses["kl"] + losses["bow"] + losses["bce"] + losses["nll"]
        else:
            total = losses["bow"] + losses["bce"]
        opt.zero_grad()
        total.backward()
        opt.step()
        for key in sums:
            if key in losses:
                sums[key] += float(losses[key].item()) * len(batch)
        n += len(batch)
    means = {k: v / max(n, 1) for k, v in sums.items()}
    means["total"] = sum(means[k] for k in (("kl", "bow", "bce", "nll") if include_nll else ("bow", "bce")))
    return means


def train_converse(model, preps, config: TrainConfig, include_nll: bool, epochs: int,
                   seed: int):
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    shuffle_rng = random.Random(seed)
    mim_rng = random.Random(seed + 1)
    curves = []
    for epoch in range(epochs):
        means = converse_epoch(model, preps, config, opt, shuffle_rng, mim_rng, include_nll)
        means["epoch"] = epoch
        curves.append(means)
    return curves


# ---------------------------------------------------------------------------
# Bridge rewards (conversation -> recommendation)


def _transform(p: float, transform: str) -> float:
    p = min(max(p, CLAMP), 1.0 - CLAMP)
    if transform == "logit":
        return math.log(p) - math.log(1.0 - p)
    if transform == "as-written":
        return math.log(p) + math.log(1.0 - p)
    raise ConfigError(f"unknown reward transform {transform!r}")


def bridge_knowledge_reward(path, beam, mu, transform: str = "logit") -> float:
    """Reward from the path's posterior weight; 0 when the path is off-beam."""
    for i, candidate in enumerate(beam):
        if candidate.key() == path.key():
            return _transform(float(mu[i]), transform)
    return 0.0


def bridge_semantic_reward(segment_tokens, o_statement, model, vocab,
                           transform: str = "logit") -> float:
    """Semantic-discriminator score of the walked segment against gold U."""
    if o_statement is None or not segment_tokens:
        return 0.0
    with torch.no_grad():
        o_seg = model.encode(vocab.encode(segment_tokens), "semantic").summary
        score = float(model.semantic_score(o_seg, o_statement).item())
    return _transform(score, transform)


def make_joint_bridge(model, vocab, world: World, config: TrainConfig, cache: dict):
    """Per-episode callback giving (R_knowledge, per-step R_semantic).

    cache maps id(example) -> (prep, beam, posterior mu, o_statement); it is
    rebuilt at every beam refresh.
    """

    def bridge(example, episode):
        entry = cache.get(id(example))
        if entry is None:
            return 0.0, [0.0] * len(episode.steps)
        _, beam, mu, o_statement = entry
        r_know = bridge_knowledge_reward(episode.path, beam, mu, config.reward_transform)
        r_sem = []
        path = episode.path
        for t in range(len(episode.steps)):
            hops = min(t + 1, path.length)
            if hops == 0:
                r_sem.append(0.0)
                continue
            prefix = type(path)(path.entities[: hops + 1], path.relations[:hops])
            tokens = tokenize_path(prefix, world.kg, world.templates)
            r_sem.append(
                bridge_semantic_reward(tokens, o_statement, model, vocab,
                                       config.reward_transform)
            )
        return r_know, r_sem

    return bridge


def refresh_joint_cache(nets, model, vocab, world: World, usable, config: TrainConfig):
    """Re-beam every example and precompute posterior weights and gold encodings."""
    cache = {}
    preps = []
    with torch.no_grad():
        for ex in usable:
            beam = candidate_paths(nets, world, ex, config)
            tokens = [tokenize_path(p, world.kg, world.templates) for p in beam]
            prep = cv.prepare_example(ex, tokens, vocab, config.max_context_tokens)
            ctx = model.encode(prep.context_ids, "context").summary
            resp = model.encode(prep.response_in[1:] or [vocab.eos], "context").summary
            o_paths = model.encode_paths(prep.path_vocab_ids).summary_list()
            dist = model.path_distributions(ctx, o_paths, resp)
            mu = dist.mu(training=True).tolist()
            o_statement = None
            if prep.statement_ids is not None:
                o_statement = model.encode(prep.statement_ids, "semantic").summary
            cache[id(ex)] = (prep, beam, mu, o_statement)
            preps.append(prep)
    return cache, preps


# ---------------------------------------------------------------------------
# Stages


def _require(out: Path, stage: str):
    prev = PREREQUISITE[stage]
    if prev is None:
        return
    if not (out / STAGE_CHECKPOINT[prev]).exists():
        raise StageOrderError(
            f"stage {stage!r} needs the {prev!r} checkpoint "
            f"({STAGE_CHECKPOINT[prev]}) in {out}; run stage {prev!r} first"
        )


def stage_rec(kg, dialogs, config: TrainConfig, out_dir):
    out = Path(out_dir)
    seed_everything(config.seed)
    world = prepare_world(kg, dialogs, config, out)
    nets = rs.PolicyNetworks(
        config.kg_dim, config.history, kg.n_relations, kg.n_entities,
        config.policy_hidden,
    )
    curves = train_rec_with_log(nets, world, config, out)
    return {"checkpoint": out / "rec.pt", "log": out / "rec_log.csv", "curves": curves}


def train_rec_with_log(nets, world: World, config, out: Path):
    curves = rs.train_rec(
        nets, world.kg, world.emb, world.train, config,
        eval_examples=[ex for ex in world.valid if ex.gold_items][:200],
        checkpoint_dir=str(out),
    )
    write_csv(out / "rec_log.csv", curves, ["epoch", "reward", "disc_loss", "recall1"])
    return curves


def stage_imitation(kg, dialogs, config: TrainConfig, out_dir):
    out = Path(out_dir)
    _require(out, "imitation")
    seed_everything(config.seed + 1)
    world = prepare_world(kg, dialogs, config, out)
    nets = rs.load_policy(out / "rec.pt")
    vocab = build_vocabulary(world.train, config.min_freq)
    vocab.save(out / "vocab.txt")
    model = cv.ConverseModel(
        len(vocab), config.word_dim, config.enc_hidden, config.enc_layers,
        max_context_tokens=config.max_context_tokens, pad_index=vocab.pad,
    )
    if config.word_vectors:
        from convrec.corpus import load_word_vectors

        mat = load_word_vectors(config.word_vectors, vocab, config.word_dim)
        with torch.no_grad():
            model.embed.weight.copy_(torch.from_numpy(mat))
    preps, _ = build_prepared(nets, world, vocab, world.train, config)
    curves = train_converse(model, preps, config, include_nll=False,
                            epochs=config.imitation_epochs, seed=config.seed + 1)
    cv.save_converse(model, vocab, out / "imitation.pt")
    write_csv(out / "imitation_log.csv", curves,
              ["epoch", "kl", "bow", "bce", "nll", "total"])
    return {"checkpoint": out / "imitation.pt", "curves": curves}


def stage_gen(kg, dialogs, config: TrainConfig, out_dir):
    out = Path(out_dir)
    _require(out, "gen")
    seed_everything(config.seed + 2)
    world = prepare_world(kg, dialogs, config, out)
    nets = rs.load_policy(out / "rec.pt")
    model, vocab = cv.load_converse(out / "imitation.pt")
    preps, _ = build_prepared(nets, world, vocab, world.train, config)
    curves = train_converse(model, preps, config, include_nll=True,
                            epochs=config.gen_epochs, seed=config.seed + 2)
    cv.save_converse(model, vocab, out / "gen.pt")
    write_csv(out / "gen_log.csv", curves, ["epoch", "kl", "bow", "bce", "nll", "total"])
    return {"checkpoint": out / "gen.pt", "curves": curves}


def stage_joint(kg, dialogs, config: TrainConfig, out_dir, hit_examples: int = 100):
    out = Path(out_dir)
    _require(out, "joint")
    seed_everything(config.seed + 3)
    world = prepare_world(kg, dialogs, config, out)
    nets = rs.load_policy(out / "rec.pt")
    model, vocab = cv.load_converse(out / "gen.pt")
    usable = rs.usable_examples(world.train)
    if not usable:
        raise ConfigError("joint stage needs examples with gold paths")

    from convrec.metrics import quick_hit

    hit_before = quick_hit(nets, model, vocab, world, config, limit=hit_examples)
    joint_lr = config.joint_lr or config.lr
    opt_r = torch.optim.Adam(nets.parameters(), lr=joint_lr)
    opt_c = torch.optim.Adam(model.parameters(), lr=joint_lr)
    sample_gen = torch.Generator().manual_seed(config.seed + 3)
    shuffle_rng = np.random.default_rng(config.seed + 3)
    c_shuffle = random.Random(config.seed + 3)
    mim_rng = random.Random(config.seed + 4)
    rows = []
    for epoch in range(config.joint_epochs):
        cache, preps = refresh_joint_cache(nets, model, vocab, world, usable, config)
        bridge = make_joint_bridge(model, vocab, world, config, cache)
        stats = rs.rec_epoch(
            nets, world.kg, world.emb, usable, config, opt_r, sample_gen,
            shuffle_rng, joint_bridge=bridge,
        )
        means = converse_epoch(model, preps, config, opt_c, c_shuffle, mim_rng,
                               include_nll=True)
        rows.append({"epoch": epoch, "reward": stats["reward"],
                     "disc_loss": stats["disc_loss"], **means})
    hit_after = quick_hit(nets, model, vocab, world, config, limit=hit_examples)
    rows.append({"epoch": "hit_before/after", "reward": hit_before, "disc_loss": hit_after})
    rs.save_policy(nets, out / "joint_rec.pt")
    cv.save_converse(model, vocab, out / "joint_gen.pt")
    write_csv(out / "joint_log.csv", rows,
              ["epoch", "reward", "disc_loss", "kl", "bow", "bce", "nll", "total"])
    return {
        "checkpoint": out / "joint_gen.pt",
        "hit_before": hit_before,
        "hit_after": hit_after,
        "curves": rows,
    }


STAGE_RUNNERS = {
    "rec": stage_rec,
    "imitation": stage_imitation,
    "gen": stage_gen,
    "joint": stage_joint,
}


def run_stage(stage: str, kg, dialogs, config: TrainConfig, out_dir):
    """Run one named stage, or all four in order."""
    config.validate()
    if stage == "all":
        results = {}
        for name in STAGES:
            results[name] = STAGE_RUNNERS[name](kg, dialogs, config, out_dir)
        return results
    if stage not in STAGE_RUNNERS:
        raise ConfigError(f"unknown stage {stage!r}")
    return {stage: STAGE_RUNNERS[stage](kg, dialogs, config, out_dir)}
