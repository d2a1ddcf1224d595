"""KG path-reasoning agent: actor-critic policy with an adversarial path
discriminator, rollouts, and beam search over recommendation paths."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from convrec.kg import NONE_ENTITY, EmbeddingTable, KnowledgeGraph, ReasonPath
from convrec.util import ConfigError

SELF_LOOP = -1  # relation id of the terminate action

CHECKPOINT_VERSION = 1
PROB_EPS = 1e-6  # discriminator outputs are clamped to [eps, 1-eps]


def encode_state(u, path: ReasonPath, history: int, emb: EmbeddingTable):
    """Concatenate u with the last `history` (entity, relation) pairs and the
    current entity; missing slots are zero-padded. Length (2*history+2)*dim."""
    t = path.length
    dim = emb.dim
    zero = np.zeros(dim, dtype=np.float32)
    parts = [np.asarray(u, dtype=np.float32)]
    j = t - history
    parts.append(emb.entity(path.entities[j]) if j >= 0 else zero)
    for j in range(t - history + 1, t + 1):
        parts.append(emb.relation(path.relations[j - 1]) if j >= 1 else zero)
        parts.append(emb.entity(path.entities[j]) if j >= 0 else zero)
    return np.concatenate(parts)


@dataclass
class ActionSpace:
    """Candidate (relation, entity) actions at the current entity.

    Edges leading back to visited entities are excluded; the self-loop
    terminate action (relation SELF_LOOP) is always last. matrix stacks the
    frozen KG embeddings [relation ; entity] per candidate.
    """

    candidates: list
    matrix: np.ndarray

    def __len__(self):
        return len(self.candidates)

    @property
    def self_loop_index(self):
        return len(self.candidates) - 1


def action_space(kg: KnowledgeGraph, path: ReasonPath, u, emb: EmbeddingTable,
                 cap: int = 250) -> ActionSpace:
    current = path.end
    visited = set(path.entities)
    if current == NONE_ENTITY:
        edges = []
    else:
        edges = [(r, t) for r, t in kg.outgoing(current) if t not in visited]
    if len(edges) > cap - 1:
        scored = sorted(
            edges,
            key=lambda e: (-float(np.dot(emb.entity(e[1]), u)), e[0], e[1]),
        )
        edges = sorted(scored[: cap - 1])
    candidates = edges + [(SELF_LOOP, current)]
    dim = emb.dim
    matrix = np.zeros((len(candidates), 2 * dim), dtype=np.float32)
    for i, (r, t) in enumerate(candidates):
        if r != SELF_LOOP:
            matrix[i, :dim] = emb.relation(r)
        matrix[i, dim:] = emb.entity(t)
    return ActionSpace(candidates, matrix)


class PolicyNetworks(nn.Module):
    """Actor, critic, and path discriminator sharing the state layout.

    The actor scores frozen KG action embeddings; the critic and the
    discriminator keep their own learnable relation/entity lookups (index
    n_relations holds the self-loop relation).
    """

    def __init__(self, dim: int, history: int, n_relations: int, n_entities: int,
                 hidden: int = 256):
        super().__init__()
        self.dim = dim
        self.history = history
        self.n_relations = n_relations
        self.n_entities = n_entities
        self.hidden = hidden
        state_dim = (2 * history + 2) * dim
        action_dim = 2 * dim
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.actor_w1 = nn.Linear(state_dim, hidden)
        self.actor_w2 = nn.Linear(hidden, action_dim)
        self.critic_w1 = nn.Linear(state_dim, hidden)
        self.critic_w2 = nn.Linear(hidden, action_dim)
        self.critic_rel = nn.Embedding(n_relations + 1, dim)
        self.critic_ent = nn.Embedding(n_entities, dim)
        self.disc_w = nn.Linear(state_dim + action_dim, hidden)
        self.disc_b = nn.Linear(hidden, 1, bias=False)
        self.disc_rel = nn.Embedding(n_relations + 1, dim)
        self.disc_ent = nn.Embedding(n_entities, dim)

    def _as_tensor(self, x):
        p = next(self.parameters())
        if isinstance(x, torch.Tensor):
            return x.to(p.dtype)
        return torch.as_tensor(np.asarray(x), dtype=p.dtype)

    def _action_embed(self, candidates, rel_table, ent_table):
        rel_idx = torch.tensor(
            [self.n_relations if r == SELF_LOOP else r for r, _ in candidates],
            dtype=torch.long,
        )
        ent_idx = torch.tensor([t for _, t in candidates], dtype=torch.long)
        return torch.cat([rel_table(rel_idx), ent_table(ent_idx)], dim=1)

    def actor_logits(self, state, action_matrix):
        s = self._as_tensor(state)
        a = self._as_tensor(action_matrix)
        h = nn.functional.elu(self.actor_w2(nn.functional.elu(self.actor_w1(s))))
        return a @ h

    def policy(self, state, actions: ActionSpace):
        return torch.softmax(self.actor_logits(state, actions.matrix), dim=-1)

    def critic_values(self, state, candidates):
        s = self._as_tensor(state)
        h = nn.functional.elu(self.critic_w2(nn.functional.elu(self.critic_w1(s))))
        a = self._action_embed(candidates, self.critic_rel, self.critic_ent)
        return a @ h

    def disc_scores(self, state, candidates):
        s = self._as_tensor(state)
        a = self._action_embed(candidates, self.disc_rel, self.disc_ent)
        sa = torch.cat([s.expand(len(candidates), -1), a], dim=1)
        logits = self.disc_b(torch.tanh(self.disc_w(torch.tanh(sa)))).squeeze(-1)
        return torch.sigmoid(logits).clamp(PROB_EPS, 1.0 - PROB_EPS)


def policy_forward(nets: PolicyNetworks, state, actions: ActionSpace):
    """Probability vector over the candidate actions; sums to 1."""
    if np.asarray(actions.matrix).shape[1] != nets.action_dim:
        raise ConfigError("action matrix width does not match the networks")
    return nets.policy(state, actions)


def critic_q(nets: PolicyNetworks, state, actions: ActionSpace, index: int):
    if not 0 <= index < len(actions):
        raise KeyError(f"action index {index} outside candidate set")
    return nets.critic_values(state, [actions.candidates[index]])[0]


def disc_path_score(nets: PolicyNetworks, state, action):
    """P((state, action) comes from the gold path), clamped to (0, 1)."""
    return nets.disc_scores(state, [action])[0]


def disc_loss(score_fake, score_real):
    fake = torch.as_tensor(score_fake).reshape(-1)
    real = torch.as_tensor(score_real).reshape(-1)
    return -(torch.log(1.0 - fake).mean() + torch.log(real).mean())


def path_reward(score) -> float:
    """Logit of the discriminator score."""
    s = float(score)
    return math.log(s) - math.log(1.0 - s)


def terminal_reward(path: ReasonPath, gold_items) -> float:
    if not path.terminal:
        return 0.0
    if not gold_items:
        return 0.0
    return 1.0 if path.end in set(gold_items) else 0.0


@dataclass
class RewardBundle:
    r_terminal: float
    r_path: float
    r_knowledge: float = 0.0
    r_semantic: float = 0.0
    weights: tuple = (0.006, 0.001, 0.006)
    full_length: bool = True  # beta is dropped for paths below max length
    joint: bool = False


def aggregate_reward(bundle: RewardBundle) -> float:
    alpha, beta, gamma = bundle.weights
    if min(alpha, beta, gamma) < 0 or alpha + beta + gamma > 1:
        raise ConfigError(f"invalid reward weights {bundle.weights}")
    if not bundle.joint:
        return alpha * bundle.r_path + (1.0 - alpha) * bundle.r_terminal
    if not bundle.full_length:
        beta = 0.0
    rest = 1.0 - alpha - beta - gamma
    return (
        alpha * bundle.r_path
        + beta * bundle.r_knowledge
        + gamma * bundle.r_semantic
        + rest * bundle.r_terminal
    )


# ---------------------------------------------------------------------------
# Episodes


@dataclass
class EpisodeStep:
    state: np.ndarray
    actions: ActionSpace
    action_index: int
    reward: float = 0.0


@dataclass
class Episode:
    path: ReasonPath
    steps: list


def rollout(nets: PolicyNetworks, kg: KnowledgeGraph, emb: EmbeddingTable, u,
            start: int, max_len: int = 3, mode: str = "greedy", cap: int = 250,
            generator: torch.Generator | None = None) -> Episode:
    """Walk the KG under the current policy until self-loop or max_len hops."""
    path = ReasonPath((start,), (), score=0.0, terminal=start == NONE_ENTITY)
    if path.terminal:
        return Episode(path, [])
    steps = []
    for _ in range(max_len):
        actions = action_space(kg, path, u, emb, cap)
        state = encode_state(u, path, nets.history, emb)
        with torch.no_grad():
            probs = nets.policy(state, actions)
        if mode == "greedy":
            idx = int(torch.argmax(probs).item())
        elif mode == "sample":
            idx = int(torch.multinomial(probs, 1, generator=generator).item())
        else:
            raise ConfigError(f"unknown rollout mode {mode!r}")
        steps.append(EpisodeStep(state, actions, idx))
        logp = float(torch.log(probs[idx].clamp_min(1e-12)).item())
        rel, ent = actions.candidates[idx]
        if rel == SELF_LOOP:
            path = ReasonPath(path.entities, path.relations, path.score + logp, True)
            break
        path = ReasonPath(
            path.entities + (ent,), path.relations + (rel,), path.score + logp, False
        )
    if not path.terminal:
        path = ReasonPath(path.entities, path.relations, path.score, True)
    return Episode(path, steps)


def gold_segments(gold_path: ReasonPath, u, emb: EmbeddingTable, history: int):
    """Replay the gold path through the state encoder.

    Yields one (state, action) pair per gold hop plus the terminal self-loop
    segment; agents whose episode runs past the gold length reuse the last
    segment.
    """
    segments = []
    prefix = ReasonPath((gold_path.entities[0],), ())
    for i, rel in enumerate(gold_path.relations):
        state = encode_state(u, prefix, history, emb)
        segments.append((state, (rel, gold_path.entities[i + 1])))
        prefix = ReasonPath(
            prefix.entities + (gold_path.entities[i + 1],), prefix.relations + (rel,)
        )
    state = encode_state(u, prefix, history, emb)
    segments.append((state, (SELF_LOOP, prefix.end)))
    return segments


def demo_episode(nets: PolicyNetworks, kg: KnowledgeGraph, emb: EmbeddingTable, u,
                 gold_path: ReasonPath, cap: int = 250) -> Episode | None:
    """Replay the gold path as an episode (demonstration-guided exploration).

    Returns None when an action-space cap pruned a gold hop away.
    """
    prefix = ReasonPath((gold_path.entities[0],), ())
    steps = []
    for t, rel in enumerate(gold_path.relations):
        actions = action_space(kg, prefix, u, emb, cap)
        target = (rel, gold_path.entities[t + 1])
        if target not in actions.candidates:
            return None
        state = encode_state(u, prefix, nets.history, emb)
        steps.append(EpisodeStep(state, actions, actions.candidates.index(target)))
        prefix = ReasonPath(
            prefix.entities + (gold_path.entities[t + 1],), prefix.relations + (rel,)
        )
    actions = action_space(kg, prefix, u, emb, cap)
    state = encode_state(u, prefix, nets.history, emb)
    steps.append(EpisodeStep(state, actions, actions.self_loop_index))
    final = ReasonPath(prefix.entities, prefix.relations, 0.0, True)
    return Episode(final, steps)


def bellman_targets(nets: PolicyNetworks, episode: Episode, rewards, discount: float = 1.0):
    """G_t = R_t + E_{a~pi} Q(s_{t+1}, a); the expectation is 0 past the end."""
    targets = []
    with torch.no_grad():
        for t, step in enumerate(episode.steps):
            g = rewards[t]
            if t + 1 < len(episode.steps):
                nxt = episode.steps[t + 1]
                probs = nets.policy(nxt.state, nxt.actions)
                qs = nets.critic_values(nxt.state, nxt.actions.candidates)
                g = g + discount * float((probs * qs).sum().item())
            targets.append(float(g))
    return targets


def actor_critic_loss(nets: PolicyNetworks, episode: Episode, targets,
                      entropy_weight: float = 0.0, detach_q: bool = False):
    """-E_{a~pi} Q(s_t, a) + (Q(s_t, a_t) - G_t)^2, averaged over steps.

    detach_q stops the expectation term from training the critic (the critic
    then learns only from the squared Bellman term); the loss value is
    unchanged, only the gradient flow differs. Off by default.
    """
    if not episode.steps:
        raise ConfigError("empty episode")
    losses = []
    for step, g in zip(episode.steps, targets):
        probs = nets.policy(step.state, step.actions)
        qs = nets.critic_values(step.state, step.actions.candidates)
        expected_q = (probs * (qs.detach() if detach_q else qs)).sum()
        td = qs[step.action_index] - g
        loss = -expected_q + td * td
        if entropy_weight > 0:
            entropy = -(probs * torch.log(probs.clamp_min(1e-12))).sum()
            loss = loss - entropy_weight * entropy
        if not torch.isfinite(loss):
            raise FloatingPointError("non-finite actor-critic loss")
        losses.append(loss)
    return torch.stack(losses).mean()


# ---------------------------------------------------------------------------
# Beam search


def beam_search(nets: PolicyNetworks, kg: KnowledgeGraph, emb: EmbeddingTable, u,
                start: int, width: int = 16, n_paths: int = 10, max_len: int = 3,
                cap: int = 250) -> list[ReasonPath]:
    """Top-n_paths paths by cumulative log policy probability.

    A path's score covers every action it took, including the terminating
    self-loop; paths cut off at max_len never pay for a terminate action.
    """
    if start == NONE_ENTITY:
        return [ReasonPath((NONE_ENTITY,), (), 0.0, True)]
    finished: dict = {}

    def finish(path: ReasonPath):
        key = path.key()
        if key not in finished or path.score > finished[key].score:
            finished[key] = path

    frontier = [ReasonPath((start,), (), 0.0, False)]
    with torch.no_grad():
        for _ in range(max_len):
            extensions = []
            for path in frontier:
                actions = action_space(kg, path, u, emb, cap)
                state = encode_state(u, path, nets.history, emb)
                logp = torch.log(nets.policy(state, actions).clamp_min(1e-12))
                for i, (rel, ent) in enumerate(actions.candidates):
                    score = path.score + float(logp[i].item())
                    if rel == SELF_LOOP:
                        finish(ReasonPath(path.entities, path.relations, score, True))
                    else:
                        extensions.append(
                            ReasonPath(
                                path.entities + (ent,), path.relations + (rel,),
                                score, False,
                            )
                        )
            extensions.sort(key=lambda p: (-p.score, p.key()))
            frontier = extensions[:width]
            if not frontier:
                break
    for path in frontier:
        finish(ReasonPath(path.entities, path.relations, path.score, True))
    ranked = sorted(finished.values(), key=lambda p: (-p.score, p.key()))
    return ranked[:n_paths]


def ranked_items(paths) -> list[int]:
    """Path end entities in score order, deduplicated, start-only paths last."""
    seen = set()
    items = []
    for p in paths:
        if p.length == 0:
            continue
        if p.end not in seen:
            seen.add(p.end)
            items.append(p.end)
    for p in paths:
        if p.length == 0 and p.end not in seen and p.end != NONE_ENTITY:
            seen.add(p.end)
            items.append(p.end)
    return items


# ---------------------------------------------------------------------------
# Stage-1 training


def usable_examples(examples):
    return [ex for ex in examples if ex.gold_items and ex.gold_path is not None]


def rec_epoch(nets: PolicyNetworks, kg: KnowledgeGraph, emb: EmbeddingTable,
              usable, config, opt, sample_gen, shuffle_rng, joint_bridge=None):
    """One pass over the examples; returns per-epoch mean reward, sampled
    terminal success, and discriminator loss.

    joint_bridge, when given, is called per finished episode as
    joint_bridge(example, episode) -> (r_knowledge, per_step_r_semantic) and
    switches the reward aggregation to joint mode.
    """
    weights = (config.alpha, config.beta, config.gamma)
    order = shuffle_rng.permutation(len(usable))
    reward_sum, abs_reward_sum, disc_sum, terminal_sum = 0.0, 0.0, 0.0, 0.0
    n_steps, n_episodes, n_disc, n_sampled = 0, 0, 0, 0
    for batch_start in range(0, len(usable), config.batch_size):
        batch = order[batch_start : batch_start + config.batch_size]
        losses = []
        for ei in batch:
            ex = usable[ei]
            u = _preference(ex, emb)
            episode = None
            is_demo = False
            if config.demo_prob > 0 and float(torch.rand(1, generator=sample_gen)) < config.demo_prob:
                episode = demo_episode(nets, kg, emb, u, ex.gold_path.path,
                                       config.action_cap)
                is_demo = episode is not None
            if episode is None:
                episode = rollout(
                    nets, kg, emb, u, ex.context_entities[-1],
                    max_len=config.max_path_len, mode="sample", cap=config.action_cap,
                    generator=sample_gen,
                )
            if not episode.steps:
                continue
            segments = gold_segments(ex.gold_path.path, u, emb, nets.history)
            # demo replays are not actor-generated, so they do not train the
            # discriminator; their scores still feed the path reward below
            l_disc = None
            if is_demo:
                with torch.no_grad():
                    fake_scores = [
                        nets.disc_scores(s.state, [s.actions.candidates[s.action_index]])[0]
                        for s in episode.steps
                    ]
            else:
                fake_scores, fake_train, real_scores = [], [], []
                for t, step in enumerate(episode.steps):
                    action = step.actions.candidates[step.action_index]
                    score = nets.disc_scores(step.state, [action])[0]
                    fake_scores.append(score)
                    g_state, g_action = segments[min(t, len(segments) - 1)]
                    real_scores.append(nets.disc_scores(g_state, [g_action])[0])
                    aligned = action == g_action and np.array_equal(step.state, g_state)
                    # the same (state, action) pair cannot carry both labels
                    if not aligned:
                        fake_train.append(score)
                    # one uniformly random corruption keeps the negative class
                    # populated once the policy has converged onto gold paths
                    ri = int(torch.randint(len(step.actions), (1,), generator=sample_gen))
                    r_action = step.actions.candidates[ri]
                    if not (r_action == g_action and np.array_equal(step.state, g_state)):
                        fake_train.append(nets.disc_scores(step.state, [r_action])[0])
                if fake_train:
                    l_disc = disc_loss(torch.stack(fake_train), torch.stack(real_scores))
            r_know, r_sem = 0.0, [0.0] * len(episode.steps)
            if joint_bridge is not None:
                r_know, r_sem = joint_bridge(ex, episode)
            rewards = []
            for t, step in enumerate(episode.steps):
                last = t == len(episode.steps) - 1
                bundle = RewardBundle(
                    r_terminal=terminal_reward(episode.path, ex.gold_items) if last else 0.0,
                    r_path=path_reward(fake_scores[t].detach()),
                    r_knowledge=r_know if last else 0.0,
                    r_semantic=r_sem[t],
                    weights=weights,
                    full_length=episode.path.length >= config.max_path_len,
                    joint=joint_bridge is not None,
                )
                rewards.append(aggregate_reward(bundle))
            targets = bellman_targets(nets, episode, rewards, config.discount)
            l_ac = actor_critic_loss(nets, episode, targets, config.entropy_weight,
                                     detach_q=config.detach_q)
            losses.append(l_ac if l_disc is None else l_ac + l_disc)
            reward_sum += sum(rewards)
            if not is_demo:
                terminal_sum += terminal_reward(episode.path, ex.gold_items)
                n_sampled += 1
            abs_reward_sum += sum(abs(r) for r in rewards)
            if l_disc is not None:
                disc_sum += float(l_disc.item())
                n_disc += 1
            n_steps += len(episode.steps)
            n_episodes += 1
        if not losses:
            continue
        if abs_reward_sum / max(n_steps, 1) > 1e3:
            raise FloatingPointError("reward divergence guard tripped")
        loss = torch.stack(losses).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    return {
        "reward": reward_sum / max(n_episodes, 1),
        # terminal success of the agent's own sampled episodes (demos excluded)
        "terminal": terminal_sum / max(n_sampled, 1),
        "disc_loss": disc_sum / max(n_disc, 1),
    }


def train_rec(nets: PolicyNetworks, kg: KnowledgeGraph, emb: EmbeddingTable,
              examples, config, eval_examples=None, checkpoint_dir=None,
              epochs=None):
    """Stage-1 optimization of actor+critic+discriminator (minimizes the
    actor-critic loss plus the discriminator loss)."""
    usable = usable_examples(examples)
    if not usable:
        raise ConfigError("no examples with gold paths; cannot train the reasoner")
    sample_gen = torch.Generator().manual_seed(config.seed)
    shuffle_rng = np.random.default_rng(config.seed)
    opt = torch.optim.Adam(nets.parameters(), lr=config.lr)
    curves = []
    for epoch in range(config.rec_epochs if epochs is None else epochs):
        stats = rec_epoch(
            nets, kg, emb, usable, config, opt, sample_gen, shuffle_rng
        )
        recall1 = float("nan")
        if eval_examples:
            recall1 = greedy_recall1(nets, kg, emb, eval_examples, config)
        curves.append({"epoch": epoch, "recall1": recall1, **stats})
        if checkpoint_dir is not None:
            save_policy(nets, f"{checkpoint_dir}/rec.pt")
    return curves


def _preference(example, emb: EmbeddingTable):
    from convrec.kg import context_preference

    return context_preference(example.context_entities, emb)


def greedy_recall1(nets, kg, emb, examples, config) -> float:
    hits, total = 0, 0
    for ex in examples:
        if not ex.gold_items:
            continue
        u = _preference(ex, emb)
        episode = rollout(
            nets, kg, emb, u, ex.context_entities[-1],
            max_len=config.max_path_len, mode="greedy", cap=config.action_cap,
        )
        total += 1
        if episode.path.end in set(ex.gold_items):
            hits += 1
    return hits / total if total else float("nan")


def save_policy(nets: PolicyNetworks, path) -> None:
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "shape": {
                "dim": nets.dim,
                "history": nets.history,
                "n_relations": nets.n_relations,
                "n_entities": nets.n_entities,
                "hidden": nets.hidden,
            },
            "state": nets.state_dict(),
        },
        path,
    )


def load_policy(path) -> PolicyNetworks:
    blob = torch.load(path, weights_only=True)
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version")
    nets = PolicyNetworks(**blob["shape"])
    nets.load_state_dict(blob["state"])
    return nets
