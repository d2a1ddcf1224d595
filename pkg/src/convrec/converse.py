"""Path-aware response generation: bi-GRU encoders, prior/posterior path
weighting, a semantic (mutual-information) discriminator, and a
pointer-generator decoder that copies tokens out of recommendation paths."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from convrec.corpus import SPECIALS, Vocabulary
from convrec.util import ConfigError

PRIOR_EPS = 1e-10
CLAMP_EPS = 1e-6
NLL_EPS = 1e-12


@dataclass
class SequenceEncoding:
    """Per-token bidirectional states plus the [fwd_last ; bwd_first] summary."""

    states: torch.Tensor  # [N, enc_hidden]
    summary: torch.Tensor  # [enc_hidden]


@dataclass
class PathDistribution:
    prior: torch.Tensor
    posterior: torch.Tensor | None = None

    def mu(self, training: bool) -> torch.Tensor:
        if training:
            if self.posterior is None:
                raise ConfigError("training mode needs the posterior distribution")
            return self.posterior
        return self.prior


@dataclass
class DecoderState:
    hidden: torch.Tensor  # [dec_hidden]
    prev_token: int


@dataclass
class DecodeOutput:
    dist: torch.Tensor  # [vocab + n_ext]
    p_vocab: torch.Tensor
    p_copy: torch.Tensor
    pointer_gate: torch.Tensor  # scalar in (0,1)
    fusion_gate: torch.Tensor  # scalar in (0,1)
    fusion: torch.Tensor  # v_t
    context_vector: torch.Tensor
    path_vector: torch.Tensor
    context_attn: torch.Tensor
    path_attn: list


class AdditiveAttention(nn.Module):
    def __init__(self, key_dim, query_dim, hidden):
        super().__init__()
        self.key = nn.Linear(key_dim, hidden)
        self.query = nn.Linear(query_dim, hidden)
        self.score = nn.Linear(hidden, 1, bias=False)

    def forward(self, keys, query, mask=None):
        """keys [N, D] or [P, N, D]; weights softmax over the N axis."""
        scores = self.score(torch.tanh(self.key(keys) + self.query(query))).squeeze(-1)
        if mask is not None:
            scores = scores.masked_fill(~mask, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        return weights, (weights.unsqueeze(-2) @ keys).squeeze(-2)


@dataclass
class PathBank:
    """Batched encodings of the candidate paths."""

    states: torch.Tensor  # [P, N_max, enc_hidden]
    mask: torch.Tensor  # [P, N_max] bool
    lengths: list
    summaries: torch.Tensor  # [P, enc_hidden]

    def summary_list(self):
        return list(self.summaries.unbind(0))


class ConverseModel(nn.Module):
    def __init__(self, vocab_size: int, word_dim: int = 300, enc_hidden: int = 800,
                 enc_layers: int = 2, dec_hidden: int | None = None,
                 max_context_tokens: int = 64, pad_index: int = 0):
        super().__init__()
        if enc_hidden % 2:
            raise ConfigError("enc_hidden must be even (split across directions)")
        dec_hidden = dec_hidden or enc_hidden
        self.vocab_size = vocab_size
        self.word_dim = word_dim
        self.enc_hidden = enc_hidden
        self.enc_layers = enc_layers
        self.dec_hidden = dec_hidden
        self.max_context_tokens = max_context_tokens
        self.embed = nn.Embedding(vocab_size, word_dim, padding_idx=pad_index)
        gru = lambda: nn.GRU(
            word_dim, enc_hidden // 2, num_layers=enc_layers, bidirectional=True
        )
        self.context_enc = gru()
        self.knowledge_enc = gru()
        self.semantic_enc = gru()
        # knowledge imitation
        self.prior_proj = nn.Linear(enc_hidden, enc_hidden, bias=False)
        self.posterior_proj = nn.Linear(enc_hidden, enc_hidden, bias=False)
        self.bow_out = nn.Linear(enc_hidden, vocab_size)
        # semantic imitation
        self.sem_query = nn.Linear(enc_hidden, enc_hidden)
        self.sem_attn = AdditiveAttention(enc_hidden, enc_hidden, enc_hidden)
        self.sem_bilinear = nn.Linear(enc_hidden, enc_hidden, bias=False)
        # decoder
        self.merge = nn.Linear(2 * enc_hidden, dec_hidden)
        self.ctx_attn = AdditiveAttention(enc_hidden, dec_hidden, dec_hidden)
        self.path_attn = AdditiveAttention(enc_hidden, dec_hidden, dec_hidden)
        self.fusion_gate = nn.Linear(max_context_tokens + enc_hidden, 1)
        self.cell = nn.GRUCell(word_dim + enc_hidden, dec_hidden)
        self.vocab_out = nn.Sequential(
            nn.Linear(dec_hidden + enc_hidden, dec_hidden),
            nn.Tanh(),
            nn.Linear(dec_hidden, vocab_size),
        )
        self.pointer_gate = nn.Linear(word_dim + dec_hidden + enc_hidden, 1)

    # -- encoders ----------------------------------------------------------

    def encode(self, token_ids, which: str = "context") -> SequenceEncoding:
        """Bidirectional recurrent pass; h_t = [fwd_t ; bwd_t]."""
        ids = torch.as_tensor(token_ids, dtype=torch.long)
        if ids.numel() == 0:
            raise ConfigError("cannot encode an empty sequence")
        enc = {
            "context": self.context_enc,
            "knowledge": self.knowledge_enc,
            "semantic": self.semantic_enc,
        }[which]
        x = self.embed(ids).unsqueeze(1)  # [N, 1, word_dim]
        out, _ = enc(x)
        states = out.squeeze(1)  # [N, enc_hidden]
        half = self.enc_hidden // 2
        summary = torch.cat([states[-1, :half], states[0, half:]])
        return SequenceEncoding(states, summary)

    def encode_paths(self, ids_list) -> PathBank:
        """Encode all candidate paths in one packed recurrent pass."""
        if not ids_list:
            raise ConfigError("need at least one path to encode")
        lengths = [len(ids) for ids in ids_list]
        if min(lengths) == 0:
            raise ConfigError("cannot encode an empty sequence")
        n_max = max(lengths)
        padded = torch.zeros(n_max, len(ids_list), dtype=torch.long)
        for i, ids in enumerate(ids_list):
            padded[: len(ids), i] = torch.as_tensor(ids, dtype=torch.long)
        packed = nn.utils.rnn.pack_padded_sequence(
            self.embed(padded), lengths, enforce_sorted=False
        )
        out, _ = self.knowledge_enc(packed)
        states, _ = nn.utils.rnn.pad_packed_sequence(out, total_length=n_max)
        states = states.transpose(0, 1)  # [P, N_max, enc_hidden]
        half = self.enc_hidden // 2
        idx = torch.tensor(lengths) - 1
        fwd_last = states[torch.arange(len(ids_list)), idx, :half]
        bwd_first = states[:, 0, half:]
        mask = torch.arange(n_max).unsqueeze(0) < torch.tensor(lengths).unsqueeze(1)
        return PathBank(states, mask, lengths, torch.cat([fwd_last, bwd_first], dim=1))

    # -- knowledge imitation -------------------------------------------------

    def path_distributions(self, o_context, o_paths, o_response=None) -> PathDistribution:
        """Prior weights from the context, posterior from the response."""
        stacked = torch.stack(list(o_paths))
        prior = torch.softmax(stacked @ torch.tanh(self.prior_proj(o_context)), dim=0)
        posterior = None
        if o_response is not None:
            posterior = torch.softmax(
                stacked @ torch.tanh(self.posterior_proj(o_response)), dim=0
            )
        return PathDistribution(prior, posterior)

    def knowledge_losses(self, dist: PathDistribution, o_paths, bow_targets):
        """KL(posterior || prior) plus the bag-of-words relevancy loss."""
        if dist.posterior is None:
            raise ConfigError("knowledge losses need the posterior distribution")
        prior = dist.prior.clamp_min(PRIOR_EPS)
        kl = (dist.posterior * (torch.log(dist.posterior.clamp_min(PRIOR_EPS)) - torch.log(prior))).sum()
        agg = (dist.posterior.unsqueeze(1) * torch.stack(list(o_paths))).sum(dim=0)
        logp = torch.log_softmax(self.bow_out(agg), dim=-1)
        targets = torch.as_tensor(bow_targets, dtype=torch.long)
        if targets.numel() == 0:
            bow = torch.zeros((), dtype=logp.dtype)
        else:
            bow = -logp[targets].mean()
        return kl, bow

    # -- semantic imitation ---------------------------------------------------

    def semantic_aggregate(self, o_paths, o_context):
        query = torch.tanh(self.sem_query(o_context))
        _, out = self.sem_attn(torch.stack(list(o_paths)), query)
        return out

    def semantic_score(self, o_agg, o_statement):
        """Bilinear discriminator sigma(o_agg^T W o_statement), clamped."""
        if o_agg.shape != o_statement.shape:
            raise ConfigError("semantic discriminator inputs must share shape")
        raw = torch.sigmoid(o_agg @ self.sem_bilinear(o_statement))
        return raw.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS)

    def mim_loss(self, positives, negatives):
        """Binary cross-entropy mutual-information estimator."""
        if not positives or not negatives:
            raise ConfigError("mim loss needs at least one positive and one negative")
        terms = [torch.log(self.semantic_score(a, u)) for a, u in positives]
        terms += [torch.log(1.0 - self.semantic_score(a, u)) for a, u in negatives]
        return -torch.stack(terms).sum() / (len(positives) + len(negatives))

    # -- decoder ---------------------------------------------------------------

    def initial_state(self, o_semantic, o_context) -> torch.Tensor:
        return torch.tanh(self.merge(torch.cat([o_semantic, o_context])))

    def _padded_attn(self, weights):
        n = self.max_context_tokens
        if len(weights) >= n:
            return weights[:n]
        out = torch.zeros(n, dtype=weights.dtype)
        out[: len(weights)] = weights
        return out

    def decode_step(self, hidden, prev_token_emb, context: SequenceEncoding,
                    bank: PathBank, mu: torch.Tensor, copy_ids: list,
                    n_ext: int) -> DecodeOutput:
        """One decoder step: attend, fuse, and mix vocab and copy distributions.

        copy_ids[i][j] is the extended-vocabulary id of token j of path i;
        extended ids >= vocab_size index tokens that exist only in the paths.
        """
        d_ctx, v_ctx = self.ctx_attn(context.states, hidden)
        d_paths, path_vs = self.path_attn(bank.states, hidden, bank.mask)
        path_weights = [d_paths[i, : bank.lengths[i]] for i in range(len(bank.lengths))]
        v_path = (mu.unsqueeze(-1) * path_vs).sum(0)
        g = torch.sigmoid(
            self.fusion_gate(torch.cat([self._padded_attn(d_ctx), v_path]))
        ).squeeze(-1)
        v = g * v_ctx + (1.0 - g) * v_path
        p_vocab = torch.softmax(self.vocab_out(torch.cat([hidden, v])), dim=-1)
        xi = torch.sigmoid(
            self.pointer_gate(torch.cat([prev_token_emb, hidden, v]))
        ).squeeze(-1)
        p_copy = copy_distribution(path_weights, mu, copy_ids, self.vocab_size + n_ext)
        dist = pointer_mixture(p_vocab, p_copy, xi)
        return DecodeOutput(dist, p_vocab, p_copy, xi, g, v, v_ctx, v_path,
                            d_ctx, path_weights)

    def advance(self, hidden, token_emb, fusion):
        return self.cell(torch.cat([token_emb, fusion]).unsqueeze(0), hidden.unsqueeze(0)).squeeze(0)


def copy_distribution(path_attn, mu, copy_ids, ext_size) -> torch.Tensor:
    """P_copy(w) = sum_i mu_i * sum_{j : token_ij = w} attn_ij over path tokens."""
    dtype = path_attn[0].dtype if path_attn else torch.get_default_dtype()
    out = torch.zeros(ext_size, dtype=dtype)
    for weights, m, ids in zip(path_attn, mu, copy_ids):
        out.index_add_(0, torch.as_tensor(ids, dtype=torch.long), m * weights)
    return out


def pointer_mixture(p_vocab, p_copy, xi) -> torch.Tensor:
    """xi * P_vocab + (1 - xi) * P_copy on the extended vocabulary."""
    ext = torch.zeros_like(p_copy)
    ext[: p_vocab.shape[0]] = p_vocab
    return xi * ext + (1.0 - xi) * p_copy


def nll_loss(stepwise_dists, target_ids) -> torch.Tensor:
    """Mean negative log-likelihood of the gold tokens under the step dists."""
    if len(stepwise_dists) != len(target_ids):
        raise ConfigError("one distribution per gold token required")
    losses = [-torch.log(d[t].clamp_min(NLL_EPS)) for d, t in zip(stepwise_dists, target_ids)]
    return torch.stack(losses).mean()


# ---------------------------------------------------------------------------
# Example preparation


@dataclass
class PreparedExample:
    example: object
    context_ids: list
    response_in: list  # <bos> + response
    response_out: list  # response + <eos>, extended ids
    bow_targets: list
    statement_ids: list | None  # gold statement, when a gold path exists
    path_tokens: list  # list of token tuples, one per candidate path
    path_vocab_ids: list  # vocab ids (unk for OOV), for encoding
    path_copy_ids: list  # extended ids, for the copy distribution
    ext_tokens: list  # tokens beyond the vocabulary, in first-seen order


def prepare_example(example, paths_tokens, vocab: Vocabulary,
                    max_context_tokens: int = 64) -> PreparedExample:
    if not paths_tokens:
        raise ConfigError("an example needs at least one candidate path")
    ext: dict[str, int] = {}
    path_vocab_ids, path_copy_ids = [], []
    for toks in paths_tokens:
        path_vocab_ids.append(vocab.encode(toks))
        ids = []
        for tok in toks:
            if tok in vocab:
                ids.append(vocab.index[tok])
            else:
                if tok not in ext:
                    ext[tok] = len(vocab) + len(ext)
                ids.append(ext[tok])
        path_copy_ids.append(ids)
    ext_tokens = list(ext)

    context = list(example.context[-max_context_tokens:]) or [SPECIALS[1]]
    response = list(example.response)
    resp_out = []
    for tok in response:
        if tok in vocab:
            resp_out.append(vocab.index[tok])
        elif tok in ext:
            resp_out.append(ext[tok])
        else:
            resp_out.append(vocab.unk)
    statement_ids = None
    if example.gold_path is not None:
        statement_ids = vocab.encode(example.gold_path.statement)
    return PreparedExample(
        example=example,
        context_ids=vocab.encode(context),
        response_in=[vocab.bos] + vocab.encode(response),
        response_out=resp_out + [vocab.eos],
        bow_targets=[
            vocab.index.get(t, vocab.unk) for t in response if t not in SPECIALS
        ],
        statement_ids=statement_ids,
        path_tokens=list(paths_tokens),
        path_vocab_ids=path_vocab_ids,
        path_copy_ids=path_copy_ids,
        ext_tokens=ext_tokens,
    )


def teacher_forced_losses(model: ConverseModel, prep: PreparedExample,
                          include_nll: bool = True):
    """KL, BOW and (optionally) NLL for one example in training mode."""
    ctx = model.encode(prep.context_ids, "context")
    resp = model.encode(prep.response_in[1:] or [prep.response_out[-1]], "context")
    bank = model.encode_paths(prep.path_vocab_ids)
    o_paths = bank.summary_list()
    dist = model.path_distributions(ctx.summary, o_paths, resp.summary)
    kl, bow = model.knowledge_losses(dist, o_paths, prep.bow_targets)
    out = {"kl": kl, "bow": bow, "dist": dist, "ctx": ctx, "o_paths": o_paths,
           "bank": bank}
    if not include_nll:
        return out
    if prep.statement_ids is not None:
        o_sem = model.encode(prep.statement_ids, "semantic").summary
    else:
        o_sem = model.semantic_aggregate(o_paths, ctx.summary)
    mu = dist.mu(training=True)
    hidden = model.initial_state(o_sem, ctx.summary)
    n_ext = len(prep.ext_tokens)
    dists = []
    for t in range(len(prep.response_out)):
        prev_emb = model.embed(torch.tensor(prep.response_in[t]))
        step = model.decode_step(hidden, prev_emb, ctx, bank, mu,
                                 prep.path_copy_ids, n_ext)
        dists.append(step.dist)
        if t + 1 < len(prep.response_in):
            y_emb = model.embed(torch.tensor(prep.response_in[t + 1]))
            hidden = model.advance(hidden, y_emb, step.fusion)
    out["nll"] = nll_loss(dists, prep.response_out)
    out["step_dists"] = dists
    return out


def batch_losses(model: ConverseModel, preps, rng, include_nll: bool = True):
    """Average losses over a batch; MIM negatives are shuffled in-batch pairs."""
    if len(preps) < 2:
        raise ConfigError("need a batch of at least 2 examples for negative sampling")
    parts = [teacher_forced_losses(model, p, include_nll) for p in preps]
    aggs = [model.semantic_aggregate(p["o_paths"], p["ctx"].summary) for p in parts]
    statements = []
    for prep in preps:
        if prep.statement_ids is not None:
            statements.append(model.encode(prep.statement_ids, "semantic").summary)
        else:
            statements.append(None)
    pos_idx = [i for i, s in enumerate(statements) if s is not None]
    positives, negatives = [], []
    if len(pos_idx) >= 2:
        others = pos_idx.copy()
        rng.shuffle(others)
        for k, i in enumerate(pos_idx):
            j = others[k]
            if j == i:
                j = others[(k + 1) % len(others)]
            positives.append((aggs[i], statements[i]))
            negatives.append((aggs[j], statements[i]))
    zero = torch.zeros(())
    bce = model.mim_loss(positives, negatives) if positives else zero
    kl = torch.stack([p["kl"] for p in parts]).mean()
    bow = torch.stack([p["bow"] for p in parts]).mean()
    losses = {"kl": kl, "bow": bow, "bce": bce}
    if include_nll:
        losses["nll"] = torch.stack([p["nll"] for p in parts]).mean()
    return losses


# ---------------------------------------------------------------------------
# Inference


def generate_response(model: ConverseModel, prep: PreparedExample, vocab: Vocabulary,
                      mode: str = "greedy", max_tokens: int = 30, beam_width: int = 4):
    """Decode a response with inference-mode path weights (prior, no gold U)."""
    model.eval()
    with torch.no_grad():
        ctx = model.encode(prep.context_ids, "context")
        bank = model.encode_paths(prep.path_vocab_ids)
        o_paths = bank.summary_list()
        dist = model.path_distributions(ctx.summary, o_paths)
        mu = dist.mu(training=False)
        o_sem = model.semantic_aggregate(o_paths, ctx.summary)
        hidden = model.initial_state(o_sem, ctx.summary)
        n_ext = len(prep.ext_tokens)

        def tok_str(idx):
            return vocab.tokens[idx] if idx < len(vocab) else prep.ext_tokens[idx - len(vocab)]

        def emb_of(idx):
            return model.embed(torch.tensor(idx if idx < len(vocab) else vocab.unk))

        if mode == "greedy":
            out_ids = []
            state = DecoderState(hidden, vocab.bos)
            for _ in range(max_tokens):
                step = model.decode_step(state.hidden, emb_of(state.prev_token),
                                         ctx, bank, mu, prep.path_copy_ids, n_ext)
                nxt = int(torch.argmax(step.dist).item())
                if nxt == vocab.eos:
                    break
                out_ids.append(nxt)
                state = DecoderState(
                    model.advance(state.hidden, emb_of(nxt), step.fusion), nxt
                )
            return [tok_str(i) for i in out_ids]
        if mode != "beam":
            raise ConfigError(f"unknown decode mode {mode!r}")
        beams = [(0.0, [vocab.bos], hidden, False)]
        for _ in range(max_tokens):
            nxt_beams = []
            for score, seq, h, done in beams:
                if done:
                    nxt_beams.append((score, seq, h, done))
                    continue
                step = model.decode_step(h, emb_of(seq[-1]), ctx, bank, mu,
                                         prep.path_copy_ids, n_ext)
                logp = torch.log(step.dist.clamp_min(NLL_EPS))
                top = torch.topk(logp, min(beam_width, logp.shape[0]))
                for lp, idx in zip(top.values.tolist(), top.indices.tolist()):
                    if idx == vocab.eos:
                        nxt_beams.append((score + lp, seq, h, True))
                    else:
                        h2 = model.advance(h, emb_of(idx), step.fusion)
                        nxt_beams.append((score + lp, seq + [idx], h2, False))
            nxt_beams.sort(key=lambda b: -b[0])
            beams = nxt_beams[:beam_width]
            if all(b[3] for b in beams):
                break
        best = max(beams, key=lambda b: b[0])
        return [tok_str(i) for i in best[1][1:]]


def save_converse(model: ConverseModel, vocab: Vocabulary, path) -> None:
    torch.save(
        {
            "format_version": 1,
            "shape": {
                "vocab_size": model.vocab_size,
                "word_dim": model.word_dim,
                "enc_hidden": model.enc_hidden,
                "enc_layers": model.enc_layers,
                "dec_hidden": model.dec_hidden,
                "max_context_tokens": model.max_context_tokens,
            },
            "vocab": vocab.tokens,
            "state": model.state_dict(),
        },
        path,
    )


def load_converse(path):
    blob = torch.load(path, weights_only=True)
    if blob.get("format_version") != 1:
        raise ConfigError(f"{path}: unsupported checkpoint version")
    model = ConverseModel(**blob["shape"])
    model.load_state_dict(blob["state"])
    return model, Vocabulary(blob["vocab"])
