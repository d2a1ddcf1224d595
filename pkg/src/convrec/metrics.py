"""Automatic evaluation: recall, BLEU, distinct, knowledge F1, hit, and the
path/KG explainability rates, plus report and plot emission."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from convrec.kg import NONE_ENTITY, KnowledgeGraph, build_mention_index, context_preference, link_entities
from convrec.util import ConfigError

REPORT_VERSION = 1
BLEU_SMOOTH = 1e-9


@dataclass
class MetricsReport:
    recall1: float
    recall10: float
    recall25: float
    bleu1: float
    bleu2: float
    dist1: float
    dist2: float
    f1: float
    hit: float | None
    g_inter: float
    g_inner: float
    p_inter: float
    p_inner: float
    n_examples: int
    format_version: int = REPORT_VERSION


@dataclass
class EvalRecord:
    context_entities: tuple
    gold_items: tuple
    gold_entities: tuple
    gold_response: tuple
    generated: tuple
    generated_entities: tuple
    candidate_paths: list
    ranked_items: list


# ---------------------------------------------------------------------------
# Individual metrics


def recall_at_k(ranked_items, gold_items, k: int) -> float:
    """1 iff any gold item appears in the first k ranked items."""
    if len(set(ranked_items)) != len(list(ranked_items)):
        raise ConfigError("ranked list must be deduplicated")
    gold = set(gold_items)
    return 1.0 if any(item in gold for item in list(ranked_items)[:k]) else 0.0


def mean_recall_at_k(records, k: int) -> float:
    scored = [r for r in records if r.gold_items]
    if not scored:
        return 0.0
    return sum(recall_at_k(r.ranked_items, r.gold_items, k) for r in scored) / len(scored)


def _ngrams(tokens, n):
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def corpus_bleu_n(pairs, n: int) -> float:
    """Corpus-level BLEU-n: clipped precisions p_1..p_n, brevity penalty."""
    if n not in (1, 2):
        raise ConfigError("only BLEU-1/2 are supported")
    cand_len = sum(len(c) for c, _ in pairs)
    ref_len = sum(len(r) for _, r in pairs)
    if cand_len == 0:
        return 0.0
    log_sum = 0.0
    for k in range(1, n + 1):
        matches, total = 0, 0
        for cand, ref in pairs:
            cand_grams = Counter(_ngrams(cand, k))
            ref_grams = Counter(_ngrams(ref, k))
            matches += sum(min(count, ref_grams[g]) for g, count in cand_grams.items())
            total += max(len(cand) - k + 1, 0)
        if total == 0:
            return 0.0
        p = matches / total
        if p == 0.0:
            p = BLEU_SMOOTH
        log_sum += math.log(p)
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_sum / n)


def bleu_n(candidate, reference, n: int) -> float:
    if not list(reference):
        raise ConfigError("reference must be non-empty")
    if not list(candidate):
        return 0.0
    return corpus_bleu_n([(list(candidate), list(reference))], n)


def distinct_n(responses, n: int) -> float:
    """Unique n-grams over total n-grams, pooled across all responses."""
    total, unique = 0, set()
    for resp in responses:
        grams = _ngrams(list(resp), n)
        total += len(grams)
        unique.update(grams)
    if total == 0:
        return 0.0
    return len(unique) / total


def knowledge_f1(generated_entities, gold_entities) -> float:
    gen, gold = set(generated_entities), set(gold_entities)
    if not gen and not gold:
        return 1.0
    if not gen or not gold:
        return 0.0
    overlap = len(gen & gold)
    if overlap == 0:
        return 0.0
    precision = overlap / len(gen)
    recall = overlap / len(gold)
    return 2 * precision * recall / (precision + recall)


def hit_rate(records, kg: KnowledgeGraph) -> float | None:
    """Fraction of records whose generated text contains a gold item label."""
    scored = [r for r in records if r.gold_items]
    if not scored:
        return None
    hits = 0
    for r in scored:
        text = " ".join(r.generated).casefold()
        if any(kg.entity_label(i).casefold() in text for i in r.gold_items):
            hits += 1
    return hits / len(scored)


def _kg_pairs(kg: KnowledgeGraph):
    return {(h, t) for h, _, t in kg.triplets}


def _path_pairs(paths):
    pairs = set()
    for p in paths:
        for h, _, t in p.hops():
            pairs.add((h, t))
    return pairs


def explainability(records, kg: KnowledgeGraph, scope: str, locus: str) -> float:
    """Fraction of records with at least one linked entity pair.

    scope "G" checks direct KG triplets, "P" consecutive hops of the record's
    candidate paths; locus "inter" pairs context entities with response
    entities, "inner" pairs response entities with each other. Direction is
    ignored.
    """
    if scope not in ("G", "P") or locus not in ("inter", "inner"):
        raise ConfigError(f"unknown explainability scope/locus {scope}/{locus}")
    kg_pairs = _kg_pairs(kg) if scope == "G" else None
    considered, satisfied = 0, 0
    for r in records:
        if not r.generated:
            continue
        considered += 1
        linked = _path_pairs(r.candidate_paths) if scope == "P" else kg_pairs
        resp = [e for e in dict.fromkeys(r.generated_entities) if e != NONE_ENTITY]
        if locus == "inter":
            ctx = [e for e in dict.fromkeys(r.context_entities) if e != NONE_ENTITY]
            pairs = [(c, e) for c in ctx for e in resp if c != e]
        else:
            pairs = [(resp[i], resp[j]) for i in range(len(resp)) for j in range(i + 1, len(resp))]
        if any((a, b) in linked or (b, a) in linked for a, b in pairs):
            satisfied += 1
    if considered == 0:
        return 0.0
    return satisfied / considered


# ---------------------------------------------------------------------------
# Report assembly


def compute_report(records, kg: KnowledgeGraph) -> MetricsReport:
    if not records:
        raise ConfigError("cannot compute metrics over zero records")
    pairs = [(list(r.generated), list(r.gold_response)) for r in records]
    return MetricsReport(
        recall1=mean_recall_at_k(records, 1),
        recall10=mean_recall_at_k(records, 10),
        recall25=mean_recall_at_k(records, 25),
        bleu1=corpus_bleu_n(pairs, 1),
        bleu2=corpus_bleu_n(pairs, 2),
        dist1=distinct_n([r.generated for r in records], 1),
        dist2=distinct_n([r.generated for r in records], 2),
        f1=sum(knowledge_f1(r.generated_entities, r.gold_entities) for r in records)
        / len(records),
        hit=hit_rate(records, kg),
        g_inter=explainability(records, kg, "G", "inter"),
        g_inner=explainability(records, kg, "G", "inner"),
        p_inter=explainability(records, kg, "P", "inter"),
        p_inner=explainability(records, kg, "P", "inner"),
        n_examples=len(records),
    )


def emit_report(report: MetricsReport, path) -> None:
    """Human-readable lines plus a machine block mirroring the dataclass."""
    lines = []
    for fld in fields(report):
        value = getattr(report, fld.name)
        if isinstance(value, float):
            lines.append(f"{fld.name}: {value:.6f}")
        else:
            lines.append(f"{fld.name}: {value}")
    machine = json.dumps(asdict(report), sort_keys=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
        f.write("machine: " + machine + "\n")


def load_report(path) -> MetricsReport:
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.startswith("machine: "):
                blob = json.loads(line[len("machine: "):])
                if blob.get("format_version") != REPORT_VERSION:
                    raise ConfigError(
                        f"{path}: report version {blob.get('format_version')} "
                        f"!= {REPORT_VERSION}"
                    )
                return MetricsReport(**blob)
    raise ConfigError(f"{path}: no machine-readable block found")


def emit_plots(sweep, out_dir) -> list:
    """Hit and explainability curves versus the number of candidate paths.

    sweep: list of (n_paths, MetricsReport), ascending in n_paths.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    xs = [n for n, _ in sweep]
    written = []

    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(xs, [r.hit if r.hit is not None else 0.0 for _, r in sweep], marker="o")
    ax.set_xlabel("candidate paths")
    ax.set_ylabel("hit")
    fig.tight_layout()
    hit_path = out / "hit_vs_paths.png"
    fig.savefig(hit_path)
    plt.close(fig)
    written.append(hit_path)

    fig, ax = plt.subplots(figsize=(4, 3))
    for name in ("g_inter", "g_inner", "p_inter", "p_inner"):
        ax.plot(xs, [getattr(r, name) for _, r in sweep], marker="o", label=name)
    ax.set_xlabel("candidate paths")
    ax.set_ylabel("rate")
    ax.legend(fontsize=7)
    fig.tight_layout()
    ex_path = out / "explainability_vs_paths.png"
    fig.savefig(ex_path)
    plt.close(fig)
    written.append(ex_path)
    return written


# ---------------------------------------------------------------------------
# Model evaluation glue


def build_eval_records(nets, model, vocab, world, config, examples=None,
                       n_paths=None, limit=None):
    """Generate responses for a split and package everything metrics need."""
    from convrec import converse as cv
    from convrec import reasoner as rs
    from convrec.corpus import tokenize_path

    examples = world.test if examples is None else examples
    if limit is not None:
        examples = examples[:limit]
    n_paths = n_paths or config.n_paths
    mention_index = build_mention_index(world.kg)
    records = []
    for ex in examples:
        u = context_preference(ex.context_entities, world.emb)
        beam = rs.beam_search(
            nets, world.kg, world.emb, u, ex.context_entities[-1],
            width=config.beam_width, n_paths=config.beam_width,
            max_len=config.max_path_len, cap=config.action_cap,
        )
        candidates = beam[:n_paths]
        tokens = [tokenize_path(p, world.kg, world.templates) for p in candidates]
        prep = cv.prepare_example(ex, tokens, vocab, config.max_context_tokens)
        generated = generate_for_record(model, prep, vocab, config)
        links = link_entities(generated, world.kg, mention_index=mention_index)
        records.append(
            EvalRecord(
                context_entities=ex.context_entities,
                gold_items=ex.gold_items,
                gold_entities=ex.response_entities,
                gold_response=ex.response,
                generated=tuple(generated),
                generated_entities=tuple(eid for _, eid in links),
                candidate_paths=candidates,
                ranked_items=rs.ranked_items(beam),
            )
        )
    return records


def generate_for_record(model, prep, vocab, config):
    from convrec import converse as cv

    return cv.generate_response(model, prep, vocab, mode="greedy",
                                max_tokens=config.max_tokens)


def quick_hit(nets, model, vocab, world, config, limit=100) -> float:
    examples = [ex for ex in world.valid if ex.gold_items][:limit] or [
        ex for ex in world.test if ex.gold_items
    ][:limit]
    if not examples:
        return float("nan")
    records = build_eval_records(nets, model, vocab, world, config, examples=examples)
    hit = hit_rate(records, world.kg)
    return float("nan") if hit is None else hit
