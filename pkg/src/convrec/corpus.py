"""Dialog corpus ingestion, gold path extraction, splits, vocabulary, toy world."""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass

from convrec.kg import NONE_ENTITY, KnowledgeGraph, ReasonPath, load_kg
from convrec.util import ConfigError, ParseError, tokenize_text

log = logging.getLogger(__name__)

PAD, UNK, BOS, EOS, USR, SYS = "<pad>", "<unk>", "<bos>", "<eos>", "<usr>", "<sys>"
SPECIALS = (PAD, UNK, BOS, EOS, USR, SYS)

CONTEXT_WINDOW = 5  # most recent turns flattened into the context

# relation -> clause template; anything absent falls back to
# "<head> <relation words> <tail> ." with underscores expanded
DEFAULT_TEMPLATES = {
    "written_by": "{h} is written by {t}",
    "directed_by": "{h} is directed by {t}",
    "starred_actors": "{h} is starring {t}",
    "has_genre": "{h} is of genre {t}",
    "release_year": "{h} is released in {t}",
}


@dataclass(frozen=True)
class Turn:
    speaker: str  # "user" | "system"
    text: tuple[str, ...]
    entity_mentions: tuple[tuple[tuple[int, int], int], ...] = ()
    recommended_items: tuple[int, ...] = ()

    def mentioned_ids(self):
        return [eid for _, eid in self.entity_mentions]


@dataclass(frozen=True)
class Dialog:
    dialog_id: str
    turns: tuple[Turn, ...]


@dataclass(frozen=True)
class GoldPath:
    """Annotated reference path plus its natural-language statement."""

    path: ReasonPath
    statement: tuple[str, ...]


@dataclass
class TrainingExample:
    dialog_id: str
    turn_index: int
    context: tuple[str, ...]
    response: tuple[str, ...]
    context_entities: tuple[int, ...]
    gold_items: tuple[int, ...]
    gold_path: GoldPath | None = None
    response_entities: tuple[int, ...] = ()


# ---------------------------------------------------------------------------
# Corpus files


def _parse_turn(raw, kg: KnowledgeGraph, dialog_id: str, idx: int):
    dropped = 0
    for key in ("speaker", "text"):
        if key not in raw:
            raise ParseError(f"dialog {dialog_id} turn {idx}: missing field {key!r}")
    speaker = raw["speaker"]
    if speaker not in ("user", "system"):
        raise ParseError(f"dialog {dialog_id} turn {idx}: bad speaker {speaker!r}")
    tokens = tuple(tokenize_text(raw["text"]))
    mentions = []
    for m in raw.get("entities", []):
        if "span" not in m or "id" not in m:
            raise ParseError(f"dialog {dialog_id} turn {idx}: malformed entity mention")
        start, end = m["span"]
        if not (0 <= start < end <= len(tokens)):
            raise ParseError(f"dialog {dialog_id} turn {idx}: span {m['span']} out of range")
        eid = kg.entity_index.get(m["id"])
        if eid is None:
            dropped += 1
            continue
        mentions.append(((start, end), eid))
    mentions.sort(key=lambda m: m[0])
    mentioned = {eid for _, eid in mentions}
    items = []
    for label in raw.get("items", []):
        eid = kg.entity_index.get(label)
        if eid is None:
            dropped += 1
            continue
        if eid not in mentioned:
            raise ParseError(
                f"dialog {dialog_id} turn {idx}: item {label!r} not mentioned in text"
            )
        items.append(eid)
    if items and speaker != "system":
        raise ParseError(f"dialog {dialog_id} turn {idx}: items on a user turn")
    return Turn(speaker, tokens, tuple(mentions), tuple(items)), dropped


def read_corpus(path, kg: KnowledgeGraph):
    """Parse a JSONL corpus; returns (dialogs, dropped_mention_count)."""
    dialogs = []
    dropped = 0
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"{path} line {lineno}: invalid JSON ({e})") from e
            if "dialog_id" not in raw or "turns" not in raw:
                raise ParseError(f"{path} line {lineno}: missing dialog_id or turns")
            dialog_id = str(raw["dialog_id"])
            if not raw["turns"]:
                raise ParseError(f"dialog {dialog_id}: no turns")
            turns = []
            for idx, raw_turn in enumerate(raw["turns"]):
                turn, n = _parse_turn(raw_turn, kg, dialog_id, idx)
                dropped += n
                expected = "user" if idx % 2 == 0 else "system"
                if turn.speaker != expected:
                    raise ParseError(
                        f"dialog {dialog_id} turn {idx}: expected {expected} speaker"
                    )
                turns.append(turn)
            dialogs.append(Dialog(dialog_id, tuple(turns)))
    return dialogs, dropped


def load_corpus(path, kg: KnowledgeGraph) -> list[Dialog]:
    dialogs, dropped = read_corpus(path, kg)
    if dropped:
        log.warning("dropped %d mentions/items referencing unknown entities", dropped)
    return dialogs


def save_corpus(dialogs, kg: KnowledgeGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for d in dialogs:
            raw = {
                "dialog_id": d.dialog_id,
                "turns": [
                    {
                        "speaker": t.speaker,
                        "text": " ".join(t.text),
                        "entities": [
                            {"span": list(span), "id": kg.entity_label(eid)}
                            for span, eid in t.entity_mentions
                        ],
                        "items": [kg.entity_label(i) for i in t.recommended_items],
                    }
                    for t in d.turns
                ],
            }
            f.write(json.dumps(raw) + "\n")


# ---------------------------------------------------------------------------
# Path statements


def load_templates_tsv(path) -> dict[str, str]:
    templates = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(f"{path} line {lineno}: expected 2 tab-separated fields")
            templates[parts[0]] = parts[1]
    return templates


def tokenize_path(path: ReasonPath, kg: KnowledgeGraph, templates=None) -> tuple[str, ...]:
    """Render a path as one clause per hop, e.g. "Thor is written by Stan Lee ."."""
    if templates is None:
        templates = DEFAULT_TEMPLATES
    tokens: list[str] = []
    if path.length == 0:
        tokens.extend(kg.entity_label(path.entities[0]).split())
        tokens.append(".")
        return tuple(tokens)
    for head, rel, tail in path.hops():
        h, t = kg.entity_label(head), kg.entity_label(tail)
        template = templates.get(kg.relation_label(rel))
        if template is not None:
            clause = template.format(h=h, t=t)
        else:
            rel_words = kg.relation_label(rel).replace("_", " ")
            clause = f"{h} {rel_words} {t}"
        tokens.extend(clause.split())
        tokens.append(".")
    return tuple(tokens)


# ---------------------------------------------------------------------------
# Gold paths


def _shortest_paths_from(kg: KnowledgeGraph, start: int, goals: set[int], max_len: int):
    """Lexicographically-smallest shortest path from start to any goal.

    BFS layer by layer; within a layer the frontier is expanded in
    (relations, entities) order so the first path reaching a goal is the
    (length, relation-ids, entity-ids) minimum.
    """
    visited = {start}
    frontier = [((), (start,))]
    for _ in range(max_len):
        seen_here = {}
        for rels, ents in frontier:
            for r, t in kg.outgoing(ents[-1]):
                if t in visited:
                    continue
                cand = (rels + (r,), ents + (t,))
                if t not in seen_here or cand < seen_here[t]:
                    seen_here[t] = cand
        if not seen_here:
            return None
        nxt = sorted(seen_here.values())
        for rels, ents in nxt:
            if ents[-1] in goals:
                return ReasonPath(ents, rels, score=0.0, terminal=True)
        visited.update(seen_here)
        frontier = nxt
    return None


def extract_gold_path(example: TrainingExample, kg: KnowledgeGraph, max_len: int = 3,
                      templates=None) -> GoldPath | None:
    """Shortest KG path from a context entity to a gold item, if one exists.

    Ties break on (length, earliest-mentioned start, smallest relation ids).
    """
    goals = {i for i in example.gold_items if i != NONE_ENTITY}
    starts = []
    for eid in example.context_entities:
        if eid != NONE_ENTITY and eid not in starts:
            starts.append(eid)
    if not goals or not starts:
        return None
    best = None
    for rank, start in enumerate(starts):
        found = _shortest_paths_from(kg, start, goals - {start}, max_len)
        if found is None:
            continue
        key = (found.length, rank, found.relations, found.entities)
        if best is None or key < best[0]:
            best = (key, found)
    if best is None:
        return None
    path = best[1]
    return GoldPath(path, tokenize_path(path, kg, templates))


# ---------------------------------------------------------------------------
# Examples and splits


def flatten_context(turns) -> tuple[str, ...]:
    tokens: list[str] = []
    for t in turns[-CONTEXT_WINDOW:]:
        tokens.append(USR if t.speaker == "user" else SYS)
        tokens.extend(t.text)
    return tuple(tokens)


def build_examples(dialogs, kg: KnowledgeGraph, max_len: int = 3, templates=None,
                   extract_paths: bool = True) -> list[TrainingExample]:
    """One example per system turn: (context, response, gold items, gold path)."""
    examples = []
    for d in dialogs:
        for idx, turn in enumerate(d.turns):
            if turn.speaker != "system":
                continue
            history = d.turns[:idx]
            context_entities = []
            for t in history[-CONTEXT_WINDOW:]:
                context_entities.extend(t.mentioned_ids())
            if not context_entities:
                context_entities = [NONE_ENTITY]
            ex = TrainingExample(
                dialog_id=d.dialog_id,
                turn_index=idx,
                context=flatten_context(history),
                response=turn.text,
                context_entities=tuple(context_entities),
                gold_items=turn.recommended_items,
                response_entities=tuple(turn.mentioned_ids()),
            )
            if extract_paths and ex.gold_items:
                ex.gold_path = extract_gold_path(ex, kg, max_len, templates)
            examples.append(ex)
    return examples


def split_corpus(dialogs, ratio=(7.0, 1.5, 1.5), seed: int = 0):
    """Dialog-level train/valid/test partition, deterministic per seed."""
    if len(dialogs) < 3:
        raise ConfigError("need at least 3 dialogs to split")
    if len(ratio) != 3 or any(r <= 0 for r in ratio):
        raise ConfigError(f"ratios must be positive, got {ratio}")
    total = float(sum(ratio))
    order = list(range(len(dialogs)))
    random.Random(seed).shuffle(order)
    n = len(dialogs)
    cut1 = round(n * ratio[0] / total)
    cut2 = round(n * (ratio[0] + ratio[1]) / total)
    cut1 = min(max(cut1, 1), n - 2)
    cut2 = min(max(cut2, cut1 + 1), n - 1)
    train = [dialogs[i] for i in sorted(order[:cut1])]
    valid = [dialogs[i] for i in sorted(order[cut1:cut2])]
    test = [dialogs[i] for i in sorted(order[cut2:])]
    return train, valid, test


class Vocabulary:
    """Word vocabulary with specials; index = line number in the saved file."""

    def __init__(self, tokens):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        for s in SPECIALS:
            if s not in self.index:
                raise ConfigError(f"vocabulary missing special token {s}")
        self.pad = self.index[PAD]
        self.unk = self.index[UNK]
        self.bos = self.index[BOS]
        self.eos = self.index[EOS]

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def encode(self, tokens):
        return [self.index.get(t, self.unk) for t in tokens]

    def decode(self, ids):
        return [self.tokens[i] for i in ids]

    @classmethod
    def build(cls, token_sequences, min_freq: int = 2):
        counts: dict[str, int] = {}
        for seq in token_sequences:
            for tok in seq:
                counts[tok] = counts.get(tok, 0) + 1
        words = [t for t, c in counts.items() if c >= min_freq and t not in SPECIALS]
        return cls(list(SPECIALS) + words)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for t in self.tokens:
                f.write(t + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls([line.rstrip("\n") for line in f if line.rstrip("\n")])


def build_vocabulary(examples, min_freq: int = 2) -> Vocabulary:
    seqs = []
    for ex in examples:
        seqs.append(ex.context)
        seqs.append(ex.response)
        if ex.gold_path is not None:
            seqs.append(ex.gold_path.statement)
    return Vocabulary.build(seqs, min_freq)


def load_word_vectors(path, vocab: Vocabulary, dim: int):
    """Text format `token v1 ... vdim`; returns a |V| x dim float32 matrix."""
    import numpy as np

    mat = np.random.default_rng(0).normal(0, 0.1, (len(vocab), dim)).astype("float32")
    found = 0
    with open(path, encoding="utf-8") as f:
        for line in f:
            parts = line.rstrip("\n").split()
            if len(parts) != dim + 1:
                continue
            idx = vocab.index.get(parts[0])
            if idx is not None:
                mat[idx] = [float(x) for x in parts[1:]]
                found += 1
    log.info("loaded %d/%d pretrained word vectors", found, len(vocab))
    return mat


# ---------------------------------------------------------------------------
# Synthetic world

USER_TEMPLATES = (
    "i really liked {e} .",
    "i have been into {e} lately .",
)
SYSTEM_TEMPLATES = (
    "you should try {g} . it is close to {m} .",
    "then {g} is a great pick . {m} connects them .",
)


def generate_toy_world(seed: int, n_entities: int = 200, n_relations: int = 5,
                       n_dialogs: int = 500):
    """Random KG plus scripted dialogs with a planted 2-hop recommendation rule.

    Every entity has exactly one rel_0 edge (shift s1) and one rel_1 edge
    (shift s2); the gold item for start i is i + s1 + s2 (mod n). Remaining
    relations add distractor edges that never shortcut a start to its gold
    item, so the extracted gold path is always the planted 2-hop one.
    """
    if n_entities < 20 or n_relations < 3 or n_dialogs < 50:
        raise ConfigError(
            "toy world needs >= 20 entities, >= 3 relations, >= 50 dialogs "
            "to plant unique 2-hop targets"
        )
    rng = random.Random(seed)
    width = len(str(n_entities - 1))
    ent = [f"ent_{i:0{width}d}" for i in range(n_entities)]
    rel = [f"rel_{k}" for k in range(n_relations)]
    s1 = rng.randrange(1, n_entities)
    s2 = rng.randrange(1, n_entities)
    while s2 == s1 or (s1 + s2) % n_entities == 0:
        s2 = rng.randrange(1, n_entities)
    mid = lambda i: (i + s1) % n_entities
    gold = lambda i: (i + s1 + s2) % n_entities

    records = []
    for i in range(n_entities):
        records.append((ent[i], rel[0], ent[mid(i)]))
        records.append((ent[i], rel[1], ent[(i + s2) % n_entities]))
    for k in range(2, n_relations):
        for i in range(n_entities):
            if rng.random() < 0.8:
                j = rng.randrange(n_entities)
                while j == i or j == gold(i):
                    j = rng.randrange(n_entities)
                records.append((ent[i], rel[k], ent[j]))
    kg = load_kg(records)

    dialogs = []
    for d in range(n_dialogs):
        i = rng.randrange(n_entities)
        u_text = rng.choice(USER_TEMPLATES).format(e=ent[i])
        s_text = rng.choice(SYSTEM_TEMPLATES).format(g=ent[gold(i)], m=ent[mid(i)])
        u_tokens = tuple(tokenize_text(u_text))
        s_tokens = tuple(tokenize_text(s_text))
        u_mentions = tuple(
            ((p, p + 1), kg.entity_index[tok]) for p, tok in enumerate(u_tokens)
            if tok in kg.entity_index
        )
        s_mentions = tuple(
            ((p, p + 1), kg.entity_index[tok]) for p, tok in enumerate(s_tokens)
            if tok in kg.entity_index
        )
        dialogs.append(
            Dialog(
                dialog_id=f"toy-{d:04d}",
                turns=(
                    Turn("user", u_tokens, u_mentions),
                    Turn("system", s_tokens, s_mentions, (kg.entity_index[ent[gold(i)]],)),
                ),
            )
        )
    return kg, dialogs
