"""Knowledge graph store, translational embeddings, entity linking, user preference."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from convrec.util import ConfigError, ParseError, normalize_token

# sentinel for "no entity linked in context"; embeds to the zero vector
NONE_ENTITY = -1
NONE_LABEL = "<none>"


@dataclass(frozen=True)
class ReasonPath:
    """Alternating entity/relation walk through the KG.

    entities has one more element than relations. score is the cumulative
    log-probability assigned by the policy that produced the path (0.0 for
    gold paths, which no policy produced).
    """

    entities: tuple[int, ...]
    relations: tuple[int, ...]
    score: float = 0.0
    terminal: bool = False

    def __post_init__(self):
        if len(self.entities) != len(self.relations) + 1:
            raise ValueError("path must alternate entity/relation/entity")

    @property
    def length(self) -> int:
        return len(self.relations)

    @property
    def end(self) -> int:
        return self.entities[-1]

    def hops(self):
        for i, r in enumerate(self.relations):
            yield self.entities[i], r, self.entities[i + 1]

    def key(self):
        return (self.entities, self.relations)

    def is_valid(self, kg: "KnowledgeGraph") -> bool:
        if self.entities[0] == NONE_ENTITY:
            return len(self.relations) == 0
        return all(hop in kg.triplets for hop in self.hops())


class KnowledgeGraph:
    """Entity/relation vocabularies plus a triplet set with adjacency index.

    Ids are dense ints assigned in first-occurrence order; labels are the
    stable external names. Immutable after construction.
    """

    def __init__(self, entities, relations, triplets):
        self.entities = list(entities)
        self.relations = list(relations)
        self.triplets = frozenset(triplets)
        self.entity_index = {label: i for i, label in enumerate(self.entities)}
        self.relation_index = {label: i for i, label in enumerate(self.relations)}
        adjacency: dict[int, list[tuple[int, int]]] = {i: [] for i in range(len(self.entities))}
        for h, r, t in self.triplets:
            adjacency[h].append((r, t))
        for edges in adjacency.values():
            edges.sort()
        self._adjacency = adjacency

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    def entity_label(self, entity: int) -> str:
        if entity == NONE_ENTITY:
            return NONE_LABEL
        return self.entities[entity]

    def relation_label(self, relation: int) -> str:
        return self.relations[relation]

    def outgoing(self, entity: int) -> list[tuple[int, int]]:
        """All (relation, tail) edges of entity, sorted by (relation, tail)."""
        if entity not in self._adjacency:
            raise KeyError(f"unknown entity id {entity}")
        return list(self._adjacency[entity])

    def save_tsv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for h, r, t in sorted(self.triplets):
                f.write(f"{self.entities[h]}\t{self.relations[r]}\t{self.entities[t]}\n")


def load_kg(records) -> KnowledgeGraph:
    """Build a KnowledgeGraph from (head, relation, tail) label records.

    Vocabularies follow first-occurrence order; duplicate triplets collapse.
    """
    records = list(records)
    if not records:
        raise ParseError("no triplet records")
    entities: list[str] = []
    relations: list[str] = []
    ent_ids: dict[str, int] = {}
    rel_ids: dict[str, int] = {}
    triplets = set()
    for lineno, rec in enumerate(records, start=1):
        if len(rec) != 3:
            raise ParseError(f"line {lineno}: expected 3 fields, got {len(rec)}")
        head, rel, tail = rec
        if not head or not rel or not tail:
            raise ParseError(f"line {lineno}: empty label")
        for label in (head, tail):
            if label not in ent_ids:
                ent_ids[label] = len(entities)
                entities.append(label)
        if rel not in rel_ids:
            rel_ids[rel] = len(relations)
            relations.append(rel)
        triplets.add((ent_ids[head], rel_ids[rel], ent_ids[tail]))
    return KnowledgeGraph(entities, relations, triplets)


def load_kg_tsv(path) -> KnowledgeGraph:
    def records():
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise ParseError(f"{path} line {lineno}: expected 3 tab-separated fields")
                yield parts

    return load_kg(records())


def load_alias_tsv(path, kg: KnowledgeGraph) -> dict[str, str]:
    """Alias file: `alias<TAB>entity-label`; unknown entity labels are rejected."""
    aliases = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(f"{path} line {lineno}: expected 2 tab-separated fields")
            alias, label = parts
            if label not in kg.entity_index:
                raise ParseError(f"{path} line {lineno}: unknown entity label {label!r}")
            aliases[alias] = label
    return aliases


# ---------------------------------------------------------------------------
# Embeddings

EMB_MAGIC = b"CRKE"
EMB_FORMAT_VERSION = 1


@dataclass
class EmbeddingTable:
    """Dense entity/relation vectors; entity id NONE_ENTITY maps to zeros."""

    entity_vectors: np.ndarray
    relation_vectors: np.ndarray
    dim: int
    losses: list[float] = field(default_factory=list, repr=False)

    def entity(self, entity: int) -> np.ndarray:
        if entity == NONE_ENTITY:
            return np.zeros(self.dim, dtype=self.entity_vectors.dtype)
        return self.entity_vectors[entity]

    def relation(self, relation: int) -> np.ndarray:
        return self.relation_vectors[relation]

    def save(self, path) -> None:
        ent = np.ascontiguousarray(self.entity_vectors, dtype=np.float32)
        rel = np.ascontiguousarray(self.relation_vectors, dtype=np.float32)
        with open(path, "wb") as f:
            f.write(EMB_MAGIC)
            f.write(struct.pack("<IIII", EMB_FORMAT_VERSION, self.dim, ent.shape[0], rel.shape[0]))
            f.write(ent.tobytes())
            f.write(rel.tobytes())

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != EMB_MAGIC:
                raise ParseError(f"{path}: not an embedding checkpoint")
            version, dim, n_ent, n_rel = struct.unpack("<IIII", f.read(16))
            if version != EMB_FORMAT_VERSION:
                raise ParseError(f"{path}: unsupported format version {version}")
            ent = np.frombuffer(f.read(4 * n_ent * dim), dtype=np.float32).reshape(n_ent, dim)
            rel = np.frombuffer(f.read(4 * n_rel * dim), dtype=np.float32).reshape(n_rel, dim)
        return cls(ent.copy(), rel.copy(), dim)


def translation_distance(emb: EmbeddingTable, head: int, relation: int, tail: int) -> float:
    """L2 distance of head + relation from tail."""
    d = emb.entity(head) + emb.relation(relation) - emb.entity(tail)
    return float(np.linalg.norm(d))


def train_embeddings(
    kg: KnowledgeGraph,
    dim: int = 128,
    epochs: int = 100,
    margin: float = 1.0,
    seed: int = 0,
    lr: float = 0.01,
    batch_size: int = 512,
) -> EmbeddingTable:
    """Margin-ranking translational embeddings over corrupted triplets.

    Negatives corrupt head or tail with probability 0.5 (uniform over
    entities); entity rows are L2-normalized at every epoch start; fully
    deterministic for a given seed.
    """
    if dim < 2:
        raise ConfigError("embedding dim must be >= 2")
    if not kg.triplets:
        raise ConfigError("cannot train embeddings on an empty KG")
    gen = torch.Generator().manual_seed(seed)
    n_e, n_r = kg.n_entities, kg.n_relations
    ent = torch.empty(n_e, dim).uniform_(-6 / dim**0.5, 6 / dim**0.5, generator=gen)
    rel = torch.empty(n_r, dim).uniform_(-6 / dim**0.5, 6 / dim**0.5, generator=gen)
    rel = rel / rel.norm(dim=1, keepdim=True).clamp_min(1e-12)
    ent.requires_grad_(True)
    rel.requires_grad_(True)
    opt = torch.optim.Adam([ent, rel], lr=lr)
    trip = torch.tensor(sorted(kg.triplets), dtype=torch.long)
    losses = []
    for _ in range(epochs):
        with torch.no_grad():
            ent.div_(ent.norm(dim=1, keepdim=True).clamp_min(1e-12))
        perm = torch.randperm(len(trip), generator=gen)
        epoch_loss = 0.0
        for start in range(0, len(trip), batch_size):
            batch = trip[perm[start : start + batch_size]]
            h, r, t = batch[:, 0], batch[:, 1], batch[:, 2]
            corrupt = torch.randint(0, n_e, (len(batch),), generator=gen)
            corrupt_head = torch.rand(len(batch), generator=gen) < 0.5
            neg_h = torch.where(corrupt_head, corrupt, h)
            neg_t = torch.where(corrupt_head, t, corrupt)
            pos_d = (ent[h] + rel[r] - ent[t]).norm(dim=1)
            neg_d = (ent[neg_h] + rel[r] - ent[neg_t]).norm(dim=1)
            loss = torch.relu(margin + pos_d - neg_d).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += loss.item() * len(batch)
        losses.append(epoch_loss / len(trip))
    with torch.no_grad():
        ent.div_(ent.norm(dim=1, keepdim=True).clamp_min(1e-12))
    table = EmbeddingTable(
        ent.detach().numpy().astype(np.float32),
        rel.detach().numpy().astype(np.float32),
        dim,
    )
    table.losses = losses
    return table


# ---------------------------------------------------------------------------
# Entity linking


def _label_tokens(label: str) -> tuple[str, ...]:
    toks = tuple(normalize_token(t) for t in label.split())
    return tuple(t for t in toks if t)


def build_mention_index(kg: KnowledgeGraph, alias_table: dict[str, str] | None = None):
    """Normalized token tuple -> entity id, for labels and aliases."""
    index: dict[tuple[str, ...], int] = {}
    for label, eid in kg.entity_index.items():
        toks = _label_tokens(label)
        if toks:
            index.setdefault(toks, eid)
    if alias_table:
        for alias, label in alias_table.items():
            toks = _label_tokens(alias)
            if toks:
                index.setdefault(toks, kg.entity_index[label])
    return index


def link_entities(tokens, kg: KnowledgeGraph, alias_table=None, mention_index=None):
    """Greedy longest, non-overlapping, case-folded matches over entity labels.

    Returns [((start, end), entity_id)] ordered by span start; spans are
    half-open token index ranges.
    """
    if mention_index is None:
        mention_index = build_mention_index(kg, alias_table)
    if not mention_index:
        return []
    max_len = max(len(k) for k in mention_index)
    normalized = [normalize_token(t) for t in tokens]
    links = []
    i = 0
    while i < len(tokens):
        match = None
        for span in range(min(max_len, len(tokens) - i), 0, -1):
            window = tuple(normalized[i : i + span])
            eid = mention_index.get(window)
            if eid is not None:
                match = ((i, i + span), eid)
                break
        if match is None:
            i += 1
        else:
            links.append(match)
            i = match[0][1]
    return links


def user_preference(context_entities, emb: EmbeddingTable) -> np.ndarray:
    """Mean of the entity embedding rows; order-invariant by construction."""
    ids = list(context_entities)
    if not ids:
        raise ConfigError("user preference needs at least one context entity")
    rows = np.stack([emb.entity(e) for e in ids])
    return rows.mean(axis=0)


def context_preference(context_entities, emb: EmbeddingTable) -> np.ndarray:
    """user_preference with a zero-vector fallback for entity-free contexts."""
    ids = [e for e in context_entities if e != NONE_ENTITY]
    if not ids:
        return np.zeros(emb.dim, dtype=np.float32)
    return user_preference(ids, emb)
