import numpy as np
import pytest
import torch

from convrec.corpus import build_examples, generate_toy_world, split_corpus
from convrec.kg import EmbeddingTable, load_kg, train_embeddings
from convrec.trainer import TrainConfig
from convrec.util import seed_everything

MICRO = dict(seed=11, n_entities=24, n_relations=3, n_dialogs=60)


@pytest.fixture(scope="session")
def hand_kg():
    """Five-node graph with known edges, used for exact-path assertions."""
    return load_kg(
        [
            ("Thor", "written_by", "Stan Lee"),
            ("Thor", "has_genre", "superhero"),
            ("Stan Lee", "created", "Iron Man"),
            ("Iron Man", "has_genre", "superhero"),
            ("superhero", "example", "Thor"),
        ]
    )


@pytest.fixture(scope="session")
def micro_world():
    kg, dialogs = generate_toy_world(**MICRO)
    return kg, dialogs


@pytest.fixture(scope="session")
def micro_config():
    return TrainConfig(
        seed=11, batch_size=8, lr=1e-2, rec_epochs=5, imitation_epochs=1,
        gen_epochs=2, joint_epochs=1, alpha=0.5, kg_dim=16, emb_epochs=40,
        emb_lr=0.05, policy_hidden=32, entropy_weight=0.02, detach_q=True,
        demo_prob=0.5, word_dim=16, enc_hidden=32, enc_layers=1,
        max_context_tokens=16, beam_width=8, n_paths=5, max_tokens=16,
    )


@pytest.fixture(scope="session")
def micro_emb(micro_world, micro_config):
    kg, _ = micro_world
    c = micro_config
    return train_embeddings(kg, c.kg_dim, c.emb_epochs, c.margin, c.seed, c.emb_lr)


@pytest.fixture(scope="session")
def micro_splits(micro_world, micro_config):
    kg, dialogs = micro_world
    train_d, valid_d, test_d = split_corpus(dialogs, micro_config.ratio, micro_config.seed)
    return (
        build_examples(train_d, kg),
        build_examples(valid_d, kg),
        build_examples(test_d, kg),
    )


def diag_embedding(dim, n_entities, n_relations, scale=1.0):
    """Embedding table with hand-predictable rows: entity i -> scale*(i+1)*e_i."""
    ent = np.zeros((n_entities, dim), dtype=np.float32)
    rel = np.zeros((n_relations, dim), dtype=np.float32)
    for i in range(n_entities):
        ent[i, i % dim] = scale * (i + 1)
    for j in range(n_relations):
        rel[j, j % dim] = scale * 0.5 * (j + 1)
    return EmbeddingTable(ent, rel, dim)


@pytest.fixture(autouse=True)
def _deterministic():
    seed_everything(0)
    yield


def zero_module(module: torch.nn.Module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module
