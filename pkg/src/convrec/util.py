"""Shared helpers: seeding, errors, tokenization."""

from __future__ import annotations

import random
import re

import numpy as np
import torch


class ParseError(ValueError):
    """Malformed input file (carries enough context to locate the line)."""


class ConfigError(ValueError):
    """Invalid configuration or precondition violation."""


class StageOrderError(ConfigError):
    """A training stage was requested before its prerequisite completed."""


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    # single-threaded keeps reduction order, and therefore runs, bit-stable
    torch.set_num_threads(1)


_PUNCT = re.compile(r"[^\w\s]")


def normalize_token(token: str) -> str:
    """Case-fold and strip punctuation; may return ''."""
    return _PUNCT.sub("", token.casefold())


def tokenize_text(text: str) -> list[str]:
    return text.split()
