"""Feature-hashing tokenizer: templated text -> fixed-length id sequences."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

CLS, SEP, PAD = "[CLS]", "[SEP]", "[PAD]"
DEFAULT_MARKERS = ("Product", "Brand", "Color")


def _default_reserved() -> dict[str, int]:
    names = [CLS, SEP, PAD]
    for t in DEFAULT_MARKERS:
        names += [f"[{t}]", f"[/{t}]"]
    return {name: i for i, name in enumerate(names)}


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & _MASK64
    return h


@dataclass(frozen=True)
class TokenizerConfig:
    vocab_size: int = 2**16
    ngram_orders: tuple = (3, 4)
    max_len: int = 128
    reserved_ids: dict = field(default_factory=_default_reserved)

    def __post_init__(self) -> None:
        object.__setattr__(self, "ngram_orders", tuple(sorted(set(int(n) for n in self.ngram_orders))))
        ids = sorted(self.reserved_ids.values())
        if ids != list(range(len(ids))):
            raise ValueError("reserved ids must be exactly 0..len(reserved_ids)-1")
        for name in (CLS, SEP, PAD):
            if name not in self.reserved_ids:
                raise ValueError(f"reserved ids must include {name}")
        if self.vocab_size <= len(self.reserved_ids):
            raise ValueError(f"vocab_size must exceed the {len(self.reserved_ids)} reserved ids")
        if self.max_len < 2:
            raise ValueError("max_len must be at least 2")
        if any(n < 1 for n in self.ngram_orders):
            raise ValueError("n-gram orders must be positive")

    @property
    def cls_id(self) -> int:
        return self.reserved_ids[CLS]

    @property
    def sep_id(self) -> int:
        return self.reserved_ids[SEP]

    @property
    def pad_id(self) -> int:
        return self.reserved_ids[PAD]

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "ngram_orders": list(self.ngram_orders),
            "max_len": self.max_len,
            "reserved_ids": dict(self.reserved_ids),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TokenizerConfig":
        return cls(
            vocab_size=int(d["vocab_size"]),
            ngram_orders=tuple(d["ngram_orders"]),
            max_len=int(d["max_len"]),
            reserved_ids={str(k): int(v) for k, v in d["reserved_ids"].items()},
        )

    def __hash__(self) -> int:
        return hash((self.vocab_size, self.ngram_orders, self.max_len, tuple(sorted(self.reserved_ids.items()))))


@dataclass(frozen=True)
class TokenizedInput:
    ids: np.ndarray  # int64, length max_len
    attention_len: int


@lru_cache(maxsize=1 << 18)
def _hash_id(token: str, buckets: int, offset: int) -> int:
    return offset + fnv1a_64(token.encode("utf-8")) % buckets


@lru_cache(maxsize=16)
def _special_pattern(reserved: tuple) -> re.Pattern:
    # a literal "[PAD]" in text is ordinary text; padding must stay a contiguous suffix
    alternatives = sorted((r for r in reserved if r != PAD), key=len, reverse=True)
    return re.compile("(" + "|".join(re.escape(a) for a in alternatives) + ")")


def _pieces(word: str, orders: Sequence[int]) -> list[str]:
    out = [word]
    for n in orders:
        out.extend(word[i : i + n] for i in range(len(word) - n + 1))
    return out


def token_strings(text: str, cfg: TokenizerConfig) -> list[str]:
    """Reserved tokens verbatim; everything else lowercased into words, each followed by its n-grams."""
    pattern = _special_pattern(tuple(sorted(cfg.reserved_ids)))
    out: list[str] = []
    for chunk in pattern.split(text):
        if not chunk:
            continue
        if chunk in cfg.reserved_ids and chunk != PAD:
            out.append(chunk)
            continue
        for word in chunk.lower().split():
            out.extend(_pieces(word, cfg.ngram_orders))
    return out


def tokenize(text: str, cfg: TokenizerConfig) -> TokenizedInput:
    n_reserved = len(cfg.reserved_ids)
    buckets = cfg.vocab_size - n_reserved
    ids = []
    for tok in token_strings(text, cfg):
        rid = cfg.reserved_ids.get(tok)
        ids.append(rid if rid is not None else _hash_id(tok, buckets, n_reserved))
        if len(ids) > cfg.max_len:
            break
    if len(ids) > cfg.max_len:
        ids = ids[: cfg.max_len]
        ids[-1] = cfg.sep_id
    out = np.full(cfg.max_len, cfg.pad_id, dtype=np.int64)
    out[: len(ids)] = ids
    return TokenizedInput(out, len(ids))


def tokenize_batch(texts: Iterable[str], cfg: TokenizerConfig) -> tuple[np.ndarray, np.ndarray]:
    """Stack tokenized texts into ``(ids[B, max_len], attention_len[B])`` arrays."""
    items = [tokenize(t, cfg) for t in texts]
    if not items:
        return np.zeros((0, cfg.max_len), dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.stack([t.ids for t in items]), np.array([t.attention_len for t in items], dtype=np.int64)
