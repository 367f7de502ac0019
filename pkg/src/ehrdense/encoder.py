"""Mean-pooled bag-of-words text encoder with exact gradients.

A text is embedded as the L2-normalised mean of its token rows.  Similarity
is the dot product of two such unit vectors, i.e. their cosine.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CHUNK_TOKENS = 512
ENTITY_TOKENS = 16
OOV_BUCKETS = 1024
DIM = 64
INIT_SCALE = 0.05

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a(token: str) -> int:
    h = _FNV_OFFSET
    for b in token.encode("utf-8"):
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


def split_tokens(text: str) -> list[str]:
    tokens = (t.strip(string.punctuation) for t in text.split())
    return [t for t in tokens if t]


class Vocabulary:
    """Dense token index; unknown tokens hash into ``oov_buckets`` extra slots."""

    def __init__(self, tokens: Iterable[str], oov_buckets: int = OOV_BUCKETS):
        if oov_buckets < 1:
            raise ValueError("need at least one OOV bucket")
        self.tokens = sorted(set(tokens))
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.oov_buckets = oov_buckets

    @classmethod
    def from_texts(cls, texts: Iterable[str], oov_buckets: int = OOV_BUCKETS) -> "Vocabulary":
        tokens = set()
        for text in texts:
            tokens.update(split_tokens(text))
        return cls(tokens, oov_buckets)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def n_rows(self) -> int:
        return len(self.tokens) + self.oov_buckets

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Vocabulary)
            and self.tokens == other.tokens
            and self.oov_buckets == other.oov_buckets
        )

    def token_id(self, token: str) -> int:
        i = self.index.get(token)
        if i is None:
            i = len(self.tokens) + fnv1a(token) % self.oov_buckets
        return i


def tokenize(vocab: Vocabulary, text: str, max_tokens: int = CHUNK_TOKENS) -> list[int]:
    return [vocab.token_id(t) for t in split_tokens(text)[:max_tokens]]


@dataclass
class EncoderParams:
    table: np.ndarray
    seed: int

    @classmethod
    def init(cls, n_rows: int, dim: int = DIM, seed: int = 0, scale: float = INIT_SCALE) -> "EncoderParams":
        rng = np.random.default_rng(seed)
        return cls(rng.uniform(-scale, scale, size=(n_rows, dim)), seed)

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.table.copy(), self.seed)


@dataclass(frozen=True)
class EncodeTrace:
    indices: np.ndarray
    mean: np.ndarray
    norm: float


def encode(params: EncoderParams, indices: Sequence[int]) -> tuple[np.ndarray, EncodeTrace]:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("degenerate input: no tokens")
    mean = params.table[idx].mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if not norm > 0:
        raise ValueError("degenerate embedding: zero-norm mean")
    return mean / norm, EncodeTrace(idx, mean, norm)


def similarity(e1: np.ndarray, e2: np.ndarray) -> float:
    return float(np.dot(e1, e2))


def backprop(params: EncoderParams, trace1: EncodeTrace, trace2: EncodeTrace, dL_dS: float) -> np.ndarray:
    """Gradient of ``dL_dS * S`` w.r.t. the embedding table, with S the cosine of two encodings."""
    for tr in (trace1, trace2):
        if not tr.norm > 0:
            raise ValueError("trace has non-positive norm")
    grad = np.zeros_like(params.table)
    if dL_dS == 0:
        return grad
    u = trace1.mean / trace1.norm
    v = trace2.mean / trace2.norm
    s = float(u @ v)
    for tr, own, other in ((trace1, u, v), (trace2, v, u)):
        dm = dL_dS * (other - s * own) / tr.norm
        np.add.at(grad, tr.indices, dm / len(tr.indices))
    return grad


@dataclass
class BatchTrace:
    """Concatenated token indices of several texts with their pooled vectors."""

    flat: np.ndarray
    owner: np.ndarray
    lengths: np.ndarray
    norms: np.ndarray
    units: np.ndarray


def encode_batch(params: EncoderParams, sequences: Sequence[Sequence[int]]) -> BatchTrace:
    lengths = np.array([len(s) for s in sequences], dtype=np.int64)
    if (lengths == 0).any():
        raise ValueError("degenerate input: no tokens")
    flat = np.concatenate([np.asarray(s, dtype=np.int64) for s in sequences])
    owner = np.repeat(np.arange(len(sequences)), lengths)
    starts = np.concatenate(([0], np.cumsum(lengths)[:-1]))
    means = np.add.reduceat(params.table[flat], starts, axis=0) / lengths[:, None]
    norms = np.linalg.norm(means, axis=1)
    if not (norms > 0).all():
        raise ValueError("degenerate embedding: zero-norm mean")
    return BatchTrace(flat, owner, lengths, norms, means / norms[:, None])


def backprop_batch(params: EncoderParams, trace: BatchTrace, d_units: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    """Push gradients w.r.t. the unit vectors of a batch back onto table rows."""
    u = trace.units
    radial = np.einsum("ij,ij->i", d_units, u)
    d_means = (d_units - radial[:, None] * u) / trace.norms[:, None]
    per_token = (d_means / trace.lengths[:, None])[trace.owner]
    grad = np.zeros_like(params.table) if out is None else out
    return _scatter_add(grad, trace.flat, per_token)


def _scatter_add(grad: np.ndarray, rows: np.ndarray, values: np.ndarray) -> np.ndarray:
    """``grad[rows] += values`` with repeated rows accumulated (sorted segment sums)."""
    order = np.argsort(rows, kind="stable")
    sorted_rows = rows[order]
    starts = np.flatnonzero(np.r_[True, sorted_rows[1:] != sorted_rows[:-1]])
    grad[sorted_rows[starts]] += np.add.reduceat(values[order], starts, axis=0)
    return grad


class TextEncoder:
    """Vocabulary plus parameters: text in, unit vector out."""

    def __init__(self, vocab: Vocabulary, params: EncoderParams):
        if vocab.n_rows != params.table.shape[0]:
            raise ValueError("table rows do not match vocabulary size")
        self.vocab = vocab
        self.params = params
        self._cache: dict[tuple[str, int], list[int]] = {}

    @classmethod
    def create(cls, vocab: Vocabulary, dim: int = DIM, seed: int = 0) -> "TextEncoder":
        return cls(vocab, EncoderParams.init(vocab.n_rows, dim, seed))

    def indices(self, text: str, max_tokens: int) -> list[int]:
        key = (text, max_tokens)
        idx = self._cache.get(key)
        if idx is None:
            idx = tokenize(self.vocab, text, max_tokens)
            if not idx:
                # empty after punctuation stripping: hash the raw text into an OOV slot
                idx = [self.vocab.token_id(text)]
            self._cache[key] = idx
        return idx

    def embed(self, texts: Sequence[str], max_tokens: int = CHUNK_TOKENS) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.params.dim))
        return encode_batch(self.params, [self.indices(t, max_tokens) for t in texts]).units

    def embed_chunks(self, texts: Sequence[str]) -> np.ndarray:
        return self.embed(texts, CHUNK_TOKENS)

    def embed_queries(self, texts: Sequence[str]) -> np.ndarray:
        return self.embed(texts, ENTITY_TOKENS)

    def save(self, path: str | Path) -> None:
        table = np.ascontiguousarray(self.params.table, dtype="<f8")
        header = {
            "d": int(table.shape[1]),
            "vocab_size": len(self.vocab),
            "oov_buckets": self.vocab.oov_buckets,
            "seed": int(self.params.seed),
            "tokens": self.vocab.tokens,
        }
        with open(path, "wb") as fh:
            fh.write(json.dumps(header).encode("utf-8") + b"\n")
            fh.write(table.tobytes(order="C"))

    @classmethod
    def load(cls, path: str | Path) -> "TextEncoder":
        with open(path, "rb") as fh:
            header = json.loads(fh.readline().decode("utf-8"))
            data = fh.read()
        vocab = Vocabulary(header["tokens"], header["oov_buckets"])
        if len(vocab) != header["vocab_size"]:
            raise ValueError(f"{path}: vocabulary size mismatch")
        table = np.frombuffer(data, dtype="<f8").astype(np.float64)
        table = table.reshape(vocab.n_rows, header["d"])
        return cls(vocab, EncoderParams(table, header["seed"]))
