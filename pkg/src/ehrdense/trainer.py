"""Multi-similarity loss with in-batch negatives, and the training loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoder import (
    CHUNK_TOKENS,
    ENTITY_TOKENS,
    BatchTrace,
    EncoderParams,
    TextEncoder,
    backprop_batch,
    encode_batch,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MslConfig:
    epsilon: float = 0.1
    alpha: float = 2.0
    beta: float = 50.0
    lam: float = 0.5

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be > 0")


@dataclass(frozen=True)
class TrainConfig:
    positives_per_chunk: int = 16
    batch_size: int = 32
    epochs: int = 1
    lr: float = 1e-4
    warmup_ratio: float = 0.1
    seed: int = 0
    optimizer: str = "adamw"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    in_batch_negative_filter: bool = False

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2: in-batch negatives need a second anchor")
        if self.positives_per_chunk < 1:
            raise ValueError("positives_per_chunk must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0 <= self.warmup_ratio <= 1:
            raise ValueError("warmup_ratio must lie in [0, 1]")


@dataclass(frozen=True)
class MiningResult:
    positives: np.ndarray  # indices into the positive similarities
    negatives: np.ndarray
    max_neg: float
    min_pos: float


def sample_positives(terms: Sequence[str], k: int, rng: np.random.Generator) -> list[str]:
    """Down-sample without replacement, or keep everything and top up with replacement."""
    n = len(terms)
    if n == 0:
        raise ValueError("cannot sample from an empty positive set")
    if n >= k:
        return [terms[i] for i in rng.choice(n, size=k, replace=False)]
    extra = rng.integers(n, size=k - n)
    order = rng.permutation(k)
    picked = list(terms) + [terms[i] for i in extra]
    return [picked[i] for i in order]


def mine(pos_sims: Sequence[float], neg_sims: Sequence[float], epsilon: float) -> MiningResult:
    """Informative positives sit below the hardest negative plus epsilon, and vice versa.

    With no negatives there is no boundary and no positive is informative;
    symmetrically for an empty positive list.
    """
    pos = np.asarray(pos_sims, dtype=float)
    neg = np.asarray(neg_sims, dtype=float)
    max_neg = float(neg.max()) if neg.size else -np.inf
    min_pos = float(pos.min()) if pos.size else np.inf
    return MiningResult(
        np.flatnonzero(pos < max_neg + epsilon),
        np.flatnonzero(neg > min_pos - epsilon),
        max_neg,
        min_pos,
    )


def log1p_sum_exp(x: np.ndarray) -> float:
    """log(1 + sum(exp(x))) without overflow."""
    if x.size == 0:
        return 0.0
    m = max(0.0, float(x.max()))
    return m + float(np.log(np.exp(-m) + np.exp(x - m).sum()))


def msl_loss(mining: MiningResult, pos_sims: Sequence[float], neg_sims: Sequence[float], config: MslConfig) -> float:
    pos = np.asarray(pos_sims, dtype=float)[mining.positives]
    neg = np.asarray(neg_sims, dtype=float)[mining.negatives]
    a, b, lam = config.alpha, config.beta, config.lam
    return log1p_sum_exp(-a * (pos - lam)) / a + log1p_sum_exp(b * (neg - lam)) / b


def msl_slopes(
    mining: MiningResult, pos_sims: Sequence[float], neg_sims: Sequence[float], config: MslConfig
) -> tuple[np.ndarray, np.ndarray]:
    """dL/dS for every positive and negative similarity; zero outside the mined sets."""
    pos = np.asarray(pos_sims, dtype=float)
    neg = np.asarray(neg_sims, dtype=float)
    d_pos = np.zeros_like(pos)
    d_neg = np.zeros_like(neg)
    a, b, lam = config.alpha, config.beta, config.lam
    if mining.positives.size:
        x = -a * (pos[mining.positives] - lam)
        d_pos[mining.positives] = -np.exp(x - log1p_sum_exp(x))
    if mining.negatives.size:
        y = b * (neg[mining.negatives] - lam)
        d_neg[mining.negatives] = np.exp(y - log1p_sum_exp(y))
    return d_pos, d_neg


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear warmup to ``config.lr`` then linear decay to zero at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = config.warmup_ratio * total_steps
    if step < warmup:
        return config.lr * step / warmup
    if total_steps == warmup:
        return config.lr
    return config.lr * (total_steps - step) / (total_steps - warmup)


# -- batches -------------------------------------------------------------------


@dataclass
class AnchorBatch:
    """B anchor chunks with P sampled positive terms each.

    The negatives of anchor i are the sampled positives of every other
    anchor; ``negative_mask[i, j]`` flags term column j as a negative of i.
    """

    anchors: list[str]
    positives: list[list[str]]
    negative_mask: np.ndarray

    @property
    def terms(self) -> list[str]:
        return [t for group in self.positives for t in group]

    def negative_counts(self) -> np.ndarray:
        return self.negative_mask.sum(axis=1)


def make_batch(
    anchors: Sequence[str],
    positives: Sequence[Sequence[str]],
    full_positive_sets: Sequence[Sequence[str]] | None = None,
    filter_false_negatives: bool = False,
) -> AnchorBatch:
    b = len(anchors)
    p = len(positives[0])
    if any(len(g) != p for g in positives):
        raise ValueError("every anchor needs the same number of positives")
    owner = np.repeat(np.arange(b), p)
    mask = owner[None, :] != np.arange(b)[:, None]
    if filter_false_negatives:
        sets = full_positive_sets if full_positive_sets is not None else positives
        terms = [t for g in positives for t in g]
        for i in range(b):
            own = set(sets[i])
            for j, t in enumerate(terms):
                if mask[i, j] and t in own:
                    mask[i, j] = False
    return AnchorBatch(list(anchors), [list(g) for g in positives], mask)


@dataclass
class BatchResult:
    loss: float
    grad: np.ndarray
    anchor_losses: np.ndarray
    n_informative_pos: int
    n_informative_neg: int


def batch_similarities(
    encoder: TextEncoder, batch: AnchorBatch
) -> tuple[BatchTrace, BatchTrace, np.ndarray, np.ndarray]:
    """Encode anchors and unique terms; returns traces, the term->unique map, and S (B x B*P)."""
    params = encoder.params
    anchor_trace = encode_batch(params, [encoder.indices(a, CHUNK_TOKENS) for a in batch.anchors])
    terms = batch.terms
    unique, inverse = np.unique(np.array(terms, dtype=object), return_inverse=True)
    term_trace = encode_batch(params, [encoder.indices(t, ENTITY_TOKENS) for t in unique])
    sims = anchor_trace.units @ term_trace.units[inverse].T
    return anchor_trace, term_trace, inverse, sims


def msl_batch(encoder: TextEncoder, batch: AnchorBatch, config: MslConfig) -> BatchResult:
    """Mean per-anchor loss of a batch and its exact gradient w.r.t. the table.

    Mining sets are computed in the forward pass and held fixed in the
    backward pass.
    """
    anchor_trace, term_trace, inverse, sims = batch_similarities(encoder, batch)
    b = len(batch.anchors)
    p = len(batch.positives[0])
    slopes = np.zeros_like(sims)
    losses = np.zeros(b)
    n_pos = n_neg = 0
    for i in range(b):
        pos_cols = np.arange(i * p, (i + 1) * p)
        neg_cols = np.flatnonzero(batch.negative_mask[i])
        pos, neg = sims[i, pos_cols], sims[i, neg_cols]
        mining = mine(pos, neg, config.epsilon)
        losses[i] = msl_loss(mining, pos, neg, config)
        d_pos, d_neg = msl_slopes(mining, pos, neg, config)
        slopes[i, pos_cols] = d_pos
        slopes[i, neg_cols] = d_neg
        n_pos += mining.positives.size
        n_neg += mining.negatives.size
    slopes /= b

    grad = np.zeros_like(encoder.params.table)
    if slopes.any():
        term_units = term_trace.units[inverse]
        d_anchor = slopes @ term_units
        d_term_cols = slopes.T @ anchor_trace.units
        d_term = np.zeros_like(term_trace.units)
        np.add.at(d_term, inverse, d_term_cols)
        backprop_batch(encoder.params, anchor_trace, d_anchor, out=grad)
        backprop_batch(encoder.params, term_trace, d_term, out=grad)
    return BatchResult(float(losses.mean()), grad, losses, n_pos, n_neg)


# -- optimisers ----------------------------------------------------------------


class AdamW:
    def __init__(self, shape, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, param: np.ndarray, grad: np.ndarray, lr: float) -> None:
        self.t += 1
        self.m *= self.b1
        self.m += (1 - self.b1) * grad
        np.multiply(grad, grad, out=grad)
        self.v *= self.b2
        self.v += (1 - self.b2) * grad
        # grad is spent; reuse it as scratch for the update
        np.divide(self.v, 1 - self.b2**self.t, out=grad)
        np.sqrt(grad, out=grad)
        grad += self.eps
        np.divide(self.m, grad, out=grad)
        grad *= lr / (1 - self.b1**self.t)
        param *= 1 - lr * self.weight_decay
        param -= grad


class SGD:
    def step(self, param: np.ndarray, grad: np.ndarray, lr: float) -> None:
        param -= lr * grad


# -- training loop -------------------------------------------------------------


@dataclass
class TrainExample:
    chunk_id: str
    text: str
    positives: list[str]


@dataclass
class TrainResult:
    encoder: TextEncoder
    history: list[dict] = field(default_factory=list)
    negative_counts: list[np.ndarray] = field(default_factory=list)


def train(
    examples: Sequence[TrainExample],
    encoder: TextEncoder,
    config: TrainConfig,
    msl: MslConfig = MslConfig(),
) -> TrainResult:
    """Train in place on ``encoder.params`` and return the loss history.

    Chunks without positives are skipped.  Each epoch reshuffles the chunks
    and drops the trailing partial batch; every anchor's positives are re-
    sampled to ``positives_per_chunk`` terms.
    """
    data = [ex for ex in examples if ex.positives]
    bsz = config.batch_size
    if len(data) < bsz:
        raise ValueError(f"dataset has {len(data)} usable chunks, fewer than one batch of {bsz}")
    rng = np.random.default_rng(config.seed)
    per_epoch = len(data) // bsz
    total = per_epoch * config.epochs
    table = encoder.params.table
    opt = AdamW(table.shape, config.adam_betas, config.adam_eps, config.weight_decay) if config.optimizer == "adamw" else SGD()
    result = TrainResult(encoder)
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(data))
        for k in range(per_epoch):
            chosen = [data[i] for i in order[k * bsz:(k + 1) * bsz]]
            positives = [sample_positives(ex.positives, config.positives_per_chunk, rng) for ex in chosen]
            batch = make_batch(
                [ex.text for ex in chosen],
                positives,
                [ex.positives for ex in chosen],
                config.in_batch_negative_filter,
            )
            out = msl_batch(encoder, batch, msl)
            lr = lr_at(step, total, config)
            opt.step(table, out.grad, lr)
            result.history.append({"step": step, "epoch": epoch, "lr": lr, "loss": out.loss})
            result.negative_counts.append(batch.negative_counts())
            step += 1
        log.info("epoch %d done, last loss %.4f", epoch, result.history[-1]["loss"])
    return result


def write_history(history: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr", "loss"])
        for row in history:
            w.writerow([row["step"], repr(float(row["lr"])), repr(float(row["loss"]))])


def read_history(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {"step": int(r["step"]), "lr": float(r["lr"]), "loss": float(r["loss"])}
            for r in csv.DictReader(fh)
        ]


def config_dict(train_config: TrainConfig, msl: MslConfig) -> dict:
    out = asdict(train_config)
    out["adam_betas"] = list(train_config.adam_betas)
    out.update({f"msl_{k}": v for k, v in asdict(msl).items()})
    return out
