"""
Multi-similarity loss on a mean-pooled encoder
==============================================

The loss, its informative-pair mining, a finite-difference check of the
batch gradient, and a short training run.
"""

import numpy as np

from ehrdense.encoder import EncoderParams, TextEncoder, Vocabulary
from ehrdense.trainer import MslConfig, TrainConfig, TrainExample, make_batch, mine, msl_batch, msl_loss, train

cfg = MslConfig()  # epsilon 0.1, alpha 2, beta 50, lambda 0.5

# a positive below the hardest negative + epsilon is informative
pos, neg = [0.55, 0.65], [0.5]
m = mine(pos, neg, cfg.epsilon)
print("informative positives:", m.positives, "negatives:", m.negatives)
print("loss:", msl_loss(m, pos, neg, cfg))

# positives {0.4} vs negatives {0.6}: both sides fire
print("loss:", round(msl_loss(mine([0.4], [0.6], 0.1), [0.4], [0.6], cfg), 4))

# one batch: three anchors, two sampled positives each, in-batch negatives
vocab = Vocabulary("cough fever rash amoxicillin ibuprofen cream patient reports".split(), oov_buckets=4)
rng = np.random.default_rng(0)
enc = TextEncoder(vocab, EncoderParams(rng.normal(size=(vocab.n_rows, 8)), 0))
batch = make_batch(
    ["patient reports cough", "patient reports fever", "patient reports rash"],
    [["cough", "amoxicillin"], ["fever", "ibuprofen"], ["rash", "cream"]],
)
print("negatives per anchor:", batch.negative_counts())  # (B-1) * P = 4
out = msl_batch(enc, batch, cfg)
print("batch loss", out.loss)

# central differences against the analytic gradient on one coordinate
row, col, h = vocab.token_id("cough"), 3, 1e-4
table = enc.params.table
keep = table[row, col]
table[row, col] = keep + h
up = msl_batch(enc, batch, cfg).loss
table[row, col] = keep - h
down = msl_batch(enc, batch, cfg).loss
table[row, col] = keep
print("analytic", out.grad[row, col], "numeric", (up - down) / (2 * h))

# training pulls each anchor toward its own terms
examples = [
    TrainExample("a#0", "patient reports cough", ["cough", "amoxicillin"]),
    TrainExample("b#0", "patient reports fever", ["fever", "ibuprofen"]),
    TrainExample("c#0", "patient reports rash", ["rash", "cream"]),
]
enc = TextEncoder.create(vocab, dim=16, seed=0)
result = train(examples, enc, TrainConfig(positives_per_chunk=2, batch_size=3, epochs=200, lr=0.05))
losses = [r["loss"] for r in result.history]
print("loss first/last:", round(losses[0], 4), round(losses[-1], 4))
sims = enc.embed_chunks([e.text for e in examples]) @ enc.embed_queries(["amoxicillin", "ibuprofen", "cream"]).T
print(np.round(sims, 2))
