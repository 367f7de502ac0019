"""
From raw notes to training pairs
================================

Walks one synthetic patient note through cleaning, chunking, dictionary
matching and both rounds of positive-pair construction.
"""

import numpy as np

from ehrdense.corpus import Note, chunk_note, clean_note, prepare_corpus
from ehrdense.generation import MockGenerator
from ehrdense.matcher import build_automaton, chunk_concepts, find_mentions
from ehrdense.pairgen import build_dataset, expand_stage1, generate_stage2
from ehrdense.synth import make_benchmark

# a small world: 150 concepts, 12 training notes
bm = make_benchmark(seed=7, n_concepts=150, n_train_notes=12, n_eval_notes=2)
kg = bm.kg
print(len(kg), "concepts,", len(kg.relations), "directed relations")

# cleaning drops masks, squeezes punctuation runs and lowercases
raw = bm.train_notes[0].text
print(raw[:160])
print(clean_note(raw, ["___"])[:160])

# 100-word windows that overlap by 10 words
chunks = chunk_note(Note("n0", clean_note(raw, ["___"])))
print([(c.start_word, c.end_word) for c in chunks])

# every admissible KG term goes into one automaton
auto = build_automaton(kg)
first = chunks[0]
for m in find_mentions(auto, first.text)[:8]:
    print(f"{m.start_char:4d} {m.surface!r:30} {sorted(m.concept_ids)}")

# Stage I: matched surfaces seed a capped one-hop expansion
seeds = chunk_concepts(find_mentions(auto, first.text))
rng = np.random.default_rng(0)
for s in expand_stage1(kg, seeds, rng)[:12]:
    print(f"{s.source:14} {s.term}")

# Stage II: the generator is asked for diseases, procedures and drugs
mock = MockGenerator(kg, bm.abbreviations, seed=0)
for s in generate_stage2(mock, first.text):
    print(f"{s.source:14} {s.term}")

# the same thing for the whole corpus, with per-source count statistics
all_chunks = prepare_corpus(bm.train_notes)
_, stats1 = build_dataset(1, all_chunks, kg, mock, seed=0)
_, stats2 = build_dataset(2, all_chunks, kg, mock, seed=0)
print(stats1.format())
print(stats2.format())
