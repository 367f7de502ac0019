"""Seeded synthetic benchmark: knowledge graph, clinical-style notes, and judgments.

The generated world plants every structure the pipeline is meant to learn:

* concepts with several surface terms (synonyms) and some abbreviations that
  are *not* graph terms, so only abbreviation reduction can recover them;
* ``is_a`` hierarchies inside each semantic type;
* ``may_treat`` / ``may_diagnose`` / ``may_cause`` edges stored in both
  directions;
* raw notes with masks, shouting and repeated punctuation, mentioning
  correlated concepts (a disease, its drug, its symptom) by varied surfaces.

Held-out evaluation notes come with single-patient queries of five match
types and multi-patient queries over the whole evaluation collection.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Chunk, Note, prepare_corpus, write_notes
from .evalkit import ALL_NOTES, Judgments, Query, write_judgments
from .kg import INVERSE, Concept, KnowledgeGraph, Relation, dump_kg
from .matcher import TermAutomaton, find_mentions

DISEASE = "Disease, Syndrome or Pathologic Function"
SYMPTOM = "Sign, Symptom, or Finding"
DRUG = "Chemical or Drug"
THERAPY = "Therapeutic or Preventive Procedure"
DIAGNOSTIC = "Diagnostic Procedure"
LAB = "Laboratory Procedure"
ANATOMY = "Body Part, Organ, or Organ Component"

TYPE_SHARES = {
    DISEASE: 0.28,
    SYMPTOM: 0.14,
    DRUG: 0.22,
    THERAPY: 0.10,
    DIAGNOSTIC: 0.08,
    LAB: 0.08,
    ANATOMY: 0.10,
}

QUERY_TYPE = {
    DISEASE: "disease",
    SYMPTOM: "disease",
    DRUG: "drug",
    THERAPY: "procedure",
    DIAGNOSTIC: "procedure",
    LAB: "procedure",
}

SUFFIXES = {
    DISEASE: ("itis", "osis", "emia", "opathy", "oma"),
    SYMPTOM: ("algia", "esis", "ia", "ea"),
    DRUG: ("ine", "pril", "olol", "mab", "statin", "azole"),
    THERAPY: ("ectomy", "plasty", "otomy"),
    DIAGNOSTIC: ("scopy", "graphy", "metry"),
    LAB: ("assay", "titer", "panel"),
    ANATOMY: ("um", "us", "is"),
}

ONSETS = "b c d f g h k l m n p r s t v z br dr fl gr kr pl pr sk st tr".split()
VOWELS = "a e i o u ai ea io ou".split()

FILLER = """
the patient was admitted with and of to in for on at by from after before during
history noted denies reports presented stable improved worsening mild moderate
severe acute chronic recent prior daily twice weekly continued started stopped
given received tolerated follow up clinic outpatient inpatient service team
discharge admission home family wife husband son daughter lives alone works
physical exam vitals afebrile alert oriented comfortable appears well no known
allergies social tobacco alcohol use past medical surgical plan assessment
course hospital day night morning evening overall unremarkable normal within
limits findings consistent likely possible concern ruled out monitored closely
dose tablet oral iv per day as needed instructions return if any questions
pain free breathing eating walking sleeping room air saturation pressure rate
rhythm regular sounds clear bilaterally soft nontender nondistended bowel
extremities warm edema none gait steady neuro intact labs imaging reviewed
results pending primary care provider called discussed agreed understood
""".split()

HEADERS = (
    "Chief Complaint:",
    "History of Present Illness:",
    "Past Medical History:",
    "Medications on Admission:",
    "Hospital Course:",
    "Discharge Diagnosis:",
    "Discharge Medications:",
    "Procedures:",
    "Physical Exam:",
)


@dataclass
class Benchmark:
    kg: KnowledgeGraph
    abbreviations: dict[str, str]
    train_notes: list[Note]
    eval_notes: list[Note]
    eval_chunks: list[Chunk]
    judgments: Judgments
    seed: int

    def write(self, directory: str | Path) -> dict[str, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = {
            "kg_concepts": d / "kg_concepts.jsonl",
            "kg_relations": d / "kg_relations.tsv",
            "notes": d / "notes.jsonl",
            "eval_notes": d / "eval_notes.jsonl",
            "abbreviations": d / "abbreviations.json",
            "queries": d / "queries.tsv",
            "qrels": d / "qrels.tsv",
        }
        dump_kg(self.kg, paths["kg_concepts"], paths["kg_relations"])
        write_notes(self.train_notes, paths["notes"])
        write_notes(self.eval_notes, paths["eval_notes"])
        paths["abbreviations"].write_text(json.dumps(self.abbreviations, indent=1, sort_keys=True) + "\n")
        write_judgments(self.judgments, paths["queries"], paths["qrels"])
        return paths


class _Namer:
    """Unique pronounceable pseudo-words."""

    def __init__(self, rng: np.random.Generator, reserved):
        self.rng = rng
        self.used = set(reserved)

    def word(self, syllables: int, suffix: str = "") -> str:
        while True:
            parts = [
                ONSETS[self.rng.integers(len(ONSETS))] + VOWELS[self.rng.integers(len(VOWELS))]
                for _ in range(syllables)
            ]
            w = "".join(parts) + suffix
            if w not in self.used and len(w) >= 4:
                self.used.add(w)
                return w

    def term(self, semantic_type: str) -> str:
        n_words = 1 if self.rng.random() < 0.55 else 2
        sfx = SUFFIXES[semantic_type]
        words = [self.word(int(self.rng.integers(2, 4))) for _ in range(n_words - 1)]
        words.append(self.word(int(self.rng.integers(1, 3)), sfx[self.rng.integers(len(sfx))]))
        return " ".join(words)

    def abbreviation(self, term: str) -> str:
        letters = "bcdfghjklmnpqrstvwxz"
        while True:
            initials = "".join(w[0] for w in term.split())
            n_extra = int(self.rng.integers(1, 3)) if len(initials) < 3 else 0
            extra = "".join(letters[self.rng.integers(len(letters))] for _ in range(n_extra))
            abbr = initials + extra
            if abbr not in self.used and 2 <= len(abbr) <= 4:
                self.used.add(abbr)
                return abbr


def synthetic_kg(n_concepts: int = 500, seed: int = 0, abbreviation_rate: float = 0.25):
    """Random concept graph; returns (graph, abbreviation -> preferred term)."""
    rng = np.random.default_rng(seed)
    namer = _Namer(rng, FILLER)
    types = list(TYPE_SHARES)
    counts = {t: int(round(TYPE_SHARES[t] * n_concepts)) for t in types}
    counts[DISEASE] += n_concepts - sum(counts.values())

    concepts: list[Concept] = []
    by_type: dict[str, list[str]] = {t: [] for t in types}
    abbreviations: dict[str, str] = {}
    k = 0
    for t in types:
        for _ in range(counts[t]):
            cid = f"C{k:04d}"
            k += 1
            preferred = namer.term(t)
            n_syn = int(rng.choice([0, 1, 2, 3], p=[0.1, 0.4, 0.35, 0.15]))
            terms = {preferred} | {namer.term(t) for _ in range(n_syn)}
            concepts.append(Concept(cid, t, preferred, frozenset(terms)))
            by_type[t].append(cid)
            if t != ANATOMY and rng.random() < abbreviation_rate:
                abbreviations[namer.abbreviation(preferred)] = preferred

    relations: set[Relation] = set()

    def link(head: str, kind: str, tail: str) -> None:
        relations.add(Relation(head, kind, tail))
        if kind in INVERSE:
            relations.add(Relation(tail, INVERSE[kind], head))

    for t in types:
        ids = by_type[t]
        n_parents = max(1, len(ids) // 5)
        parents, children = ids[:n_parents], ids[n_parents:]
        for c in children:
            if rng.random() < 0.7:
                want = 1 if rng.random() < 0.8 else 2
                for p in rng.choice(parents, size=min(want, len(parents)), replace=False):
                    link(c, "is_a", str(p))

    diseases = by_type[DISEASE]
    for d in by_type[DRUG]:
        for tgt in rng.choice(diseases, size=min(int(rng.integers(1, 3)), len(diseases)), replace=False):
            link(d, "may_treat", str(tgt))
    for p in by_type[THERAPY]:
        link(p, "may_treat", str(rng.choice(diseases)))
    for p in by_type[DIAGNOSTIC] + by_type[LAB]:
        for tgt in rng.choice(diseases, size=min(int(rng.integers(1, 3)), len(diseases)), replace=False):
            link(p, "may_diagnose", str(tgt))
    for d in diseases:
        n = min(int(rng.integers(0, 3)), len(by_type[SYMPTOM]))
        for s in rng.choice(by_type[SYMPTOM], size=n, replace=False):
            link(d, "may_cause", str(s))

    kg = KnowledgeGraph(concepts, sorted(relations, key=lambda r: (r.head, r.kind, r.tail)))
    return kg, abbreviations


class _NoteWriter:
    def __init__(self, kg: KnowledgeGraph, abbreviations: dict[str, str], rng: np.random.Generator):
        self.kg = kg
        self.rng = rng
        self.abbr_of = {full: abbr for abbr, full in abbreviations.items()}
        self.filler_p = 1.0 / np.arange(1, len(FILLER) + 1) ** 0.7
        self.filler_p /= self.filler_p.sum()
        self.admissible = [c for c in kg.concepts.values() if kg.is_admissible(c.concept_id)]
        self.by_type: dict[str, list[str]] = {}
        for c in kg.concepts.values():
            self.by_type.setdefault(c.semantic_type, []).append(c.concept_id)

    def surface(self, cid: str, exclude: set[str] = frozenset()) -> str:
        c = self.kg.concepts[cid]
        abbr = self.abbr_of.get(c.preferred_term)
        r = self.rng.random()
        if abbr and r < 0.35:
            return abbr
        if r < 0.7:
            options = [c.preferred_term] if c.preferred_term not in exclude else []
        else:
            options = []
        if not options:
            options = sorted(c.terms - exclude) or [c.preferred_term]
        return options[self.rng.integers(len(options))]

    def profile(self) -> list[str]:
        """Correlated concept set for one patient."""
        rng = self.rng
        picked: list[str] = []
        for d in rng.choice(self.by_type[DISEASE], size=int(rng.integers(3, 6)), replace=False):
            d = str(d)
            treaters = [r.tail for r in self.kg.out_edges(d) if r.kind == "may_be_treated_by"]
            causes = [r.tail for r in self.kg.out_edges(d) if r.kind == "may_cause"]
            tests = [r.tail for r in self.kg.out_edges(d) if r.kind == "may_be_diagnosed_by"]
            # sometimes only the treatment is written down: implied diagnosis
            if rng.random() < 0.75 or not treaters:
                picked.append(d)
            for pool, prob in ((treaters, 0.8), (causes, 0.5), (tests, 0.4)):
                if pool and rng.random() < prob:
                    picked.append(str(rng.choice(pool)))
        for t, n in ((DRUG, 2), (SYMPTOM, 2), (THERAPY, 1), (LAB, 1), (ANATOMY, 2)):
            picked.extend(str(x) for x in rng.choice(self.by_type[t], size=n, replace=False))
        seen = set()
        return [c for c in picked if not (c in seen or seen.add(c))]

    def filler(self, n: int) -> list[str]:
        idx = self.rng.choice(len(FILLER), size=n, p=self.filler_p)
        return [FILLER[i] for i in idx]

    def note(self, n_words: int) -> tuple[str, list[str]]:
        rng = self.rng
        concepts = self.profile()
        mentions = []
        for cid in concepts:
            for _ in range(1 if rng.random() < 0.6 else 2):
                mentions.append(self.surface(cid))
        rng.shuffle(mentions)
        slots = np.sort(rng.choice(n_words, size=len(mentions), replace=False))
        words: list[str] = []
        cursor = 0
        for slot, surface in zip(slots, mentions):
            words.extend(self.filler(int(slot) - cursor))
            cursor = int(slot)
            words.append(surface.upper() if rng.random() < 0.3 else surface)
        words.extend(self.filler(n_words - cursor))
        out = []
        for i, w in enumerate(words):
            if i % 45 == 0:
                out.append(HEADERS[rng.integers(len(HEADERS))])
            r = rng.random()
            if r < 0.02:
                out.append("___")
            elif r < 0.04:
                w += "!!" if rng.random() < 0.5 else ","
            elif r < 0.05:
                w += "..."
            out.append(w)
        return " ".join(out), concepts


def _surface_index(kg: KnowledgeGraph, abbreviations: dict[str, str]) -> TermAutomaton:
    patterns: dict[str, set[str]] = {}
    full_to_cid = {c.preferred_term: c.concept_id for c in kg.concepts.values()}
    for c in kg.concepts.values():
        for t in c.terms:
            patterns.setdefault(t, set()).add(c.concept_id)
    for abbr, full in abbreviations.items():
        patterns.setdefault(abbr, set()).add(full_to_cid[full])
    return TermAutomaton(patterns)


def _chunk_mentions(index: TermAutomaton, chunks: list[Chunk]) -> dict[str, dict[str, set[str]]]:
    """chunk id -> concept id -> surfaces present in that chunk."""
    out = {}
    for ch in chunks:
        per: dict[str, set[str]] = {}
        for m in find_mentions(index, ch.text):
            for cid in m.concept_ids:
                per.setdefault(cid, set()).add(m.surface)
        out[ch.chunk_id] = per
    return out


def _judge(query_text: str, cid: str, surfaces: set[str], abbr: str | None) -> str:
    if query_text in surfaces:
        return "string"
    if abbr is not None and abbr in surfaces:
        return "abbreviation"
    return "synonym"


def build_judgments(
    kg: KnowledgeGraph,
    abbreviations: dict[str, str],
    chunks: list[Chunk],
    rng: np.random.Generator,
    multi_queries: int = 60,
) -> Judgments:
    index = _surface_index(kg, abbreviations)
    mentions = _chunk_mentions(index, chunks)
    abbr_of = {full: abbr for abbr, full in abbreviations.items()}
    by_note: dict[str, list[str]] = {}
    for ch in chunks:
        by_note.setdefault(ch.note_id, []).append(ch.chunk_id)

    j = Judgments()
    counter = 0

    asked: set[tuple[str, str]] = set()

    def add(note_id: str, text: str, qtype: str, rels: dict[str, str]) -> None:
        nonlocal counter
        if not rels or (note_id, text) in asked:
            return
        asked.add((note_id, text))
        qid = f"q{counter:04d}"
        counter += 1
        j.add_query(Query(qid, note_id, text, qtype))
        for chunk_id, mt in sorted(rels.items()):
            j.add_judgment(qid, chunk_id, mt)

    def concept_rels(cid: str, text: str, chunk_ids) -> dict[str, str]:
        c = kg.concepts[cid]
        out = {}
        for chunk_id in chunk_ids:
            surfaces = mentions[chunk_id].get(cid)
            if surfaces:
                out[chunk_id] = _judge(text, cid, surfaces, abbr_of.get(c.preferred_term))
        return out

    for note_id in sorted(by_note):
        cids = by_note[note_id]
        present: dict[str, set[str]] = {}
        for chunk_id in cids:
            for cid, surfaces in mentions[chunk_id].items():
                present.setdefault(cid, set()).update(surfaces)
        note_surfaces = set().union(*present.values()) if present else set()
        for cid in sorted(present):
            c = kg.concepts[cid]
            if not kg.is_admissible(cid):
                continue
            qtype = QUERY_TYPE[c.semantic_type]
            abbr = abbr_of.get(c.preferred_term)
            surfaces = present[cid]
            if c.preferred_term in surfaces and rng.random() < 0.5:
                add(note_id, c.preferred_term, qtype, concept_rels(cid, c.preferred_term, cids))
            unused = sorted(c.terms - note_surfaces)
            if unused and rng.random() < 0.6:
                text = unused[rng.integers(len(unused))]
                add(note_id, text, qtype, concept_rels(cid, text, cids))
            if abbr in surfaces and c.preferred_term not in note_surfaces:
                add(note_id, c.preferred_term, qtype, concept_rels(cid, c.preferred_term, cids))

        # broader concepts whose narrower ones are written down
        parents: dict[str, set[str]] = {}
        implied: dict[str, set[str]] = {}
        for cid in present:
            for r in kg.out_edges(cid):
                if r.kind == "is_a":
                    parents.setdefault(r.tail, set()).add(cid)
                elif r.kind == "may_treat":
                    implied.setdefault(r.tail, set()).add(cid)
        for pid in sorted(parents):
            if pid in present or not kg.is_admissible(pid) or rng.random() > 0.5:
                continue
            p = kg.concepts[pid]
            rels = {}
            for child in sorted(parents[pid]):
                for chunk_id in cids:
                    if child in mentions[chunk_id]:
                        rels[chunk_id] = "hyponym"
            add(note_id, p.preferred_term, QUERY_TYPE[p.semantic_type], rels)
        for did in sorted(implied):
            if did in present or rng.random() > 0.7:
                continue
            d = kg.concepts[did]
            rels = {}
            for treater in sorted(implied[did]):
                for chunk_id in cids:
                    if treater in mentions[chunk_id]:
                        rels[chunk_id] = "implication"
            add(note_id, d.preferred_term, QUERY_TYPE[d.semantic_type], rels)

    # collection-wide queries: preferred terms of concepts written in several notes
    all_ids = [ch.chunk_id for ch in chunks]
    spread: dict[str, set[str]] = {}
    for ch in chunks:
        for cid in mentions[ch.chunk_id]:
            if kg.is_admissible(cid):
                spread.setdefault(cid, set()).add(ch.note_id)
    candidates = sorted(cid for cid, notes in spread.items() if len(notes) >= 2)
    if candidates:
        chosen = rng.choice(candidates, size=min(multi_queries, len(candidates)), replace=False)
        for cid in sorted(str(x) for x in chosen):
            c = kg.concepts[cid]
            add(ALL_NOTES, c.preferred_term, QUERY_TYPE[c.semantic_type], concept_rels(cid, c.preferred_term, all_ids))
    return j


def make_benchmark(
    seed: int = 0,
    n_concepts: int = 500,
    n_train_notes: int = 200,
    n_eval_notes: int = 40,
    note_words: tuple[int, int] = (600, 900),
) -> Benchmark:
    kg, abbreviations = synthetic_kg(n_concepts, seed)
    rng = np.random.default_rng([seed, 1])
    writer = _NoteWriter(kg, abbreviations, rng)

    def notes(prefix: str, n: int) -> list[Note]:
        out = []
        for i in range(n):
            text, _ = writer.note(int(rng.integers(note_words[0], note_words[1] + 1)))
            out.append(Note(f"{prefix}{i:04d}", text))
        return out

    train = notes("n", n_train_notes)
    held_out = notes("e", n_eval_notes)
    eval_chunks = prepare_corpus(held_out)
    judgments = build_judgments(kg, abbreviations, eval_chunks, np.random.default_rng([seed, 2]))
    return Benchmark(kg, abbreviations, train, held_out, eval_chunks, judgments, seed)
