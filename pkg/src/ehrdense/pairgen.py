"""Positive-pair construction for both training stages.

Stage I positives for a chunk are its dictionary-matched terms, the full
names of abbreviations found in it, and knowledge-graph expansions of both
(synonyms, hypernyms, related entities).  Stage II positives are entities
produced by a text generator for three entity types.
"""

from __future__ import annotations

import json
import logging
import re
import zlib
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import Chunk
from .generation import ABBREVIATION, ENTITY_TYPES, SYNTHETIC, GenerationError, Generator
from .kg import KnowledgeGraph, lookup_term, neighbor_concepts, neighbors, random_synonym
from .matcher import TermAutomaton, build_automaton, chunk_concepts, find_mentions, is_boundary

log = logging.getLogger(__name__)

STRING = "string"
ABBREV = "abbreviation"
KG_SYNONYM = "kg_synonym"
KG_HYPERNYM = "kg_hypernym"
KG_RELATED = "kg_related"
SYN_DISEASE = "syn_disease"
SYN_PROCEDURE = "syn_procedure"
SYN_DRUG = "syn_drug"

STAGE1_SOURCES = (STRING, ABBREV, KG_SYNONYM, KG_HYPERNYM, KG_RELATED)
STAGE2_SOURCES = (SYN_DISEASE, SYN_PROCEDURE, SYN_DRUG)
KG_SOURCES = (KG_SYNONYM, KG_HYPERNYM, KG_RELATED)
SOURCES = STAGE1_SOURCES + STAGE2_SOURCES

ENTITY_SOURCE = dict(zip(ENTITY_TYPES, STAGE2_SOURCES))

MAX_ENTITY_TOKENS = 16
PER_CLASS = 2
MAX_KG_ADDITIONS = 10

_BULLET = re.compile(r"^\s*(?:[-*•]+|\(?\d+[.)]|[a-z][.)])\s+")


@dataclass(frozen=True)
class PositiveSample:
    term: str
    source: str
    seed_concept: str | None = None
    # a random synonym added alongside a sampled hypernym or related entity
    companion: bool = False

    def to_json(self, chunk_id: str) -> dict:
        out = {"chunk_id": chunk_id, "term": self.term, "source": self.source}
        if self.seed_concept is not None:
            out["seed_concept"] = self.seed_concept
        if self.companion:
            out["companion"] = True
        return out


@dataclass
class PositiveSet:
    chunk_id: str
    samples: list[PositiveSample] = field(default_factory=list)

    def terms(self) -> list[str]:
        return [s.term for s in self.samples]


@dataclass(frozen=True)
class AbbreviationPair:
    abbreviation: str
    full_name: str


def valid_entity(term: str) -> bool:
    return bool(term) and len(term.split()) <= MAX_ENTITY_TOKENS


def dedup_samples(samples: Iterable[PositiveSample]) -> list[PositiveSample]:
    seen = set()
    out = []
    for s in samples:
        key = (s.term, s.source)
        if key not in seen:
            seen.add(key)
            out.append(s)
    return out


# -- response parsing ----------------------------------------------------------


def parse_items(response: str) -> list[str]:
    """Split a generator response into items, dropping bullets and numbering."""
    items = []
    for line in response.splitlines():
        item = _BULLET.sub("", line).strip().strip(",;")
        if item:
            items.append(item)
    return items


def parse_abbreviations(response: str) -> tuple[list[AbbreviationPair], int]:
    """Parse ``ABBR = full name`` lines; returns the pairs and the number of skipped lines."""
    pairs = []
    skipped = 0
    for item in parse_items(response):
        abbr, sep, full = item.partition("=")
        abbr, full = abbr.strip().lower(), full.strip().lower()
        if not sep or not abbr or not full or "=" in full:
            skipped += 1
            continue
        pairs.append(AbbreviationPair(abbr, full))
    return pairs, skipped


# -- stage I -------------------------------------------------------------------


def reduce_abbreviations(client: Generator, chunk_text: str, chunk_id: str | None = None) -> list[AbbreviationPair]:
    try:
        response = client.generate(ABBREVIATION, chunk_text)
    except GenerationError as exc:
        raise GenerationError(f"abbreviation reduction failed for chunk {chunk_id}: {exc}") from exc
    pairs, skipped = parse_abbreviations(response)
    if skipped:
        log.debug("chunk %s: skipped %d unparseable abbreviation line(s)", chunk_id, skipped)
    return pairs


def _occurs(text: str, term: str) -> bool:
    start = text.find(term)
    while start >= 0:
        if is_boundary(text, start) and is_boundary(text, start + len(term)):
            return True
        start = text.find(term, start + 1)
    return False


def abbreviation_checks(pair: AbbreviationPair, chunk_text: str, kg: KnowledgeGraph) -> dict[str, bool]:
    """The four cleaning predicates, each True when the pair passes it."""
    return {
        "appears_in_note": _occurs(chunk_text, pair.abbreviation),
        "differs_from_full_name": pair.full_name != pair.abbreviation,
        "full_name_in_kg": bool(lookup_term(kg, pair.full_name)),
        "longer_than_one_char": len(pair.abbreviation) >= 2,
    }


def clean_abbreviations(
    raw: Iterable[AbbreviationPair], chunk_text: str, kg: KnowledgeGraph
) -> list[AbbreviationPair]:
    out = []
    for pair in raw:
        if all(abbreviation_checks(pair, chunk_text, kg).values()) and pair not in out:
            out.append(pair)
    return out


def _sample(pool: Sequence, k: int, rng: np.random.Generator) -> list:
    if len(pool) <= k:
        return list(pool)
    idx = rng.choice(len(pool), size=k, replace=False)
    return [pool[i] for i in sorted(idx)]


def expand_stage1(
    kg: KnowledgeGraph,
    seeds: Iterable[tuple[str, str]],
    rng: np.random.Generator,
    abbreviation_seeds: Iterable[tuple[str, str]] = (),
) -> list[PositiveSample]:
    """Seed surfaces plus capped knowledge-graph expansions.

    Every seed surface is emitted (as ``string`` or ``abbreviation``).  Each
    distinct seed concept is expanded once: up to two synonyms, two
    hypernyms and two related entities, uniformly without replacement, and
    for every hypernym or related entity one random synonym of it if any.
    Synonym candidates exclude all seed surfaces of the concept.
    """
    surfaces: dict[str, list[tuple[str, str]]] = {}
    for source, group in ((STRING, seeds), (ABBREV, abbreviation_seeds)):
        for cid, surface in sorted(set(group)):
            kg.concept(cid)
            surfaces.setdefault(cid, []).append((surface, source))

    out: list[PositiveSample] = []
    for cid in sorted(surfaces):
        for surface, source in surfaces[cid]:
            out.append(PositiveSample(surface, source, cid))
        own = {s for s, _ in surfaces[cid]}
        additions = [
            PositiveSample(t, KG_SYNONYM, cid)
            for t in _sample(sorted(kg.concept(cid).terms - own), PER_CLASS, rng)
        ]
        for cls, source in (("hypernym", KG_HYPERNYM), ("related", KG_RELATED)):
            for nid in _sample(neighbor_concepts(kg, cid, cls), PER_CLASS, rng):
                term = kg.concepts[nid].preferred_term
                additions.append(PositiveSample(term, source, cid))
                companion = random_synonym(kg, nid, rng, surface=term)
                if companion is not None:
                    additions.append(PositiveSample(companion, source, cid, companion=True))
        assert len(additions) <= MAX_KG_ADDITIONS
        out.extend(additions)
    return dedup_samples(s for s in out if valid_entity(s.term))


def stage1_seeds(
    kg: KnowledgeGraph,
    automaton: TermAutomaton,
    chunk_text: str,
    abbreviations: Iterable[AbbreviationPair] = (),
) -> tuple[set[tuple[str, str]], set[tuple[str, str]]]:
    """(concept, surface) seeds from dictionary matches and from cleaned abbreviation full names."""
    string_seeds = chunk_concepts(find_mentions(automaton, chunk_text))
    abbr_seeds = {(cid, p.full_name) for p in abbreviations for cid in lookup_term(kg, p.full_name)}
    return string_seeds, abbr_seeds


# -- stage II ------------------------------------------------------------------


def generate_stage2(client: Generator, chunk_text: str, chunk_id: str | None = None) -> list[PositiveSample]:
    """One generator call per entity type; first occurrence wins across types."""
    out: list[PositiveSample] = []
    seen: set[str] = set()
    for entity_type in ENTITY_TYPES:
        try:
            response = client.generate(SYNTHETIC, chunk_text, entity_type)
        except GenerationError as exc:
            raise GenerationError(f"{entity_type} generation failed for chunk {chunk_id}: {exc}") from exc
        for item in parse_items(response):
            term = " ".join(item.lower().split())
            if valid_entity(term) and term not in seen:
                seen.add(term)
                out.append(PositiveSample(term, ENTITY_SOURCE[entity_type]))
    return out


# -- datasets ------------------------------------------------------------------


def chunk_rng(seed: int, chunk_id: str) -> np.random.Generator:
    """Per-chunk generator so results do not depend on processing order."""
    return np.random.default_rng([seed, zlib.crc32(chunk_id.encode("utf-8"))])


@dataclass
class DatasetStats:
    """Per-chunk count statistics for each source plus an overall row."""

    rows: dict[str, dict[str, float]]
    n_chunks: int

    COLUMNS = ("Avg", "Q1", "Q3", "Max", "Sum")

    def format(self) -> str:
        width = max([len("Source")] + [len(k) for k in self.rows])
        lines = [f"{'Source':<{width}}" + "".join(f"{c:>10}" for c in self.COLUMNS)]
        for name, row in self.rows.items():
            cells = "".join(
                f"{row[c]:>10.1f}" if c == "Avg" else f"{row[c]:>10g}" for c in self.COLUMNS
            )
            lines.append(f"{name:<{width}}" + cells)
        return "\n".join(lines)

    def to_json(self) -> dict:
        return {"n_chunks": self.n_chunks, "rows": self.rows}


def count_stats(counts: Sequence[float]) -> dict[str, float]:
    """Avg, Q1, Q3, Max and Sum of per-chunk counts; quartiles interpolate linearly."""
    if len(counts) == 0:
        return dict.fromkeys(DatasetStats.COLUMNS, 0.0)
    a = np.asarray(counts, dtype=float)
    q1, q3 = np.percentile(a, [25, 75])
    return {"Avg": float(a.mean()), "Q1": float(q1), "Q3": float(q3), "Max": float(a.max()), "Sum": float(a.sum())}


def dataset_stats(positive_sets: Sequence[PositiveSet], sources: Sequence[str] | None = None) -> DatasetStats:
    if sources is None:
        present = {s.source for ps in positive_sets for s in ps.samples}
        stage2 = present and present <= set(STAGE2_SOURCES)
        sources = STAGE2_SOURCES if stage2 else STAGE1_SOURCES
    per_chunk = [Counter(s.source for s in ps.samples) for ps in positive_sets]
    rows = {src: count_stats([c[src] for c in per_chunk]) for src in sources}
    rows["overall"] = count_stats([len(ps.samples) for ps in positive_sets])
    return DatasetStats(rows, len(positive_sets))


def stage1_positives(
    chunk: Chunk,
    kg: KnowledgeGraph,
    automaton: TermAutomaton,
    client: Generator | None,
    seed: int,
    abbreviations: Sequence[AbbreviationPair] | None = None,
) -> PositiveSet:
    if abbreviations is None:
        raw = reduce_abbreviations(client, chunk.text, chunk.chunk_id) if client is not None else []
        abbreviations = clean_abbreviations(raw, chunk.text, kg)
    string_seeds, abbr_seeds = stage1_seeds(kg, automaton, chunk.text, abbreviations)
    samples = expand_stage1(kg, string_seeds, chunk_rng(seed, chunk.chunk_id), abbr_seeds)
    return PositiveSet(chunk.chunk_id, samples)


def build_dataset(
    stage: int,
    chunks: Sequence[Chunk],
    kg: KnowledgeGraph,
    client: Generator | None,
    seed: int,
    out_path: str | Path | None = None,
    automaton: TermAutomaton | None = None,
    abbreviations: Mapping[str, Sequence[AbbreviationPair]] | None = None,
    jobs: int = 1,
) -> tuple[list[PositiveSet], DatasetStats]:
    """Build the positive sets of one stage for every chunk and optionally write them.

    Chunks are processed by up to ``jobs`` threads; output keeps chunk order.
    ``abbreviations`` maps chunk id to already-cleaned pairs and skips the
    generator for Stage I.
    """
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage!r}")
    if stage == 1:
        automaton = automaton or build_automaton(kg)

        def work(chunk: Chunk) -> PositiveSet:
            pairs = None if abbreviations is None else abbreviations.get(chunk.chunk_id, [])
            return stage1_positives(chunk, kg, automaton, client, seed, pairs)

    else:
        if client is None:
            raise ValueError("stage 2 needs a generator client")

        def work(chunk: Chunk) -> PositiveSet:
            return PositiveSet(chunk.chunk_id, generate_stage2(client, chunk.text, chunk.chunk_id))

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            sets = list(pool.map(work, chunks))
    else:
        sets = [work(c) for c in chunks]
    if out_path is not None:
        write_pairs(sets, out_path)
    sources = STAGE1_SOURCES if stage == 1 else STAGE2_SOURCES
    return sets, dataset_stats(sets, sources)


def write_pairs(sets: Iterable[PositiveSet], path: str | Path) -> None:
    """One line per sample; a chunk without samples gets a single line with null term."""
    with open(path, "w", encoding="utf-8") as fh:
        for ps in sets:
            if not ps.samples:
                fh.write(json.dumps({"chunk_id": ps.chunk_id, "term": None, "source": None}) + "\n")
            for s in ps.samples:
                fh.write(json.dumps(s.to_json(ps.chunk_id)) + "\n")


def load_pairs(path: str | Path) -> list[PositiveSet]:
    sets: dict[str, PositiveSet] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                ps = sets.setdefault(obj["chunk_id"], PositiveSet(obj["chunk_id"]))
                if obj.get("term") is None:
                    continue
                if obj["source"] not in SOURCES:
                    raise ValueError(f"unknown source {obj['source']!r}")
                ps.samples.append(
                    PositiveSample(obj["term"], obj["source"], obj.get("seed_concept"), bool(obj.get("companion")))
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}: line {lineno}: bad pair record ({exc})") from None
    return list(sets.values())


def write_abbreviations(records: Iterable[tuple[str, Sequence[AbbreviationPair]]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for chunk_id, pairs in records:
            fh.write(
                json.dumps(
                    {"chunk_id": chunk_id, "pairs": [[p.abbreviation, p.full_name] for p in pairs]}
                )
                + "\n"
            )


def load_abbreviations(path: str | Path) -> dict[str, list[AbbreviationPair]]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                out[obj["chunk_id"]] = [AbbreviationPair(a, f) for a, f in obj["pairs"]]
    return out


# -- invariant audit -----------------------------------------------------------


def audit_stage1(sets: Iterable[PositiveSet], kg: KnowledgeGraph) -> list[str]:
    """Violations of the per-seed caps and of hyponym exclusion; empty when clean."""
    problems = []
    for ps in sets:
        by_seed: dict[str, Counter] = {}
        seed_surfaces: dict[str, set[str]] = {}
        for s in ps.samples:
            if s.seed_concept is None:
                continue
            if s.source in KG_SOURCES:
                key = (s.source, s.companion)
                by_seed.setdefault(s.seed_concept, Counter())[key] += 1
            else:
                seed_surfaces.setdefault(s.seed_concept, set()).add(s.term)
        for cid, counts in by_seed.items():
            total = sum(counts.values())
            if total > MAX_KG_ADDITIONS:
                problems.append(f"{ps.chunk_id}: seed {cid} has {total} KG additions")
            for (source, companion), n in counts.items():
                if n > PER_CLASS:
                    problems.append(f"{ps.chunk_id}: seed {cid} has {n} {source} (companion={companion})")
            allowed = set(kg.concept(cid).terms)
            for cls in ("hypernym", "related"):
                allowed |= neighbors(kg, cid, cls)
                for nid in neighbor_concepts(kg, cid, cls):
                    allowed |= kg.concepts[nid].terms
            for s in ps.samples:
                if s.seed_concept == cid and s.source in KG_SOURCES and s.term not in allowed:
                    problems.append(f"{ps.chunk_id}: {s.term!r} is not a one-hop expansion of {cid}")
    return problems
