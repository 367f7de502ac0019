"""Biomedical knowledge graph: concepts, surface terms and typed relations."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

ADMISSIBLE_TYPES = frozenset(
    {
        "Laboratory Procedure",
        "Sign, Symptom, or Finding",
        "Diagnostic Procedure",
        "Therapeutic or Preventive Procedure",
        "Disease, Syndrome or Pathologic Function",
        "Chemical or Drug",
    }
)

IS_A = "is_a"
RELATED_KINDS = (
    "may_treat",
    "may_be_treated_by",
    "may_diagnose",
    "may_be_diagnosed_by",
    "may_cause",
    "may_be_caused_by",
)
RELATION_KINDS = (IS_A,) + RELATED_KINDS
INVERSE = {
    "may_treat": "may_be_treated_by",
    "may_be_treated_by": "may_treat",
    "may_diagnose": "may_be_diagnosed_by",
    "may_be_diagnosed_by": "may_diagnose",
    "may_cause": "may_be_caused_by",
    "may_be_caused_by": "may_cause",
}

NEIGHBOR_CLASSES = ("synonym", "hypernym", "related")


@dataclass(frozen=True)
class Concept:
    concept_id: str
    semantic_type: str
    preferred_term: str
    terms: frozenset[str]

    def __post_init__(self):
        if not self.terms:
            raise ValueError(f"concept {self.concept_id!r} has no terms")
        if self.preferred_term not in self.terms:
            raise ValueError(f"concept {self.concept_id!r}: preferred term not among terms")
        if any(t != t.lower() for t in self.terms):
            raise ValueError(f"concept {self.concept_id!r}: terms must be lowercase")


@dataclass(frozen=True)
class Relation:
    head: str
    kind: str
    tail: str


@dataclass(frozen=True)
class SemanticTypeFilter:
    admissible: frozenset[str] = ADMISSIBLE_TYPES

    def __contains__(self, semantic_type: str) -> bool:
        return semantic_type in self.admissible


class KnowledgeGraph:
    """Immutable concept table with a term index and head-indexed relations."""

    def __init__(
        self,
        concepts: Iterable[Concept],
        relations: Iterable[Relation] = (),
        type_filter: SemanticTypeFilter | None = None,
    ):
        self.type_filter = type_filter or SemanticTypeFilter()
        self.concepts: dict[str, Concept] = {}
        for c in concepts:
            if c.concept_id in self.concepts:
                raise ValueError(f"duplicate concept id {c.concept_id!r}")
            self.concepts[c.concept_id] = c
        self._term_index: dict[str, set[str]] = defaultdict(set)
        for c in self.concepts.values():
            for t in c.terms:
                self._term_index[t].add(c.concept_id)
        self.relations: list[Relation] = []
        self._out: dict[str, list[Relation]] = defaultdict(list)
        for r in relations:
            if r.kind not in RELATION_KINDS:
                raise ValueError(f"unknown relation kind {r.kind!r}")
            for end in (r.head, r.tail):
                if end not in self.concepts:
                    raise ValueError(f"relation endpoint {end!r} not in concept table")
            if r.head == r.tail:
                raise ValueError(f"self-loop relation on {r.head!r}")
            self.relations.append(r)
            self._out[r.head].append(r)

    def __len__(self) -> int:
        return len(self.concepts)

    def __contains__(self, concept_id: str) -> bool:
        return concept_id in self.concepts

    def __eq__(self, other) -> bool:
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return self.concepts == other.concepts and set(self.relations) == set(other.relations)

    def concept(self, concept_id: str) -> Concept:
        try:
            return self.concepts[concept_id]
        except KeyError:
            raise KeyError(f"unknown concept {concept_id!r}") from None

    def is_admissible(self, concept_id: str) -> bool:
        return self.concept(concept_id).semantic_type in self.type_filter

    def admissible_terms(self) -> dict[str, set[str]]:
        """Term -> admissible concept ids, for every term with at least one."""
        out = {}
        for term, ids in self._term_index.items():
            keep = {i for i in ids if self.is_admissible(i)}
            if keep:
                out[term] = keep
        return out

    def out_edges(self, concept_id: str) -> list[Relation]:
        self.concept(concept_id)
        return self._out.get(concept_id, [])


def lookup_term(kg: KnowledgeGraph, term: str) -> set[str]:
    return {i for i in kg._term_index.get(term, ()) if kg.is_admissible(i)}


def neighbor_concepts(kg: KnowledgeGraph, concept_id: str, cls: str) -> list[str]:
    """Concept ids one hop away along head->tail edges of a neighbor class.

    ``hypernym`` follows outgoing ``is_a`` edges only, so narrower concepts
    (edges pointing into ``concept_id``) are never reached.
    """
    edges = kg.out_edges(concept_id)
    if cls == "hypernym":
        tails = {r.tail for r in edges if r.kind == IS_A}
    elif cls == "related":
        tails = {r.tail for r in edges if r.kind != IS_A}
    else:
        raise ValueError(f"no concept neighbors for class {cls!r}")
    return sorted(tails)


def neighbors(kg: KnowledgeGraph, concept_id: str, cls: str, surface: str | None = None) -> set[str]:
    """Surface terms reachable from a concept through one neighbor class.

    For ``synonym`` the result is the concept's own terms minus ``surface``.
    """
    if cls == "synonym":
        return set(kg.concept(concept_id).terms) - {surface}
    if cls not in NEIGHBOR_CLASSES:
        raise ValueError(f"unknown neighbor class {cls!r}")
    out: set[str] = set()
    for tail in neighbor_concepts(kg, concept_id, cls):
        out |= kg.concepts[tail].terms
    return out


def random_synonym(
    kg: KnowledgeGraph, concept_id: str, rng: np.random.Generator, surface: str | None = None
) -> str | None:
    """Uniform draw from the concept's terms other than ``surface``; None if there are none."""
    pool = sorted(neighbors(kg, concept_id, "synonym", surface))
    if not pool:
        return None
    return pool[int(rng.integers(len(pool)))]


def load_kg(
    concepts_path: str | Path,
    relations_path: str | Path,
    type_filter: SemanticTypeFilter | None = None,
) -> KnowledgeGraph:
    concepts = []
    with open(concepts_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                terms = [str(t).lower() for t in obj["terms"]]
                preferred = str(obj.get("preferred_term", terms[0] if terms else "")).lower()
                concepts.append(
                    Concept(str(obj["concept_id"]), str(obj["semantic_type"]), preferred, frozenset(terms))
                )
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{concepts_path}: line {lineno}: bad concept record ({exc})") from None
    relations = []
    with open(relations_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{relations_path}: line {lineno}: expected head<TAB>kind<TAB>tail")
            relations.append(Relation(*parts))
    return KnowledgeGraph(concepts, relations, type_filter)


def dump_kg(kg: KnowledgeGraph, concepts_path: str | Path, relations_path: str | Path) -> None:
    with open(concepts_path, "w", encoding="utf-8") as fh:
        for c in kg.concepts.values():
            terms = [c.preferred_term] + sorted(c.terms - {c.preferred_term})
            fh.write(
                json.dumps({"concept_id": c.concept_id, "semantic_type": c.semantic_type, "terms": terms})
                + "\n"
            )
    with open(relations_path, "w", encoding="utf-8") as fh:
        for r in kg.relations:
            fh.write(f"{r.head}\t{r.kind}\t{r.tail}\n")
