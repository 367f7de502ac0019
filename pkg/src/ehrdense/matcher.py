"""Dictionary matching of knowledge-graph terms against chunk text.

An Aho-Corasick automaton over characters finds every occurrence of every
term in one pass; occurrences not aligned to word boundaries are discarded
afterwards, then overlapping matches of the same concept are reduced to the
longest one.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

from .kg import KnowledgeGraph, SemanticTypeFilter


@dataclass(frozen=True)
class Mention:
    surface: str
    start_char: int
    end_char: int
    concept_ids: frozenset[str]


def is_boundary(text: str, i: int) -> bool:
    """True when position ``i`` touches a text edge or a non-alphanumeric character."""
    return i == 0 or i == len(text) or not text[i - 1].isalnum() or not text[i].isalnum()


class TermAutomaton:
    """Aho-Corasick automaton with a concept-id payload per pattern.

    Built from a term -> concept ids mapping; state construction follows
    sorted pattern order so the automaton is identical for equal inputs.
    """

    def __init__(self, patterns: Mapping[str, Iterable[str]]):
        self.payload: dict[str, frozenset[str]] = {
            term: frozenset(ids) for term, ids in patterns.items() if term
        }
        goto: list[dict[str, int]] = [{}]
        out: list[list[str]] = [[]]
        for term in sorted(self.payload):
            state = 0
            for ch in term:
                nxt = goto[state].get(ch)
                if nxt is None:
                    nxt = len(goto)
                    goto[state][ch] = nxt
                    goto.append({})
                    out.append([])
                state = nxt
            out[state].append(term)

        fail = [0] * len(goto)
        queue = deque(goto[0].values())
        while queue:
            state = queue.popleft()
            for ch, nxt in goto[state].items():
                queue.append(nxt)
                f = fail[state]
                while f and ch not in goto[f]:
                    f = fail[f]
                cand = goto[f].get(ch, 0)
                fail[nxt] = cand if cand != nxt else 0
                out[nxt] = out[nxt] + out[fail[nxt]]
        self._goto = goto
        self._fail = fail
        self._out = [tuple(o) for o in out]

    def __len__(self) -> int:
        return len(self.payload)

    def iter_matches(self, text: str):
        """Yield ``(start, end, term)`` for every occurrence, boundaries ignored."""
        goto, fail, out = self._goto, self._fail, self._out
        state = 0
        for i, ch in enumerate(text):
            while state and ch not in goto[state]:
                state = fail[state]
            state = goto[state].get(ch, 0)
            for term in out[state]:
                yield i + 1 - len(term), i + 1, term


def build_automaton(kg: KnowledgeGraph, type_filter: SemanticTypeFilter | None = None) -> TermAutomaton:
    flt = type_filter or kg.type_filter
    patterns: dict[str, set[str]] = {}
    for c in kg.concepts.values():
        if c.semantic_type not in flt:
            continue
        for t in c.terms:
            patterns.setdefault(t, set()).add(c.concept_id)
    if not patterns:
        raise ValueError("no admissible terms to build a matcher from")
    return TermAutomaton(patterns)


def resolve_overlaps(spans: Iterable[tuple[int, int, str]], payload: Mapping[str, frozenset[str]]) -> list[Mention]:
    """Keep, per concept, only the longest of mutually overlapping spans.

    A span loses a concept when another span of that concept overlaps it and
    is longer, or equally long and starting earlier.  Spans of different
    concepts never suppress each other.
    """
    by_concept: dict[str, list[tuple[int, int]]] = {}
    surfaces = {}
    for start, end, term in spans:
        surfaces[(start, end)] = term
        for cid in payload[term]:
            by_concept.setdefault(cid, []).append((start, end))

    kept: dict[tuple[int, int], set[str]] = {}
    for cid, cspans in by_concept.items():
        # longest first, then leftmost; a span survives if no survivor overlaps it
        order = sorted(set(cspans), key=lambda s: (s[0] - s[1], s[0]))
        winners: list[tuple[int, int]] = []
        for s in order:
            if all(s[1] <= w[0] or w[1] <= s[0] for w in winners):
                winners.append(s)
        for s in winners:
            kept.setdefault(s, set()).add(cid)

    mentions = [
        Mention(surfaces[s], s[0], s[1], frozenset(ids)) for s, ids in kept.items()
    ]
    mentions.sort(key=lambda m: (m.start_char, m.start_char - m.end_char))
    return mentions


def find_mentions(automaton: TermAutomaton, chunk_text: str) -> list[Mention]:
    spans = [
        (s, e, t)
        for s, e, t in automaton.iter_matches(chunk_text)
        if is_boundary(chunk_text, s) and is_boundary(chunk_text, e)
    ]
    return resolve_overlaps(spans, automaton.payload)


def chunk_concepts(mentions: Iterable[Mention]) -> set[tuple[str, str]]:
    return {(cid, m.surface) for m in mentions for cid in m.concept_ids}


def write_mentions(records: Iterable[tuple[str, list[Mention]]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for chunk_id, mentions in records:
            for m in mentions:
                fh.write(
                    json.dumps(
                        {
                            "chunk_id": chunk_id,
                            "surface": m.surface,
                            "start_char": m.start_char,
                            "end_char": m.end_char,
                            "concept_ids": sorted(m.concept_ids),
                        }
                    )
                    + "\n"
                )


def load_mentions(path: str | Path) -> dict[str, list[Mention]]:
    out: dict[str, list[Mention]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                out.setdefault(obj["chunk_id"], []).append(
                    Mention(obj["surface"], obj["start_char"], obj["end_char"], frozenset(obj["concept_ids"]))
                )
    return out
