import numpy as np
import pytest

from ehrdense.kg import KnowledgeGraph
from ehrdense.matcher import (
    Mention,
    TermAutomaton,
    build_automaton,
    chunk_concepts,
    find_mentions,
    load_mentions,
    write_mentions,
)
from ehrdense.synth import ANATOMY, DISEASE

from conftest import concept


def brute_force(dictionary, text):
    """Every boundary-aligned substring in the dictionary, then per-concept longest-wins."""

    def edge(i):
        return i in (0, len(text)) or not (text[i - 1].isalnum() and text[i].isalnum())

    hits = []
    for i in range(len(text)):
        for j in range(i + 1, len(text) + 1):
            if text[i:j] in dictionary and edge(i) and edge(j):
                hits.append((i, j))
    kept = {}
    for cid in sorted({c for ids in dictionary.values() for c in ids}):
        mine = [(i, j) for i, j in hits if cid in dictionary[text[i:j]]]
        chosen = []
        for i, j in sorted(mine, key=lambda s: (s[0] - s[1], s[0])):
            if not any(i < b and a < j for a, b in chosen):
                chosen.append((i, j))
        for s in chosen:
            kept.setdefault(s, set()).add(cid)
    return {(i, j, text[i:j], frozenset(ids)) for (i, j), ids in kept.items()}


def as_set(mentions):
    return {(m.start_char, m.end_char, m.surface, m.concept_ids) for m in mentions}


def random_instance(rng):
    alphabet = list("ab c-d")
    vocab = ["a", "b", "ab", "ba", "a b", "abc", "c", "d", "cd", "b-c", "aa", "ab ab"]
    n_terms = int(rng.integers(1, 12))
    terms = rng.choice(vocab, size=n_terms, replace=False)
    dictionary = {str(t): {f"c{int(rng.integers(0, 4))}"} for t in terms}
    for t in dictionary:
        if rng.random() < 0.2:
            dictionary[t].add(f"c{int(rng.integers(0, 4))}")
    length = int(rng.integers(0, 60))
    text = "".join(rng.choice(alphabet, size=length))
    return dictionary, text


def test_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(300):
        dictionary, text = random_instance(rng)
        auto = TermAutomaton(dictionary)
        assert as_set(find_mentions(auto, text)) == brute_force(dictionary, text)


def test_overlapping_concepts_kept():
    auto = TermAutomaton({"heart failure": {"hf"}, "failure": {"f"}})
    got = [(m.surface, m.concept_ids) for m in find_mentions(auto, "acute heart failure")]
    assert got == [("heart failure", frozenset({"hf"})), ("failure", frozenset({"f"}))]


def test_same_concept_keeps_longest():
    auto = TermAutomaton({"heart failure": {"hf"}, "failure": {"hf"}})
    got = find_mentions(auto, "acute heart failure")
    assert [m.surface for m in got] == ["heart failure"]


def test_word_boundary():
    auto = TermAutomaton({"htn": {"x"}})
    assert find_mentions(auto, "shtnx") == []
    assert find_mentions(auto, "") == []
    assert [m.start_char for m in find_mentions(auto, "htn,htn")] == [0, 4]


def test_output_sorted_and_spans_exact():
    auto = TermAutomaton({"a b": {"1"}, "a": {"2"}, "b": {"3"}})
    text = "a b a"
    ms = find_mentions(auto, text)
    assert [(m.start_char, m.end_char) for m in ms] == [(0, 3), (0, 1), (2, 3), (4, 5)]
    for m in ms:
        assert text[m.start_char:m.end_char] == m.surface


def test_build_automaton(small_kg):
    auto = build_automaton(small_kg)
    # 3 + 2 + 1 + 2 + 2 admissible terms; the anatomy term is left out
    assert len(auto) == 10 and "heart" not in auto.payload
    kg = KnowledgeGraph([concept("a", ANATOMY, "arm")])
    with pytest.raises(ValueError):
        build_automaton(kg)
    shared = KnowledgeGraph([concept("a", DISEASE, "ms"), concept("b", DISEASE, "ms", "mitral stenosis")])
    assert build_automaton(shared).payload["ms"] == {"a", "b"}


def test_automaton_deterministic():
    d = {"ab": {"1"}, "b": {"2"}, "bab": {"3"}}
    a1, a2 = TermAutomaton(d), TermAutomaton(dict(reversed(list(d.items()))))
    assert a1._goto == a2._goto and a1._fail == a2._fail


def test_chunk_concepts():
    m = lambda s, a, ids: Mention(s, a, a + len(s), frozenset(ids))
    assert chunk_concepts([m("htn", 0, {"c"}), m("htn", 9, {"c"})]) == {("c", "htn")}
    assert chunk_concepts([m("htn", 0, {"c"}), m("hypertension", 9, {"c"})]) == {("c", "htn"), ("c", "hypertension")}
    assert chunk_concepts([]) == set()


def test_mentions_round_trip(tmp_path):
    auto = TermAutomaton({"a b": {"1"}, "b": {"3"}})
    ms = find_mentions(auto, "a b c")
    p = tmp_path / "m.jsonl"
    write_mentions([("x#0", ms)], p)
    assert load_mentions(p) == {"x#0": ms}
