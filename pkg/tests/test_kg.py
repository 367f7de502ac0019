import json

import numpy as np
import pytest

from ehrdense.kg import (
    Concept,
    KnowledgeGraph,
    Relation,
    dump_kg,
    load_kg,
    lookup_term,
    neighbor_concepts,
    neighbors,
    random_synonym,
)
from ehrdense.synth import DISEASE, DRUG, synthetic_kg

from conftest import concept


def write_kg(tmp_path, concepts, relations):
    cp, rp = tmp_path / "c.jsonl", tmp_path / "r.tsv"
    cp.write_text("".join(json.dumps(c) + "\n" for c in concepts))
    rp.write_text("".join("\t".join(r) + "\n" for r in relations))
    return cp, rp


def test_load_small_graph(tmp_path):
    cp, rp = write_kg(
        tmp_path,
        [
            {"concept_id": "c1", "semantic_type": DISEASE, "terms": ["ms", "multiple sclerosis"]},
            {"concept_id": "c2", "semantic_type": DISEASE, "terms": ["ms", "mitral stenosis"]},
            {"concept_id": "c3", "semantic_type": DRUG, "terms": ["aspirin"]},
        ],
        [("c3", "may_treat", "c2"), ("c2", "may_be_treated_by", "c3")],
    )
    kg = load_kg(cp, rp)
    assert len(kg) == 3 and len(kg.relations) == 2
    assert lookup_term(kg, "ms") == {"c1", "c2"}
    assert kg.concept("c1").preferred_term == "ms"


def test_missing_endpoint_named(tmp_path):
    cp, rp = write_kg(
        tmp_path,
        [{"concept_id": "c1", "semantic_type": DISEASE, "terms": ["a"]}],
        [("c1", "is_a", "c9")],
    )
    with pytest.raises(ValueError, match="c9"):
        load_kg(cp, rp)


def test_unknown_relation_kind(tmp_path):
    cp, rp = write_kg(
        tmp_path,
        [
            {"concept_id": "c1", "semantic_type": DISEASE, "terms": ["a"]},
            {"concept_id": "c2", "semantic_type": DISEASE, "terms": ["b"]},
        ],
        [("c1", "part_of", "c2")],
    )
    with pytest.raises(ValueError, match="part_of"):
        load_kg(cp, rp)


def test_self_loop_rejected():
    with pytest.raises(ValueError):
        KnowledgeGraph([concept("a", DISEASE, "x")], [Relation("a", "is_a", "a")])


def test_lookup_term(small_kg):
    assert lookup_term(small_kg, "hypertension") == {"htn"}
    assert lookup_term(small_kg, "heart") == set()  # anatomy is inadmissible
    assert lookup_term(small_kg, "nothing") == set()


def test_neighbors(small_kg):
    assert neighbors(small_kg, "htn", "synonym", surface="hypertension") == {"htn", "high blood pressure"}
    assert "cardiovascular disease" in neighbors(small_kg, "htn", "hypernym")
    assert neighbors(small_kg, "lis", "related") == {"hypertension", "htn", "high blood pressure"}
    with pytest.raises(KeyError):
        neighbors(small_kg, "nope", "synonym")


def test_hyponyms_never_returned(small_kg):
    # ess is_a htn, so "essential hypertension" is narrower than htn
    reach = neighbors(small_kg, "htn", "hypernym") | neighbors(small_kg, "htn", "related")
    assert "essential hypertension" not in reach
    assert neighbor_concepts(small_kg, "htn", "hypernym") == ["cvd"]


def test_random_synonym(small_kg):
    a = random_synonym(small_kg, "htn", np.random.default_rng(5), surface="hypertension")
    b = random_synonym(small_kg, "htn", np.random.default_rng(5), surface="hypertension")
    assert a == b and a in {"htn", "high blood pressure"}
    assert random_synonym(small_kg, "ess", np.random.default_rng(0), surface="essential hypertension") is None


def test_random_synonym_uniform():
    kg = KnowledgeGraph([concept("c", DISEASE, "s", "a", "b", "c")])
    rng = np.random.default_rng(11)
    draws = [random_synonym(kg, "c", rng, surface="s") for _ in range(30000)]
    counts = np.array([draws.count(t) for t in ("a", "b", "c")])
    expected = 30000 / 3
    sigma = np.sqrt(30000 * (1 / 3) * (2 / 3))
    assert np.all(np.abs(counts - expected) < 3 * sigma)


def test_index_completeness_and_round_trip(tmp_path):
    kg, _ = synthetic_kg(120, seed=3)
    for c in kg.concepts.values():
        if kg.is_admissible(c.concept_id):
            for t in c.terms:
                assert c.concept_id in lookup_term(kg, t)
    cp, rp = tmp_path / "c.jsonl", tmp_path / "r.tsv"
    dump_kg(kg, cp, rp)
    assert load_kg(cp, rp) == kg


def test_hyponym_exclusion_on_synthetic_graph():
    kg, _ = synthetic_kg(200, seed=1)
    for cid in kg.concepts:
        narrower = {r.head for r in kg.relations if r.kind == "is_a" and r.tail == cid}
        reached = set(neighbor_concepts(kg, cid, "hypernym")) | set(neighbor_concepts(kg, cid, "related"))
        assert not (narrower & set(neighbor_concepts(kg, cid, "hypernym")))
        # a narrower concept is only reachable if some non-is_a edge also leads there
        for n in narrower & reached:
            assert any(r.tail == n and r.kind != "is_a" for r in kg.out_edges(cid))


def test_concept_validation():
    with pytest.raises(ValueError):
        Concept("x", DISEASE, "A", frozenset({"A"}))
    with pytest.raises(ValueError):
        Concept("x", DISEASE, "a", frozenset({"b"}))
