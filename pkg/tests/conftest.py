import numpy as np
import pytest

from ehrdense.kg import Concept, KnowledgeGraph, Relation
from ehrdense.synth import ANATOMY, DISEASE, DRUG, SYMPTOM, make_benchmark


def concept(cid, stype, *terms):
    return Concept(cid, stype, terms[0], frozenset(terms))


@pytest.fixture
def small_kg():
    """Five concepts: a disease with a parent, a drug treating it, a symptom, an anatomy term."""
    concepts = [
        concept("htn", DISEASE, "hypertension", "htn", "high blood pressure"),
        concept("cvd", DISEASE, "cardiovascular disease", "cvd"),
        concept("ess", DISEASE, "essential hypertension"),
        concept("lis", DRUG, "lisinopril", "zestril"),
        concept("ha", SYMPTOM, "headache", "cephalgia"),
        concept("heart", ANATOMY, "heart"),
    ]
    relations = [
        Relation("htn", "is_a", "cvd"),
        Relation("ess", "is_a", "htn"),
        Relation("lis", "may_treat", "htn"),
        Relation("htn", "may_be_treated_by", "lis"),
        Relation("htn", "may_cause", "ha"),
        Relation("ha", "may_be_caused_by", "htn"),
    ]
    return KnowledgeGraph(concepts, relations)


@pytest.fixture(scope="session")
def benchmark():
    return make_benchmark(0)


# rankings over the five chunks of note "n"; qrels as chunk -> match type
DISSECTION_FIXTURE = {
    "q1": ("disease", ["c0", "c1", "c2", "c3", "c4"], {"c0": "string", "c1": "synonym"}),
    "q2": ("disease", ["c1", "c0", "c2", "c3", "c4"], {"c2": "synonym", "c0": "abbreviation"}),
    "q3": ("drug", ["c1", "c2", "c3", "c0", "c4"], {"c3": "string", "c4": "string", "c1": "implication"}),
    "q4": ("procedure", ["c2", "c3", "c0", "c1", "c4"], {"c0": "hyponym"}),
    "q5": ("procedure", ["c4", "c2", "c0", "c1", "c3"], {"c4": "synonym", "c2": "string"}),
}


def dissection_run():
    """Single-patient run over the hand-built fixture, scored by fixed rank."""
    from ehrdense.corpus import Chunk
    from ehrdense.evalkit import Judgments, Query, run_single_patient

    j = Judgments()
    for qid, (qtype, _, rels) in DISSECTION_FIXTURE.items():
        j.add_query(Query(qid, "n", qid, qtype))
        for cid, mt in rels.items():
            j.add_judgment(qid, f"n#{cid[1:]}", mt)
    chunks = [Chunk("n", k, 0, 1, f"c{k}") for k in range(5)]

    def score(query, candidates):
        order = [f"n#{c[1:]}" for c in DISSECTION_FIXTURE[query.query_id][1]]
        return -np.array([order.index(c) for c in candidates], dtype=float)

    return run_single_patient(None, j, chunks, score), j


# acceptance verdict lines, echoed again in the terminal summary
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
