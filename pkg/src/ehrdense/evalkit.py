"""Ranking metrics and the single-/multi-patient retrieval evaluations."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .corpus import Chunk

MATCH_TYPES = ("string", "synonym", "abbreviation", "hyponym", "implication")
QUERY_TYPES = ("disease", "procedure", "drug")
SINGLE = "single"
MULTI = "multi"
ALL_NOTES = "*"

SETTING_METRICS = {
    SINGLE: ("MRR", "NDCG", "MAP"),
    MULTI: ("MRR", "NDCG@10", "Recall@100"),
}


# -- metrics -------------------------------------------------------------------


def reciprocal_rank(ranking: Sequence[str], relevant: Iterable[str]) -> float:
    rel = set(relevant)
    for r, doc in enumerate(ranking, 1):
        if doc in rel:
            return 1.0 / r
    return 0.0


def average_precision(ranking: Sequence[str], relevant: Iterable[str]) -> float:
    """Mean precision at the rank of each relevant document; unretrieved ones count 0."""
    rel = set(relevant)
    if not rel:
        return 0.0
    hits = 0
    total = 0.0
    for r, doc in enumerate(ranking, 1):
        if doc in rel:
            hits += 1
            total += hits / r
    return total / len(rel)


def ndcg(ranking: Sequence[str], relevant: Iterable[str], cutoff: int | None = None) -> float:
    rel = set(relevant)
    if not rel:
        return 0.0
    depth = len(ranking) if cutoff is None else min(cutoff, len(ranking))
    dcg = sum(1.0 / math.log2(r + 1) for r, doc in enumerate(ranking[:depth], 1) if doc in rel)
    ideal_depth = len(rel) if cutoff is None else min(cutoff, len(rel))
    idcg = sum(1.0 / math.log2(r + 1) for r in range(1, ideal_depth + 1))
    return dcg / idcg


def recall_at(ranking: Sequence[str], relevant: Iterable[str], k: int = 100) -> float:
    rel = set(relevant)
    if not rel:
        return 0.0
    return len(rel.intersection(ranking[:k])) / len(rel)


def setting_metrics(setting: str, ranking: Sequence[str], relevant: Iterable[str]) -> dict[str, float]:
    rel = set(relevant)
    if setting == SINGLE:
        return {
            "MRR": reciprocal_rank(ranking, rel),
            "NDCG": ndcg(ranking, rel),
            "MAP": average_precision(ranking, rel),
        }
    if setting == MULTI:
        return {
            "MRR": reciprocal_rank(ranking, rel),
            "NDCG@10": ndcg(ranking, rel, 10),
            "Recall@100": recall_at(ranking, rel, 100),
        }
    raise ValueError(f"unknown setting {setting!r}")


# -- judgments -----------------------------------------------------------------


@dataclass(frozen=True)
class Query:
    query_id: str
    note_id: str
    text: str
    query_type: str


@dataclass
class Judgments:
    """Queries and their binary relevance judgments.

    ``qrels[qid][chunk_id]`` is the match type of a relevant chunk.
    """

    queries: dict[str, Query] = field(default_factory=dict)
    qrels: dict[str, dict[str, str]] = field(default_factory=dict)

    def add_query(self, query: Query) -> None:
        if query.query_id in self.queries:
            raise ValueError(f"duplicate query id {query.query_id!r}")
        self.queries[query.query_id] = query

    def add_judgment(self, query_id: str, chunk_id: str, match_type: str) -> None:
        if match_type not in MATCH_TYPES:
            raise ValueError(f"unknown match type {match_type!r}")
        rels = self.qrels.setdefault(query_id, {})
        if rels.get(chunk_id, match_type) != match_type:
            raise ValueError(f"({query_id}, {chunk_id}) judged with two match types")
        rels[chunk_id] = match_type

    def relevant(self, query_id: str, match_type: str | None = None) -> set[str]:
        rels = self.qrels.get(query_id, {})
        return {c for c, t in rels.items() if match_type is None or t == match_type}

    def setting_queries(self, setting: str) -> list[Query]:
        qs = sorted(self.queries.values(), key=lambda q: q.query_id)
        if setting == SINGLE:
            return [q for q in qs if q.note_id != ALL_NOTES]
        if setting == MULTI:
            return [q for q in qs if q.note_id == ALL_NOTES]
        raise ValueError(f"unknown setting {setting!r}")


def load_judgments(queries_path: str | Path, qrels_path: str | Path) -> Judgments:
    j = Judgments()
    with open(queries_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{queries_path}: line {lineno}: expected 4 tab-separated fields")
            qid, note_id, text, qtype = parts
            j.add_query(Query(qid, note_id, text, qtype))
    with open(qrels_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ValueError(f"{qrels_path}: line {lineno}: expected 5 tab-separated fields")
            qid, chunk_id, rel, match_type, qtype = parts
            if qid not in j.queries:
                raise ValueError(f"{qrels_path}: line {lineno}: unknown query {qid!r}")
            if qtype != j.queries[qid].query_type:
                raise ValueError(f"{qrels_path}: line {lineno}: query type disagrees with queries file")
            if int(rel) > 0:
                j.add_judgment(qid, chunk_id, match_type)
    return j


def write_judgments(j: Judgments, queries_path: str | Path, qrels_path: str | Path) -> None:
    with open(queries_path, "w", encoding="utf-8") as fh:
        for q in sorted(j.queries.values(), key=lambda q: q.query_id):
            fh.write(f"{q.query_id}\t{q.note_id}\t{q.text}\t{q.query_type}\n")
    with open(qrels_path, "w", encoding="utf-8") as fh:
        for qid in sorted(j.qrels):
            qtype = j.queries[qid].query_type
            for chunk_id in sorted(j.qrels[qid]):
                fh.write(f"{qid}\t{chunk_id}\t1\t{j.qrels[qid][chunk_id]}\t{qtype}\n")


# -- runs ----------------------------------------------------------------------

ScoreFn = Callable[[Query, Sequence[str]], np.ndarray]


def rank_candidates(chunk_ids: Sequence[str], scores: np.ndarray) -> list[tuple[str, float]]:
    """Descending score; ties broken by chunk id."""
    scores = np.asarray(scores, dtype=float)
    if not np.isfinite(scores).all():
        raise ValueError("non-finite retrieval score")
    order = sorted(range(len(chunk_ids)), key=lambda i: (-scores[i], chunk_ids[i]))
    return [(chunk_ids[i], float(scores[i])) for i in order]


@dataclass
class RunResult:
    setting: str
    rankings: dict[str, list[tuple[str, float]]]
    per_query: dict[str, dict[str, float]]

    @property
    def metrics(self) -> tuple[str, ...]:
        return SETTING_METRICS[self.setting]

    def macro(self) -> dict[str, float]:
        if not self.per_query:
            return dict.fromkeys(self.metrics, 0.0)
        return {
            m: float(np.mean([v[m] for v in self.per_query.values()])) for m in self.metrics
        }


def encoder_score_fn(encoder, chunks: Sequence[Chunk]) -> ScoreFn:
    """Cosine scorer that embeds every chunk once and caches the matrix."""
    ids = [c.chunk_id for c in chunks]
    emb = encoder.embed_chunks([c.text for c in chunks])
    row = {cid: i for i, cid in enumerate(ids)}

    def score(query: Query, candidates: Sequence[str]) -> np.ndarray:
        q = encoder.embed_queries([query.text])[0]
        return emb[[row[c] for c in candidates]] @ q

    return score


def _run(setting: str, judgments: Judgments, candidates_for, score_fn: ScoreFn) -> RunResult:
    rankings = {}
    per_query = {}
    for q in judgments.setting_queries(setting):
        cands = candidates_for(q)
        ranking = rank_candidates(cands, score_fn(q, cands))
        rankings[q.query_id] = ranking
        rel = judgments.relevant(q.query_id)
        if rel:
            per_query[q.query_id] = setting_metrics(setting, [c for c, _ in ranking], rel)
    return RunResult(setting, rankings, per_query)


def run_single_patient(
    encoder, judgments: Judgments, chunks: Sequence[Chunk], score_fn: ScoreFn | None = None
) -> RunResult:
    """Rank each query's own note chunks; queries without relevant chunks are not averaged."""
    by_note: dict[str, list[str]] = defaultdict(list)
    for c in chunks:
        by_note[c.note_id].append(c.chunk_id)

    def candidates(q: Query) -> list[str]:
        if not by_note.get(q.note_id):
            raise ValueError(f"query {q.query_id}: note {q.note_id!r} has no chunks")
        return by_note[q.note_id]

    return _run(SINGLE, judgments, candidates, score_fn or encoder_score_fn(encoder, chunks))


def run_multi_patient(
    encoder, judgments: Judgments, chunks: Sequence[Chunk], score_fn: ScoreFn | None = None
) -> RunResult:
    """Rank the whole chunk collection exhaustively for each query."""
    ids = [c.chunk_id for c in chunks]
    return _run(MULTI, judgments, lambda q: ids, score_fn or encoder_score_fn(encoder, chunks))


# -- dissection ----------------------------------------------------------------


def dissect(result: RunResult, judgments: Judgments, axis: str) -> dict[str, dict[str, float]]:
    """Per-category metric means plus their average (``avg``) and query count (``n``).

    ``match_type``: for each type, chunks relevant to the query under any
    other type are removed from its ranking, and the rest is scored against
    the relevant chunks of that type only.  ``query_type``: queries are
    grouped by type with rankings unchanged.
    """
    metrics = result.metrics
    groups: dict[str, list[dict[str, float]]] = {}
    if axis == "match_type":
        for qid, ranking in result.rankings.items():
            rels = judgments.qrels.get(qid, {})
            for t in MATCH_TYPES:
                target = {c for c, mt in rels.items() if mt == t}
                if not target:
                    continue
                kept = [c for c, _ in ranking if rels.get(c, t) == t]
                groups.setdefault(t, []).append(setting_metrics(result.setting, kept, target))
        order = MATCH_TYPES
    elif axis == "query_type":
        for qid, values in result.per_query.items():
            groups.setdefault(judgments.queries[qid].query_type, []).append(values)
        order = QUERY_TYPES + tuple(sorted(set(groups) - set(QUERY_TYPES)))
    else:
        raise ValueError(f"unknown axis {axis!r}")

    table = {}
    for cat in order:
        rows = groups.get(cat)
        if not rows:
            continue
        means = {m: float(np.mean([r[m] for r in rows])) for m in metrics}
        means["avg"] = float(np.mean([means[m] for m in metrics]))
        means["n"] = len(rows)
        table[cat] = means
    return table


# -- files ---------------------------------------------------------------------


def write_run(result: RunResult, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid in sorted(result.rankings):
            for rank, (cid, score) in enumerate(result.rankings[qid], 1):
                fh.write(f"{qid}\t{cid}\t{rank}\t{score!r}\n")


def load_run(path: str | Path) -> dict[str, list[tuple[str, float]]]:
    runs: dict[str, list[tuple[int, str, float]]] = defaultdict(list)
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                qid, cid, rank, score = line.rstrip("\n").split("\t")
                runs[qid].append((int(rank), cid, float(score)))
    return {q: [(c, s) for _, c, s in sorted(rows)] for q, rows in runs.items()}


def format_table(title: str, rows: Mapping[str, Mapping[str, float]], columns: Sequence[str]) -> str:
    width = max([len(title)] + [len(r) for r in rows])
    cw = max([12] + [len(c) + 2 for c in columns])
    head = f"{title:<{width}}" + "".join(f"{c:>{cw}}" for c in columns)
    lines = [head, "-" * len(head)]
    for name, row in rows.items():
        cells = "".join(
            f"{row[c]:>{cw}d}" if isinstance(row.get(c), int) else f"{100 * row[c]:>{cw}.2f}"
            for c in columns
        )
        lines.append(f"{name:<{width}}" + cells)
    return "\n".join(lines)


def report(results: Mapping[str, RunResult], judgments: Judgments) -> tuple[str, dict]:
    """Aligned text tables and a JSON-ready dict: overall, by match type, by query type."""
    blocks = []
    data: dict = {}
    for setting, res in results.items():
        macro = res.macro()
        entry = {"overall": macro, "n_queries": len(res.per_query)}
        blocks.append(format_table(f"{setting}-patient", {"overall": macro}, res.metrics))
        qt = dissect(res, judgments, "query_type")
        entry["query_type"] = qt
        if qt:
            blocks.append(format_table("query type", qt, list(res.metrics) + ["avg", "n"]))
        if setting == SINGLE:
            mt = dissect(res, judgments, "match_type")
            entry["match_type"] = mt
            if mt:
                blocks.append(format_table("match type", mt, list(res.metrics) + ["avg", "n"]))
        data[setting] = entry
    return "\n\n".join(blocks) + "\n", data


def write_report(results: Mapping[str, RunResult], judgments: Judgments, text_path, json_path) -> dict:
    text, data = report(results, judgments)
    Path(text_path).write_text(text, encoding="utf-8")
    Path(json_path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return data
