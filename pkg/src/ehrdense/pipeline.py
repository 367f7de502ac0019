"""Run-directory orchestration of the two-stage training pipeline.

A run directory holds every intermediate file plus ``manifest.json``, which
records the resolved configuration, its hash, the seed and the stages that
have completed.  Completed stages are skipped when the pipeline is rerun
with the same configuration.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from . import __version__
from .corpus import Chunk, load_chunks, load_notes, prepare_corpus, write_chunks
from .encoder import TextEncoder, Vocabulary, split_tokens
from .evalkit import (
    MATCH_TYPES,
    MULTI,
    SINGLE,
    Judgments,
    RunResult,
    dissect,
    format_table,
    load_judgments,
    run_multi_patient,
    run_single_patient,
    write_report,
    write_run,
)
from .generation import ChatCompletionsClient, Generator, MockGenerator, load_abbreviation_table
from .kg import KnowledgeGraph, load_kg
from .matcher import TermAutomaton, build_automaton, find_mentions, write_mentions
from .pairgen import (
    ENTITY_SOURCE,
    SOURCES,
    STAGE1_SOURCES,
    STAGE2_SOURCES,
    PositiveSet,
    build_dataset,
    clean_abbreviations,
    load_abbreviations,
    load_pairs,
    reduce_abbreviations,
    write_abbreviations,
)
from .trainer import MslConfig, TrainConfig, TrainExample, config_dict, train, write_history

log = logging.getLogger(__name__)

DEFAULT_CONFIG = """\
[data]
notes =
eval_notes =
kg_concepts =
kg_relations =
queries =
qrels =
abbreviation_table =
masks = ___

[chunking]
window = 100
overlap = 10

[generator]
backend = mock
noise_rate = 0.15
max_in_flight = 4

[encoder]
dim = 64
oov_buckets = 1024

[stage1]
positives_per_chunk = 16
batch_size = 16
epochs = 80
lr = 0.05
warmup_ratio = 0.1
weight_decay = 0.01
optimizer = adamw
in_batch_negative_filter = false

[stage2]
positives_per_chunk = 8
batch_size = 16
epochs = 2
lr = 0.05
warmup_ratio = 0.1
weight_decay = 0.01
optimizer = adamw
in_batch_negative_filter = false

[msl]
epsilon = 0.1
alpha = 2
beta = 50
lambda = 0.5

[run]
dir = run
seed = 0
jobs = 1
"""

PATH_KEYS = ("notes", "eval_notes", "kg_concepts", "kg_relations", "queries", "qrels", "abbreviation_table")
STAGE2_TYPES = {"disease": "diseases", "procedure": "clinical procedures", "drug": "drugs"}


class PipelineError(RuntimeError):
    """A stage failed; ``stage`` names it for the error message."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


# -- configuration -------------------------------------------------------------


def load_config(
    path: str | Path | None = None, overrides: Mapping[str, str] | None = None
) -> configparser.ConfigParser:
    """Defaults, then the INI file, then ``section.key`` overrides; later layers win.

    Relative data paths are resolved against the config file's directory.
    """
    cfg = configparser.ConfigParser(interpolation=None)
    cfg.read_string(DEFAULT_CONFIG)
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise PipelineError("config", f"config file not found: {path}")
        cfg.read(path, encoding="utf-8")
        base = path.resolve().parent
    for key, value in (overrides or {}).items():
        section, sep, option = key.partition(".")
        if not sep or not cfg.has_section(section):
            raise PipelineError("config", f"bad override key {key!r}, expected section.option")
        cfg.set(section, option, str(value))
    for key in PATH_KEYS:
        value = cfg.get("data", key).strip()
        if value and not Path(value).is_absolute():
            cfg.set("data", key, str(base / value))
    run_dir = cfg.get("run", "dir")
    if not Path(run_dir).is_absolute():
        cfg.set("run", "dir", str(base / run_dir))
    return cfg


def config_as_dict(cfg: configparser.ConfigParser) -> dict[str, dict[str, str]]:
    return {s: dict(cfg.items(s)) for s in cfg.sections()}


def config_hash(cfg: configparser.ConfigParser) -> str:
    # the run directory itself is not part of the experiment's identity
    data = config_as_dict(cfg)
    data["run"] = {k: v for k, v in data["run"].items() if k not in ("dir", "jobs")}
    blob = json.dumps(data, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def train_config(cfg: configparser.ConfigParser, stage: int) -> TrainConfig:
    sec = cfg[f"stage{stage}"]
    return TrainConfig(
        positives_per_chunk=sec.getint("positives_per_chunk"),
        batch_size=sec.getint("batch_size"),
        epochs=sec.getint("epochs"),
        lr=sec.getfloat("lr"),
        warmup_ratio=sec.getfloat("warmup_ratio"),
        seed=cfg.getint("run", "seed") + stage - 1,
        optimizer=sec.get("optimizer"),
        weight_decay=sec.getfloat("weight_decay"),
        in_batch_negative_filter=sec.getboolean("in_batch_negative_filter"),
    )


def msl_config(cfg: configparser.ConfigParser) -> MslConfig:
    sec = cfg["msl"]
    return MslConfig(
        epsilon=sec.getfloat("epsilon"),
        alpha=sec.getfloat("alpha"),
        beta=sec.getfloat("beta"),
        lam=sec.getfloat("lambda"),
    )


def write_train_manifest(tc: TrainConfig, msl: MslConfig, path: Path, variant: "Variant") -> None:
    out = configparser.ConfigParser(interpolation=None)
    out["train"] = {k: str(v) for k, v in config_dict(tc, msl).items()}
    out["variant"] = {
        "name": variant.name,
        "stage1": str(variant.stage1),
        "stage2": str(variant.stage2),
        "disabled": " ".join(sorted(variant.disabled)),
        "stage2_only": variant.stage2_only or "",
    }
    with open(path, "w", encoding="utf-8") as fh:
        out.write(fh)


# -- variants --------------------------------------------------------------------


@dataclass(frozen=True)
class Variant:
    """A training configuration: which stages run and which pair sources they see."""

    name: str = "full"
    stage1: bool = True
    stage2: bool = True
    disabled: frozenset[str] = frozenset()
    stage2_only: str | None = None

    def __post_init__(self):
        unknown = set(self.disabled) - set(SOURCES)
        if unknown:
            raise ValueError(f"unknown pair source(s): {', '.join(sorted(unknown))}")
        if self.stage2_only is not None and self.stage2_only not in STAGE2_TYPES:
            raise ValueError(f"unknown stage-2 type {self.stage2_only!r}; choose from {', '.join(STAGE2_TYPES)}")

    @property
    def slug(self) -> str:
        """File-name prefix; distinct variants get distinct slugs."""
        parts = [] if self.stage1 else ["no-stage1"]
        if not self.stage2:
            parts.append("no-stage2")
        parts += [f"no-{s}" for s in sorted(self.disabled)]
        if self.stage2_only:
            parts.append(f"only-{self.stage2_only}")
        return "_".join(parts) or "full"

    def sources(self, stage: int) -> set[str]:
        if stage == 1:
            return set(STAGE1_SOURCES) - self.disabled if self.stage1 else set()
        if not self.stage2:
            return set()
        allowed = set(STAGE2_SOURCES) - self.disabled
        if self.stage2_only is not None:
            allowed &= {ENTITY_SOURCE[STAGE2_TYPES[self.stage2_only]]}
        return allowed


def ablation_variants(
    without: Iterable[str] = (),
    stage2_only: Iterable[str] = (),
    disable: Iterable[str] = (),
    untrained: bool = False,
) -> list[Variant]:
    out = []
    if untrained:
        out.append(Variant("untrained", stage1=False, stage2=False))
    for stage in without:
        if stage not in ("stage1", "stage2"):
            raise ValueError(f"--without takes stage1 or stage2, got {stage!r}")
        out.append(Variant(f"w/o {stage}", stage1=stage != "stage1", stage2=stage != "stage2"))
    for t in stage2_only:
        out.append(Variant(f"stage1 + {t} only", stage2_only=t))
    for src in disable:
        out.append(Variant(f"w/o {src}", disabled=frozenset({src})))
    return out


def filter_sets(sets: Sequence[PositiveSet], sources: set[str]) -> list[PositiveSet]:
    return [PositiveSet(ps.chunk_id, [s for s in ps.samples if s.source in sources]) for ps in sets]


# -- the pipeline ----------------------------------------------------------------


@dataclass
class Pipeline:
    cfg: configparser.ConfigParser
    resume: bool = True
    run_dir: Path = field(init=False)
    _cache: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        self.run_dir = Path(self.cfg.get("run", "dir"))
        self.seed = self.cfg.getint("run", "seed")
        self.jobs = max(1, self.cfg.getint("run", "jobs"))
        self.hash = config_hash(self.cfg)

    # manifest

    @property
    def manifest_path(self) -> Path:
        return self.run_dir / "manifest.json"

    def manifest(self) -> dict:
        if self.manifest_path.is_file():
            data = json.loads(self.manifest_path.read_text(encoding="utf-8"))
            if data.get("config_hash") == self.hash:
                return data
            log.info("run directory %s holds another configuration; starting over", self.run_dir)
        return {
            "version": __version__,
            "config_hash": self.hash,
            "seed": self.seed,
            "config": config_as_dict(self.cfg),
            "stages": {},
        }

    def _record(self, stage: str, outputs: Sequence[Path], **info) -> None:
        data = self.manifest()
        data["stages"][stage] = {"outputs": sorted(str(p.relative_to(self.run_dir)) for p in outputs), **info}
        tmp = self.manifest_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, self.manifest_path)

    def done(self, stage: str) -> bool:
        if not self.resume:
            return False
        entry = self.manifest()["stages"].get(stage)
        return entry is not None and all((self.run_dir / p).exists() for p in entry["outputs"])

    def path(self, name: str) -> Path:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        return self.run_dir / name

    # inputs

    def _input(self, key: str, stage: str) -> Path:
        value = self.cfg.get("data", key).strip()
        if not value:
            raise PipelineError(stage, f"no path configured for data.{key}")
        p = Path(value)
        if not p.exists():
            raise PipelineError(stage, f"missing input {key}: {p}")
        return p

    def check_inputs(self) -> None:
        """Fail before any work if a configured input is missing."""
        required = ["notes", "kg_concepts", "kg_relations", "eval_notes", "queries", "qrels"]
        if self.cfg.get("generator", "backend") == "mock" and self.cfg.get("data", "abbreviation_table").strip():
            required.append("abbreviation_table")
        for key in required:
            self._input(key, "config")

    def kg(self) -> KnowledgeGraph:
        if "kg" not in self._cache:
            concepts = self._input("kg_concepts", "kg")
            relations = self._input("kg_relations", "kg")
            try:
                self._cache["kg"] = load_kg(concepts, relations)
            except ValueError as exc:
                raise PipelineError("kg", str(exc)) from exc
        return self._cache["kg"]

    def automaton(self) -> TermAutomaton:
        if "automaton" not in self._cache:
            try:
                self._cache["automaton"] = build_automaton(self.kg())
            except ValueError as exc:
                raise PipelineError("match", str(exc)) from exc
        return self._cache["automaton"]

    def client(self) -> Generator:
        if "client" not in self._cache:
            backend = self.cfg.get("generator", "backend")
            if backend == "mock":
                table_path = self.cfg.get("data", "abbreviation_table").strip()
                table = load_abbreviation_table(self._input("abbreviation_table", "generator")) if table_path else {}
                self._cache["client"] = MockGenerator(
                    self.kg(),
                    table,
                    seed=self.seed,
                    noise_rate=self.cfg.getfloat("generator", "noise_rate"),
                    automaton=self.automaton(),
                )
            elif backend == "http":
                self._cache["client"] = ChatCompletionsClient.from_env(
                    max_in_flight=min(self.jobs, self.cfg.getint("generator", "max_in_flight"))
                )
            else:
                raise PipelineError("generator", f"unknown backend {backend!r}")
        return self._cache["client"]

    def judgments(self) -> Judgments:
        if "judgments" not in self._cache:
            try:
                self._cache["judgments"] = load_judgments(
                    self._input("queries", "eval"), self._input("qrels", "eval")
                )
            except ValueError as exc:
                raise PipelineError("eval", str(exc)) from exc
        return self._cache["judgments"]

    def _notes_to_chunks(self, key: str, out: Path) -> list[Chunk]:
        try:
            notes = load_notes(self._input(key, "chunk"))
            masks = tuple(m for m in self.cfg.get("data", "masks").split() if m)
            chunks = prepare_corpus(
                notes, masks, self.cfg.getint("chunking", "window"), self.cfg.getint("chunking", "overlap")
            )
        except ValueError as exc:
            raise PipelineError("chunk", str(exc)) from exc
        write_chunks(chunks, out)
        return chunks

    # stages

    def chunk(self) -> list[Chunk]:
        out = self.path("chunks.jsonl")
        outputs = [out]
        if not self.done("chunk"):
            chunks = self._notes_to_chunks("notes", out)
            if self.cfg.get("data", "eval_notes").strip():
                outputs.append(self.path("eval_chunks.jsonl"))
                self._notes_to_chunks("eval_notes", outputs[-1])
            self._record("chunk", outputs, n_chunks=len(chunks))
            return chunks
        return load_chunks(out)

    def eval_chunks(self) -> list[Chunk]:
        self.chunk()
        p = self.run_dir / "eval_chunks.jsonl"
        if not p.exists():
            raise PipelineError("eval", "no evaluation notes configured (data.eval_notes)")
        return load_chunks(p)

    def match(self) -> Path:
        out = self.path("mentions.jsonl")
        if not self.done("match"):
            chunks = self.chunk()
            auto = self.automaton()
            write_mentions(((c.chunk_id, find_mentions(auto, c.text)) for c in chunks), out)
            self._record("match", [out])
        return out

    def abbrev(self) -> dict:
        out = self.path("abbreviations.jsonl")
        if not self.done("abbrev"):
            chunks = self.chunk()
            kg, client = self.kg(), self.client()
            records = []
            removed = 0
            for c in chunks:
                raw = reduce_abbreviations(client, c.text, c.chunk_id)
                kept = clean_abbreviations(raw, c.text, kg)
                removed += len(raw) - len(kept)
                records.append((c.chunk_id, kept))
            write_abbreviations(records, out)
            self._record("abbrev", [out], removed=removed)
        return load_abbreviations(out)

    def pairs(self, stage: int) -> list[PositiveSet]:
        name = f"pairs{stage}"
        out = self.path(f"pairs_stage{stage}.jsonl")
        stats_txt = self.path(f"stats_stage{stage}.txt")
        if not self.done(name):
            chunks = self.chunk()
            try:
                if stage == 1:
                    abbreviations = self.abbrev()
                    sets, stats = build_dataset(
                        1, chunks, self.kg(), None, self.seed, out, self.automaton(), abbreviations, self.jobs
                    )
                else:
                    sets, stats = build_dataset(2, chunks, self.kg(), self.client(), self.seed, out, jobs=self.jobs)
            except Exception as exc:
                raise PipelineError(f"pairs --stage {stage}", str(exc)) from exc
            stats_txt.write_text(stats.format() + "\n", encoding="utf-8")
            self._record(name, [out, stats_txt])
        return load_pairs(out)

    def vocabulary(self) -> Vocabulary:
        """Training-chunk tokens plus every knowledge-graph term token."""
        if "vocab" not in self._cache:
            tokens = set()
            for c in self.chunk():
                tokens.update(split_tokens(c.text))
            for concept in self.kg().concepts.values():
                for t in concept.terms:
                    tokens.update(split_tokens(t))
            self._cache["vocab"] = Vocabulary(tokens, self.cfg.getint("encoder", "oov_buckets"))
        return self._cache["vocab"]

    def initial_encoder(self) -> TextEncoder:
        return TextEncoder.create(self.vocabulary(), self.cfg.getint("encoder", "dim"), self.seed)

    def train_stage(self, stage: int, variant: Variant = Variant(), prefix: str = "") -> TextEncoder:
        """Train one stage of ``variant``; returns the encoder after that stage.

        Variants whose Stage-I data equals the full pipeline's share its
        Stage-I encoder instead of retraining it.
        """
        if stage == 1 and variant.sources(1) == set(STAGE1_SOURCES):
            prefix = ""
        name = f"{prefix}train{stage}"
        enc_path = self.path(f"{prefix}encoder_stage{stage}.bin")
        hist_path = self.path(f"{prefix}history_stage{stage}.csv")
        if self.done(name):
            return TextEncoder.load(enc_path)
        if stage == 1:
            encoder = self.initial_encoder()
        else:
            encoder = self.train_stage(1, variant, prefix) if variant.stage1 else self.initial_encoder()
        sources = variant.sources(stage)
        sets = filter_sets(self.pairs(stage), sources) if sources else []
        texts = {c.chunk_id: c.text for c in self.chunk()}
        examples = [TrainExample(ps.chunk_id, texts[ps.chunk_id], ps.terms()) for ps in sets if ps.samples]
        history: list[dict] = []
        if examples:
            try:
                history = train(examples, encoder, train_config(self.cfg, stage), msl_config(self.cfg)).history
            except ValueError as exc:
                raise PipelineError(f"train --stage {stage}", str(exc)) from exc
        else:
            log.info("%s stage %d: no training pairs, encoder passed through", variant.name, stage)
        manifest_path = self.path(f"{prefix}train_stage{stage}.ini")
        write_train_manifest(train_config(self.cfg, stage), msl_config(self.cfg), manifest_path, variant)
        encoder.save(enc_path)
        write_history(history, hist_path)
        self._record(name, [enc_path, hist_path, manifest_path], steps=len(history))
        return encoder

    def evaluate(
        self, encoder: TextEncoder, settings: Sequence[str] = (SINGLE, MULTI), prefix: str = ""
    ) -> dict[str, RunResult]:
        chunks = self.eval_chunks()
        judgments = self.judgments()
        results = {}
        try:
            for setting in settings:
                run = run_single_patient if setting == SINGLE else run_multi_patient
                results[setting] = run(encoder, judgments, chunks)
                write_run(results[setting], self.path(f"{prefix}run_{setting}.tsv"))
        except ValueError as exc:
            raise PipelineError("eval", str(exc)) from exc
        return results

    def run_variant(self, variant: Variant = Variant(), prefix: str = "") -> dict[str, RunResult]:
        encoder = self.train_stage(2, variant, prefix)
        results = self.evaluate(encoder, prefix=prefix)
        write_report(results, self.judgments(), self.path(f"{prefix}report.txt"), self.path(f"{prefix}report.json"))
        return results

    def run(self) -> dict[str, RunResult]:
        """Chunk, match, reduce abbreviations, build both pair sets, train both stages, evaluate."""
        self.check_inputs()
        self.match()
        self.pairs(1)
        self.train_stage(1)
        self.pairs(2)
        return self.run_variant()

    def ablate(self, variants: Sequence[Variant]) -> tuple[str, dict]:
        """Full pipeline plus one row per variant, as comparison tables."""
        rows = {"full": self.run()}
        for v in variants:
            rows[v.name] = self.run_variant(v, prefix=f"ablation_{v.slug}_")
        return comparison(rows, self.judgments())


def comparison(rows: Mapping[str, Mapping[str, RunResult]], judgments: Judgments) -> tuple[str, dict]:
    """One table per setting and one by match type; each row a training configuration."""
    blocks, data = [], {}
    for setting in (SINGLE, MULTI):
        table = {name: res[setting].macro() for name, res in rows.items() if setting in res}
        if table:
            metrics = next(iter(r[setting] for r in rows.values() if setting in r)).metrics
            blocks.append(format_table(f"{setting}-patient", table, metrics))
            data[setting] = table
    by_type = {}
    for name, res in rows.items():
        if SINGLE in res:
            by_type[name] = {t: v["MRR"] for t, v in dissect(res[SINGLE], judgments, "match_type").items()}
    if by_type:
        types = [t for t in MATCH_TYPES if any(t in r for r in by_type.values())]
        filled = {n: {t: r.get(t, 0.0) for t in types} for n, r in by_type.items()}
        blocks.append(format_table("MRR by match type", filled, types))
        data["match_type_mrr"] = filled
    return "\n\n".join(blocks) + "\n", data
