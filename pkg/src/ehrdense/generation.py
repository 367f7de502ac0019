"""Text-generation clients used for abbreviation reduction and synthetic entities.

Two implementations share one method, ``generate(task, note, entity_type)``,
returning the raw response text:

* ``ChatCompletionsClient`` posts a rendered prompt to an OpenAI-style
  ``/chat/completions`` endpoint.
* ``MockGenerator`` answers offline from the knowledge graph, so pipelines and
  tests run without any model.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
import urllib.error
import urllib.request
import zlib
from importlib import resources
from pathlib import Path
from typing import Mapping, Protocol

import numpy as np

from .kg import KnowledgeGraph
from .matcher import TermAutomaton, build_automaton, find_mentions, is_boundary

log = logging.getLogger(__name__)

ABBREVIATION = "abbreviation"
SYNTHETIC = "synthetic"
ENTITY_TYPES = ("diseases", "clinical procedures", "drugs")

ENTITY_GROUPS = {
    "diseases": frozenset({"Disease, Syndrome or Pathologic Function", "Sign, Symptom, or Finding"}),
    "clinical procedures": frozenset(
        {"Laboratory Procedure", "Diagnostic Procedure", "Therapeutic or Preventive Procedure"}
    ),
    "drugs": frozenset({"Chemical or Drug"}),
}

# relation kinds the mock follows to simulate entities inferred rather than stated
IMPLIED_KINDS = frozenset({"may_treat", "may_cause"})


class GenerationError(RuntimeError):
    pass


class Generator(Protocol):
    def generate(self, task: str, note: str, entity_type: str | None = None) -> str: ...


def load_template(name: str, directory: str | Path | None = None) -> str:
    if directory is not None:
        return Path(directory, f"{name}.txt").read_text(encoding="utf-8")
    return resources.files("ehrdense.prompts").joinpath(f"{name}.txt").read_text(encoding="utf-8")


def render_prompt(template: str, note: str, entity_type: str | None = None) -> str:
    # str.replace rather than str.format: notes may contain braces
    out = template.replace("{note}", note)
    if entity_type is not None:
        out = out.replace("{entity_type}", entity_type)
    return out


class ChatCompletionsClient:
    """Client for a chat-completions inference server.

    Requests are sent at temperature 0. Transport errors and 5xx/429
    responses are retried with exponential backoff; at most
    ``max_in_flight`` requests are outstanding across threads.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str | None = None,
        timeout: float = 60.0,
        max_retries: int = 3,
        max_in_flight: int = 4,
        template_dir: str | Path | None = None,
        backoff: float = 0.5,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self.templates = {
            ABBREVIATION: load_template(ABBREVIATION, template_dir),
            SYNTHETIC: load_template(SYNTHETIC, template_dir),
        }

    @classmethod
    def from_env(cls, env: Mapping[str, str] | None = None, **kwargs) -> "ChatCompletionsClient":
        env = os.environ if env is None else env
        try:
            base_url = env["GEN_BASE_URL"]
            model = env["GEN_MODEL"]
        except KeyError as exc:
            raise GenerationError(f"missing environment variable {exc.args[0]}") from None
        return cls(
            base_url,
            model,
            api_key=env.get("GEN_API_KEY"),
            timeout=float(env.get("GEN_TIMEOUT_S", 60)),
            max_retries=int(env.get("GEN_MAX_RETRIES", 3)),
            **kwargs,
        )

    def payload(self, task: str, note: str, entity_type: str | None = None) -> dict:
        if task not in self.templates:
            raise ValueError(f"unknown task {task!r}")
        prompt = render_prompt(self.templates[task], note, entity_type)
        return {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        }

    def generate(self, task: str, note: str, entity_type: str | None = None) -> str:
        body = json.dumps(self.payload(task, note, entity_type)).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last: Exception | None = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            req = urllib.request.Request(
                f"{self.base_url}/chat/completions", data=body, headers=headers, method="POST"
            )
            try:
                with self._slots, urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    data = json.loads(resp.read().decode("utf-8"))
                return data["choices"][0]["message"]["content"] or ""
            except urllib.error.HTTPError as exc:
                last = exc
                if exc.code != 429 and exc.code < 500:
                    break
            except (urllib.error.URLError, TimeoutError, ConnectionError) as exc:
                last = exc
            except (KeyError, IndexError, TypeError, json.JSONDecodeError) as exc:
                raise GenerationError(f"malformed response from {self.base_url}: {exc}") from exc
        raise GenerationError(f"request to {self.base_url} failed: {last}")


def _note_rng(seed: int, *parts: str) -> np.random.Generator:
    return np.random.default_rng([seed] + [zlib.crc32(p.encode("utf-8")) for p in parts])


class MockGenerator:
    """Offline stand-in for the LLM, driven by the knowledge graph.

    Abbreviation requests return ``abbr = full name`` for every entry of
    ``abbreviations`` present in the note, plus some deliberately noisy pairs
    that the cleaning rules are expected to remove.  Entity requests return
    the terms of matching type found in the note plus the preferred terms of
    their ``may_treat``/``may_cause`` targets; with probability
    ``noise_rate`` an unrelated entity is appended.  Output is a function of
    (seed, note, request) only.
    """

    def __init__(
        self,
        kg: KnowledgeGraph,
        abbreviations: Mapping[str, str] | None = None,
        seed: int = 0,
        noise_rate: float = 0.15,
        automaton: TermAutomaton | None = None,
    ):
        self.kg = kg
        self.abbreviations = dict(abbreviations or {})
        self.seed = seed
        self.noise_rate = noise_rate
        self.automaton = automaton or build_automaton(kg)
        self._group_terms = {
            et: sorted(
                c.preferred_term for c in kg.concepts.values() if c.semantic_type in group
            )
            for et, group in ENTITY_GROUPS.items()
        }
        self.calls = 0

    def generate(self, task: str, note: str, entity_type: str | None = None) -> str:
        self.calls += 1
        rng = _note_rng(self.seed, task, entity_type or "", note)
        if task == ABBREVIATION:
            lines = self._abbreviations(note, rng)
        elif task == SYNTHETIC:
            if entity_type not in ENTITY_GROUPS:
                raise ValueError(f"unknown entity type {entity_type!r}")
            lines = self._entities(note, entity_type, rng)
        else:
            raise ValueError(f"unknown task {task!r}")
        return "\n".join(_decorate(lines, rng))

    def _abbreviations(self, note: str, rng: np.random.Generator) -> list[str]:
        lines = []
        for abbr in sorted(self.abbreviations):
            if _occurs(note, abbr):
                lines.append(f"{abbr} = {self.abbreviations[abbr]}")
        words = sorted(set(note.split()))
        if words and rng.random() < 0.5:
            w = words[int(rng.integers(len(words)))]
            lines.append(f"{w} = {w}")
        if rng.random() < 0.3:
            lines.append("q = every")
        if rng.random() < 0.3:
            lines.append("prn = as needed")
        if rng.random() < 0.2 and self.abbreviations:
            keys = sorted(self.abbreviations)
            k = keys[int(rng.integers(len(keys)))]
            if not _occurs(note, k):
                lines.append(f"{k} = {self.abbreviations[k]}")
        if rng.random() < 0.2:
            lines.append("Abbreviations found in the note:")
        return lines

    def _entities(self, note: str, entity_type: str, rng: np.random.Generator) -> list[str]:
        group = ENTITY_GROUPS[entity_type]
        out: list[str] = []
        implied: list[str] = []
        for m in find_mentions(self.automaton, note):
            for cid in sorted(m.concept_ids):
                c = self.kg.concepts[cid]
                if c.semantic_type in group:
                    out.append(m.surface)
                for r in self.kg.out_edges(cid):
                    tail = self.kg.concepts[r.tail]
                    if r.kind in IMPLIED_KINDS and tail.semantic_type in group:
                        implied.append(tail.preferred_term)
        out.extend(implied)
        pool = self._group_terms[entity_type]
        if pool and rng.random() < self.noise_rate:
            out.append(pool[int(rng.integers(len(pool)))])
        seen = set()
        return [t for t in out if not (t in seen or seen.add(t))]


def _occurs(text: str, term: str) -> bool:
    start = text.find(term)
    while start >= 0:
        if is_boundary(text, start) and is_boundary(text, start + len(term)):
            return True
        start = text.find(term, start + 1)
    return False


def _decorate(lines: list[str], rng: np.random.Generator) -> list[str]:
    style = int(rng.integers(3))
    if style == 0:
        return lines
    if style == 1:
        return [f"- {line}" for line in lines]
    return [f"{i}. {line}" for i, line in enumerate(lines, 1)]


def load_abbreviation_table(path: str | Path) -> dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        table = json.load(fh)
    if not isinstance(table, dict):
        raise ValueError(f"{path}: expected a JSON object mapping abbreviation to full name")
    return {str(k).lower(): str(v).lower() for k, v in table.items()}

