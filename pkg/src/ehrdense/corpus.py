"""Note cleaning and fixed-size overlapping word chunking."""

from __future__ import annotations

import json
import re
import unicodedata
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

DEFAULT_MASKS = ("___",)

_RUN = re.compile(r"(.)\1+", re.DOTALL)


@dataclass(frozen=True)
class Note:
    note_id: str
    text: str


@dataclass(frozen=True)
class Chunk:
    note_id: str
    ordinal: int
    start_word: int
    end_word: int
    text: str

    @property
    def chunk_id(self) -> str:
        return f"{self.note_id}#{self.ordinal}"

    def to_json(self) -> dict:
        return {
            "note_id": self.note_id,
            "ordinal": self.ordinal,
            "start_word": self.start_word,
            "end_word": self.end_word,
            "text": self.text,
        }


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch)[0] in "PS"


def _collapse(match: re.Match) -> str:
    ch = match.group(1)
    return ch if _is_punct(ch) else match.group(0)


def clean_note(raw: str, mask_patterns: Sequence[str] = DEFAULT_MASKS) -> str:
    """Remove masks, collapse repeated punctuation, lowercase, squeeze whitespace.

    Mask patterns are regular expressions; a plain string such as ``"___"``
    works as-is since it has no special characters.

    >>> clean_note("Pt has HTN ___ and CHF!!!")
    'pt has htn and chf!'
    """
    text = raw
    for pattern in mask_patterns:
        text = re.sub(pattern, " ", text)
    text = _RUN.sub(_collapse, text)
    return " ".join(text.lower().split())


def chunk_note(note: Note, window: int = 100, overlap: int = 10) -> list[Chunk]:
    """Split a note into word windows starting every ``window - overlap`` words.

    The first window reaching the end of the note is clipped and is the last
    one emitted, so the tail chunk may be short.
    """
    if window <= 0 or not 0 <= overlap < window:
        raise ValueError(f"need 0 <= overlap < window, got window={window}, overlap={overlap}")
    words = note.text.split()
    n = len(words)
    stride = window - overlap
    chunks = []
    start = 0
    while start < n:
        end = min(start + window, n)
        chunks.append(Chunk(note.note_id, len(chunks), start, end, " ".join(words[start:end])))
        if end == n:
            break
        start += stride
    return chunks


def prepare_corpus(
    notes: Iterable[Note],
    mask_patterns: Sequence[str] = DEFAULT_MASKS,
    window: int = 100,
    overlap: int = 10,
) -> list[Chunk]:
    """Clean every note, drop the ones left empty, and chunk the rest in order."""
    chunks: list[Chunk] = []
    for note in notes:
        text = clean_note(note.text, mask_patterns)
        if text:
            chunks.extend(chunk_note(Note(note.note_id, text), window, overlap))
    return chunks


def load_notes(path: str | Path) -> list[Note]:
    notes = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict) or "note_id" not in obj or "text" not in obj:
                raise ValueError(f"{path}: line {lineno}: expected an object with note_id and text")
            note_id = str(obj["note_id"])
            if note_id in seen:
                raise ValueError(f"{path}: line {lineno}: duplicate note_id {note_id!r}")
            seen.add(note_id)
            notes.append(Note(note_id, str(obj["text"])))
    return notes


def write_notes(notes: Iterable[Note], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for note in notes:
            fh.write(json.dumps({"note_id": note.note_id, "text": note.text}) + "\n")


def write_chunks(chunks: Iterable[Chunk], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for chunk in chunks:
            fh.write(json.dumps(chunk.to_json()) + "\n")


def load_chunks(path: str | Path) -> list[Chunk]:
    chunks = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                chunks.append(
                    Chunk(
                        str(obj["note_id"]),
                        int(obj["ordinal"]),
                        int(obj["start_word"]),
                        int(obj["end_word"]),
                        str(obj["text"]),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}: line {lineno}: bad chunk record ({exc})") from None
    return chunks
