"""Clinical note cleanup: de-identification scrubbing, abbreviation
expansion, sentence segmentation, and packing into fixed-length token chunks.

All functions here are pure; tables and vocabularies are immutable after
construction, so everything is safe to call concurrently.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

DEFAULT_CHUNK_LEN = 128

_DEID_CLOSED = re.compile(r"\[\*\*[^\n]*?\*\*\]")
_DEID_OPEN = re.compile(r"\[\*\*[^\n]*")
_WORD = re.compile(r"[a-z0-9]+")

# Tokens that end with '.' but do not close a sentence.
_BOUNDARY_GUARDS = frozenset(
    {
        "dr.", "mr.", "mrs.", "ms.", "st.", "vs.", "e.g.", "i.e.", "etc.",
        "mg.", "ml.", "mcg.", "kg.", "lb.", "oz.", "hr.", "min.", "sec.",
        "q.d.", "b.i.d.", "t.i.d.", "q.i.d.", "p.r.n.", "a.m.", "p.m.",
        "p.o.", "i.v.", "i.m.", "s.c.", "q.h.s.", "no.",
    }
)

_LIST_MARKER = re.compile(r"^\s*(?:\d{1,3}[.)]|[-*#•])\s+")


@dataclass(frozen=True)
class RawNote:
    """One free-text note as it arrives from a corpus file."""

    note_id: str
    subject_id: str
    hadm_id: str = ""
    text: str = ""

    def __post_init__(self) -> None:
        if not self.note_id:
            raise ConfigError("note_id must be non-empty")


def strip_deid(text: str) -> str:
    """Remove ``[** ... **]`` de-identification placeholders.

    Horizontal whitespace touching a removal collapses to a single space;
    against a line break or the text edge it vanishes entirely, so blank-line
    structure elsewhere is untouched.  An unclosed ``[**`` is stripped to the
    end of its line.  Idempotent; never raises.
    """
    while True:
        m = _DEID_CLOSED.search(text) or _DEID_OPEN.search(text)
        if m is None:
            return text
        start, end = m.span()
        while start > 0 and text[start - 1] in " \t":
            start -= 1
        while end < len(text) and text[end] in " \t":
            end += 1
        before = text[start - 1] if start > 0 else ""
        after = text[end] if end < len(text) else ""
        if before == "\n" and after == "\n":
            end += 1  # the placeholder had a line to itself
        glue = " " if before and after and "\n" not in (before, after) else ""
        text = text[:start] + glue + text[end:]


@dataclass(frozen=True)
class AbbreviationTable:
    """Ordered (abbreviation, expansion) pairs; matching is case-insensitive."""

    entries: tuple[tuple[str, str], ...]
    _by_first: dict[str, list[tuple[str, str]]] = field(
        default_factory=dict, init=False, repr=False, compare=False
    )

    def __post_init__(self) -> None:
        seen: set[str] = set()
        buckets: dict[str, list[tuple[str, str]]] = {}
        for key, expansion in self.entries:
            if not key:
                raise ConfigError("abbreviation keys must be non-empty")
            low = key.lower()
            if low in seen:
                raise ConfigError(f"duplicate abbreviation key: {key!r}")
            seen.add(low)
            buckets.setdefault(low[0], []).append((low, expansion))
        for bucket in buckets.values():
            bucket.sort(key=lambda kv: -len(kv[0]))
        object.__setattr__(self, "_by_first", buckets)

    @classmethod
    def from_tsv(cls, path: str | Path) -> "AbbreviationTable":
        """Load ``key<TAB>expansion`` lines; ``#`` comments and blanks skipped."""
        entries = []
        for raw in Path(path).read_text(encoding="utf-8").splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "\t" not in line:
                raise ConfigError(f"malformed abbreviation line: {raw!r}")
            key, expansion = line.split("\t", 1)
            entries.append((key.strip(), expansion.strip()))
        return cls(tuple(entries))


def _is_word_char(ch: str) -> bool:
    return ch.isalnum()


def expand_abbreviations(text: str, table: AbbreviationTable) -> str:
    """Replace each word-boundary occurrence of a table key with its expansion.

    Longest key wins at a given position, replacements are never re-scanned,
    and text between matches is passed through byte-identical.
    """
    if not text or not table.entries:
        return text
    low = text.lower()
    out: list[str] = []
    i = 0
    n = len(text)
    buckets = table._by_first
    while i < n:
        candidates = buckets.get(low[i])
        if candidates:
            before_ok = i == 0 or not _is_word_char(text[i - 1])
            for key, expansion in candidates:
                if not low.startswith(key, i):
                    continue
                end = i + len(key)
                if _is_word_char(key[0]) and not before_ok:
                    continue
                if _is_word_char(key[-1]) and end < n and _is_word_char(text[end]):
                    continue
                out.append(expansion)
                i = end
                break
            else:
                out.append(text[i])
                i += 1
        else:
            out.append(text[i])
            i += 1
    return "".join(out)


def _normalize_ws(text: str) -> str:
    return " ".join(text.split())


def _split_terminal_punct(segment: str) -> list[str]:
    """Split one whitespace-normalized segment at sentence-ending punctuation."""
    pieces: list[str] = []
    start = 0
    for m in re.finditer(r"[.!?]+ ", segment):
        end = m.end() - 1  # boundary sits on the space
        nxt = segment[m.end()] if m.end() < len(segment) else ""
        if not (nxt.isupper() or nxt.isdigit()):
            continue
        word = re.search(r"\S+$", segment[:end])
        if word and word.group().lower() in _BOUNDARY_GUARDS:
            continue
        # a numbered list marker opening the piece is not a sentence end
        if word and word.start() == start and re.fullmatch(r"\d{1,3}[.)]", word.group()):
            continue
        pieces.append(segment[start:end].strip())
        start = m.end()
    pieces.append(segment[start:].strip())
    return [p for p in pieces if p]


def split_sentences(text: str) -> list[str]:
    """Segment cleaned note text into sentences.

    Boundaries: terminal ``. ! ?`` followed by whitespace and a capital or
    digit (guarded against common clinical abbreviations), blank lines, and
    leading list markers such as ``1.`` or ``-``.  Joining the result with
    single spaces reproduces the whitespace-normalized input.
    """
    sentences: list[str] = []
    for block in re.split(r"\n\s*\n", text):
        segments: list[str] = []
        current: list[str] = []
        for line in block.split("\n"):
            if _LIST_MARKER.match(line) and current:
                segments.append(" ".join(current))
                current = [line]
            else:
                current.append(line)
        if current:
            segments.append(" ".join(current))
        for segment in segments:
            norm = _normalize_ws(segment)
            if norm:
                sentences.extend(_split_terminal_punct(norm))
    return sentences


def tokenize(text: str) -> list[str]:
    """Lowercased word-level tokens (alphanumeric runs)."""
    return _WORD.findall(text.lower())


class Vocabulary:
    """Immutable word-to-id table with reserved pad (0) and unknown (1) ids."""

    def __init__(self, words: list[str]):
        self.id_to_token = [PAD_TOKEN, UNK_TOKEN, *words]
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ConfigError("vocabulary contains duplicate words")

    def __len__(self) -> int:
        return len(self.id_to_token)

    @classmethod
    def build(
        cls,
        texts: list[str] | list[list[str]],
        min_count: int = 1,
        max_size: int | None = None,
    ) -> "Vocabulary":
        """Build from raw strings or pre-tokenized lists.

        Words are ordered by descending frequency, ties alphabetical, so the
        same corpus always yields the same id assignment.
        """
        counts: dict[str, int] = {}
        for item in texts:
            tokens = tokenize(item) if isinstance(item, str) else item
            for tok in tokens:
                counts[tok] = counts.get(tok, 0) + 1
        ranked = sorted(
            (w for w, c in counts.items() if c >= min_count),
            key=lambda w: (-counts[w], w),
        )
        if max_size is not None:
            ranked = ranked[: max(0, max_size - 2)]
        return cls(ranked)

    def encode(self, text: str | list[str]) -> list[int]:
        tokens = tokenize(text) if isinstance(text, str) else text
        unk = UNK_ID
        return [self.token_to_id.get(tok, unk) for tok in tokens]

    def to_json(self) -> str:
        return json.dumps({"words": self.id_to_token[2:]})

    @classmethod
    def from_json(cls, payload: str) -> "Vocabulary":
        return cls(json.loads(payload)["words"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class TokenChunk:
    """Fixed-length token-id sequence with a contiguous-prefix mask.

    ``token_ids`` and ``mask`` both have length L; positions with ``mask == 0``
    carry ``PAD_ID``.  ``source_sentence_range`` is the half-open span of
    sentence indices the chunk covers.
    """

    token_ids: tuple[int, ...]
    mask: tuple[int, ...]
    source_sentence_range: tuple[int, int]

    def __post_init__(self) -> None:
        if len(self.token_ids) != len(self.mask):
            raise ConfigError("token_ids and mask must have equal length")
        n = sum(self.mask)
        if tuple(self.mask) != (1,) * n + (0,) * (len(self.mask) - n):
            raise ConfigError("mask must be a contiguous prefix of ones")
        if any(t != PAD_ID for t, m in zip(self.token_ids, self.mask) if m == 0):
            raise ConfigError("masked-out positions must carry PAD_ID")

    @property
    def length(self) -> int:
        return sum(self.mask)

    def ids_array(self) -> np.ndarray:
        return np.asarray(self.token_ids, dtype=np.int64)

    def mask_array(self) -> np.ndarray:
        return np.asarray(self.mask, dtype=np.int64)


def _make_chunk(ids: list[int], start: int, end: int, chunk_len: int) -> TokenChunk:
    ids = ids[:chunk_len]
    pad = chunk_len - len(ids)
    return TokenChunk(
        token_ids=tuple(ids) + (PAD_ID,) * pad,
        mask=(1,) * len(ids) + (0,) * pad,
        source_sentence_range=(start, end),
    )


def chunk_and_tokenize(
    sentences: list[str],
    vocab: Vocabulary,
    chunk_len: int = DEFAULT_CHUNK_LEN,
) -> list[TokenChunk]:
    """Greedily pack consecutive sentences into chunks of at most ``chunk_len``
    tokens.

    A single sentence longer than ``chunk_len`` is truncated.  The
    ``source_sentence_range`` values of the result partition
    ``[0, len(sentences))`` in order.
    """
    if chunk_len < 2:
        raise ConfigError("chunk_len must be at least 2")
    chunks: list[TokenChunk] = []
    current: list[int] = []
    start = 0
    for idx, sentence in enumerate(sentences):
        ids = vocab.encode(sentence)
        if current and len(current) + len(ids) > chunk_len:
            chunks.append(_make_chunk(current, start, idx, chunk_len))
            current = []
            start = idx
        if not current and len(ids) > chunk_len:
            # over-length sentence: truncate; the range also absorbs any
            # pending token-free sentences so coverage stays a partition
            chunks.append(_make_chunk(ids, start, idx + 1, chunk_len))
            start = idx + 1
            continue
        current.extend(ids)
    if current or start < len(sentences):
        chunks.append(_make_chunk(current, start, len(sentences), chunk_len))
    return chunks


def preprocess_note(
    text: str,
    table: AbbreviationTable,
) -> list[str]:
    """Full cleanup pipeline for one note: scrub, expand, segment."""
    return split_sentences(expand_abbreviations(strip_deid(text), table))


def default_abbreviations() -> AbbreviationTable:
    return AbbreviationTable.from_tsv(Path(__file__).parent / "data" / "abbreviations.tsv")


def read_notes_jsonl(path: str | Path) -> list[RawNote]:
    """Corpus input: one JSON object per line with note_id/subject_id/hadm_id/text."""
    notes = []
    seen: set[str] = set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        note = RawNote(
            note_id=str(obj["note_id"]),
            subject_id=str(obj["subject_id"]),
            hadm_id=str(obj.get("hadm_id", "")),
            text=obj.get("text", ""),
        )
        if note.note_id in seen:
            raise ConfigError(f"duplicate note_id in corpus: {note.note_id}")
        seen.add(note.note_id)
        notes.append(note)
    return notes


def write_notes_jsonl(notes: list[RawNote], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for note in notes:
            fh.write(
                json.dumps(
                    {
                        "note_id": note.note_id,
                        "subject_id": note.subject_id,
                        "hadm_id": note.hadm_id,
                        "text": note.text,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
