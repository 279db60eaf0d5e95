"""Labeled-example assembly, label balancing, shuffle augmentation, patient
splits, and a deterministic synthetic corpus generator.

The generator plants per-code keyword vocabulary into note sentences so a
desk-scale corpus is actually learnable, which the training and ablation
suites rely on.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .labels import CodeLabel, LabelSpace, default_chapters, map_code_to_chapter
from .preprocess import (
    DEFAULT_CHUNK_LEN,
    AbbreviationTable,
    RawNote,
    TokenChunk,
    Vocabulary,
    chunk_and_tokenize,
)
from .util import hash_to_unit, rng_for, stable_hash64


@dataclass(frozen=True)
class Example:
    """One note ready for training: chunks plus chapter/code label vectors."""

    note_id: str
    subject_id: str
    chunks: tuple[TokenChunk, ...]
    chapter_labels: np.ndarray  # uint8, length n_chapters
    code_labels: np.ndarray  # uint8, length n_codes

    def positive_chapters(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.chapter_labels)]

    def positive_codes(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.code_labels)]


def make_example(
    note_id: str,
    subject_id: str,
    chunks: list[TokenChunk],
    codes: list[str],
    space: LabelSpace,
) -> Example:
    """Build an Example with chapter labels closed over the code labels.

    Codes outside the space's top-k list still light their chapter (the
    chapter layer sees every diagnosis, the code layer only the tracked ones).
    """
    chapter_vec = np.zeros(space.n_chapters, dtype=np.uint8)
    code_vec = np.zeros(space.n_codes, dtype=np.uint8)
    for code in codes:
        idx = space.code_index.get(code)
        if idx is not None:
            code_vec[idx] = 1
            chapter_vec[space.code_to_chapter[code]] = 1
        else:
            chapter_vec[map_code_to_chapter(code, space)] = 1
    return Example(note_id, subject_id, tuple(chunks), chapter_vec, code_vec)


@dataclass(frozen=True)
class BalanceConfig:
    """Undersampling target: max/min positive-count ratio and RNG seed."""

    target_ratio: float = 1.5
    seed: int = 0
    level: str = "chapter"  # chapter | code | both

    def __post_init__(self) -> None:
        if self.target_ratio < 1.0:
            raise ConfigError("target_ratio must be >= 1")
        if self.level not in ("chapter", "code", "both"):
            raise ConfigError(f"unknown balance level: {self.level}")


def _label_matrix(examples: list[Example], level: str) -> np.ndarray:
    if level == "chapter":
        return np.stack([ex.chapter_labels for ex in examples])
    if level == "code":
        return np.stack([ex.code_labels for ex in examples])
    return np.stack(
        [np.concatenate([ex.chapter_labels, ex.code_labels]) for ex in examples]
    )


def undersample(examples: list[Example], cfg: BalanceConfig) -> list[Example]:
    """Greedy label-balancing pass.

    Walks the corpus in seeded-random order and drops an example only while
    every label it carries still has strictly more positives than
    ``ceil(target_ratio * min_nonzero_count)``, so no label is ever emptied
    and minority labels are never touched.  Examples with no positive labels
    are kept.  Input order is preserved among survivors.
    """
    if not examples:
        raise ConfigError("undersample requires a non-empty corpus")
    labels = _label_matrix(examples, cfg.level).astype(np.int64)
    counts = labels.sum(axis=0)
    nonzero = counts[counts > 0]
    if nonzero.size == 0:
        return list(examples)
    cap = math.ceil(cfg.target_ratio * int(nonzero.min()))
    order = rng_for("undersample", seed=cfg.seed).permutation(len(examples))
    removed = np.zeros(len(examples), dtype=bool)
    for i in order:
        carried = np.flatnonzero(labels[i])
        if carried.size and np.all(counts[carried] > cap):
            removed[i] = True
            counts[carried] -= 1
    return [ex for i, ex in enumerate(examples) if not removed[i]]


def achieved_ratio(examples: list[Example], level: str = "chapter") -> float:
    """Max/min positive-count ratio over labels that have any positives."""
    counts = _label_matrix(examples, level).astype(np.int64).sum(axis=0)
    nonzero = counts[counts > 0]
    if nonzero.size == 0:
        return 1.0
    return float(nonzero.max()) / float(nonzero.min())


def augment_shuffle(
    example: Example,
    sentences: list[str],
    n_copies: int,
    seed: int,
    vocab: Vocabulary,
    chunk_len: int = DEFAULT_CHUNK_LEN,
) -> list[Example]:
    """Sentence-order augmentation: re-chunk seeded permutations of the note.

    Copy ``i`` uses a permutation derived from (seed, note_id, i), so the
    same inputs always produce the same copies.  Labels are carried verbatim.
    """
    if n_copies < 0:
        raise ConfigError("n_copies must be >= 0")
    copies = []
    for i in range(n_copies):
        rng = rng_for("augment", example.note_id, i, seed=seed)
        perm = rng.permutation(len(sentences))
        shuffled = [sentences[j] for j in perm]
        chunks = chunk_and_tokenize(shuffled, vocab, chunk_len)
        copies.append(
            Example(
                note_id=f"{example.note_id}::aug{i}",
                subject_id=example.subject_id,
                chunks=tuple(chunks),
                chapter_labels=example.chapter_labels.copy(),
                code_labels=example.code_labels.copy(),
            )
        )
    return copies


def split_by_patient(
    examples: list[Example],
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> tuple[list[Example], list[Example], list[Example]]:
    """Partition examples so each subject_id lands in exactly one split."""
    if min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError("ratios must be positive and sum to 1")
    cut1 = ratios[0]
    cut2 = ratios[0] + ratios[1]
    splits: tuple[list[Example], ...] = ([], [], [])
    for ex in examples:
        u = float(hash_to_unit(np.uint64(stable_hash64("split", ex.subject_id, seed=seed))))
        splits[0 if u < cut1 else 1 if u < cut2 else 2].append(ex)
    return splits


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a deterministic synthetic corpus with planted keywords."""

    n_notes: int = 2000
    n_chapters: int = 16
    n_codes: int = 50
    vocab_size: int = 400
    keywords_per_label: int = 2
    label_marginals: tuple[float, ...] | float = 0.08
    noise_rate: float = 0.005
    notes_per_patient: int = 2
    deid_rate: float = 0.3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_notes < 1:
            raise ConfigError("n_notes must be >= 1")
        if not 0 <= self.noise_rate < 1:
            raise ConfigError("noise_rate must be in [0, 1)")
        for p in self.marginals():
            if not 0 < p < 1:
                raise ConfigError("label marginals must be in (0, 1)")

    def marginals(self) -> np.ndarray:
        if isinstance(self.label_marginals, (int, float)):
            return np.full(self.n_codes, float(self.label_marginals))
        arr = np.asarray(self.label_marginals, dtype=np.float64)
        if arr.shape != (self.n_codes,):
            raise ConfigError("label_marginals must have one entry per code")
        return arr


_FILLER_TEMPLATES = (
    "The patient reports {a} and {b} since admission.",
    "Exam shows {a} without {b} today.",
    "Continue {a} monitoring and review {b} at next visit.",
    "Labs notable for {a} with stable {b}.",
    "Family history includes {a} but no {b}.",
)

_KEYWORD_TEMPLATES = (
    "Assessment notes {kw} on evaluation.",
    "Findings consistent with {kw} were documented.",
    "Course complicated by {kw} overnight.",
)

_DEID_SNIPPETS = (
    "[**Known lastname 1234**]",
    "[**2101-5-12**]",
    "[**Hospital1 9**]",
    "[**First Name (un) 77**]",
)


def synth_keywords(spec: SynthSpec) -> list[list[str]]:
    """Reserved keyword strings per code label."""
    return [
        [f"cond{ci}marker{j}" for j in range(spec.keywords_per_label)]
        for ci in range(spec.n_codes)
    ]


def _synth_label_space(spec: SynthSpec) -> LabelSpace:
    chapters = default_chapters()[: spec.n_chapters]
    codes = []
    for ci in range(spec.n_codes):
        chapter = chapters[ci % len(chapters)]
        lo = int(chapter.ranges[0][0])
        root = lo + ci // len(chapters)
        codes.append(
            CodeLabel(
                code=f"{root:03d}.{ci % 10}",
                description=f"synthetic condition {ci}",
                chapter_id=chapter.id,
            )
        )
    return LabelSpace(list(chapters), codes)


def synthesize(spec: SynthSpec) -> tuple[list[RawNote], dict[str, list[str]], LabelSpace]:
    """Generate (notes, note_id -> codes, label space), deterministic per seed.

    A note positive for a code contains at least one of that code's reserved
    keywords in some sentence; keywords of negative codes leak in only at
    ``noise_rate``.  Filler sentences draw from a disjoint vocabulary, and a
    fraction of notes carries de-identification placeholders and common
    abbreviations so the cleanup stages see realistic input.
    """
    rng = rng_for("synthesize", seed=spec.seed)
    space = _synth_label_space(spec)
    keywords = synth_keywords(spec)
    marginals = spec.marginals()
    fillers = [f"finding{i}" for i in range(spec.vocab_size)]

    notes: list[RawNote] = []
    codes_by_note: dict[str, list[str]] = {}
    for n in range(spec.n_notes):
        note_id = f"note{n:06d}"
        subject_id = f"subj{n // max(1, spec.notes_per_patient):05d}"
        positives = np.flatnonzero(rng.random(spec.n_codes) < marginals)

        sentences = []
        if rng.random() < spec.deid_rate:
            snippet = _DEID_SNIPPETS[int(rng.integers(len(_DEID_SNIPPETS)))]
            sentences.append(f"Admission note {snippet} for review.")
        else:
            sentences.append("Admission note for review.")
        sentences.append("Pt seen and examined at bedside.")

        injected = list(positives)
        if spec.noise_rate > 0:
            leak = np.flatnonzero(rng.random(spec.n_codes) < spec.noise_rate)
            injected.extend(ci for ci in leak if ci not in positives)
        for ci in injected:
            kws = keywords[ci]
            kw = kws[int(rng.integers(len(kws)))]
            template = _KEYWORD_TEMPLATES[int(rng.integers(len(_KEYWORD_TEMPLATES)))]
            sentences.append(template.format(kw=kw))
        for _ in range(int(rng.integers(2, 5))):
            a, b = (fillers[int(rng.integers(len(fillers)))] for _ in range(2))
            template = _FILLER_TEMPLATES[int(rng.integers(len(_FILLER_TEMPLATES)))]
            sentences.append(template.format(a=a, b=b))

        order = rng.permutation(len(sentences) - 1) + 1  # keep the header first
        body = [sentences[0]] + [sentences[i] for i in order]
        text = " ".join(body)
        notes.append(RawNote(note_id=note_id, subject_id=subject_id, text=text))
        codes_by_note[note_id] = [space.codes[int(ci)].code for ci in positives]
    return notes, codes_by_note, space


def read_labels_jsonl(path: str | Path) -> dict[str, list[str]]:
    """Labeled corpus: one {note_id, subject_id, codes} object per line."""
    labels: dict[str, list[str]] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        labels[str(obj["note_id"])] = [str(c) for c in obj["codes"]]
    return labels


def write_labels_jsonl(
    notes: list[RawNote], codes_by_note: dict[str, list[str]], path: str | Path
) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for note in notes:
            fh.write(
                json.dumps(
                    {
                        "note_id": note.note_id,
                        "subject_id": note.subject_id,
                        "codes": codes_by_note.get(note.note_id, []),
                    }
                )
                + "\n"
            )
