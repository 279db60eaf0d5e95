"""Two-layer hierarchical classifier: a 16-output chapter model gating an
ensemble of per-chapter code models that consume the chapter layer's pooled
features and probabilities as auxiliary input.

A ModelBundle packages both layers with the vocabulary, abbreviation table,
label space, and decision thresholds needed to score raw note text, and
serializes to a directory of checkpoints plus JSON sidecar files.
"""
from __future__ import annotations

import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointError,
    CompatibilityError,
    ConfigError,
    EmptyNoteError,
    ShapeError,
)
from .labels import LabelSpace
from .nn_core import NetSpec, ParamSet, forward, load_checkpoint, save_checkpoint
from .preprocess import (
    AbbreviationTable,
    TokenChunk,
    Vocabulary,
    chunk_and_tokenize,
    preprocess_note,
)

BUNDLE_VERSION = 1


@dataclass
class ChapterModel:
    spec: NetSpec
    params: ParamSet
    fingerprint: str = ""


@dataclass
class CodeModel:
    """Layer-2 model for one chapter; empty when the chapter has no codes."""

    chapter_id: int
    code_indices: tuple[int, ...]
    spec: NetSpec | None = None
    params: ParamSet | None = None
    fingerprint: str = ""

    @property
    def is_empty(self) -> bool:
        return not self.code_indices


@dataclass
class ModelBundle:
    chapter: ChapterModel
    code_models: tuple[CodeModel, ...]
    thresholds: np.ndarray  # chapters first, then codes
    tau_ch: float
    space: LabelSpace
    vocab: Vocabulary
    abbrev: AbbreviationTable
    chunk_len: int
    aggregation: str = "max"  # max | mean
    gating: str = "hard"  # hard | soft
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 0.0 < self.tau_ch < 1.0:
            raise ConfigError("tau_ch must lie in (0, 1)")
        n = self.space.n_labels
        self.thresholds = np.asarray(self.thresholds, dtype=np.float64)
        if self.thresholds.shape != (n,):
            raise ConfigError(f"expected {n} thresholds, got {self.thresholds.shape}")
        total_code_outputs = sum(len(m.code_indices) for m in self.code_models)
        if len(self.code_models) != self.space.n_chapters:
            raise ConfigError("one code model per chapter required")
        if total_code_outputs != self.space.n_codes:
            raise ConfigError(
                f"code model outputs sum to {total_code_outputs}, expected {self.space.n_codes}"
            )

    @property
    def fingerprint(self) -> str:
        return self.space.fingerprint()


@dataclass(frozen=True)
class ChapterPrediction:
    id: int
    name: str
    score: float
    decided: bool


@dataclass(frozen=True)
class CodePrediction:
    code: str
    description: str
    chapter_id: int
    score: float
    decided: bool


@dataclass(frozen=True)
class PredictionResult:
    chapters: tuple[ChapterPrediction, ...]
    codes: tuple[CodePrediction, ...]
    fingerprint: str

    def to_dict(self) -> dict:
        return {
            "chapters": [
                {
                    "id": c.id,
                    "name": c.name,
                    "score": c.score,
                    "decided": c.decided,
                }
                for c in self.chapters
            ],
            "codes": [
                {
                    "code": c.code,
                    "description": c.description,
                    "chapter_id": c.chapter_id,
                    "score": c.score,
                    "decided": c.decided,
                }
                for c in self.codes
            ],
            "fingerprint": self.fingerprint,
        }


def _aggregate(rows: np.ndarray, how: str) -> np.ndarray:
    if how == "mean":
        return rows.mean(axis=0)
    return rows.max(axis=0)


def chapter_forward_note(
    chunk_embs: list[np.ndarray],
    model: ChapterModel,
    aggregation: str = "max",
) -> tuple[np.ndarray, np.ndarray]:
    """Note-level chapter scores and pooled features.

    Per-chunk forward passes aggregated element-wise (max by default), so
    chunk order never changes the result.
    """
    if not chunk_embs:
        raise EmptyNoteError("cannot score a note with no chunks")
    probs_rows = []
    feat_rows = []
    for emb in chunk_embs:
        probs, cache = forward(emb, model.params, model.spec)
        probs_rows.append(probs)
        feat_rows.append(cache["pooled"])
    scores = _aggregate(np.stack(probs_rows), aggregation)
    features = _aggregate(np.stack(feat_rows), aggregation)
    return scores, features


def code_forward_note(
    chunk_embs: list[np.ndarray],
    chapter_scores: np.ndarray,
    features: np.ndarray,
    code_models: tuple[CodeModel, ...],
    active: set[int],
    n_codes: int,
    aggregation: str = "max",
    expect_fingerprint: str | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Scores for all code labels; only models of active chapters run.

    Returns (scores, gated) where ``gated[i]`` is False for codes whose
    chapter was inactive (their score stays 0).
    """
    if np.asarray(chapter_scores).shape != (len(code_models),):
        raise ShapeError("chapter_scores length must match the number of code models")
    scores = np.zeros(n_codes, dtype=np.float64)
    gated = np.zeros(n_codes, dtype=bool)
    aux = np.concatenate([np.asarray(features, dtype=np.float64), chapter_scores])
    for model in code_models:
        if model.is_empty:
            continue
        if expect_fingerprint and model.fingerprint and model.fingerprint != expect_fingerprint:
            raise CompatibilityError(
                f"code model for chapter {model.chapter_id} was trained against a "
                f"different label space"
            )
        if model.chapter_id not in active:
            continue
        rows = []
        for emb in chunk_embs:
            probs, _ = forward(emb, model.params, model.spec, aux=aux)
            rows.append(probs)
        agg = _aggregate(np.stack(rows), aggregation)
        idx = np.asarray(model.code_indices, dtype=np.int64)
        scores[idx] = agg
        gated[idx] = True
    return scores, gated


def predict_note(raw_text: str, bundle: ModelBundle, provider) -> PredictionResult:
    """Full pipeline: clean text, chunk, embed, score both layers, threshold."""
    if bundle.chapter.fingerprint and bundle.chapter.fingerprint != bundle.fingerprint:
        raise CompatibilityError("chapter model was trained against a different label space")
    sentences = preprocess_note(raw_text, bundle.abbrev)
    chunks = chunk_and_tokenize(sentences, bundle.vocab, bundle.chunk_len)
    if not chunks or all(c.length == 0 for c in chunks):
        raise EmptyNoteError("note has no usable text after cleaning")
    texts = [" ".join(sentences[a:b]) for a, b in (c.source_sentence_range for c in chunks)]
    embs = provider.embed_batch(chunks, texts=texts)

    ch_scores, features = chapter_forward_note(embs, bundle.chapter, bundle.aggregation)
    active = {int(c) for c in np.flatnonzero(ch_scores >= bundle.tau_ch)}
    code_scores, gated = code_forward_note(
        embs,
        ch_scores,
        features,
        bundle.code_models,
        active,
        bundle.space.n_codes,
        bundle.aggregation,
        expect_fingerprint=bundle.fingerprint,
    )
    if bundle.gating == "soft":
        for model in bundle.code_models:
            if model.is_empty:
                continue
            idx = np.asarray(model.code_indices, dtype=np.int64)
            code_scores[idx] *= ch_scores[model.chapter_id]

    n_ch = bundle.space.n_chapters
    chapters = tuple(
        ChapterPrediction(
            id=ch.id,
            name=ch.name,
            score=float(ch_scores[ch.id]),
            decided=bool(ch_scores[ch.id] >= bundle.thresholds[ch.id]),
        )
        for ch in bundle.space.chapters
    )
    codes = tuple(
        CodePrediction(
            code=cl.code,
            description=cl.description,
            chapter_id=cl.chapter_id,
            score=float(code_scores[i]),
            decided=bool(code_scores[i] >= bundle.thresholds[n_ch + i]),
        )
        for i, cl in enumerate(bundle.space.codes)
        if gated[i]
    )
    return PredictionResult(chapters=chapters, codes=codes, fingerprint=bundle.fingerprint)


def save_bundle(bundle: ModelBundle, path: str | Path) -> None:
    """Write the bundle as a directory; tensors go to float32 checkpoints."""
    root = Path(path)
    if root.exists():
        shutil.rmtree(root)
    root.mkdir(parents=True)
    bundle.space.save(root / "labelspace.json")
    bundle.vocab.save(root / "vocab.json")
    with open(root / "abbreviations.tsv", "w", encoding="utf-8") as fh:
        for key, expansion in bundle.abbrev.entries:
            fh.write(f"{key}\t{expansion}\n")
    (root / "thresholds.json").write_text(
        json.dumps({"thresholds": [float(t) for t in bundle.thresholds]}),
        encoding="utf-8",
    )
    fingerprint = bundle.fingerprint
    save_checkpoint(
        root / "chapter.ckpt",
        bundle.chapter.params,
        bundle.chapter.spec,
        meta={"fingerprint": fingerprint, "role": "chapter"},
    )
    for model in bundle.code_models:
        if model.is_empty:
            continue
        save_checkpoint(
            root / f"code_{model.chapter_id:02d}.ckpt",
            model.params,
            model.spec,
            meta={
                "fingerprint": fingerprint,
                "role": "code",
                "chapter_id": model.chapter_id,
                "code_indices": list(model.code_indices),
            },
        )
    manifest = {
        "format": "notecoder-bundle",
        "version": BUNDLE_VERSION,
        "fingerprint": fingerprint,
        "tau_ch": bundle.tau_ch,
        "chunk_len": bundle.chunk_len,
        "aggregation": bundle.aggregation,
        "gating": bundle.gating,
        "code_chapters": [
            {"chapter_id": m.chapter_id, "code_indices": list(m.code_indices)}
            for m in bundle.code_models
        ],
        "meta": bundle.meta,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")


def load_bundle(path: str | Path) -> ModelBundle:
    """Inverse of save_bundle; verifies checksums and bundle structure."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise CheckpointError(f"no bundle manifest at {root}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format") != "notecoder-bundle":
        raise CheckpointError("not a notecoder bundle")
    if manifest.get("version") != BUNDLE_VERSION:
        raise CheckpointError(f"unsupported bundle version {manifest.get('version')}")

    space = LabelSpace.load(root / "labelspace.json")
    vocab = Vocabulary.load(root / "vocab.json")
    abbrev = AbbreviationTable.from_tsv(root / "abbreviations.tsv")
    thresholds = np.asarray(
        json.loads((root / "thresholds.json").read_text(encoding="utf-8"))["thresholds"]
    )

    ch_params, ch_spec, ch_meta = load_checkpoint(root / "chapter.ckpt")
    chapter = ChapterModel(ch_spec, ch_params, fingerprint=ch_meta.get("fingerprint", ""))

    code_models = []
    for entry in manifest["code_chapters"]:
        chapter_id = int(entry["chapter_id"])
        indices = tuple(int(i) for i in entry["code_indices"])
        if not indices:
            code_models.append(CodeModel(chapter_id, ()))
            continue
        params, spec, meta = load_checkpoint(root / f"code_{chapter_id:02d}.ckpt")
        code_models.append(
            CodeModel(
                chapter_id,
                indices,
                spec,
                params,
                fingerprint=meta.get("fingerprint", ""),
            )
        )

    return ModelBundle(
        chapter=chapter,
        code_models=tuple(code_models),
        thresholds=thresholds,
        tau_ch=float(manifest["tau_ch"]),
        space=space,
        vocab=vocab,
        abbrev=abbrev,
        chunk_len=int(manifest["chunk_len"]),
        aggregation=manifest.get("aggregation", "max"),
        gating=manifest.get("gating", "hard"),
        meta=manifest.get("meta", {}),
    )


def finalize_params(params: ParamSet) -> ParamSet:
    """Cast trained float64 tensors to the float32 values a bundle serves.

    Casting once at bundle-build time makes save/load a bit-exact round trip
    for predictions.
    """
    return {k: np.asarray(v, dtype=np.float32) for k, v in params.items()}
