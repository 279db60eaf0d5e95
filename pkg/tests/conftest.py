"""Shared fixtures: tiny label spaces, vocabularies, and model bundles."""
from __future__ import annotations

import numpy as np
import pytest

from notecoder.embed import HashedProvider, ProviderConfig
from notecoder.labels import Chapter, CodeLabel, LabelSpace, default_chapters
from notecoder.model import ChapterModel, CodeModel, ModelBundle, finalize_params
from notecoder.nn_core import ConvSpec, NetSpec, init_params
from notecoder.preprocess import AbbreviationTable, Vocabulary, default_abbreviations


def tiny_space(n_chapters: int = 4, codes_per_chapter: int = 2) -> LabelSpace:
    chapters = default_chapters()[:n_chapters]
    codes = []
    for c in range(n_chapters):
        lo = int(chapters[c].ranges[0][0])
        for j in range(codes_per_chapter):
            codes.append(
                CodeLabel(f"{lo + j:03d}.{j}", f"test condition {c}-{j}", c)
            )
    return LabelSpace(list(chapters), codes)


def tiny_vocab(n_words: int = 40) -> Vocabulary:
    return Vocabulary([f"word{i}" for i in range(n_words)])


def build_tiny_bundle(
    seed: int = 0,
    n_chapters: int = 4,
    codes_per_chapter: int = 2,
    dim: int = 16,
    chunk_len: int = 16,
) -> tuple[ModelBundle, HashedProvider]:
    """Random-weight bundle over a small label space, plus its provider."""
    space = tiny_space(n_chapters, codes_per_chapter)
    vocab = tiny_vocab()
    conv = ConvSpec(kernel_widths=(2, 3), filters_per_width=4, input_dim=dim)
    ch_spec = NetSpec(conv=conv, out_dim=space.n_chapters, hidden_dim=8)
    fingerprint = space.fingerprint()
    chapter = ChapterModel(
        ch_spec,
        finalize_params(init_params(ch_spec, seed=seed)),
        fingerprint=fingerprint,
    )
    aux_dim = conv.feature_dim + space.n_chapters
    code_models = []
    for c in range(space.n_chapters):
        indices = tuple(space.codes_in_chapter(c))
        spec = NetSpec(conv=conv, out_dim=len(indices), hidden_dim=8, aux_dim=aux_dim)
        code_models.append(
            CodeModel(
                c,
                indices,
                spec,
                finalize_params(init_params(spec, seed=seed + 100 + c)),
                fingerprint=fingerprint,
            )
        )
    bundle = ModelBundle(
        chapter=chapter,
        code_models=tuple(code_models),
        thresholds=np.full(space.n_labels, 0.5),
        tau_ch=0.5,
        space=space,
        vocab=vocab,
        abbrev=default_abbreviations(),
        chunk_len=chunk_len,
    )
    provider = HashedProvider(ProviderConfig(kind="hashed", dim=dim, seed=seed))
    return bundle, provider


@pytest.fixture
def tiny_bundle():
    return build_tiny_bundle()
