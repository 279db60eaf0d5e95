"""Two-stage training orchestration plus the data-treatment ablation harness.

Stage 1 fits the chapter model on chunk instances; stage 2 fits one code
model per chapter, convolution stack initialized from the trained chapter
model (optionally frozen for the first epochs), with the chapter layer's
pooled features and probabilities fed in as an auxiliary dense input.
Balancing and augmentation only ever touch the training split.
"""
from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .corpus import (
    BalanceConfig,
    Example,
    augment_shuffle,
    make_example,
    undersample,
)
from .embed import Provider, ProviderConfig, make_provider
from .errors import ConfigError, NumericError
from .labels import LabelSpace
from .metrics import DEFAULT_GRID, confusion, micro_f1, tune_thresholds
from .model import (
    ChapterModel,
    CodeModel,
    ModelBundle,
    chapter_forward_note,
    code_forward_note,
    finalize_params,
)
from .nn_core import (
    AdamState,
    ConvSpec,
    NetSpec,
    ParamSet,
    adam_step,
    backward_batch,
    bce_loss_batch,
    forward_batch,
    init_params,
)
from .preprocess import (
    DEFAULT_CHUNK_LEN,
    AbbreviationTable,
    RawNote,
    Vocabulary,
    preprocess_note,
    chunk_and_tokenize,
)
from .util import hash_to_unit, rng_for, stable_hash64


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    patience: int = 3
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    kernel_widths: tuple[int, ...] = (3, 4, 5)
    filters_per_width: int = 64
    hidden_dim: int = 128
    chunk_len: int = DEFAULT_CHUNK_LEN
    augment_copies: int = 2
    balance_ratio: float = 1.5
    balance_level: str = "chapter"
    freeze_epochs: int = 1
    transfer: bool = True
    # Transferred conv stacks feed the code heads features with trained
    # magnitude; a fresh full-gain head saturates every sigmoid past the
    # loss clamp and gets zero gradient, so code heads start at reduced gain.
    head_init_scale: float = 0.1
    tau_ch: float = 0.5
    threshold_grid: tuple[float, ...] = DEFAULT_GRID
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    provider: ProviderConfig = field(default_factory=ProviderConfig)

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 0:
            raise ConfigError("epochs >= 1, batch_size >= 1, patience >= 0 required")

    @classmethod
    def desk_scale(cls, seed: int = 0, **overrides) -> "TrainConfig":
        """Light configuration that trains the default corpus in minutes on CPU.

        Width-1 kernels act as learned keyword detectors, which is what the
        hashed-embedding regime rewards; 128 dims keep random-vector
        crosstalk low enough for clean separation.
        """
        base = dict(
            seed=seed,
            kernel_widths=(1, 2),
            filters_per_width=128,
            hidden_dim=128,
            batch_size=32,
            epochs=12,
            patience=3,
            lr=0.02,
            provider=ProviderConfig(kind="hashed", dim=128, seed=seed),
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = {
            k: getattr(self, k)
            for k in (
                "epochs", "batch_size", "seed", "patience", "lr", "beta1",
                "beta2", "eps", "filters_per_width", "hidden_dim", "chunk_len",
                "augment_copies", "balance_ratio", "balance_level",
                "freeze_epochs", "transfer", "head_init_scale", "tau_ch",
            )
        }
        d["kernel_widths"] = list(self.kernel_widths)
        d["threshold_grid"] = [float(t) for t in self.threshold_grid]
        d["split_ratios"] = list(self.split_ratios)
        d["provider"] = self.provider.to_dict()
        return d


@dataclass
class PreparedCorpus:
    """Preprocessed, split, and labeled corpus ready for training."""

    train: list[Example]
    val: list[Example]
    test: list[Example]
    sentences: dict[str, list[str]]
    vocab: Vocabulary
    space: LabelSpace
    abbrev: AbbreviationTable
    chunk_len: int


def prepare_corpus(
    notes: list[RawNote],
    codes_by_note: dict[str, list[str]],
    space: LabelSpace,
    abbrev: AbbreviationTable,
    cfg: TrainConfig,
) -> PreparedCorpus:
    """Clean, split by patient, fit the vocabulary on train, and build examples.

    Notes that contain no usable text after cleaning are dropped.  The
    vocabulary is fit on the training split only.
    """
    sentences: dict[str, list[str]] = {}
    kept: list[RawNote] = []
    for note in notes:
        sents = preprocess_note(note.text, abbrev)
        if sents:
            sentences[note.note_id] = sents
            kept.append(note)

    cut1 = cfg.split_ratios[0]
    cut2 = cut1 + cfg.split_ratios[1]
    buckets: tuple[list[RawNote], ...] = ([], [], [])
    for note in kept:
        u = float(
            hash_to_unit(np.uint64(stable_hash64("split", note.subject_id, seed=cfg.seed)))
        )
        buckets[0 if u < cut1 else 1 if u < cut2 else 2].append(note)

    train_sents: list[list[str]] = [sentences[n.note_id] for n in buckets[0]]
    vocab = Vocabulary.build([s for group in train_sents for s in group])

    def build(split_notes: list[RawNote]) -> list[Example]:
        out = []
        for note in split_notes:
            chunks = chunk_and_tokenize(sentences[note.note_id], vocab, cfg.chunk_len)
            chunks = [c for c in chunks if c.length > 0] or chunks
            if not any(c.length for c in chunks):
                continue
            out.append(
                make_example(
                    note.note_id,
                    note.subject_id,
                    chunks,
                    codes_by_note.get(note.note_id, []),
                    space,
                )
            )
        return out

    return PreparedCorpus(
        train=build(buckets[0]),
        val=build(buckets[1]),
        test=build(buckets[2]),
        sentences=sentences,
        vocab=vocab,
        space=space,
        abbrev=abbrev,
        chunk_len=cfg.chunk_len,
    )


def apply_balance(train: list[Example], cfg: TrainConfig) -> list[Example]:
    return undersample(
        train,
        BalanceConfig(
            target_ratio=cfg.balance_ratio, seed=cfg.seed, level=cfg.balance_level
        ),
    )


def apply_augment(
    train: list[Example], prepared: PreparedCorpus, cfg: TrainConfig
) -> list[Example]:
    """Append shuffled copies of every train example that has known sentences."""
    out = list(train)
    for ex in train:
        base_id = ex.note_id.split("::aug")[0]
        sents = prepared.sentences.get(base_id)
        if sents is None:
            continue
        out.extend(
            augment_shuffle(
                ex, sents, cfg.augment_copies, cfg.seed, prepared.vocab, cfg.chunk_len
            )
        )
    return out


class _Instances:
    """Chunk-level training instances in note-major order."""

    def __init__(self, examples: list[Example], labels: np.ndarray, aux: np.ndarray | None):
        self.chunks = []
        self.keys = []
        note_of_chunk = []
        starts = []
        for ei, ex in enumerate(examples):
            starts.append(len(self.chunks))
            for ci, chunk in enumerate(ex.chunks):
                self.chunks.append(chunk)
                self.keys.append((ex.note_id, ci))
                note_of_chunk.append(ei)
        self.note_of_chunk = np.asarray(note_of_chunk, dtype=np.int64)
        self.note_starts = np.asarray(starts, dtype=np.int64)
        self.labels = labels  # per note (n_examples, K)
        self.aux = aux  # per note (n_examples, A) or None
        self.n = len(self.chunks)

    def chunk_labels(self) -> np.ndarray:
        return self.labels[self.note_of_chunk]

    def chunk_aux(self) -> np.ndarray | None:
        return None if self.aux is None else self.aux[self.note_of_chunk]


def _embed(provider: Provider, inst: _Instances, idx: np.ndarray) -> np.ndarray:
    embs = provider.embed_batch(
        [inst.chunks[i] for i in idx], keys=[inst.keys[i] for i in idx]
    )
    return np.stack(embs)


def _note_level_scores(
    provider: Provider,
    inst: _Instances,
    params: ParamSet,
    spec: NetSpec,
    batch_size: int,
    aggregation: str = "max",
) -> np.ndarray:
    """Per-note scores: forward every chunk, aggregate element-wise by note."""
    probs_rows = []
    aux = inst.chunk_aux()
    for lo in range(0, inst.n, batch_size):
        idx = np.arange(lo, min(lo + batch_size, inst.n))
        embs = _embed(provider, inst, idx)
        probs, _ = forward_batch(embs, params, spec, None if aux is None else aux[idx])
        probs_rows.append(probs)
    probs = np.concatenate(probs_rows, axis=0)
    if aggregation == "mean":
        sums = np.add.reduceat(probs, inst.note_starts, axis=0)
        counts = np.diff(np.append(inst.note_starts, inst.n))
        return sums / counts[:, None]
    return np.maximum.reduceat(probs, inst.note_starts, axis=0)


def _train_one(
    provider: Provider,
    train_inst: _Instances,
    val_inst: _Instances,
    spec: NetSpec,
    params: ParamSet,
    cfg: TrainConfig,
    rng_tag: str,
    frozen_names: set[str] | None = None,
    freeze_epochs: int = 0,
) -> tuple[ParamSet, list[dict]]:
    """Mini-batch Adam with early stopping on validation micro-F1.

    Stops once ``epoch - best_epoch >= patience`` (so patience 0 runs exactly
    one epoch) and returns the best-validation parameters.
    """
    state = AdamState.init(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    rng = rng_for(rng_tag, seed=cfg.seed)
    labels = train_inst.chunk_labels()
    aux = train_inst.chunk_aux()
    history: list[dict] = []
    best_params = copy.deepcopy(params)
    best_f1 = -1.0
    best_epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(train_inst.n)
        losses = []
        for lo in range(0, train_inst.n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            embs = _embed(provider, train_inst, idx)
            probs, cache = forward_batch(
                embs, params, spec, None if aux is None else aux[idx]
            )
            loss = bce_loss_batch(probs, labels[idx])
            if not np.isfinite(loss):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            losses.append(loss)
            grads = backward_batch(cache, labels[idx])
            if frozen_names and epoch <= freeze_epochs:
                for name in frozen_names:
                    grads[name] = np.zeros_like(grads[name])
            adam_step(params, grads, state)
        val_scores = _note_level_scores(provider, val_inst, params, spec, cfg.batch_size)
        counts = confusion(val_scores >= 0.5, val_inst.labels)
        val_f1 = micro_f1(counts)
        improved = val_f1 > best_f1
        if improved:
            best_f1 = val_f1
            best_epoch = epoch
            best_params = copy.deepcopy(params)
        history.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)) if losses else 0.0,
                "val_micro_f1": float(val_f1),
                "best": bool(improved),
            }
        )
        if epoch - best_epoch >= cfg.patience:
            break
    return best_params, history


def _chapter_spec(cfg: TrainConfig, space: LabelSpace) -> NetSpec:
    return NetSpec(
        conv=ConvSpec(
            kernel_widths=cfg.kernel_widths,
            filters_per_width=cfg.filters_per_width,
            input_dim=cfg.provider.dim,
        ),
        out_dim=space.n_chapters,
        hidden_dim=cfg.hidden_dim,
    )


def train_chapter(
    prepared: PreparedCorpus,
    cfg: TrainConfig,
    train_examples: list[Example] | None = None,
    provider: Provider | None = None,
) -> tuple[ChapterModel, list[dict]]:
    """Stage 1: fit the chapter classifier on chunk instances."""
    train = train_examples if train_examples is not None else prepared.train
    if not train:
        raise ConfigError("training split is empty")
    if not prepared.val:
        raise ConfigError("validation split is empty")
    provider = provider or make_provider(cfg.provider)
    spec = _chapter_spec(cfg, prepared.space)
    params = init_params(spec, seed=stable_hash64("chapter-init", seed=cfg.seed) % 2**32)
    train_inst = _Instances(train, np.stack([e.chapter_labels for e in train]), None)
    val_inst = _Instances(
        prepared.val, np.stack([e.chapter_labels for e in prepared.val]), None
    )
    best, history = _train_one(
        provider, train_inst, val_inst, spec, params, cfg, "chapter-batches"
    )
    model = ChapterModel(spec, best, fingerprint=prepared.space.fingerprint())
    return model, history


def _note_aux(
    provider: Provider,
    examples: list[Example],
    chapter: ChapterModel,
    cfg: TrainConfig,
) -> np.ndarray:
    """Auxiliary input per note: chapter pooled features then chapter scores."""
    inst = _Instances(examples, np.zeros((len(examples), 1)), None)
    feats_rows = []
    scores_rows = []
    for lo in range(0, inst.n, cfg.batch_size):
        idx = np.arange(lo, min(lo + cfg.batch_size, inst.n))
        embs = _embed(provider, inst, idx)
        probs, cache = forward_batch(embs, chapter.params, chapter.spec)
        scores_rows.append(probs)
        feats_rows.append(cache["pooled"])
    probs = np.concatenate(scores_rows, axis=0)
    feats = np.concatenate(feats_rows, axis=0)
    note_scores = np.maximum.reduceat(probs, inst.note_starts, axis=0)
    note_feats = np.maximum.reduceat(feats, inst.note_starts, axis=0)
    return np.concatenate([note_feats, note_scores], axis=1)


def train_codes(
    prepared: PreparedCorpus,
    chapter: ChapterModel,
    cfg: TrainConfig,
    train_examples: list[Example] | None = None,
    provider: Provider | None = None,
) -> tuple[list[CodeModel], dict[int, list[dict]]]:
    """Stage 2: one code model per chapter, transfer-initialized from stage 1.

    Each model trains on its chapter's positive examples plus an equal count
    of seeded negatives; chapters with no tracked codes yield empty models.
    """
    train = train_examples if train_examples is not None else prepared.train
    provider = provider or make_provider(cfg.provider)
    space = prepared.space
    fingerprint = space.fingerprint()

    train_aux = _note_aux(provider, train, chapter, cfg)
    val_aux = _note_aux(provider, prepared.val, chapter, cfg)
    train_ch_labels = np.stack([e.chapter_labels for e in train])
    aux_dim = train_aux.shape[1]

    models: list[CodeModel] = []
    histories: dict[int, list[dict]] = {}
    for ch in space.chapters:
        indices = space.codes_in_chapter(ch.id)
        if not indices:
            models.append(CodeModel(ch.id, ()))
            continue
        spec = NetSpec(
            conv=chapter.spec.conv,
            out_dim=len(indices),
            hidden_dim=cfg.hidden_dim,
            aux_dim=aux_dim,
        )
        params = init_params(
            spec, seed=stable_hash64("code-init", ch.id, seed=cfg.seed) % 2**32
        )
        conv_names = {
            name for name in params if name.startswith("conv")
        }
        for name in params:
            if name.startswith("dense") and name.endswith(".w"):
                params[name] *= cfg.head_init_scale
        if cfg.transfer:
            for name in conv_names:
                params[name] = chapter.params[name].copy()

        pos_idx = np.flatnonzero(train_ch_labels[:, ch.id] == 1)
        neg_idx = np.flatnonzero(train_ch_labels[:, ch.id] == 0)
        rng = rng_for("code-negatives", ch.id, seed=cfg.seed)
        take = min(len(neg_idx), len(pos_idx))
        sampled_neg = rng.choice(neg_idx, size=take, replace=False) if take else neg_idx[:0]
        chosen = np.sort(np.concatenate([pos_idx, sampled_neg]))
        if len(chosen) == 0 or len(pos_idx) == 0:
            models.append(
                CodeModel(ch.id, tuple(indices), spec, params, fingerprint=fingerprint)
            )
            histories[ch.id] = []
            continue

        subset = [train[i] for i in chosen]
        sub_labels = np.stack([e.code_labels[indices] for e in subset])
        train_inst = _Instances(subset, sub_labels, train_aux[chosen])
        val_labels = np.stack([e.code_labels[indices] for e in prepared.val])
        val_inst = _Instances(prepared.val, val_labels, val_aux)
        best, history = _train_one(
            provider,
            train_inst,
            val_inst,
            spec,
            params,
            cfg,
            f"code-batches-{ch.id}",
            frozen_names=conv_names if cfg.transfer else None,
            freeze_epochs=cfg.freeze_epochs if cfg.transfer else 0,
        )
        models.append(
            CodeModel(ch.id, tuple(indices), spec, best, fingerprint=fingerprint)
        )
        histories[ch.id] = history
    return models, histories


def _bundle_scores(
    provider: Provider,
    examples: list[Example],
    chapter: ChapterModel,
    code_models: list[CodeModel],
    gate: bool,
    tau_ch: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Note-level (chapter_scores, code_scores, gated_mask) for a split."""
    n_codes = sum(len(m.code_indices) for m in code_models)
    ch_rows = np.zeros((len(examples), chapter.spec.out_dim))
    code_rows = np.zeros((len(examples), n_codes))
    gated_rows = np.zeros((len(examples), n_codes), dtype=bool)
    for i, ex in enumerate(examples):
        embs = provider.embed_batch(
            list(ex.chunks), keys=[(ex.note_id, ci) for ci in range(len(ex.chunks))]
        )
        scores, feats = chapter_forward_note([np.asarray(e) for e in embs], chapter)
        active = (
            {int(c) for c in np.flatnonzero(scores >= tau_ch)}
            if gate
            else {m.chapter_id for m in code_models}
        )
        code_scores, gated = code_forward_note(
            [np.asarray(e) for e in embs],
            scores,
            feats,
            tuple(code_models),
            active,
            n_codes,
        )
        ch_rows[i] = scores
        code_rows[i] = code_scores
        gated_rows[i] = gated
    return ch_rows, code_rows, gated_rows


def train_two_stage(
    prepared: PreparedCorpus,
    cfg: TrainConfig,
    train_examples: list[Example] | None = None,
    tune: bool = True,
) -> tuple[ModelBundle, dict]:
    """Full pipeline: chapter stage, code stage, threshold tuning, bundling.

    ``tune=False`` keeps every decision threshold at 0.5, which harnesses
    comparing training treatments use to take small-validation threshold
    jitter out of the comparison.
    """
    provider = make_provider(cfg.provider)
    t0 = time.time()
    chapter, ch_history = train_chapter(prepared, cfg, train_examples, provider)
    code_models, code_histories = train_codes(
        prepared, chapter, cfg, train_examples, provider
    )

    if tune:
        # Tune per-label thresholds on ungated validation scores.
        val_ch, val_code, _ = _bundle_scores(
            provider, prepared.val, chapter, code_models, gate=False, tau_ch=cfg.tau_ch
        )
        ch_labels = np.stack([e.chapter_labels for e in prepared.val])
        code_labels = np.stack([e.code_labels for e in prepared.val])
        thresholds = np.concatenate(
            [
                tune_thresholds(val_ch, ch_labels, cfg.threshold_grid),
                tune_thresholds(val_code, code_labels, cfg.threshold_grid),
            ]
        )
    else:
        thresholds = np.full(prepared.space.n_labels, 0.5)

    bundle = ModelBundle(
        chapter=ChapterModel(chapter.spec, finalize_params(chapter.params), chapter.fingerprint),
        code_models=tuple(
            CodeModel(
                m.chapter_id,
                m.code_indices,
                m.spec,
                None if m.is_empty else finalize_params(m.params),
                fingerprint=m.fingerprint,
            )
            for m in code_models
        ),
        thresholds=thresholds,
        tau_ch=cfg.tau_ch,
        space=prepared.space,
        vocab=prepared.vocab,
        abbrev=prepared.abbrev,
        chunk_len=prepared.chunk_len,
        meta={"seed": cfg.seed, "config": cfg.to_dict(), "train_seconds": time.time() - t0},
    )
    histories = {"chapter": ch_history, "codes": code_histories}
    return bundle, histories


def evaluate_split(
    bundle: ModelBundle,
    examples: list[Example],
    provider: Provider | None = None,
    gate: bool = True,
) -> dict:
    """Micro F1 for both layers on a list of examples."""
    if provider is None:
        pcfg = bundle.meta.get("config", {}).get("provider")
        provider = make_provider(
            ProviderConfig.from_dict(pcfg) if pcfg else ProviderConfig()
        )
    ch_scores, code_scores, gated = _bundle_scores(
        provider,
        examples,
        bundle.chapter,
        list(bundle.code_models),
        gate=gate,
        tau_ch=bundle.tau_ch,
    )
    n_ch = bundle.space.n_chapters
    ch_labels = np.stack([e.chapter_labels for e in examples])
    code_labels = np.stack([e.code_labels for e in examples])
    ch_dec = ch_scores >= bundle.thresholds[:n_ch]
    code_dec = (code_scores >= bundle.thresholds[n_ch:]) & gated
    ch_counts = confusion(ch_dec, ch_labels)
    code_counts = confusion(code_dec, code_labels)
    return {
        "chapter": {"micro_f1": micro_f1(ch_counts), "counts": ch_counts},
        "code": {"micro_f1": micro_f1(code_counts), "counts": code_counts},
    }


ABLATION_VARIANTS = ("baseline", "balance", "augment", "balance_augment")


def run_ablation(
    plan: list[str],
    prepared: PreparedCorpus,
    cfg: TrainConfig,
    eval_split: str = "test",
    budget: str = "steps",
    tune: bool = True,
) -> dict:
    """Train each data-treatment variant with identical seeds and budget.

    ``budget="steps"`` (default) holds the optimizer-step count fixed at what
    ``cfg.epochs`` gives the untreated training split, so variants that
    shrink (balance) or grow (augment) the split get the same compute and
    differ only in data composition.  ``budget="epochs"`` compares at equal
    epochs instead.  Returns a table of per-variant chapter/code micro-F1 on
    the held-out split plus deltas against the previous row; a variant that
    fails keeps its error message in the table and the run continues.
    """
    if not plan:
        raise ConfigError("ablation plan must not be empty")
    for name in plan:
        if name not in ABLATION_VARIANTS:
            raise ConfigError(f"unknown ablation variant: {name}")
    if budget not in ("steps", "epochs"):
        raise ConfigError(f"unknown budget mode: {budget}")
    provider = make_provider(cfg.provider)
    examples = prepared.test if eval_split == "test" else prepared.val
    base_chunks = sum(len(ex.chunks) for ex in prepared.train)
    rows = []
    for name in plan:
        try:
            train = list(prepared.train)
            if name in ("balance", "balance_augment"):
                train = apply_balance(train, cfg)
            pre_augment_chunks = max(1, sum(len(ex.chunks) for ex in train))
            if name in ("augment", "balance_augment"):
                train = apply_augment(train, prepared, cfg)
            variant_cfg = cfg
            if budget == "steps":
                # Balancing shrinks the split, so it earns compensating
                # epochs to keep optimizer steps at least at the baseline's.
                # Augmentation adds data on top of whatever schedule its rung
                # inherited; it never reduces the epoch count.
                epochs = max(
                    cfg.epochs,
                    math.ceil(cfg.epochs * base_chunks / pre_augment_chunks),
                )
                variant_cfg = replace(cfg, epochs=epochs, patience=max(cfg.patience, epochs))
            bundle, _ = train_two_stage(
                prepared, variant_cfg, train_examples=train, tune=tune
            )
            result = evaluate_split(bundle, examples, provider)
            rows.append(
                {
                    "variant": name,
                    "train_examples": len(train),
                    "epochs": variant_cfg.epochs,
                    "chapter_f1": result["chapter"]["micro_f1"],
                    "code_f1": result["code"]["micro_f1"],
                }
            )
        except Exception as err:  # keep going; report the failure in the table
            rows.append({"variant": name, "error": f"{type(err).__name__}: {err}"})
    for prev, row in zip(rows, rows[1:]):
        if "error" not in row and "error" not in prev:
            row["chapter_delta"] = row["chapter_f1"] - prev["chapter_f1"]
            row["code_delta"] = row["code_f1"] - prev["code_f1"]
    return {"plan": list(plan), "rows": rows, "seed": cfg.seed, "budget": budget}


def write_run_dir(
    run_dir: str | Path,
    cfg: TrainConfig,
    histories: dict,
    bundle: ModelBundle,
    ablation: dict | None = None,
) -> None:
    """Persist a training run: config snapshot, epoch metrics, bundle, table."""
    from .model import save_bundle

    root = Path(run_dir)
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2), encoding="utf-8")
    with open(root / "epochs.jsonl", "w", encoding="utf-8") as fh:
        for entry in histories.get("chapter", []):
            fh.write(json.dumps({"stage": "chapter", **entry}) + "\n")
        for ch_id, rows in histories.get("codes", {}).items():
            for entry in rows:
                fh.write(json.dumps({"stage": f"code_{ch_id}", **entry}) + "\n")
    save_bundle(bundle, root / "bundle")
    if ablation is not None:
        (root / "ablation.json").write_text(json.dumps(ablation, indent=2), encoding="utf-8")
        with open(root / "ablation.csv", "w", encoding="utf-8") as fh:
            fh.write("variant,chapter_f1,code_f1\n")
            for row in ablation["rows"]:
                if "error" in row:
                    fh.write(f"{row['variant']},error,error\n")
                else:
                    fh.write(f"{row['variant']},{row['chapter_f1']},{row['code_f1']}\n")
