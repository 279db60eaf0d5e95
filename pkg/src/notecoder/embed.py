"""Chunk embedding providers: hashed-deterministic, file-backed, and remote.

Every provider returns an L x D float array per chunk with zero rows wherever
the chunk mask is zero, so the classifier never sees provider-specific
shapes.  The hashed provider is the desk-scale default: each token id maps to
a unit vector that is a pure function of (token_id, dimension, seed).
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import requests

from .errors import (
    ConfigError,
    MissingEmbeddingError,
    ProviderRequestError,
    ProviderUnavailableError,
    ShapeError,
)
from .preprocess import TokenChunk
from .util import hash_to_unit, splitmix64, stable_hash64

DEFAULT_HASHED_DIM = 128


@dataclass(frozen=True)
class ProviderConfig:
    kind: str = "hashed"  # hashed | file | remote
    dim: int = DEFAULT_HASHED_DIM
    seed: int = 0
    path: str = ""  # file provider
    endpoint: str = ""  # remote provider
    model: str = "default"
    timeout_ms: int = 10_000
    max_retries: int = 2
    max_batch: int = 16

    def __post_init__(self) -> None:
        if self.kind not in ("hashed", "file", "remote"):
            raise ConfigError(f"unknown provider kind: {self.kind}")
        if self.dim < 1:
            raise ConfigError("embedding dim must be positive")
        if self.kind == "remote" and self.timeout_ms <= 0:
            raise ConfigError("remote timeout must be positive")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "dim": self.dim,
            "seed": self.seed,
            "path": self.path,
            "endpoint": self.endpoint,
            "model": self.model,
            "timeout_ms": self.timeout_ms,
            "max_retries": self.max_retries,
            "max_batch": self.max_batch,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ProviderConfig":
        return cls(**{k: obj[k] for k in obj})


class HashedProvider:
    """Deterministic per-token unit vectors from a splitmix64 stream."""

    def __init__(self, cfg: ProviderConfig):
        self.cfg = cfg
        self.dim = cfg.dim
        self._rows: dict[int, np.ndarray] = {}
        self._dims_u64 = np.arange(cfg.dim, dtype=np.uint64)

    def _row(self, token_id: int) -> np.ndarray:
        row = self._rows.get(token_id)
        if row is None:
            key = stable_hash64("hashed-embedding", token_id, seed=self.cfg.seed)
            raw = hash_to_unit(splitmix64(np.uint64(key) ^ self._dims_u64)) * 2.0 - 1.0
            norm = float(np.linalg.norm(raw))
            row = raw / norm if norm > 0 else raw
            row.setflags(write=False)
            self._rows[token_id] = row
        return row

    def embed_batch(
        self,
        chunks: list[TokenChunk],
        keys: list[tuple[str, int]] | None = None,
        texts: list[str] | None = None,
    ) -> list[np.ndarray]:
        out = []
        for chunk in chunks:
            emb = np.zeros((len(chunk.token_ids), self.dim), dtype=np.float64)
            for i in range(chunk.length):
                emb[i] = self._row(int(chunk.token_ids[i]))
            out.append(emb)
        return out


class FileProvider:
    """Precomputed embeddings: a JSON header line then little-endian float32."""

    def __init__(self, cfg: ProviderConfig):
        if not cfg.path:
            raise ConfigError("file provider needs a path")
        self.cfg = cfg
        with open(cfg.path, "rb") as fh:
            header = json.loads(fh.readline().decode("utf-8"))
            self._payload_start = fh.tell()
        self.dim = int(header["dim"])
        self.chunk_len = int(header["chunk_len"])
        if cfg.dim and cfg.dim != self.dim:
            raise ShapeError(
                f"file declares dim {self.dim}, config expects {cfg.dim}"
            )
        self._offsets = {
            (str(e["note_id"]), int(e["chunk"])): int(e["offset"])
            for e in header["entries"]
        }

    def embed_batch(
        self,
        chunks: list[TokenChunk],
        keys: list[tuple[str, int]] | None = None,
        texts: list[str] | None = None,
    ) -> list[np.ndarray]:
        if keys is None or len(keys) != len(chunks):
            raise MissingEmbeddingError("file provider requires a (note_id, chunk) key per chunk")
        out = []
        n_floats = self.chunk_len * self.dim
        with open(self.cfg.path, "rb") as fh:
            for chunk, key in zip(chunks, keys):
                offset = self._offsets.get((str(key[0]), int(key[1])))
                if offset is None:
                    raise MissingEmbeddingError(f"no embedding for {key!r}")
                if len(chunk.token_ids) != self.chunk_len:
                    raise ShapeError(
                        f"chunk length {len(chunk.token_ids)} != file chunk_len {self.chunk_len}"
                    )
                fh.seek(self._payload_start + offset)
                raw = fh.read(n_floats * 4)
                if len(raw) != n_floats * 4:
                    raise MissingEmbeddingError(f"truncated payload for {key!r}")
                emb = (
                    np.frombuffer(raw, dtype="<f4")
                    .reshape(self.chunk_len, self.dim)
                    .astype(np.float64)
                )
                emb[chunk.mask_array() == 0] = 0.0
                out.append(emb)
        return out


def write_embedding_file(
    path: str | Path,
    entries: list[tuple[str, int, np.ndarray]],
    chunk_len: int,
    dim: int,
) -> None:
    """Write the file-provider container for (note_id, chunk_idx, L x D) triples."""
    header_entries = []
    payload = bytearray()
    for note_id, chunk_idx, emb in entries:
        if emb.shape != (chunk_len, dim):
            raise ShapeError(f"embedding for {note_id}:{chunk_idx} has shape {emb.shape}")
        header_entries.append(
            {"note_id": note_id, "chunk": chunk_idx, "offset": len(payload)}
        )
        payload.extend(np.ascontiguousarray(emb, dtype="<f4").tobytes())
    header = {"dim": dim, "chunk_len": chunk_len, "entries": header_entries}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(bytes(payload))


class RemoteProvider:
    """JSON-over-HTTP provider speaking the /v1/embed wire protocol."""

    def __init__(self, cfg: ProviderConfig, session: requests.Session | None = None):
        if not cfg.endpoint:
            raise ConfigError("remote provider needs an endpoint")
        self.cfg = cfg
        self.dim = cfg.dim
        self._session = session or requests.Session()

    def _post(self, payload: dict) -> dict:
        last_err: Exception | None = None
        for _ in range(self.cfg.max_retries + 1):
            try:
                resp = self._session.post(
                    self.cfg.endpoint,
                    json=payload,
                    timeout=self.cfg.timeout_ms / 1000.0,
                )
            except requests.RequestException as err:
                last_err = err
                time.sleep(0.01)
                continue
            if 400 <= resp.status_code < 500:
                raise ProviderRequestError(
                    f"provider rejected request: HTTP {resp.status_code}"
                )
            if resp.status_code != 200:
                last_err = ProviderUnavailableError(f"HTTP {resp.status_code}")
                time.sleep(0.01)
                continue
            return resp.json()
        raise ProviderUnavailableError(
            f"embedding provider unreachable after {self.cfg.max_retries + 1} attempts"
        ) from last_err

    def embed_batch(
        self,
        chunks: list[TokenChunk],
        keys: list[tuple[str, int]] | None = None,
        texts: list[str] | None = None,
    ) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        cap = max(1, self.cfg.max_batch)
        for lo in range(0, len(chunks), cap):
            batch = chunks[lo : lo + cap]
            payload = {
                "model": self.cfg.model,
                "chunks": [list(c.token_ids) for c in batch],
                "masks": [list(c.mask) for c in batch],
            }
            if texts is not None:
                payload["texts"] = list(texts[lo : lo + cap])
            body = self._post(payload)
            if int(body.get("dim", -1)) != self.dim:
                raise ShapeError(
                    f"provider returned dim {body.get('dim')}, expected {self.dim}"
                )
            embs = body.get("embeddings", [])
            if len(embs) != len(batch):
                raise ShapeError(
                    f"provider returned {len(embs)} embeddings for {len(batch)} chunks"
                )
            for chunk, rows in zip(batch, embs):
                emb = np.asarray(rows, dtype=np.float64)
                if emb.shape != (len(chunk.token_ids), self.dim):
                    raise ShapeError(f"bad embedding shape {emb.shape}")
                emb[chunk.mask_array() == 0] = 0.0
                out.append(emb)
        return out


Provider = HashedProvider | FileProvider | RemoteProvider


def make_provider(cfg: ProviderConfig) -> Provider:
    if cfg.kind == "hashed":
        return HashedProvider(cfg)
    if cfg.kind == "file":
        return FileProvider(cfg)
    return RemoteProvider(cfg)


def embed_chunk(chunk: TokenChunk, cfg: ProviderConfig) -> np.ndarray:
    """One-shot convenience wrapper; reuse a provider object in hot paths."""
    return make_provider(cfg).embed_batch([chunk])[0]


def embed_batch(chunks: list[TokenChunk], cfg: ProviderConfig) -> list[np.ndarray]:
    if not chunks:
        return []
    return make_provider(cfg).embed_batch(chunks)
