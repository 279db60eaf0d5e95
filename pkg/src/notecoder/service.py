"""HTTP serving of a loaded model bundle.

One bundle per process, loaded at startup and never mutated; requests are
parsed by hand so malformed bodies map to the documented status codes
(400 bad input, 413 oversize, 503 provider unavailable, 500 internal).
"""
from __future__ import annotations

import json
import os
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .embed import ProviderConfig, make_provider
from .errors import (
    EmptyNoteError,
    NotecoderError,
    ProviderRequestError,
    ProviderUnavailableError,
)
from .model import ModelBundle, load_bundle, predict_note

DEFAULT_BODY_CAP = 1 << 20  # 1 MiB


@dataclass(frozen=True)
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8000
    bundle_path: str = ""
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    max_body_bytes: int = DEFAULT_BODY_CAP
    request_timeout_s: float = 30.0

    def __post_init__(self) -> None:
        if self.max_body_bytes < 1024:
            raise NotecoderError("max_body_bytes must be at least 1 KiB")

    @classmethod
    def load(cls, path: str | Path | None = None) -> "ServiceConfig":
        """Config file plus environment overrides (BIND_ADDR, BUNDLE_PATH,
        EMBED_ENDPOINT)."""
        obj: dict = {}
        if path:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        provider = ProviderConfig.from_dict(obj["provider"]) if "provider" in obj else ProviderConfig()
        host = obj.get("host", "127.0.0.1")
        port = int(obj.get("port", 8000))
        bind = os.environ.get("BIND_ADDR")
        if bind:
            host, _, maybe_port = bind.partition(":")
            if maybe_port:
                port = int(maybe_port)
        endpoint = os.environ.get("EMBED_ENDPOINT")
        if endpoint:
            provider = ProviderConfig(
                **{**provider.to_dict(), "kind": "remote", "endpoint": endpoint}
            )
        return cls(
            host=host,
            port=port,
            bundle_path=os.environ.get("BUNDLE_PATH", obj.get("bundle_path", "")),
            provider=provider,
            max_body_bytes=int(obj.get("max_body_bytes", DEFAULT_BODY_CAP)),
            request_timeout_s=float(obj.get("request_timeout_s", 30.0)),
        )


def _error(status: int, message: str, **extra) -> JSONResponse:
    return JSONResponse({"error": message, **extra}, status_code=status)


def make_app(
    bundle: ModelBundle | None,
    cfg: ServiceConfig,
    provider=None,
) -> FastAPI:
    """Build the ASGI app around an already-loaded bundle (or none)."""
    app = FastAPI(title="notecoder", docs_url=None, redoc_url=None)
    if provider is None:
        provider = make_provider(cfg.provider)

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "bundle_loaded": bundle is not None}

    @app.get("/v1/model")
    def model_info():
        if bundle is None:
            return _error(503, "no bundle loaded")
        space = bundle.space
        return {
            "fingerprint": bundle.fingerprint,
            "labels": {
                "chapters": space.n_chapters,
                "codes": space.n_codes,
                "total": space.n_labels,
            },
            "chapter_names": [c.name for c in space.chapters],
            "thresholds": [float(t) for t in bundle.thresholds],
            "tau_ch": bundle.tau_ch,
            "provider_kind": cfg.provider.kind,
            "chunk_len": bundle.chunk_len,
        }

    @app.post("/v1/predict")
    async def predict(request: Request):
        started = time.perf_counter()
        body = await request.body()
        if len(body) > cfg.max_body_bytes:
            return _error(413, f"request body exceeds {cfg.max_body_bytes} bytes")
        try:
            payload = json.loads(body)
        except (json.JSONDecodeError, UnicodeDecodeError):
            return _error(400, "request body is not valid JSON")
        if not isinstance(payload, dict) or not isinstance(payload.get("text"), str):
            return _error(400, "body must be a JSON object with a string 'text' field")
        text = payload["text"]
        if not text.strip():
            return _error(400, "'text' must be non-empty")
        top_k = payload.get("top_k_codes")
        if top_k is not None and (not isinstance(top_k, int) or top_k < 0):
            return _error(400, "'top_k_codes' must be a non-negative integer")
        if bundle is None:
            return _error(503, "no bundle loaded")
        try:
            result = predict_note(text, bundle, provider)
        except EmptyNoteError:
            return _error(400, "note has no usable text after cleaning")
        except (ProviderUnavailableError, ProviderRequestError) as err:
            return _error(503, f"embedding provider unavailable: {err}")
        except NotecoderError as err:
            incident = uuid.uuid4().hex[:12]
            return _error(500, "internal error", incident=incident)
        payload = result.to_dict()
        payload["codes"].sort(key=lambda c: (-c["score"], c["code"]))
        if top_k is not None:
            payload["codes"] = payload["codes"][:top_k]
        payload["latency_ms"] = (time.perf_counter() - started) * 1000.0
        return payload

    return app


def serve(cfg: ServiceConfig) -> None:
    """Load the bundle (if configured) and block on uvicorn."""
    import uvicorn

    bundle = load_bundle(cfg.bundle_path) if cfg.bundle_path else None
    app = make_app(bundle, cfg)
    uvicorn.run(
        app,
        host=cfg.host,
        port=cfg.port,
        timeout_keep_alive=int(cfg.request_timeout_s),
        log_level="info",
    )
