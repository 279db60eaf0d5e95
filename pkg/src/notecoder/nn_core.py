"""Minimal neural toolkit for chunk classification.

Architecture: multi-width 1-D convolution over the token axis, ReLU,
max-over-time pooling, an optional auxiliary feature vector concatenated to
the pooled features, one or more dense layers, and an element-wise sigmoid
output trained with mean binary cross-entropy.

Everything is plain numpy in double precision with hand-derived backward
passes; ``grad_check`` verifies them against central finite differences.
Checkpoints store tensors in little-endian float32 behind a JSON header.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError, NumericError, ShapeError
from .util import sha256_hex

LOSS_CLAMP = 1e-7

ParamSet = dict[str, np.ndarray]
GradSet = dict[str, np.ndarray]


@dataclass(frozen=True)
class ConvSpec:
    kernel_widths: tuple[int, ...] = (3, 4, 5)
    filters_per_width: int = 64
    input_dim: int = 128

    def __post_init__(self) -> None:
        if not self.kernel_widths or min(self.kernel_widths) < 1:
            raise ConfigError("kernel widths must be positive")
        if self.filters_per_width < 1 or self.input_dim < 1:
            raise ConfigError("filters and input_dim must be positive")

    @property
    def feature_dim(self) -> int:
        return self.filters_per_width * len(self.kernel_widths)


@dataclass(frozen=True)
class DenseSpec:
    in_dim: int
    out_dim: int
    activation: str = "relu"  # relu | sigmoid | identity

    def __post_init__(self) -> None:
        if self.in_dim < 1 or self.out_dim < 1:
            raise ConfigError("dense dims must be positive")
        if self.activation not in ("relu", "sigmoid", "identity"):
            raise ConfigError(f"unknown activation: {self.activation}")


@dataclass(frozen=True)
class NetSpec:
    """Full network shape: conv stack, optional aux input, dense head."""

    conv: ConvSpec
    out_dim: int
    hidden_dim: int = 128
    hidden_activation: str = "relu"
    aux_dim: int = 0

    def dense_layers(self) -> list[DenseSpec]:
        head_in = self.conv.feature_dim + self.aux_dim
        if self.hidden_dim <= 0:
            return [DenseSpec(head_in, self.out_dim, "sigmoid")]
        return [
            DenseSpec(head_in, self.hidden_dim, self.hidden_activation),
            DenseSpec(self.hidden_dim, self.out_dim, "sigmoid"),
        ]

    def to_dict(self) -> dict:
        return {
            "kernel_widths": list(self.conv.kernel_widths),
            "filters_per_width": self.conv.filters_per_width,
            "input_dim": self.conv.input_dim,
            "out_dim": self.out_dim,
            "hidden_dim": self.hidden_dim,
            "hidden_activation": self.hidden_activation,
            "aux_dim": self.aux_dim,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "NetSpec":
        return cls(
            conv=ConvSpec(
                kernel_widths=tuple(obj["kernel_widths"]),
                filters_per_width=int(obj["filters_per_width"]),
                input_dim=int(obj["input_dim"]),
            ),
            out_dim=int(obj["out_dim"]),
            hidden_dim=int(obj["hidden_dim"]),
            hidden_activation=obj["hidden_activation"],
            aux_dim=int(obj["aux_dim"]),
        )


def param_shapes(spec: NetSpec) -> dict[str, tuple[int, ...]]:
    """Canonical parameter order: conv stacks by width, then dense layers."""
    shapes: dict[str, tuple[int, ...]] = {}
    for w in spec.conv.kernel_widths:
        shapes[f"conv{w}.w"] = (w, spec.conv.input_dim, spec.conv.filters_per_width)
        shapes[f"conv{w}.b"] = (spec.conv.filters_per_width,)
    for i, layer in enumerate(spec.dense_layers()):
        shapes[f"dense{i}.w"] = (layer.in_dim, layer.out_dim)
        shapes[f"dense{i}.b"] = (layer.out_dim,)
    return shapes


def init_params(spec: NetSpec, seed: int = 0) -> ParamSet:
    """Glorot-uniform weights, zero biases, float64."""
    rng = np.random.default_rng(seed)
    params: ParamSet = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=np.float64)
        else:
            if len(shape) == 3:
                fan_in, fan_out = shape[0] * shape[1], shape[2]
            else:
                fan_in, fan_out = shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-limit, limit, size=shape)
    return params


def _check_params(params: ParamSet, spec: NetSpec) -> None:
    expected = param_shapes(spec)
    if set(params) != set(expected):
        raise ShapeError(
            f"parameter names {sorted(params)} != expected {sorted(expected)}"
        )
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise ShapeError(f"{name} has shape {params[name].shape}, expected {shape}")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _apply_activation(pre: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(pre, 0.0)
    if kind == "sigmoid":
        return _sigmoid(pre)
    return pre


def _activation_grad(pre: np.ndarray, post: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (pre > 0).astype(np.float64)
    if kind == "sigmoid":
        return post * (1.0 - post)
    return np.ones_like(pre)


def forward(
    embedding: np.ndarray,
    params: ParamSet,
    spec: NetSpec,
    aux: np.ndarray | None = None,
) -> tuple[np.ndarray, dict]:
    """Run one chunk embedding through the network.

    Returns (probs, cache); the cache carries every intermediate the backward
    pass needs, including argmax positions for max-over-time routing.
    """
    emb = np.asarray(embedding, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[1] != spec.conv.input_dim:
        raise ShapeError(
            f"embedding shape {emb.shape} incompatible with input_dim {spec.conv.input_dim}"
        )
    if emb.shape[0] < max(spec.conv.kernel_widths):
        raise ShapeError("chunk shorter than the widest kernel")
    _check_params(params, spec)
    if spec.aux_dim:
        if aux is None or np.asarray(aux).shape != (spec.aux_dim,):
            raise ShapeError(f"aux vector of length {spec.aux_dim} required")
        aux = np.asarray(aux, dtype=np.float64)
    elif aux is not None:
        raise ShapeError("aux given but spec.aux_dim == 0")

    cache: dict = {"emb": emb, "aux": aux, "spec": spec, "conv": {}}
    pooled_parts = []
    for w in spec.conv.kernel_widths:
        kernel = params[f"conv{w}.w"]
        bias = params[f"conv{w}.b"]
        windows = np.lib.stride_tricks.sliding_window_view(emb, (w, emb.shape[1]))
        windows = windows.reshape(emb.shape[0] - w + 1, -1)
        pre = windows @ kernel.reshape(-1, kernel.shape[2]) + bias
        post = np.maximum(pre, 0.0)
        argmax = post.argmax(axis=0)  # first index on ties
        pooled = post[argmax, np.arange(post.shape[1])]
        cache["conv"][w] = {"windows": windows, "pre": pre, "argmax": argmax}
        pooled_parts.append(pooled)
    pooled_all = np.concatenate(pooled_parts)
    cache["pooled"] = pooled_all

    x = pooled_all if aux is None else np.concatenate([pooled_all, aux])
    cache["dense"] = []
    for i, layer in enumerate(spec.dense_layers()):
        weight = params[f"dense{i}.w"]
        pre = x @ weight + params[f"dense{i}.b"]
        post = _apply_activation(pre, layer.activation)
        cache["dense"].append(
            {"input": x, "pre": pre, "post": post, "layer": layer, "weight": weight}
        )
        x = post
    probs = x
    if not np.all(np.isfinite(probs)):
        raise NumericError("non-finite values in network output")
    cache["probs"] = probs
    return probs, cache


def bce_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean multi-label binary cross-entropy with probability clamping."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"probs shape {p.shape} != labels shape {y.shape}")
    pc = np.clip(p, LOSS_CLAMP, 1.0 - LOSS_CLAMP)
    return float(np.mean(-(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))))


def backward(cache: dict, labels: np.ndarray) -> GradSet:
    """Exact gradients of bce_loss(forward(...)) w.r.t. every parameter.

    Max-over-time routes each filter's gradient to its (first) argmax
    position; positions clamped by the loss receive zero gradient, matching
    what finite differences see.
    """
    if "probs" not in cache or "dense" not in cache:
        raise ConfigError("backward requires the cache produced by forward")
    spec: NetSpec = cache["spec"]
    probs = cache["probs"]
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != probs.shape:
        raise ShapeError(f"labels shape {y.shape} != output shape {probs.shape}")
    k = probs.shape[0]

    grads: GradSet = {}
    # Fused sigmoid + clamped BCE: d(loss)/d(pre) = (p - y)/k inside the
    # clamp window, exactly 0 outside it.
    inside = (probs > LOSS_CLAMP) & (probs < 1.0 - LOSS_CLAMP)
    g = np.where(inside, probs - y, 0.0) / k

    dense_layers = cache["dense"]
    if dense_layers[-1]["layer"].activation != "sigmoid":
        raise ConfigError("output layer must be sigmoid for bce backward")
    g_x = g
    for i in range(len(dense_layers) - 1, -1, -1):
        entry = dense_layers[i]
        grads[f"dense{i}.w"] = np.outer(entry["input"], g)
        grads[f"dense{i}.b"] = g.copy()
        g_x = entry["weight"] @ g
        if i > 0:
            prev = dense_layers[i - 1]
            g = g_x * _activation_grad(
                prev["pre"], prev["post"], prev["layer"].activation
            )

    pooled_dim = spec.conv.feature_dim
    g_pooled = g_x[:pooled_dim]

    offset = 0
    f = spec.conv.filters_per_width
    for w in spec.conv.kernel_widths:
        conv_cache = cache["conv"][w]
        g_pool_w = g_pooled[offset : offset + f]
        offset += f
        pre = conv_cache["pre"]
        argmax = conv_cache["argmax"]
        d_post = np.zeros_like(pre)
        d_post[argmax, np.arange(f)] = g_pool_w
        d_pre = d_post * (pre > 0)
        windows = conv_cache["windows"]
        grads[f"conv{w}.w"] = (windows.T @ d_pre).reshape(
            w, spec.conv.input_dim, f
        )
        grads[f"conv{w}.b"] = d_pre.sum(axis=0)
    return grads


def forward_batch(
    embeddings: np.ndarray,
    params: ParamSet,
    spec: NetSpec,
    aux: np.ndarray | None = None,
) -> tuple[np.ndarray, dict]:
    """Vectorized forward over a batch: (B, L, D) -> (B, out_dim).

    Element-wise equal to stacking per-chunk ``forward`` calls; exists so
    training does one BLAS call per kernel width instead of B.
    """
    embs = np.asarray(embeddings, dtype=np.float64)
    if embs.ndim != 3 or embs.shape[2] != spec.conv.input_dim:
        raise ShapeError(f"batch shape {embs.shape} incompatible with spec")
    if embs.shape[1] < max(spec.conv.kernel_widths):
        raise ShapeError("chunk shorter than the widest kernel")
    _check_params(params, spec)
    b, length, dim = embs.shape
    if spec.aux_dim:
        if aux is None:
            raise ShapeError(f"aux of shape ({b}, {spec.aux_dim}) required")
        aux = np.asarray(aux, dtype=np.float64)
        if aux.shape != (b, spec.aux_dim):
            raise ShapeError(f"aux of shape ({b}, {spec.aux_dim}) required")
    elif aux is not None:
        raise ShapeError("aux given but spec.aux_dim == 0")

    cache: dict = {"spec": spec, "aux": aux, "conv": {}, "batch": b}
    pooled_parts = []
    for w in spec.conv.kernel_widths:
        kernel = params[f"conv{w}.w"]
        bias = params[f"conv{w}.b"]
        t = length - w + 1
        windows = np.lib.stride_tricks.sliding_window_view(embs, (w, dim), axis=(1, 2))
        windows = windows.reshape(b * t, w * dim)
        pre = (windows @ kernel.reshape(-1, kernel.shape[2]) + bias).reshape(b, t, -1)
        post = np.maximum(pre, 0.0)
        argmax = post.argmax(axis=1)  # (B, F), first index on ties
        pooled = np.take_along_axis(post, argmax[:, None, :], axis=1)[:, 0, :]
        cache["conv"][w] = {"windows": windows, "pre": pre, "argmax": argmax, "t": t}
        pooled_parts.append(pooled)
    pooled_all = np.concatenate(pooled_parts, axis=1)
    cache["pooled"] = pooled_all

    x = pooled_all if aux is None else np.concatenate([pooled_all, aux], axis=1)
    cache["dense"] = []
    for i, layer in enumerate(spec.dense_layers()):
        weight = params[f"dense{i}.w"]
        pre = x @ weight + params[f"dense{i}.b"]
        post = _apply_activation(pre, layer.activation)
        cache["dense"].append(
            {"input": x, "pre": pre, "post": post, "layer": layer, "weight": weight}
        )
        x = post
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite values in network output")
    cache["probs"] = x
    return x, cache


def bce_loss_batch(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean over the batch of per-instance mean BCE."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"probs shape {p.shape} != labels shape {y.shape}")
    pc = np.clip(p, LOSS_CLAMP, 1.0 - LOSS_CLAMP)
    return float(np.mean(-(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))))


def backward_batch(cache: dict, labels: np.ndarray) -> GradSet:
    """Gradients of bce_loss_batch w.r.t. parameters (batch-mean loss)."""
    spec: NetSpec = cache["spec"]
    probs = cache["probs"]
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != probs.shape:
        raise ShapeError(f"labels shape {y.shape} != output shape {probs.shape}")
    b, k = probs.shape

    grads: GradSet = {}
    inside = (probs > LOSS_CLAMP) & (probs < 1.0 - LOSS_CLAMP)
    g = np.where(inside, probs - y, 0.0) / (k * b)

    dense_layers = cache["dense"]
    if dense_layers[-1]["layer"].activation != "sigmoid":
        raise ConfigError("output layer must be sigmoid for bce backward")
    g_x = g
    for i in range(len(dense_layers) - 1, -1, -1):
        entry = dense_layers[i]
        grads[f"dense{i}.w"] = entry["input"].T @ g
        grads[f"dense{i}.b"] = g.sum(axis=0)
        g_x = g @ entry["weight"].T
        if i > 0:
            prev = dense_layers[i - 1]
            g = g_x * _activation_grad(
                prev["pre"], prev["post"], prev["layer"].activation
            )

    g_pooled = g_x[:, : spec.conv.feature_dim]
    offset = 0
    f = spec.conv.filters_per_width
    for w in spec.conv.kernel_widths:
        conv_cache = cache["conv"][w]
        g_pool_w = g_pooled[:, offset : offset + f]
        offset += f
        pre = conv_cache["pre"]
        d_post = np.zeros_like(pre)
        np.put_along_axis(d_post, conv_cache["argmax"][:, None, :], g_pool_w[:, None, :], axis=1)
        d_pre = d_post * (pre > 0)
        d_pre_flat = d_pre.reshape(-1, f)
        grads[f"conv{w}.w"] = (conv_cache["windows"].T @ d_pre_flat).reshape(
            w, spec.conv.input_dim, f
        )
        grads[f"conv{w}.b"] = d_pre_flat.sum(axis=0)
    return grads


@dataclass
class AdamState:
    """First/second moment accumulators plus hyperparameters."""

    m: ParamSet
    v: ParamSet
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(
        cls,
        params: ParamSet,
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> "AdamState":
        if not (0 < beta1 < 1 and 0 < beta2 < 1 and eps > 0):
            raise ConfigError("invalid Adam hyperparameters")
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(params: ParamSet, grads: GradSet, state: AdamState) -> tuple[ParamSet, AdamState]:
    """One bias-corrected Adam update, in place; returns (params, state)."""
    if set(grads) != set(params):
        raise ShapeError("grad names do not mirror parameter names")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"grad {name} shape {g.shape} != param shape {p.shape}")
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


def loss_at(
    params: ParamSet,
    embedding: np.ndarray,
    labels: np.ndarray,
    spec: NetSpec,
    aux: np.ndarray | None = None,
) -> float:
    probs, _ = forward(embedding, params, spec, aux)
    return bce_loss(probs, labels)


def grad_check(
    params: ParamSet,
    embedding: np.ndarray,
    labels: np.ndarray,
    spec: NetSpec,
    h: float = 1e-5,
    aux: np.ndarray | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per scalar parameter is
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    """
    if h <= 0:
        raise ConfigError("finite-difference step must be positive")
    _, cache = forward(embedding, params, spec, aux)
    analytic = backward(cache, labels)
    worst = 0.0
    for name, tensor in params.items():
        flat = tensor.reshape(-1)
        grad_flat = analytic[name].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = loss_at(params, embedding, labels, spec, aux)
            flat[j] = orig - h
            down = loss_at(params, embedding, labels, spec, aux)
            flat[j] = orig
            numeric = (up - down) / (2.0 * h)
            denom = max(1e-8, abs(grad_flat[j]) + abs(numeric))
            worst = max(worst, abs(grad_flat[j] - numeric) / denom)
    return worst


CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, params: ParamSet, spec: NetSpec, meta: dict | None = None) -> None:
    """JSON header line + concatenated little-endian float32 tensors."""
    names = list(param_shapes(spec))
    payload = bytearray()
    tensors = []
    for name in names:
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        tensors.append({"name": name, "shape": list(arr.shape)})
        payload.extend(arr.tobytes())
    header = {
        "format": "notecoder-checkpoint",
        "version": CHECKPOINT_VERSION,
        "spec": spec.to_dict(),
        "tensors": tensors,
        "meta": meta or {},
        "payload_sha256": sha256_hex(bytes(payload)),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(bytes(payload))


def load_checkpoint(path: str | Path) -> tuple[ParamSet, NetSpec, dict]:
    """Inverse of save_checkpoint; verifies version and payload checksum."""
    with open(path, "rb") as fh:
        try:
            header = json.loads(fh.readline().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as err:
            raise CheckpointError(f"unreadable checkpoint header: {err}") from err
        if header.get("format") != "notecoder-checkpoint":
            raise CheckpointError("not a notecoder checkpoint")
        if header.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
        payload = fh.read()
    if sha256_hex(payload) != header.get("payload_sha256"):
        raise CheckpointError("checkpoint payload checksum mismatch")
    spec = NetSpec.from_dict(header["spec"])
    params: ParamSet = {}
    offset = 0
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        chunk = payload[offset : offset + count * 4]
        params[entry["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
        offset += count * 4
    return params, spec, header.get("meta", {})
