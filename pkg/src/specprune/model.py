"""Decoder-only transformer with per-sublayer residual bypass and KV caching.

A sublayer (one attention block or one FFN block) is the unit that can be
switched off: disabling it makes the residual stream pass through untouched,
which is how a pruned draft model is built without copying any weights.

Two forward implementations exist on purpose:

* ``forward_train`` runs batched full sequences through the autodiff ops so
  gradients are available under ``trace()``;
* ``forward_logits`` is the untraced incremental decode path on raw numpy,
  fed by a ``KvCache``.

Both compute the same function; tests hold them to the documented tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as T
from .errors import CapacityError, ConfigError, NumericError, UsageError
from .tensor import Tensor

ATTN_SCALE_KEYS = ("wq", "wk", "wv")


class SublayerKind(str, Enum):
    ATTENTION = "attention"
    FFN = "ffn"


@dataclass(frozen=True, order=True)
class SublayerId:
    layer_index: int
    kind: SublayerKind

    def __str__(self) -> str:
        return f"{'attn' if self.kind is SublayerKind.ATTENTION else 'ffn'}[{self.layer_index}]"


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; all fields serialize as u32."""

    vocab_size: int = 257  # bytes 0..255 plus one end-of-document token
    d_model: int = 128
    n_heads: int = 8
    n_layers: int = 8
    d_ff: int = 512
    max_context: int = 256
    rng_seed: int = 0

    def validate(self) -> None:
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.n_layers < 1:
            raise ConfigError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.max_context < 2:
            raise ConfigError(f"max_context must be >= 2, got {self.max_context}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "d_ff", "max_context", "rng_seed"):
            v = getattr(self, name)
            if not (0 <= v < 2**32):
                raise ConfigError(f"{name} must fit in u32, got {v}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def all_sublayers(self) -> list[SublayerId]:
        out = []
        for i in range(self.n_layers):
            out.append(SublayerId(i, SublayerKind.ATTENTION))
            out.append(SublayerId(i, SublayerKind.FFN))
        return out


def _param_layout(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Fixed parameter order; the checkpoint format serializes exactly this."""
    d, dff = config.d_model, config.d_ff
    layout: list[tuple[str, tuple[int, ...]]] = [
        ("embed", (config.vocab_size, d)),
        ("pos", (config.max_context, d)),
    ]
    for i in range(config.n_layers):
        layout += [
            (f"layer{i}.attn.norm.gain", (d,)),
            (f"layer{i}.attn.norm.bias", (d,)),
            (f"layer{i}.attn.wq", (d, d)),
            (f"layer{i}.attn.wk", (d, d)),
            (f"layer{i}.attn.wv", (d, d)),
            (f"layer{i}.attn.wo", (d, d)),
            (f"layer{i}.ffn.norm.gain", (d,)),
            (f"layer{i}.ffn.norm.bias", (d,)),
            (f"layer{i}.ffn.w1", (d, dff)),
            (f"layer{i}.ffn.w2", (dff, d)),
        ]
    layout += [("final_norm.gain", (d,)), ("final_norm.bias", (d,))]
    return layout


def sublayer_of_param(key: str) -> SublayerId | None:
    """Map a parameter key to its sublayer, or None for shared parameters."""
    if not key.startswith("layer"):
        return None
    head, kind, _rest = key.split(".", 2)
    index = int(head[len("layer"):])
    return SublayerId(index, SublayerKind.ATTENTION if kind == "attn" else SublayerKind.FFN)


class Model:
    """Weights plus an active-sublayer mask.

    Instances are immutable after construction and share parameter storage
    freely: a draft model is the same weights with a smaller ``active_mask``.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor], active_mask: frozenset[SublayerId]):
        config.validate()
        self.config = config
        self.params = params
        self.active_mask = frozenset(active_mask)
        all_ids = set(config.all_sublayers())
        if not self.active_mask <= all_ids:
            raise ConfigError("active_mask contains sublayers outside the architecture")

    @property
    def dtype(self):
        return self.params["embed"].dtype

    def astype(self, dtype) -> "Model":
        """Copy of the model with parameters cast to ``dtype``."""
        params = {k: Tensor._wrap(v.data.astype(dtype)) for k, v in self.params.items()}
        return Model(self.config, params, self.active_mask)

    def with_mask(self, active_mask) -> "Model":
        """Same weights (shared storage), different active mask."""
        return Model(self.config, self.params, frozenset(active_mask))

    def active_attention_layers(self) -> list[int]:
        return sorted(
            s.layer_index for s in self.active_mask if s.kind is SublayerKind.ATTENTION
        )

    def param_bytes(self) -> bytes:
        """Concatenated little-endian float32 bytes in layout order."""
        chunks = []
        for key, _ in _param_layout(self.config):
            chunks.append(np.ascontiguousarray(self.params[key].data.astype("<f4")).tobytes())
        return b"".join(chunks)


def init_model(config: ModelConfig) -> Model:
    """Deterministically initialize from ``config.rng_seed``.

    Draw order is fixed (the parameter layout order), so the same seed gives
    bitwise identical weights.  Residual-path output projections use a
    smaller scale so the residual stream's variance stays bounded with depth.
    """
    config.validate()
    rng = np.random.default_rng(config.rng_seed)
    base_scale = 0.02
    resid_scale = 0.02 / math.sqrt(2.0 * config.n_layers)
    params: dict[str, Tensor] = {}
    for key, shape in _param_layout(config):
        if key.endswith("norm.gain"):
            arr = np.ones(shape)
        elif key.endswith("norm.bias"):
            arr = np.zeros(shape)
        elif key.endswith(".wo") or key.endswith(".w2"):
            arr = rng.normal(0.0, resid_scale, size=shape)
        else:
            arr = rng.normal(0.0, base_scale, size=shape)
        params[key] = Tensor._wrap(arr.astype(np.float32))
    return Model(config, params, frozenset(config.all_sublayers()))


# ---------------------------------------------------------------------------
# KV cache


class KvCache:
    """Per-session key/value store for the active attention sublayers.

    Buffers are preallocated at ``max_context``; ``truncate`` just moves the
    length pointer, which makes speculative rollback O(1) and idempotent.
    Single-owner: one generation session, one thread.
    """

    def __init__(self, model: Model):
        cfg = model.config
        self._layers = model.active_attention_layers()
        self._k = {}
        self._v = {}
        dt = model.dtype
        for i in self._layers:
            self._k[i] = np.empty((cfg.n_heads, cfg.max_context, cfg.head_dim), dtype=dt)
            self._v[i] = np.empty((cfg.n_heads, cfg.max_context, cfg.head_dim), dtype=dt)
        self.cached_len = 0
        self.capacity = cfg.max_context

    def key(self, layer_index: int) -> np.ndarray:
        return self._k[layer_index][:, : self.cached_len]

    def value(self, layer_index: int) -> np.ndarray:
        return self._v[layer_index][:, : self.cached_len]

    def _append(self, layer_index: int, k: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n = k.shape[1]
        lo, hi = self.cached_len, self.cached_len + n
        self._k[layer_index][:, lo:hi] = k
        self._v[layer_index][:, lo:hi] = v
        return self._k[layer_index][:, :hi], self._v[layer_index][:, :hi]

    def _advance(self, n: int) -> None:
        self.cached_len += n

    def truncate(self, n: int) -> None:
        """Keep exactly the first ``n`` cached positions."""
        if n < 0 or n > self.cached_len:
            raise UsageError(f"cannot truncate cache of length {self.cached_len} to {n}")
        self.cached_len = n


# ---------------------------------------------------------------------------
# numpy decode path (untraced, incremental)


def _np_layer_norm(x, gain, bias, eps=1e-5):
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered**2).mean(axis=-1, keepdims=True)
    return centered / np.sqrt(var + eps) * gain + bias


def _np_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _np_gelu(x):
    t = np.tanh(T._GELU_C * (x + 0.044715 * (x * x * x)))
    return 0.5 * x * (1.0 + t)


def forward_logits(model: Model, tokens, cache: KvCache | None = None) -> tuple[np.ndarray, KvCache]:
    """Incremental forward: logits for the fed positions plus the updated cache.

    Feeding one token at a time or many at once gives the same logits up to
    float roundoff.  Row ``t`` of the result is the next-token distribution's
    logits after consuming ``tokens[:t+1]`` (on top of whatever the cache
    already held).
    """
    cfg = model.config
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise UsageError("forward_logits wants a non-empty 1-D token sequence")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise IndexError(f"token id out of range for vocab {cfg.vocab_size}")
    if cache is None:
        cache = KvCache(model)
    base = cache.cached_len
    n = ids.size
    if base + n > cfg.max_context:
        raise CapacityError(
            f"context overflow: {base} cached + {n} new > max_context {cfg.max_context}"
        )
    p = {k: t.data for k, t in model.params.items()}
    h = p["embed"][ids] + p["pos"][base : base + n]
    nh, hd = cfg.n_heads, cfg.head_dim
    inv_scale = 1.0 / math.sqrt(hd)
    # mask[i, j]: new position base+i may attend to absolute position j <= base+i
    col = np.arange(base + n)
    row = np.arange(base, base + n)[:, None]
    mask = np.where(col[None, :] > row, T.MASK_VALUE, 0.0).astype(h.dtype)
    for i in range(cfg.n_layers):
        if SublayerId(i, SublayerKind.ATTENTION) in model.active_mask:
            x = _np_layer_norm(h, p[f"layer{i}.attn.norm.gain"], p[f"layer{i}.attn.norm.bias"])
            q = (x @ p[f"layer{i}.attn.wq"]).reshape(n, nh, hd).transpose(1, 0, 2)
            k = (x @ p[f"layer{i}.attn.wk"]).reshape(n, nh, hd).transpose(1, 0, 2)
            v = (x @ p[f"layer{i}.attn.wv"]).reshape(n, nh, hd).transpose(1, 0, 2)
            q = q * inv_scale
            kc, vc = cache._append(i, k, v)
            scores = q @ kc.transpose(0, 2, 1) + mask
            mix = _np_softmax(scores) @ vc
            h = h + mix.transpose(1, 0, 2).reshape(n, cfg.d_model) @ p[f"layer{i}.attn.wo"]
        if SublayerId(i, SublayerKind.FFN) in model.active_mask:
            x = _np_layer_norm(h, p[f"layer{i}.ffn.norm.gain"], p[f"layer{i}.ffn.norm.bias"])
            h = h + _np_gelu(x @ p[f"layer{i}.ffn.w1"]) @ p[f"layer{i}.ffn.w2"]
    cache._advance(n)
    x = _np_layer_norm(h, p["final_norm.gain"], p["final_norm.bias"])
    logits = x @ p["embed"].T  # output head is weight-tied to the embedding
    if not np.all(np.isfinite(logits)):
        raise NumericError("forward produced non-finite logits")
    return logits, cache


# ---------------------------------------------------------------------------
# traced training path


def forward_train(model: Model, tokens: np.ndarray) -> Tensor:
    """Batched full-sequence forward; traced when a tape is active.

    ``tokens`` is [B, T] integer ids; the result is [B, T, vocab] logits.
    """
    cfg = model.config
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 2 or ids.size == 0:
        raise UsageError("forward_train wants a non-empty [B, T] token array")
    B, L = ids.shape
    if L > cfg.max_context:
        raise CapacityError(f"sequence length {L} exceeds max_context {cfg.max_context}")
    tape = T.current_tape()
    if tape is not None:
        p = {k: tape.watch(t, k) for k, t in model.params.items()}
    else:
        p = model.params
    nh, hd = cfg.n_heads, cfg.head_dim
    h = T.add(T.embedding_lookup(p["embed"], ids), T.slice_rows(p["pos"], 0, L))
    mask = np.triu(np.full((L, L), T.MASK_VALUE, dtype=model.dtype), k=1)[None, None]
    inv_scale = 1.0 / math.sqrt(hd)
    for i in range(cfg.n_layers):
        if SublayerId(i, SublayerKind.ATTENTION) in model.active_mask:
            x = T.layer_norm(h, p[f"layer{i}.attn.norm.gain"], p[f"layer{i}.attn.norm.bias"])
            q = T.transpose(T.reshape(T.matmul(x, p[f"layer{i}.attn.wq"]), (B, L, nh, hd)), (0, 2, 1, 3))
            k = T.transpose(T.reshape(T.matmul(x, p[f"layer{i}.attn.wk"]), (B, L, nh, hd)), (0, 2, 3, 1))
            v = T.transpose(T.reshape(T.matmul(x, p[f"layer{i}.attn.wv"]), (B, L, nh, hd)), (0, 2, 1, 3))
            scores = T.matmul(T.mul(q, inv_scale), k)
            mix = T.matmul(T.softmax(scores, -1, mask=mask), v)
            mix = T.reshape(T.transpose(mix, (0, 2, 1, 3)), (B, L, cfg.d_model))
            h = T.add(h, T.matmul(mix, p[f"layer{i}.attn.wo"]))
        if SublayerId(i, SublayerKind.FFN) in model.active_mask:
            x = T.layer_norm(h, p[f"layer{i}.ffn.norm.gain"], p[f"layer{i}.ffn.norm.bias"])
            h = T.add(h, T.matmul(T.gelu(T.matmul(x, p[f"layer{i}.ffn.w1"])), p[f"layer{i}.ffn.w2"]))
    x = T.layer_norm(h, p["final_norm.gain"], p["final_norm.bias"])
    return T.matmul(x, T.transpose(p["embed"], (1, 0)))


def loss_on_batch(model: Model, batch) -> Tensor:
    """Summed next-token cross-entropy over a Batch (inputs/targets [B, T])."""
    inputs = np.asarray(batch.inputs)
    targets = np.asarray(batch.targets)
    if inputs.size == 0:
        raise UsageError("empty batch")
    logits = forward_train(model, inputs)
    B, L, V = logits.shape
    return T.cross_entropy(T.reshape(logits, (B * L, V)), targets.reshape(-1))
