"""Decoder-only patch transformer with a multi-token, multi-quantile head."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Tensor
from .series import Series

DEFAULT_LEVELS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
NORM_SOURCE_FRACTION = 0.3

CKPT_MAGIC = b"MRAI2\x00"
CKPT_VERSION = 1


class NormalizationError(ValueError):
    """No observed value is available to compute normalization statistics."""


class ContextLengthError(ValueError):
    """The token sequence would exceed the configured context window."""


class EmptyInputError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    p_in: int = 16
    p_out: int = 16
    n_q: int = 9
    n_token: int = 4
    quantile_levels: tuple[float, ...] = DEFAULT_LEVELS
    projection_kind: str = "residual_block"
    max_context_patches: int = 512
    norm_first: bool = True
    rope_base: float = 10000.0

    def __post_init__(self):
        self.quantile_levels = tuple(float(q) for q in self.quantile_levels)
        levels = self.quantile_levels
        if len(levels) != self.n_q:
            raise ValueError(f"n_q={self.n_q} but {len(levels)} quantile levels given")
        if any(not 0.0 < q < 1.0 for q in levels) or any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValueError(f"quantile levels must be strictly increasing in (0, 1): {levels}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head dimension must be even for rotary positions")
        if self.p_in != self.p_out:
            raise ValueError(f"input and output patch sizes must agree ({self.p_in} != {self.p_out})")
        if self.projection_kind not in ("linear", "residual_block"):
            raise ValueError(f"unknown projection_kind {self.projection_kind!r}")
        if min(self.n_layers, self.n_token, self.d_ff, self.p_in, self.max_context_patches) < 1:
            raise ValueError("layer count, n_token, d_ff, patch size and context must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def head_out(self) -> int:
        return self.n_token * self.n_q * self.p_out

    @property
    def learned_embed_skip(self) -> bool:
        return 2 * self.p_in != self.d_model

    def to_dict(self) -> dict:
        d = asdict(self)
        d["quantile_levels"] = list(self.quantile_levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form number of scalar weights for ``cfg``."""
    d, f, o, x = cfg.d_model, cfg.d_ff, cfg.head_out, 2 * cfg.p_in
    embed = x * d + d + (x * d if cfg.learned_embed_skip else 0)
    layer = 4 * d * d + 2 * 2 * d + (d * f + f + f * d + d)
    final = 2 * d if cfg.norm_first else 0
    head = d * o + o
    if cfg.projection_kind == "residual_block":
        head += d * d + d + d * o
    return embed + cfg.n_layers * layer + final + head


@dataclass
class NormStats:
    mean: float
    std: float
    source_fraction: float = NORM_SOURCE_FRACTION

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.std + self.mean


def floor_std(std: float, mean: float) -> float:
    return max(std, 1e-3 * abs(mean) + 1e-6)


def compute_norm_stats(series: Series, source_fraction: float = NORM_SOURCE_FRACTION) -> NormStats:
    """Mean/std of observed values in the first ``source_fraction`` of the series."""
    n = int(math.floor(source_fraction * len(series)))
    vals = series.values[:n][~series.missing[:n]]
    if vals.size == 0:
        raise NormalizationError(
            f"series {series.id!r}: no observed value in the first {n} of {len(series)} points"
        )
    mean = float(vals.mean())
    return NormStats(mean, floor_std(float(vals.std()), mean), source_fraction)


def patchify(series: Series, p_in: int, norm: NormStats | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Split into left-padded patches of normalized values and observed flags.

    Returns ``(values, observed)``, both float32 ``[T, p_in]``; missing and pad
    slots are zero in both.
    """
    n = len(series)
    if n == 0:
        raise EmptyInputError(f"series {series.id!r} is empty")
    norm = norm or compute_norm_stats(series)
    pad = (-n) % p_in
    observed = np.concatenate([np.zeros(pad, bool), ~series.missing])
    vals = np.concatenate([np.zeros(pad), norm.normalize(np.nan_to_num(series.values))])
    vals = np.where(observed, vals, 0.0)
    t = (n + pad) // p_in
    return vals.reshape(t, p_in).astype(np.float32), observed.reshape(t, p_in).astype(np.float32)


def input_features(values: np.ndarray, observed: np.ndarray) -> np.ndarray:
    """Concatenate patch values with their indicators: ``[..., T, 2 * p_in]``."""
    return np.concatenate([values, observed], axis=-1).astype(np.float32)


@dataclass
class KVCache:
    """Per-layer post-rotary keys and values, ``[B, n_heads, cached_len, head_dim]``."""

    keys: list[np.ndarray | None] = field(default_factory=list)
    values: list[np.ndarray | None] = field(default_factory=list)
    cached_len: int = 0

    @classmethod
    def empty(cls, n_layers: int) -> KVCache:
        return cls([None] * n_layers, [None] * n_layers, 0)

    def tiled(self, batch: int) -> KVCache:
        """Copy with the (single-row) batch repeated ``batch`` times."""
        rep = lambda a: None if a is None else np.repeat(a, batch, axis=0)  # noqa: E731
        return KVCache([rep(k) for k in self.keys], [rep(v) for v in self.values], self.cached_len)

    def reset(self) -> None:
        n = len(self.keys)
        self.keys, self.values, self.cached_len = [None] * n, [None] * n, 0


def _rope_tables(cfg: ModelConfig, start: int, length: int) -> tuple[np.ndarray, np.ndarray]:
    half = cfg.head_dim // 2
    inv = cfg.rope_base ** (-np.arange(half, dtype=np.float64) / half)
    ang = np.arange(start, start + length, dtype=np.float64)[:, None] * inv[None, :]
    return np.cos(ang).astype(np.float32), np.sin(ang).astype(np.float32)


class Model:
    """Weights plus the forward computation; ``params`` maps names to tensors."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> Model:
        rng = np.random.default_rng(seed)
        d, f, x, o = config.d_model, config.d_ff, 2 * config.p_in, config.head_out
        out_scale = 1.0 / math.sqrt(2 * config.n_layers)

        def w(fan_in, fan_out, scale=1.0):
            return rng.normal(0.0, scale / math.sqrt(fan_in), size=(fan_in, fan_out))

        p: dict[str, np.ndarray] = {"embed.w": w(x, d), "embed.b": np.zeros(d)}
        if config.learned_embed_skip:
            p["embed.skip"] = w(x, d)
        for i in range(config.n_layers):
            pre = f"layers.{i}."
            p |= {
                pre + "ln1.g": np.ones(d), pre + "ln1.b": np.zeros(d),
                pre + "attn.wq": w(d, d), pre + "attn.wk": w(d, d),
                pre + "attn.wv": w(d, d), pre + "attn.wo": w(d, d, out_scale),
                pre + "ln2.g": np.ones(d), pre + "ln2.b": np.zeros(d),
                pre + "ff.w1": w(d, f), pre + "ff.b1": np.zeros(f),
                pre + "ff.w2": w(f, d, out_scale), pre + "ff.b2": np.zeros(d),
            }
        if config.norm_first:
            p |= {"final_ln.g": np.ones(d), "final_ln.b": np.zeros(d)}
        p |= {"head.w": w(d, o, 0.1), "head.b": np.zeros(o)}
        if config.projection_kind == "residual_block":
            p |= {"head.w1": w(d, d), "head.b1": np.zeros(d), "head.w2": w(d, o, 0.1)}
        return cls(config, {k: Tensor(v, requires_grad=True) for k, v in p.items()})

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def copy(self) -> Model:
        return Model(self.config, {k: Tensor(v.data.copy(), True) for k, v in self.params.items()})

    def new_cache(self) -> KVCache:
        return KVCache.empty(self.config.n_layers)

    def __call__(self, x_hat, cache: KVCache | None = None) -> Tensor:
        """Patch features ``[..., T, 2 p_in]`` to head output ``[..., T, n_token, n_q, p_out]``."""
        return project_head(forward(embed_patch(x_hat, self), self, cache), self)


def embed_patch(x_hat, model: Model) -> Tensor:
    """``silu(x W + b) + skip(x)``; skip is identity when ``2 p_in == d``, else learned."""
    cfg = model.config
    x_hat = nx.as_tensor(x_hat)
    if x_hat.shape[-1] != 2 * cfg.p_in:
        raise DimensionError(f"patch features have {x_hat.shape[-1]} columns, expected {2 * cfg.p_in}")
    z = nx.silu(x_hat @ model["embed.w"] + model["embed.b"])
    skip = x_hat @ model["embed.skip"] if cfg.learned_embed_skip else x_hat
    return z + skip


def _attention(x: Tensor, model: Model, layer: int, cache: KVCache | None, offset: int) -> Tensor:
    cfg = model.config
    pre = f"layers.{layer}.attn."
    b, t, d = x.shape
    h, hd = cfg.n_heads, cfg.head_dim

    def heads(y: Tensor) -> Tensor:
        return y.reshape(b, t, h, hd).transpose(0, 2, 1, 3)

    cos, sin = _rope_tables(cfg, offset, t)
    q = nx.rope(heads(x @ model[pre + "wq"]), cos, sin)
    k = nx.rope(heads(x @ model[pre + "wk"]), cos, sin)
    v = heads(x @ model[pre + "wv"])
    if cache is not None:
        if cache.keys[layer] is not None:
            k = nx.concat([cache.keys[layer], k], axis=2)
            v = nx.concat([cache.values[layer], v], axis=2)
        cache.keys[layer], cache.values[layer] = k.data, v.data
    total = k.shape[2]
    mask = np.arange(total)[None, :] <= (offset + np.arange(t))[:, None]
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(hd))
    att = nx.softmax_rows(scores, mask) @ v
    return att.transpose(0, 2, 1, 3).reshape(b, t, d) @ model[pre + "wo"]


def _feed_forward(x: Tensor, model: Model, layer: int) -> Tensor:
    pre = f"layers.{layer}.ff."
    return nx.silu(x @ model[pre + "w1"] + model[pre + "b1"]) @ model[pre + "w2"] + model[pre + "b2"]


def forward(tokens, model: Model, cache: KVCache | None = None) -> Tensor:
    """Run the causal transformer stack over ``tokens`` (``[T, d]`` or ``[B, T, d]``).

    With a cache, ``tokens`` are only the new suffix; positions continue from
    ``cache.cached_len`` and the cache is extended in place.
    """
    cfg = model.config
    x = nx.as_tensor(tokens)
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    if x.shape[-1] != cfg.d_model:
        raise DimensionError(f"token width {x.shape[-1]} != d_model {cfg.d_model}")
    offset = cache.cached_len if cache is not None else 0
    if offset + x.shape[1] > cfg.max_context_patches:
        raise ContextLengthError(
            f"{offset + x.shape[1]} tokens exceed max_context_patches={cfg.max_context_patches}"
        )
    for i in range(cfg.n_layers):
        ln1 = (model[f"layers.{i}.ln1.g"], model[f"layers.{i}.ln1.b"])
        ln2 = (model[f"layers.{i}.ln2.g"], model[f"layers.{i}.ln2.b"])
        if cfg.norm_first:
            x = x + _attention(nx.layernorm(x, *ln1), model, i, cache, offset)
            x = x + _feed_forward(nx.layernorm(x, *ln2), model, i)
        else:
            x = nx.layernorm(x + _attention(x, model, i, cache, offset), *ln1)
            x = nx.layernorm(x + _feed_forward(x, model, i), *ln2)
    if cfg.norm_first:
        x = nx.layernorm(x, model["final_ln.g"], model["final_ln.b"])
    if cache is not None:
        cache.cached_len = offset + x.shape[1]
    return x.reshape(x.shape[1:]) if squeeze else x


def project_head(h, model: Model) -> Tensor:
    """Map hidden states ``[..., T, d]`` to ``[..., T, n_token, n_q, p_out]``."""
    cfg = model.config
    h = nx.as_tensor(h)
    out = h @ model["head.w"] + model["head.b"]
    if cfg.projection_kind == "residual_block":
        out = out + nx.silu(h @ model["head.w1"] + model["head.b1"]) @ model["head.w2"]
    return out.reshape(*h.shape[:-1], cfg.n_token, cfg.n_q, cfg.p_out)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------


def save_checkpoint(model: Model, path: str | Path) -> None:
    cfg_bytes = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<Q", len(cfg_bytes)), cfg_bytes]
    parts.append(struct.pack("<I", len(model.params)))
    for name, t in model.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}Q", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> Model:
    buf = Path(path).read_bytes()
    if not buf.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: bad magic bytes")
    pos = len(CKPT_MAGIC)

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        return vals

    (version,) = take("<I")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (n_cfg,) = take("<Q")
    config = ModelConfig.from_dict(json.loads(buf[pos : pos + n_cfg].decode("utf-8")))
    pos += n_cfg
    (count,) = take("<I")
    params: dict[str, Tensor] = {}
    for _ in range(count):
        (n_name,) = take("<H")
        name = buf[pos : pos + n_name].decode("utf-8")
        pos += n_name
        (ndim,) = take("<B")
        shape = take(f"<{ndim}Q")
        n = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(shape)
        pos += 4 * n
        params[name] = Tensor(data.astype(np.float32), requires_grad=True)
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return Model(config, params)
