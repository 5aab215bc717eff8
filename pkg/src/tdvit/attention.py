"""Multi-head cross-attention and the window / correlation local variants.

Local attention is split into two phases so keys and values can be cached:
:func:`prepare_kv` projects a key/value map once, :func:`attend_local`
consumes the cached projections with fresh queries.
"""
from __future__ import annotations

import dataclasses
import functools
import math

import numpy as np

from tdvit.errors import ConfigError
from tdvit.numerics import (
    INIT_STD,
    LinearParams,
    Tensor,
    init_linear,
    linear,
    pad,
    softmax,
    trunc_normal,
)

MODES = ("window", "correlation")
_MASKED = -1e30


@dataclasses.dataclass(frozen=True)
class AttentionConfig:
    num_heads: int
    head_dim: int = 32
    mode: str = "window"
    region: int = 7

    def __post_init__(self):
        if self.num_heads < 1 or self.head_dim < 1:
            raise ConfigError("num_heads and head_dim must be positive")
        if self.mode not in MODES:
            raise ConfigError(f"attention mode must be one of {MODES}, got {self.mode!r}")
        if self.region < 1 or self.region % 2 == 0:
            raise ConfigError(f"region must be odd and >= 1, got {self.region}")

    @property
    def dim(self) -> int:
        return self.num_heads * self.head_dim


@dataclasses.dataclass
class AttentionParams:
    q: LinearParams
    k: LinearParams
    v: LinearParams
    out: LinearParams
    # ((2w-1)^2, heads) table for window mode, None otherwise
    rel_bias: Tensor | None = None


def init_attention(
    rng: np.random.Generator, cfg: AttentionConfig, window: int | None = None, std: float = INIT_STD
) -> AttentionParams:
    d = cfg.dim
    params = AttentionParams(*(init_linear(rng, d, d, std) for _ in range(4)))
    if cfg.mode == "window":
        w = cfg.region if window is None else window
        params.rel_bias = Tensor(trunc_normal(rng, ((2 * w - 1) ** 2, cfg.num_heads), std), requires_grad=True)
    return params


def _check_dim(x: Tensor, cfg: AttentionConfig) -> None:
    if x.shape[-1] != cfg.dim:
        raise ConfigError(f"expected {cfg.dim} channels ({cfg.num_heads} heads x {cfg.head_dim}), got {x.shape[-1]}")


def _split_heads(x: Tensor, cfg: AttentionConfig) -> Tensor:
    # (..., n, d) -> (..., heads, n, head_dim)
    lead = x.shape[:-2]
    n = x.shape[-2]
    x = x.reshape(*lead, n, cfg.num_heads, cfg.head_dim)
    k = len(lead)
    return x.transpose(*range(k), k + 1, k, k + 2)


def _merge_heads(x: Tensor, cfg: AttentionConfig) -> Tensor:
    lead = x.shape[:-3]
    n = x.shape[-2]
    k = len(lead)
    x = x.transpose(*range(k), k + 1, k, k + 2)
    return x.reshape(*lead, n, cfg.dim)


def project_q(x: Tensor, params: AttentionParams, cfg: AttentionConfig) -> Tensor:
    """Scaled query heads ``(..., heads, n, head_dim)``."""
    _check_dim(x, cfg)
    return _split_heads(linear(x, params.q), cfg) * (1.0 / math.sqrt(cfg.head_dim))


def project_kv(x: Tensor, params: AttentionParams, cfg: AttentionConfig) -> tuple[Tensor, Tensor]:
    _check_dim(x, cfg)
    return _split_heads(linear(x, params.k), cfg), _split_heads(linear(x, params.v), cfg)


def attend(q: Tensor, k: Tensor, v: Tensor, params: AttentionParams, cfg: AttentionConfig,
           logit_bias=None) -> Tensor:
    """softmax(q k^T + bias) v, heads merged and passed through the output projection."""
    logits = q @ k.transpose(*range(k.ndim - 2), k.ndim - 1, k.ndim - 2)
    if logit_bias is not None:
        logits = logits + logit_bias
    return linear(_merge_heads(softmax(logits, axis=-1) @ v, cfg), params.out)


def mca(query_src: Tensor, kv_src: Tensor, params: AttentionParams, cfg: AttentionConfig) -> Tensor:
    """Multi-head cross-attention: queries from ``query_src``, keys/values from ``kv_src``."""
    if query_src.shape[-1] != kv_src.shape[-1]:
        raise ConfigError("query and key/value sources must share the channel dimension")
    k, v = project_kv(kv_src, params, cfg)
    return attend(project_q(query_src, params, cfg), k, v, params, cfg)


# ------------------------------------------------------------------- windows

def effective_window(h: int, w: int, region: int) -> int:
    """Window side used on an ``h x w`` map; shrinks to the map when the map is smaller."""
    return min(h, w) if min(h, w) <= region else region


def window_partition(x: Tensor, w: int) -> Tensor:
    """Split ``(..., H, W, d)`` into row-major ``w x w`` windows, zero-padding the overhang.

    Returns a tensor of shape ``(..., num_windows, w*w, d)``.
    """
    if w <= 0:
        raise ConfigError(f"window size must be positive, got {w}")
    *lead, h, wd, d = x.shape
    k = len(lead)
    ph, pw = -h % w, -wd % w
    if ph or pw:
        x = pad(x, ((0, 0),) * k + ((0, ph), (0, pw), (0, 0)))
    nh, nw = (h + ph) // w, (wd + pw) // w
    x = x.reshape(*lead, nh, w, nw, w, d).transpose(*range(k), k, k + 2, k + 1, k + 3, k + 4)
    return x.reshape(*lead, nh * nw, w * w, d)


def window_unpartition(windows: Tensor, w: int, h: int, wd: int) -> Tensor:
    """Inverse of :func:`window_partition`; padding is stripped."""
    if w <= 0:
        raise ConfigError(f"window size must be positive, got {w}")
    *lead, _, _, d = windows.shape
    k = len(lead)
    nh, nw = -(-h // w), -(-wd // w)
    x = windows.reshape(*lead, nh, nw, w, w, d).transpose(*range(k), k, k + 2, k + 1, k + 3, k + 4)
    x = x.reshape(*lead, nh * w, nw * w, d)
    if nh * w != h or nw * w != wd:
        x = x[..., :h, :wd, :]
    return x


@functools.lru_cache(maxsize=None)
def relative_position_index(w: int) -> np.ndarray:
    """``(w*w, w*w)`` indices into a ``(2w-1)^2`` bias table (cached; do not mutate)."""
    ys, xs = np.meshgrid(np.arange(w), np.arange(w), indexing="ij")
    coords = np.stack([ys.ravel(), xs.ravel()])
    rel = coords[:, :, None] - coords[:, None, :] + (w - 1)
    idx = rel[0] * (2 * w - 1) + rel[1]
    idx.flags.writeable = False
    return idx


def _window_bias(params: AttentionParams, w: int) -> Tensor | None:
    if params.rel_bias is None:
        return None
    if params.rel_bias.shape[0] != (2 * w - 1) ** 2:
        raise ConfigError(f"relative bias table does not match window size {w}")
    idx = relative_position_index(w)
    return params.rel_bias[idx].transpose(2, 0, 1)  # heads x w^2 x w^2


# -------------------------------------------------------------- correlation

def correlation_region(h: int, w: int, region: int) -> int:
    """Largest useful odd region on an ``h x w`` map (``2*max(h, w) - 1``)."""
    return min(region, 2 * max(h, w) - 1)


def neighbourhood_index(h: int, w: int, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Flat indices of each location's ``r x r`` neighbourhood and its validity mask.

    Out-of-map positions point at the sentinel index ``h*w`` and are marked invalid.
    """
    if r > 2 * max(h, w) - 1:
        raise ConfigError(f"region {r} exceeds 2*max(H, W)-1 for a {h}x{w} map")
    half = r // 2
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    oy, ox = np.meshgrid(np.arange(-half, half + 1), np.arange(-half, half + 1), indexing="ij")
    ny = ys.reshape(-1, 1) + oy.reshape(1, -1)
    nx = xs.reshape(-1, 1) + ox.reshape(1, -1)
    valid = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
    idx = np.where(valid, ny * w + nx, h * w)
    return idx, valid


# ----------------------------------------------------------- cached phases

@dataclasses.dataclass
class KVCache:
    """Projected keys/values of one reference map, laid out for the local mode."""

    k: Tensor
    v: Tensor
    mode: str
    size: int  # window side or correlation region actually used
    spatial: tuple[int, int]
    valid: np.ndarray | None = None


def local_size(h: int, w: int, cfg: AttentionConfig) -> int:
    if cfg.mode == "window":
        return effective_window(h, w, cfg.region)
    return correlation_region(h, w, cfg.region)


def prepare_kv(kv_map: Tensor, params: AttentionParams, cfg: AttentionConfig, size: int | None = None) -> KVCache:
    """Project ``kv_map`` (``H x W x d``, optionally batched) into the layout of ``cfg.mode``."""
    *lead, h, w, _ = kv_map.shape
    size = local_size(h, w, cfg) if size is None else size
    if cfg.mode == "window":
        k, v = project_kv(window_partition(kv_map, size), params, cfg)
        return KVCache(k, v, "window", size, (h, w))
    idx, valid = neighbourhood_index(h, w, size)
    k, v = (linear(kv_map.reshape(*lead, h * w, cfg.dim), p) for p in (params.k, params.v))
    # sentinel zero row for out-of-map neighbours; masked before softmax
    widths = ((0, 0),) * len(lead) + ((0, 1), (0, 0))
    k, v = (pad(t, widths)[..., idx, :] for t in (k, v))  # (..., HW, r^2, d)
    k, v = (_split_heads(t, cfg) for t in (k, v))  # (..., HW, heads, r^2, hd)
    return KVCache(k, v, "correlation", size, (h, w), valid)


def attend_local(q_map: Tensor, cache: KVCache, params: AttentionParams, cfg: AttentionConfig) -> Tensor:
    """Local attention of ``q_map`` queries over cached keys/values; returns ``H x W x d``."""
    *lead, h, w, d = q_map.shape
    if (h, w) != cache.spatial:
        raise ConfigError(f"query map {h}x{w} does not match key/value map {cache.spatial}")
    if cache.mode == "window":
        q = project_q(window_partition(q_map, cache.size), params, cfg)
        out = attend(q, cache.k, cache.v, params, cfg, _window_bias(params, cache.size))
        return window_unpartition(out, cache.size, h, w)
    q = project_q(q_map.reshape(*lead, h * w, 1, d), params, cfg)  # (..., HW, heads, 1, hd)
    mask = np.where(cache.valid, 0.0, _MASKED)[:, None, None, :]
    out = attend(q, cache.k, cache.v, params, cfg, Tensor(mask))
    return out.reshape(*lead, h, w, d)


def window_local_attention(q_map: Tensor, kv_map: Tensor, params: AttentionParams, cfg: AttentionConfig,
                           window: int | None = None) -> Tensor:
    if cfg.mode != "window":
        cfg = dataclasses.replace(cfg, mode="window")
    if q_map.shape != kv_map.shape:
        raise ConfigError(f"query map {q_map.shape} and key/value map {kv_map.shape} differ")
    return attend_local(q_map, prepare_kv(kv_map, params, cfg, window), params, cfg)


def correlation_local_attention(q_map: Tensor, kv_map: Tensor, params: AttentionParams, cfg: AttentionConfig,
                                region: int | None = None) -> Tensor:
    if cfg.mode != "correlation":
        cfg = dataclasses.replace(cfg, mode="correlation")
    if q_map.shape != kv_map.shape:
        raise ConfigError(f"query map {q_map.shape} and key/value map {kv_map.shape} differ")
    r = cfg.region if region is None else region
    return attend_local(q_map, prepare_kv(kv_map, params, cfg, r), params, cfg)


def local_attention(q_map: Tensor, kv_map: Tensor, params: AttentionParams, cfg: AttentionConfig) -> Tensor:
    return attend_local(q_map, prepare_kv(kv_map, params, cfg), params, cfg)


# ------------------------------------------------------------------- costs

@dataclasses.dataclass(frozen=True)
class AttentionCost:
    """Multiply-accumulate counts for one local-attention call on an ``h x w`` map."""

    q_macs: int
    kv_macs: int
    score_macs: int


def attention_cost(h: int, w: int, cfg: AttentionConfig) -> AttentionCost:
    d = cfg.dim
    size = local_size(h, w, cfg)
    if cfg.mode == "window":
        tokens = (-(-h // size) * size) * (-(-w // size) * size)
        keys_per_query = size * size
    else:
        tokens = h * w
        keys_per_query = size * size
    # q k^T and attn @ v, every head
    score = 2 * tokens * keys_per_query * cfg.head_dim * cfg.num_heads
    return AttentionCost(q_macs=tokens * d * d, kv_macs=2 * tokens * d * d, score_macs=score)
