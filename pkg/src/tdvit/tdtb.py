"""Temporal dilated transformer block and its space-only counterpart.

A temporal block draws a reference map from its feature memory, projects
it to keys/values once, and reuses those projections for ``dilation``
frames while queries come from each new frame::

    ref  = sample(memory)
    mid  = local_attention(LN(x), LN(ref)) + x
    out  = MLP(LN(mid)) + mid

The reference is a constant as far as gradients are concerned.
"""
from __future__ import annotations

import dataclasses

import numpy as np

from tdvit.attention import (
    AttentionConfig,
    AttentionParams,
    KVCache,
    attend_local,
    attention_cost,
    init_attention,
    prepare_kv,
)
from tdvit.errors import ColdStartError, ConfigError, UsageError
from tdvit.memory import FeatureMemory, SamplingStrategy
from tdvit.numerics import (
    INIT_STD,
    LayerNormParams,
    MLPParams,
    Tensor,
    init_layer_norm,
    init_mlp,
    layer_norm,
    mlp_forward,
)

MEMORY_SOURCES = ("output", "input")


@dataclasses.dataclass
class TDTBWeights:
    ln1: LayerNormParams
    attn: AttentionParams
    ln2: LayerNormParams
    mlp: MLPParams


def init_block(rng: np.random.Generator, cfg: AttentionConfig, window: int | None = None,
               std: float = INIT_STD, mlp_ratio: int = 4) -> TDTBWeights:
    d = cfg.dim
    return TDTBWeights(
        ln1=init_layer_norm(d),
        attn=init_attention(rng, cfg, window, std),
        ln2=init_layer_norm(d),
        mlp=init_mlp(rng, d, mlp_ratio, std),
    )


@dataclasses.dataclass
class BlockCounters:
    """Projection events and multiply-accumulate totals of one block."""

    frames: int = 0
    q_projections: int = 0
    kv_projections: int = 0
    q_macs: int = 0
    kv_macs: int = 0
    score_macs: int = 0

    def charge(self, h: int, w: int, cfg: AttentionConfig, kv: bool) -> None:
        cost = attention_cost(h, w, cfg)
        self.frames += 1
        self.q_projections += 1
        self.q_macs += cost.q_macs
        self.score_macs += cost.score_macs
        if kv:
            self.charge_kv(h, w, cfg)

    def charge_kv(self, h: int, w: int, cfg: AttentionConfig) -> None:
        self.kv_projections += 1
        self.kv_macs += attention_cost(h, w, cfg).kv_macs

    @property
    def projection_macs(self) -> int:
        return self.q_macs + self.kv_macs

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclasses.dataclass
class TDTBState:
    """Per-stream state of one temporal block.

    ``reuse_period`` is the dilation in normal operation and 1 when the
    reference is resampled every frame. ``recompute_kv`` turns off the
    key/value cache (the equivalence oracle); the sampled reference is
    still held for the whole period so results are unchanged.
    """

    memory: FeatureMemory
    dilation: int
    strategy: SamplingStrategy = dataclasses.field(default_factory=SamplingStrategy)
    rng: np.random.Generator | None = None
    reuse_period: int | None = None
    recompute_kv: bool = False
    memory_source: str = "output"
    cached_ref: np.ndarray | None = None
    cached_kv: KVCache | None = None
    steps_since_refresh: int = 0
    refresh_log: list[int] = dataclasses.field(default_factory=list)
    counters: BlockCounters = dataclasses.field(default_factory=BlockCounters)

    def __post_init__(self):
        if self.dilation < 1:
            raise ConfigError(f"dilation must be >= 1, got {self.dilation}")
        if self.reuse_period is None:
            self.reuse_period = self.dilation
        if self.memory_source not in MEMORY_SOURCES:
            raise ConfigError(f"memory_source must be one of {MEMORY_SOURCES}")
        if self.rng is None:
            self.rng = self.strategy.make_rng()

    @classmethod
    def create(cls, dilation: int, capacity: int | None = None, **kwargs) -> TDTBState:
        return cls(memory=FeatureMemory(dilation if capacity is None else capacity), dilation=dilation, **kwargs)

    def seed(self, feature: np.ndarray, t: int = 1) -> None:
        """Fill the memory with copies of ``feature`` at timestamps just before ``t``."""
        if len(self.memory):
            raise UsageError("memory is already populated; seeding happens once per stream")
        cap = self.memory.capacity
        for ts in range(t - cap, t):
            self.memory.update(feature, ts)

    def needs_refresh(self) -> bool:
        return self.cached_ref is None or self.steps_since_refresh >= self.reuse_period


def block_apply(f_t: Tensor, kv: KVCache, w: TDTBWeights, cfg: AttentionConfig) -> Tensor:
    """Attention over cached keys/values plus the MLP, both with residuals."""
    mid = attend_local(layer_norm(f_t, w.ln1.gamma, w.ln1.beta), kv, w.attn, cfg) + f_t
    return mlp_forward(layer_norm(mid, w.ln2.gamma, w.ln2.beta), w.mlp) + mid


def reference_kv(ref, w: TDTBWeights, cfg: AttentionConfig) -> KVCache:
    ref = ref if isinstance(ref, Tensor) else Tensor(ref)
    return prepare_kv(layer_norm(ref, w.ln1.gamma, w.ln1.beta), w.attn, cfg)


def tdtb_forward(state: TDTBState, f_t: Tensor, w: TDTBWeights, cfg: AttentionConfig, t: int) -> Tensor:
    if not len(state.memory):
        raise ColdStartError("temporal block memory is empty; seed the stream first")
    stored_shape = state.memory.features[0].shape
    if f_t.shape != stored_shape:
        raise UsageError(f"frame features {f_t.shape} do not match memory entries {stored_shape}")
    h, wd = f_t.shape[-3:-1]
    if state.needs_refresh():
        state.cached_ref = state.strategy.sample(state.memory, state.rng)
        state.cached_kv = reference_kv(state.cached_ref, w, cfg)
        state.steps_since_refresh = 0
        state.refresh_log.append(t)
        state.counters.charge_kv(h, wd, cfg)
        kv = state.cached_kv
    elif state.recompute_kv:
        kv = reference_kv(state.cached_ref, w, cfg)
        state.counters.charge_kv(h, wd, cfg)
    else:
        kv = state.cached_kv
    out = block_apply(f_t, kv, w, cfg)
    state.counters.charge(h, wd, cfg, kv=False)
    state.memory.update(out.data if state.memory_source == "output" else f_t.data, t)
    state.steps_since_refresh += 1
    return out


def space_block_forward(f_t: Tensor, w: TDTBWeights, cfg: AttentionConfig,
                        counters: BlockCounters | None = None) -> Tensor:
    """Self-attention block on the current frame only; no memory."""
    out = block_apply(f_t, reference_kv(f_t, w, cfg), w, cfg)
    if counters is not None:
        counters.charge(f_t.shape[-3], f_t.shape[-2], cfg, kv=True)
    return out
