"""Patch embedding, hierarchical stage assembly, variants and receptive fields."""
from __future__ import annotations

import dataclasses
from typing import Sequence

import numpy as np

from tdvit.attention import AttentionConfig, effective_window
from tdvit.errors import ConfigError
from tdvit.memory import SamplingStrategy
from tdvit.numerics import (
    INIT_STD,
    LinearParams,
    Tensor,
    count_parameters,
    init_linear,
    linear,
    pad,
)
from tdvit.tdtb import (
    MEMORY_SOURCES,
    TDTBWeights,
    block_apply,
    init_block,
    reference_kv,
    space_block_forward,
    tdtb_forward,
)

SPACE, TEMPORAL = "space", "temporal"
SCHEMES = ("split", "factorised")
DEFAULT_DILATIONS = (4, 8, 16, 32)


@dataclasses.dataclass(frozen=True)
class VariantSpec:
    name: str
    C: int
    L: tuple[int, ...]
    plus: bool = False


def _registry() -> dict[str, VariantSpec]:
    basic = {"T": (96, (2, 2, 6, 2)), "S": (96, (2, 2, 18, 2)), "B": (128, (2, 2, 18, 2))}
    out = {}
    for name, (c, depths) in basic.items():
        out[name] = VariantSpec(name, c, depths)
        # plus variants append two temporal blocks to stage 3
        plus_depths = depths[:2] + (depths[2] + 2,) + depths[3:]
        out[name + "+"] = VariantSpec(name + "+", c, plus_depths, plus=True)
    return out


VARIANTS: dict[str, VariantSpec] = _registry()


@dataclasses.dataclass(frozen=True)
class StageConfig:
    depth: int
    dim: int
    dilation: int
    blocks: tuple[str, ...]
    attention: AttentionConfig

    def __post_init__(self):
        if len(self.blocks) != self.depth:
            raise ConfigError(f"stage lists {len(self.blocks)} blocks but depth is {self.depth}")
        if self.dilation < 1:
            raise ConfigError(f"dilation must be >= 1, got {self.dilation}")
        if any(b not in (SPACE, TEMPORAL) for b in self.blocks):
            raise ConfigError(f"block tags must be {SPACE!r} or {TEMPORAL!r}")
        if self.attention.dim != self.dim:
            raise ConfigError(f"attention width {self.attention.dim} != stage dim {self.dim}")

    @property
    def n_temporal(self) -> int:
        return sum(b == TEMPORAL for b in self.blocks)


def build_stage(scheme: str, depth: int, n_temporal: int) -> tuple[str, ...]:
    """Order space and temporal blocks inside a stage.

    >>> build_stage("factorised", 4, 2)
    ('space', 'temporal', 'space', 'temporal')
    """
    if scheme not in SCHEMES:
        raise ConfigError(f"scheme must be one of {SCHEMES}, got {scheme!r}")
    if not 0 <= n_temporal <= depth:
        raise ConfigError(f"cannot place {n_temporal} temporal blocks in a stage of depth {depth}")
    if scheme == "split":
        return (SPACE,) * (depth - n_temporal) + (TEMPORAL,) * n_temporal
    if depth % 2 or 2 * n_temporal != depth:
        raise ConfigError(f"factorised scheme needs an even depth with half temporal blocks, got {depth}/{n_temporal}")
    return (SPACE, TEMPORAL) * (depth // 2)


def format_stage(blocks: Sequence[str]) -> str:
    """Compact notation: ``s*3, t*3`` for runs, ``[s, t]*3`` for alternation."""
    tags = ["s" if b == SPACE else "t" for b in blocks]
    n = len(tags)
    if n >= 4 and n % 2 == 0 and tags == ["s", "t"] * (n // 2):
        return f"[s, t]*{n // 2}"
    runs: list[list] = []
    for tag in tags:
        if runs and runs[-1][0] == tag:
            runs[-1][1] += 1
        else:
            runs.append([tag, 1])
    return ", ".join(f"{tag}*{k}" for tag, k in runs)


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    """Everything needed to build a model.

    ``depths``/``embed_dim``/``n_temporal`` override the variant when given.
    ``toy_scale`` divides both the embedding width and the head width, so
    head counts and depths keep the variant's geometry.
    """

    variant: str = "T"
    embed_dim: int | None = None
    depths: tuple[int, ...] | None = None
    n_temporal: tuple[int, ...] | None = None
    scheme: str = "split"
    dilations: tuple[int, ...] = DEFAULT_DILATIONS
    sampling: SamplingStrategy = SamplingStrategy()
    attention_mode: str = "window"
    region: int = 7
    head_dim: int = 32
    patch_size: int = 4
    in_channels: int = 1
    frame_size: tuple[int, int] = (32, 32)
    toy_scale: int = 1
    memory_source: str = "output"
    space_only: bool = False
    mlp_ratio: int = 4
    init_std: float = INIT_STD
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"scheme must be one of {SCHEMES}")
        if any(d < 1 for d in self.dilations):
            raise ConfigError(f"dilations must be positive, got {self.dilations}")
        if self.memory_source not in MEMORY_SOURCES:
            raise ConfigError(f"memory_source must be one of {MEMORY_SOURCES}")
        if self.toy_scale < 1:
            raise ConfigError("toy_scale must be >= 1")
        if self.patch_size < 1:
            raise ConfigError("patch_size must be >= 1")
        if len(self.stage_depths) != len(self.dilations):
            raise ConfigError(f"{len(self.stage_depths)} stages but {len(self.dilations)} dilations")
        if self.n_temporal is not None and len(self.n_temporal) != len(self.stage_depths):
            raise ConfigError("n_temporal needs one entry per stage")

    @property
    def spec(self) -> VariantSpec:
        return VARIANTS[self.variant]

    @property
    def stage_depths(self) -> tuple[int, ...]:
        return tuple(self.depths) if self.depths is not None else self.spec.L

    @property
    def scaled_dims(self) -> tuple[int, int]:
        """(embedding width, head width) after toy scaling."""
        c = self.embed_dim if self.embed_dim is not None else self.spec.C
        if c % self.toy_scale or self.head_dim % self.toy_scale:
            raise ConfigError(f"toy_scale {self.toy_scale} must divide C={c} and head_dim={self.head_dim}")
        return c // self.toy_scale, self.head_dim // self.toy_scale

    def stage_temporal_counts(self) -> tuple[int, ...]:
        if self.n_temporal is not None:
            return tuple(self.n_temporal)
        counts = [d // 2 for d in self.stage_depths]
        if self.spec.plus and self.depths is None:
            # the extra two blocks at the end of stage 3 are temporal
            counts[2] = (self.stage_depths[2] - 2) // 2 + 2
        return tuple(counts)

    def stage_sizes(self) -> list[tuple[int, int]]:
        h = -(-self.frame_size[0] // self.patch_size)
        w = -(-self.frame_size[1] // self.patch_size)
        sizes = [(h, w)]
        for _ in self.stage_depths[1:]:
            h, w = -(-h // 2), -(-w // 2)
            sizes.append((h, w))
        return sizes

    def stages(self) -> list[StageConfig]:
        c, hd = self.scaled_dims
        out = []
        for i, (depth, n_t, dil) in enumerate(zip(self.stage_depths, self.stage_temporal_counts(), self.dilations)):
            dim = c * 2 ** i
            if dim % hd:
                raise ConfigError(f"stage {i + 1} width {dim} is not a multiple of head width {hd}")
            blocks = build_stage(self.scheme, depth, n_t)
            if self.space_only:
                blocks = (SPACE,) * depth
            attn = AttentionConfig(dim // hd, hd, self.attention_mode, self.region)
            out.append(StageConfig(depth, dim, dil, blocks, attn))
        return out


def toy_config(**overrides) -> ModelConfig:
    """Desk-scale TDViT-T: the T geometry with widths divided by 8 (C=12, head width 4)."""
    base = dict(variant="T", toy_scale=8, frame_size=(32, 32))
    base.update(overrides)
    return ModelConfig(**base)


# ------------------------------------------------------------------- layers

def patch_embed(frame: Tensor, params: LinearParams, patch: int = 4) -> Tensor:
    """Linear embedding of non-overlapping ``patch x patch`` patches.

    Each patch is flattened row-major as (row, column, channel) before the
    projection. Frames are zero-padded up to a multiple of ``patch``.
    """
    *lead, h, w, c = frame.shape
    k = len(lead)
    ph, pw = -h % patch, -w % patch
    if ph or pw:
        frame = pad(frame, ((0, 0),) * k + ((0, ph), (0, pw), (0, 0)))
    nh, nw = (h + ph) // patch, (w + pw) // patch
    x = frame.reshape(*lead, nh, patch, nw, patch, c).transpose(*range(k), k, k + 2, k + 1, k + 3, k + 4)
    return linear(x.reshape(*lead, nh, nw, patch * patch * c), params)


def patch_merging(x: Tensor, params: LinearParams) -> Tensor:
    """Concatenate 2x2 neighbours (top-left, bottom-left, top-right, bottom-right) and project."""
    *lead, h, w, d = x.shape
    k = len(lead)
    ph, pw = h % 2, w % 2
    if ph or pw:
        x = pad(x, ((0, 0),) * k + ((0, ph), (0, pw), (0, 0)))
    nh, nw = (h + ph) // 2, (w + pw) // 2
    x = x.reshape(*lead, nh, 2, nw, 2, d).transpose(*range(k), k, k + 2, k + 3, k + 1, k + 4)
    return linear(x.reshape(*lead, nh, nw, 4 * d), params)


# -------------------------------------------------------------------- model

@dataclasses.dataclass
class ModelWeights:
    embed: LinearParams
    merges: list[LinearParams]
    blocks: list[list[TDTBWeights]]


@dataclasses.dataclass
class Model:
    config: ModelConfig
    stages: list[StageConfig]
    weights: ModelWeights

    def block_specs(self) -> list[tuple[int, int, str]]:
        """(stage index, block index within stage, tag) for every block, in order."""
        return [(i, j, tag) for i, st in enumerate(self.stages) for j, tag in enumerate(st.blocks)]

    def num_parameters(self) -> int:
        return count_parameters(self.weights)


def build_model(cfg: ModelConfig) -> Model:
    rng = np.random.default_rng(cfg.seed)
    stages = cfg.stages()
    sizes = cfg.stage_sizes()
    std = cfg.init_std
    embed = init_linear(rng, cfg.patch_size ** 2 * cfg.in_channels, stages[0].dim, std)
    merges = [init_linear(rng, 4 * prev.dim, st.dim, std) for prev, st in zip(stages, stages[1:])]
    blocks = []
    for st, (h, w) in zip(stages, sizes):
        window = effective_window(h, w, st.attention.region)
        blocks.append([
            init_block(rng, st.attention if tag == TEMPORAL else _space_attention(st.attention), window, std,
                       cfg.mlp_ratio)
            for tag in st.blocks
        ])
    return Model(cfg, stages, ModelWeights(embed, merges, blocks))


def _space_attention(cfg: AttentionConfig) -> AttentionConfig:
    # space blocks always use window attention on the current frame
    return dataclasses.replace(cfg, mode="window")


def block_attention(stage: StageConfig, tag: str) -> AttentionConfig:
    return stage.attention if tag == TEMPORAL else _space_attention(stage.attention)


def stage_input(model: Model, stage: int, x: Tensor) -> Tensor:
    """Features entering stage ``stage`` given the previous stage's output (or the frame)."""
    if stage == 0:
        return patch_embed(x, model.weights.embed, model.config.patch_size)
    return patch_merging(x, model.weights.merges[stage - 1])


# --------------------------------------------------------- receptive field

def temporal_receptive_field(blocks: Sequence[tuple[int, int]]) -> int:
    """Frames reachable through stacked temporal aggregations: ``1 + sum((K-1) * D)``.

    ``blocks`` holds one ``(kernel, dilation)`` pair per aggregation step.
    """
    total = 1
    for k, d in blocks:
        if k < 1 or d < 1:
            raise ConfigError(f"kernel and dilation must be >= 1, got ({k}, {d})")
        total += (k - 1) * d
    return total


def model_receptive_field(cfg: ModelConfig, kernel: int = 2) -> int:
    pairs = [(kernel, st.dilation) for st in cfg.stages() for tag in st.blocks if tag == TEMPORAL]
    return temporal_receptive_field(pairs)


# ---------------------------------------------------------------- forward

def forward_frame(model: Model, states: Sequence, frame: Tensor, t: int, *, seeding: bool = False) -> list[Tensor]:
    """Run one frame through every stage and return the stage outputs.

    ``states`` holds one entry per block in :meth:`Model.block_specs` order:
    a :class:`TDTBState` for temporal blocks, a :class:`BlockCounters` (or
    ``None``) for space blocks. With ``seeding`` the temporal memories are
    filled with each block's input and the frame is pushed through without
    touching any state; the regular pass for the same frame follows.
    """
    specs = model.block_specs()
    if len(states) != len(specs):
        raise ConfigError(f"expected {len(specs)} block states, got {len(states)}")
    pyramid = []
    x = frame
    k = 0
    for i, stage in enumerate(model.stages):
        x = stage_input(model, i, x)
        for tag, w in zip(stage.blocks, model.weights.blocks[i]):
            cfg = block_attention(stage, tag)
            state = states[k]
            k += 1
            if tag == SPACE:
                x = space_block_forward(x, w, cfg, None if seeding else state)
            elif seeding:
                state.seed(x.data, t)
                x = block_apply(x, reference_kv(x.data, w, cfg), w, cfg)
            else:
                x = tdtb_forward(state, x, w, cfg, t)
        pyramid.append(x)
    return pyramid
