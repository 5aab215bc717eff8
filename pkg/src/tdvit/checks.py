"""Self-checks shared by the command line and the test suite.

Each routine returns plain records (dicts) so callers can print them as
JSON lines or assert on them directly.
"""
from __future__ import annotations

import dataclasses
from typing import Callable

import numpy as np

from tdvit.attention import (
    AttentionConfig,
    correlation_local_attention,
    init_attention,
    mca,
    window_local_attention,
)
from tdvit.backbone import (
    TEMPORAL,
    Model,
    ModelConfig,
    build_model,
    model_receptive_field,
    patch_merging,
    temporal_receptive_field,
    toy_config,
)
from tdvit.errors import UsageError
from tdvit.memory import SamplingStrategy
from tdvit.numerics import (
    Tensor,
    cross_entropy,
    gelu,
    grad_check,
    init_linear,
    init_mlp,
    layer_norm,
    linear,
    mlp_forward,
    parameters,
    softmax,
)
from tdvit.streaming import expected_kv_count, measure_trf, oracle_recompute, process_video, random_frames
from tdvit.tdtb import TDTBState, init_block, tdtb_forward

PRIMITIVE_TOL = 1e-5
COMPOSITE_TOL = 1e-4


# ------------------------------------------------------------ gradient suite

@dataclasses.dataclass(frozen=True)
class GradCase:
    name: str
    tolerance: float
    build: Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[Tensor]]]


def _t(rng: np.random.Generator, *shape: int, scale: float = 1.0) -> Tensor:
    return Tensor(scale * rng.standard_normal(shape))


def _case_linear(rng):
    p = init_linear(rng, 4, 3, std=0.5)
    return (lambda x, w, b: linear(x, type(p)(w, b))), [_t(rng, 5, 4), p.weight, p.bias]


def _case_layer_norm(rng):
    return layer_norm, [_t(rng, 4, 6), _t(rng, 6), _t(rng, 6)]


def _case_gelu(rng):
    return gelu, [_t(rng, 3, 7, scale=2.0)]


def _case_softmax(rng):
    return softmax, [_t(rng, 4, 5, scale=2.0)]


def _case_cross_entropy(rng):
    targets = rng.integers(0, 5, size=4)
    return (lambda z: cross_entropy(z, targets)), [_t(rng, 4, 5)]


def _case_mlp(rng):
    p = init_mlp(rng, 4, 2, std=0.5)
    return (lambda x, *ws: mlp_forward(x, p)), [_t(rng, 3, 4), *parameters(p)]


def _attn_setup(rng, mode: str, region: int):
    cfg = AttentionConfig(num_heads=2, head_dim=2, mode=mode, region=region)
    params = init_attention(rng, cfg, region if mode == "window" else None, std=0.5)
    if params.rel_bias is not None:
        params.rel_bias.data[...] = 0.5 * rng.standard_normal(params.rel_bias.shape)
    return cfg, params


def _case_mca(rng):
    cfg, params = _attn_setup(rng, "window", 3)
    return (lambda q, kv, *ws: mca(q, kv, params, cfg)), [_t(rng, 3, 4), _t(rng, 5, 4), *parameters(params)]


def _case_window(rng):
    cfg, params = _attn_setup(rng, "window", 3)
    fn = lambda q, kv, *ws: window_local_attention(q, kv, params, cfg)  # noqa: E731
    # a 4x4 map with 3x3 windows exercises the zero padding
    return fn, [_t(rng, 4, 4, 4), _t(rng, 4, 4, 4), *parameters(params)]


def _case_correlation(rng):
    cfg, params = _attn_setup(rng, "correlation", 3)
    fn = lambda q, kv, *ws: correlation_local_attention(q, kv, params, cfg)  # noqa: E731
    return fn, [_t(rng, 3, 4, 4), _t(rng, 3, 4, 4), *parameters(params)]


def _case_patch_merging(rng):
    p = init_linear(rng, 8, 4, std=0.5)
    return (lambda x, *ws: patch_merging(x, p)), [_t(rng, 4, 2, 2), p.weight, p.bias]


def _case_tdtb(rng):
    cfg = AttentionConfig(num_heads=2, head_dim=4, mode="window", region=3)
    w = init_block(rng, cfg, 3, std=0.3)
    ref = rng.standard_normal((3, 3, 8))

    def run(x, *ws):
        # a fresh state per call so every evaluation sees the same memory
        state = TDTBState.create(2)
        state.seed(ref)
        return tdtb_forward(state, x, w, cfg, 1)

    return run, [_t(rng, 3, 3, 8), *parameters(w)]


GRAD_CASES = (
    GradCase("linear", PRIMITIVE_TOL, _case_linear),
    GradCase("layer_norm", PRIMITIVE_TOL, _case_layer_norm),
    GradCase("gelu", PRIMITIVE_TOL, _case_gelu),
    GradCase("softmax", PRIMITIVE_TOL, _case_softmax),
    GradCase("cross_entropy", PRIMITIVE_TOL, _case_cross_entropy),
    GradCase("mlp", COMPOSITE_TOL, _case_mlp),
    GradCase("mca", COMPOSITE_TOL, _case_mca),
    GradCase("window_attention", COMPOSITE_TOL, _case_window),
    GradCase("correlation_attention", COMPOSITE_TOL, _case_correlation),
    GradCase("patch_merging", COMPOSITE_TOL, _case_patch_merging),
    GradCase("tdtb", COMPOSITE_TOL, _case_tdtb),
)


def gradient_suite(seed: int = 0, cases=GRAD_CASES) -> list[dict]:
    records = []
    for k, case in enumerate(cases):
        rng = np.random.default_rng([seed, k])
        fn, inputs = case.build(rng)
        err = grad_check(fn, inputs, seed=seed)
        records.append({"op": case.name, "max_rel_error": err, "threshold": case.tolerance,
                        "inputs": int(sum(t.data.size for t in inputs)), "pass": bool(err <= case.tolerance)})
    return records


# ----------------------------------------------------------- receptive field

def _trf_model(**overrides) -> ModelConfig:
    base = dict(variant="T", embed_dim=8, head_dim=4, frame_size=(16, 16), memory_source="input")
    base.update(overrides)
    return ModelConfig(**base)


def trf_configs(extra: ModelConfig | None = None) -> list[tuple[str, ModelConfig]]:
    """Named configurations whose measured reach is compared with the formula."""
    rows = [
        ("single_block_d1", _trf_model(depths=(1,), n_temporal=(1,), dilations=(1,))),
        ("dilated_k2_backbone", _trf_model(depths=(1, 1, 1), n_temporal=(1, 1, 1), dilations=(1, 2, 4))),
        ("factorised_d3_d5", _trf_model(depths=(2, 2), scheme="factorised", dilations=(3, 5))),
        ("toy_T", toy_config(memory_source="input")),
    ]
    if extra is not None:
        rows.append(("configured", extra))
    return rows


def kernel_stack_reach(blocks: list[tuple[int, int]], T: int | None = None, seed: int = 0,
                       threshold: float = 1e-9) -> int:
    """Measured temporal reach of a generic stack of ``(K_t, D_t)`` aggregation layers.

    Layer ``l`` maps its input sequence to ``tanh(sum_k W_k x[t - k * D_t])``
    for ``k = 0..K_t-1``; indices before the first frame clamp to it, the
    stand-in for a cold-start memory. Unlike a TDTB (one reference, so
    ``K_t = 2``), any kernel size is allowed, which makes layouts such as a
    four-frame aggregation head measurable. Perturbs each earlier frame in
    turn and returns ``1 + max tau`` whose perturbation reaches the top
    output at frame ``T``.
    """
    predicted = temporal_receptive_field(blocks)
    T = predicted + 2 if T is None else T
    if T <= predicted:
        raise UsageError(f"T={T} must exceed the predicted receptive field {predicted}")
    dim = 3
    rng = np.random.default_rng(seed)
    weights = [rng.standard_normal((k, dim, dim)) / np.sqrt(k * dim) for k, _ in blocks]
    frames = rng.standard_normal((T, dim))

    def top(x: np.ndarray) -> np.ndarray:
        for (k, d), w in zip(blocks, weights):
            idx = np.maximum(np.arange(T)[:, None] - d * np.arange(k)[None, :], 0)  # T x K
            x = np.tanh(np.einsum("tki,kij->tj", x[idx], w))
        return x[-1]

    reference = top(frames)
    for tau in range(T - 1, -1, -1):
        probe = frames.copy()
        probe[T - 1 - tau] += 1.0
        if np.max(np.abs(top(probe) - reference)) > threshold:
            return tau + 1
    return 1


KERNEL_STACKS = {"late_aggregation_k4": [(1, 1), (1, 1), (4, 1)], "dilated_k2": [(2, 1), (2, 2), (2, 4)]}


def trf_table(extra: ModelConfig | None = None, seed: int = 0) -> list[dict]:
    """Formula versus measured reach.

    ``kernel_stack`` rows measure generic ``(K_t, D_t)`` layer stacks, the
    only way to realise a four-frame aggregation layer; ``model`` rows
    measure the actual streaming backbone.
    """
    records = []
    for name, blocks in KERNEL_STACKS.items():
        predicted = temporal_receptive_field(blocks)
        measured = kernel_stack_reach(blocks, seed=seed)
        records.append({"config": name, "source": "kernel_stack", "kernels": [k for k, _ in blocks],
                        "dilations": [d for _, d in blocks], "predicted": predicted, "measured": measured,
                        "pass": predicted == measured})
    for name, cfg in trf_configs(extra):
        cfg = dataclasses.replace(cfg, sampling=SamplingStrategy("earliest"), memory_source="input")
        predicted = model_receptive_field(cfg)
        measured = measure_trf(build_model(cfg), predicted + 1, seed=seed)
        records.append({"config": name, "source": "model", "predicted": predicted, "measured": measured,
                        "pass": predicted == measured})
    return records


# -------------------------------------------------------------------- bench

def bench(model: Model, frames: int = 64, mode: str = "reuse", seed: int = 0) -> dict:
    """Cached versus no-cache run on random frames, with counter checks."""
    video = random_frames(model, frames, seed)
    reuse = process_video(video, model, mode)
    oracle = oracle_recompute(video, model, mode)
    diff = max(float(np.max(np.abs(a - b))) for fa, fb in zip(reuse.outputs, oracle.outputs)
               for a, b in zip(fa, fb))
    exact = True
    for info, c in zip(reuse.blocks, reuse.counters):
        period = 1 if mode == "refresh_each_step" or info.tag != TEMPORAL else info.dilation
        exact &= c.q_projections == frames and c.kv_projections == expected_kv_count(frames, period)
    return {"reuse": reuse, "oracle": oracle, "max_abs_diff": diff, "counters_exact": bool(exact)}
