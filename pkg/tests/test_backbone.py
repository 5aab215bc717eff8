import dataclasses

import numpy as np
import pytest

from tdvit.backbone import (
    DEFAULT_DILATIONS,
    SPACE,
    TEMPORAL,
    VARIANTS,
    ModelConfig,
    build_model,
    build_stage,
    format_stage,
    forward_frame,
    model_receptive_field,
    patch_embed,
    patch_merging,
    temporal_receptive_field,
    toy_config,
)
from tdvit.errors import ConfigError
from tdvit.numerics import LinearParams, Tensor
from tdvit.streaming import make_stream, process_video, step

S, T = SPACE, TEMPORAL


def lin(w, b=None):
    w = np.asarray(w, float)
    return LinearParams(Tensor(w), Tensor(np.zeros(w.shape[1]) if b is None else b))


# ---------------------------------------------------------------- registry

def test_variant_registry():
    expected = {
        "T": (96, (2, 2, 6, 2)),
        "S": (96, (2, 2, 18, 2)),
        "B": (128, (2, 2, 18, 2)),
        "T+": (96, (2, 2, 8, 2)),
        "S+": (96, (2, 2, 20, 2)),
        "B+": (128, (2, 2, 20, 2)),
    }
    assert {k: (v.C, v.L) for k, v in VARIANTS.items()} == expected


@pytest.mark.parametrize("name", ["T", "S", "B"])
def test_plus_variant_adds_two_temporal_blocks_to_stage_three(name):
    base = ModelConfig(variant=name).stages()
    plus = ModelConfig(variant=name + "+").stages()
    assert [s.depth for s in plus] == [s.depth + (2 if i == 2 else 0) for i, s in enumerate(base)]
    assert plus[2].blocks == base[2].blocks + (T, T)
    assert plus[2].n_temporal == base[2].n_temporal + 2


def test_default_stage_layouts():
    stages = ModelConfig(variant="T").stages()
    assert [s.blocks for s in stages] == [(S, T), (S, T), (S, S, S, T, T, T), (S, T)]
    assert [s.dim for s in stages] == [96, 192, 384, 768]
    assert [s.attention.num_heads for s in stages] == [3, 6, 12, 24]
    assert ModelConfig(variant="S").stages()[2].n_temporal == 9
    assert ModelConfig().dilations == DEFAULT_DILATIONS == (4, 8, 16, 32)


# ------------------------------------------------------------- build_stage

def test_build_stage_layouts():
    assert build_stage("split", 6, 3) == (S, S, S, T, T, T)
    assert build_stage("factorised", 6, 3) == (S, T, S, T, S, T)
    assert build_stage("split", 8, 5) == (S, S, S, T, T, T, T, T)


def test_format_stage_notation():
    assert format_stage(build_stage("split", 6, 3)) == "s*3, t*3"
    assert format_stage(build_stage("factorised", 6, 3)) == "[s, t]*3"
    assert format_stage(build_stage("split", 8, 5)) == "s*3, t*5"


def test_build_stage_errors():
    with pytest.raises(ConfigError):
        build_stage("factorised", 5, 2)
    with pytest.raises(ConfigError):
        build_stage("split", 3, 4)
    with pytest.raises(ConfigError):
        build_stage("interleaved", 4, 2)


def test_split_and_factorised_have_equal_parameter_counts():
    a = build_model(toy_config(scheme="split"))
    b = build_model(toy_config(scheme="factorised"))
    assert a.num_parameters() == b.num_parameters()


# ------------------------------------------------------------------ toy cfg

def test_toy_t_geometry():
    cfg = toy_config()
    stages = cfg.stages()
    assert [s.dim for s in stages] == [12, 24, 48, 96]
    assert {s.attention.head_dim for s in stages} == {4}
    assert [s.n_temporal for s in stages] == [1, 1, 3, 1]
    assert cfg.stage_sizes() == [(8, 8), (4, 4), (2, 2), (1, 1)]


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(variant="L")
    with pytest.raises(ConfigError):
        ModelConfig(dilations=(1, 2, 3))
    with pytest.raises(ConfigError):
        ModelConfig(toy_scale=5).scaled_dims
    with pytest.raises(ConfigError):
        ModelConfig(dilations=(0, 1, 1, 1))


# ----------------------------------------------------------- embed / merge

def test_patch_embed_shapes_and_zero():
    p = lin(np.random.default_rng(0).standard_normal((48, 5)))
    assert patch_embed(Tensor(np.zeros((8, 8, 3))), p).data.tolist() == np.zeros((2, 2, 5)).tolist()
    assert patch_embed(Tensor(np.ones((8, 8, 3))), p).shape == (2, 2, 5)


def test_patch_embed_identity_reproduces_patches():
    frame = np.random.default_rng(1).standard_normal((8, 8, 3))
    tokens = patch_embed(Tensor(frame), lin(np.eye(48))).data
    for i in range(2):
        for j in range(2):
            np.testing.assert_array_equal(tokens[i, j], frame[4 * i:4 * i + 4, 4 * j:4 * j + 4].reshape(-1))


def test_patch_merging_shapes_zero_and_identity_slice():
    x = np.random.default_rng(2).standard_normal((4, 4, 8))
    p = lin(np.random.default_rng(3).standard_normal((32, 16)))
    assert patch_merging(Tensor(x), p).shape == (2, 2, 16)
    assert not patch_merging(Tensor(np.zeros((4, 4, 8))), p).data.any()
    # the first 8 inputs of each merged token are the top-left sub-pixel
    w = np.zeros((32, 16))
    w[:8, :8] = np.eye(8)
    out = patch_merging(Tensor(x), lin(w)).data
    np.testing.assert_array_equal(out[..., :8], x[0::2, 0::2])
    assert not out[..., 8:].any()


def test_patch_merging_neighbour_order():
    x = np.arange(4.0).reshape(2, 2, 1)  # TL=0, TR=1, BL=2, BR=3
    out = patch_merging(Tensor(x), lin(np.eye(4))).data
    assert out.ravel().tolist() == [0.0, 2.0, 1.0, 3.0]


# ------------------------------------------------------------------ forward

def test_stage_output_sizes():
    model = build_model(toy_config())
    pyramid = step(make_stream(model), np.random.default_rng(0).standard_normal((32, 32)))
    assert [x.shape for x in pyramid] == [(8, 8, 12), (4, 4, 24), (2, 2, 48), (1, 1, 96)]


def test_independent_streams_are_identical():
    model = build_model(toy_config(sampling=dataclasses.replace(toy_config().sampling, kind="patch_shuffle")))
    frames = [np.random.default_rng(i).standard_normal((32, 32)) for i in range(6)]
    a, b = process_video(frames, model), process_video(frames, model)
    for fa, fb in zip(a.outputs, b.outputs):
        for x, y in zip(fa, fb):
            assert x.tobytes() == y.tobytes()


def test_constant_video_is_a_fixed_point_with_input_memory():
    cfg = toy_config(memory_source="input")
    model = build_model(cfg)
    frame = np.random.default_rng(4).standard_normal((32, 32))
    report = process_video([frame] * (3 * max(cfg.dilations)), model)
    first = report.outputs[0]
    for pyramid in report.outputs[1:]:
        for x, y in zip(first, pyramid):
            np.testing.assert_allclose(y, x, rtol=0, atol=1e-12)


def test_constant_video_settles_with_output_memory():
    # with outputs written back, each block iterates until its memory stops changing
    cfg = toy_config(dilations=(1, 1, 1, 1))
    model = build_model(cfg)
    frame = np.random.default_rng(5).standard_normal((32, 32))
    out = process_video([frame] * 40, model).outputs
    gaps = [np.abs(out[t][-1] - out[t - 1][-1]).max() for t in (5, 20, 39)]
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] < 1e-6


def test_forward_frame_rejects_wrong_state_count():
    model = build_model(toy_config())
    with pytest.raises(ConfigError):
        forward_frame(model, [], Tensor(np.zeros((32, 32, 1))), 1)


# ---------------------------------------------------------- receptive field

def test_receptive_field_formula():
    assert temporal_receptive_field([(1, 1), (1, 1), (4, 1)]) == 4
    assert temporal_receptive_field([(2, 1), (2, 2), (2, 4)]) == 8
    assert model_receptive_field(toy_config()) == 1 + 4 + 8 + 3 * 16 + 32 == 93
    with pytest.raises(ConfigError):
        temporal_receptive_field([(0, 1)])
