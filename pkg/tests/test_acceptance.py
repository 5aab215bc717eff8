"""The eight acceptance criteria, each at its stated tolerance.

Every test prints one ``[PASS]``/``[FAIL]`` line; the lines are also
repeated in the terminal summary.
"""
import copy
import math
import time

import numpy as np
from conftest import ACCEPTANCE_LINES

from tdvit import checks, config
from tdvit.attention import AttentionConfig
from tdvit.backbone import (
    DEFAULT_DILATIONS,
    SPACE,
    TEMPORAL,
    VARIANTS,
    ModelConfig,
    build_model,
    build_stage,
    format_stage,
    toy_config,
)
from tdvit.cli import comparison_summary, run_comparison
from tdvit.memory import SAMPLING_KINDS, FeatureMemory, SamplingStrategy
from tdvit.numerics import Tensor
from tdvit.streaming import oracle_recompute, process_video, random_frames
from tdvit.tdtb import TDTBState, init_block, tdtb_forward


def report(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {title} ({detail})"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    records = checks.gradient_suite(seed=0)
    elapsed = time.perf_counter() - start
    ops = {r["op"] for r in records}
    required = {"linear", "layer_norm", "gelu", "softmax", "mlp", "mca", "window_attention",
                "correlation_attention", "tdtb"}
    primitives = {"linear", "layer_norm", "gelu", "softmax"}
    ok = required <= ops and elapsed < 120
    for r in records:
        limit = 1e-5 if r["op"] in primitives else 1e-4
        ok &= r["max_rel_error"] <= limit
    worst = max(r["max_rel_error"] for r in records)
    report(1, "gradient suite", ok, f"{len(records)} ops, worst rel err {worst:.2e}, {elapsed:.1f}s")


def test_criterion_2_streaming_equivalence():
    worst = 0.0
    runs = 0
    for seed in range(3):
        for kind in SAMPLING_KINDS:
            model = build_model(toy_config(seed=seed, sampling=SamplingStrategy(kind, rng_seed=seed)))
            frames = random_frames(model, 64, seed=seed)
            a, b = process_video(frames, model), oracle_recompute(frames, model)
            for fa, fb in zip(a.outputs, b.outputs):
                for x, y in zip(fa, fb):
                    worst = max(worst, float(np.max(np.abs(x - y))))
            runs += 1
    report(2, "streaming equivalence", worst <= 1e-12, f"{runs} runs x 64 frames, max |diff| {worst:.1e}")


def _projection_ops(report_) -> int:
    return sum(c.q_projections + c.kv_projections for c in report_.counters)


def test_criterion_3_cost_exactness():
    checked = 0
    ok = True
    layouts = [(d, d, d, d) for d in (1, 4, 8, 16, 32)] + [DEFAULT_DILATIONS]
    for dilations in layouts:
        model = build_model(toy_config(dilations=dilations))
        for T in (1, 7, 64):
            frames = random_frames(model, T, seed=T)
            reuse = process_video(frames, model)
            refresh = process_video(frames, model, "refresh_each_step")
            for info, c in zip(reuse.blocks, reuse.counters):
                period = info.dilation if info.tag == TEMPORAL else 1
                ok &= c.q_projections == T and c.kv_projections == math.ceil(T / period)
                checked += 1
            ops, oracle_ops = _projection_ops(reuse), _projection_ops(refresh)
            macs = sum(c.q_macs + c.kv_macs for c in reuse.counters)
            oracle_macs = sum(c.q_macs + c.kv_macs for c in refresh.counters)
            if max(dilations) > 1 and T > 1:
                ok &= ops < oracle_ops and macs < oracle_macs
            else:
                ok &= ops == oracle_ops
    report(3, "cost exactness", ok, f"{checked} block/run counter pairs exact, reuse < refresh whenever D>1")


def test_criterion_4_receptive_field():
    records = checks.trf_table(seed=0)
    rows = {r["config"]: r for r in records}
    measured = [r for r in records if r["measured"] is not None]
    ok = (len(measured) >= 4 and all(r["measured"] == r["predicted"] for r in measured)
          and rows["late_aggregation_k4"]["measured"] == 4 and rows["dilated_k2"]["measured"] == 8
          and rows["dilated_k2_backbone"]["measured"] == 8)
    detail = ", ".join(f"{r['config']} {r['measured']}/{r['predicted']}" for r in records)
    report(4, "receptive field", ok, detail)


def test_criterion_5_memory_semantics():
    rng = np.random.default_rng(0)
    ok = True
    # ring contents
    for capacity in (1, 2, 4, 7):
        m = FeatureMemory(capacity)
        stored = []
        for t in range(1, 3 * capacity + 3):
            f = rng.standard_normal((3, 4, 2))
            m.update(f, t)
            stored.append(f)
            if t >= capacity:
                ok &= m.timestamps == list(range(t - capacity + 1, t + 1))
                ok &= all(np.array_equal(a, b) for a, b in zip(m.features, stored[-capacity:]))
    # earliest sampling inside a block returns the output of frame t - D
    cfg = AttentionConfig(num_heads=2, head_dim=2, mode="window", region=3)
    w = init_block(rng, cfg, 3, std=0.3)
    for d in (1, 2, 4):
        state = TDTBState.create(d, reuse_period=1)
        state.seed(rng.standard_normal((3, 3, 4)))
        outputs = {}
        for t in range(1, 12):
            outputs[t] = tdtb_forward(state, Tensor(rng.standard_normal((3, 3, 4))), w, cfg, t).data
            if t - d >= 1:
                ok &= np.array_equal(state.cached_ref, outputs[t - d])
    # element provenance for every sampler
    for kind in SAMPLING_KINDS:
        for n in (1, 3, 4, 8):
            m = FeatureMemory(n)
            for t in range(1, n + 1):
                m.update(rng.standard_normal((5, 6, 4)), t)
            out = SamplingStrategy(kind).sample(m, np.random.default_rng(n))
            ok &= bool(np.all(np.any(np.stack(m.features) == out[None], axis=0)))
    report(5, "memory semantics", bool(ok), "ring contents, earliest = output at t-D, provenance for 4 samplers")


def test_criterion_6_causality():
    configs = [
        toy_config(seed=1, dilations=(1, 2, 3, 4), sampling=SamplingStrategy("earliest")),
        toy_config(seed=2, scheme="factorised", depths=(2, 2, 6, 2), dilations=(2, 2, 4, 4),
                   sampling=SamplingStrategy("patch_shuffle", rng_seed=2)),
        toy_config(seed=3, dilations=(1, 3, 5, 2), attention_mode="correlation",
                   sampling=SamplingStrategy("channel_shuffle", rng_seed=3)),
    ]
    worst = 0.0
    moved_at_t = True
    for i, cfg in enumerate(configs):
        model = build_model(cfg)
        frames = random_frames(model, 10, seed=i)
        base = process_video(frames, model)
        for t_future in (3, 7, 9):
            probe = copy.deepcopy(frames)
            probe[t_future] = probe[t_future] + np.random.default_rng(t_future).standard_normal(probe[t_future].shape)
            moved = process_video(probe, model)
            for t in range(t_future):
                for x, y in zip(base.outputs[t], moved.outputs[t]):
                    worst = max(worst, float(np.max(np.abs(x - y))))
            moved_at_t &= bool(np.any(base.outputs[t_future][0] != moved.outputs[t_future][0]))
    report(6, "causality", worst == 0.0 and moved_at_t, f"3 configs, max past-output change {worst}")


def test_criterion_7_synthetic_task():
    cfg = config.RunConfig()
    start = time.perf_counter()
    results = run_comparison(cfg)
    elapsed = time.perf_counter() - start
    summary = comparison_summary(results, cfg.train.min_delta)
    params = [(a.params, b.params) for a, b in results]
    matched = all(abs(a - b) <= 0.01 * a for a, b in params)
    ok = summary["seeds"] == 5 and summary["meets_target"] and elapsed < 600 and matched
    deltas = " ".join(f"{d:+.3f}" for d in summary["per_seed_delta"])
    report(7, "synthetic task", ok,
           f"occluded acc {summary['tdvit_occluded_accuracy']:.3f} vs {summary['space_only_occluded_accuracy']:.3f}, "
           f"delta {summary['delta']:+.3f} (per seed {deltas}), {elapsed:.0f}s")


def test_criterion_8_configuration_fidelity():
    registry = {k: (v.C, v.L) for k, v in VARIANTS.items()}
    expected = {
        "T": (96, (2, 2, 6, 2)), "S": (96, (2, 2, 18, 2)), "B": (128, (2, 2, 18, 2)),
        "T+": (96, (2, 2, 8, 2)), "S+": (96, (2, 2, 20, 2)), "B+": (128, (2, 2, 20, 2)),
    }
    round_trip = all(ModelConfig(variant=k).spec == VARIANTS[k] for k in VARIANTS)
    layouts = [format_stage(build_stage("split", 6, 3)), format_stage(build_stage("factorised", 6, 3)),
               format_stage(build_stage("split", 8, 5))]
    blocks_ok = build_stage("split", 6, 3) == (SPACE,) * 3 + (TEMPORAL,) * 3
    ok = (registry == expected and round_trip and blocks_ok
          and layouts == ["s*3, t*3", "[s, t]*3", "s*3, t*5"]
          and DEFAULT_DILATIONS == (4, 8, 16, 32) and ModelConfig().dilations == (4, 8, 16, 32))
    report(8, "configuration fidelity", ok, f"6 variants, layouts {layouts}, dilations {DEFAULT_DILATIONS}")
