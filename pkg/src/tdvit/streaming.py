"""Frame-by-frame inference driver with exact cost accounting.

``process_video`` seeds every temporal memory from the first frame, then
pushes frames through the model one at a time. Three schedules exist:

* ``reuse``: references are resampled every ``dilation`` frames and their
  key/value projections cached in between;
* ``refresh_each_step``: a new reference every frame (receptive-field
  semantics);
* the oracle (:func:`oracle_recompute`): the ``reuse`` schedule, but keys
  and values are projected again on every frame.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
from typing import IO, Sequence

import numpy as np

from tdvit.attention import attention_cost
from tdvit.backbone import TEMPORAL, Model, block_attention, forward_frame, model_receptive_field
from tdvit.errors import ConfigError, UsageError
from tdvit.numerics import Tensor, no_grad
from tdvit.tdtb import BlockCounters, TDTBState

MODES = ("reuse", "refresh_each_step")


@dataclasses.dataclass
class BlockInfo:
    name: str
    stage: int
    tag: str
    dilation: int
    spatial: tuple[int, int]
    kv_macs_per_call: int


@dataclasses.dataclass
class StreamState:
    model: Model
    mode: str
    oracle: bool
    blocks: list[BlockInfo]
    states: list  # TDTBState for temporal blocks, BlockCounters for space blocks
    t: int = 0
    seeded: bool = False

    def counters(self) -> list[BlockCounters]:
        return [s.counters if isinstance(s, TDTBState) else s for s in self.states]


def block_infos(model: Model) -> list[BlockInfo]:
    sizes = model.config.stage_sizes()
    return [
        BlockInfo(f"stage{i + 1}.block{j + 1}", i, tag,
                  model.stages[i].dilation if tag == TEMPORAL else 1, sizes[i],
                  attention_cost(*sizes[i], block_attention(model.stages[i], tag)).kv_macs)
        for i, j, tag in model.block_specs()
    ]


def make_stream(model: Model, mode: str = "reuse", oracle: bool = False) -> StreamState:
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    cfg = model.config
    infos = block_infos(model)
    states = []
    for k, info in enumerate(infos):
        if info.tag != TEMPORAL:
            states.append(BlockCounters())
            continue
        states.append(TDTBState.create(
            info.dilation,
            strategy=cfg.sampling,
            rng=cfg.sampling.make_rng(k),
            reuse_period=1 if mode == "refresh_each_step" else info.dilation,
            recompute_kv=oracle,
            memory_source=cfg.memory_source,
        ))
    return StreamState(model, mode, oracle, infos, states)


def seed_cold_start(state: StreamState, first_frame) -> None:
    """Fill every temporal memory with copies of that block's frame-1 input."""
    if state.t != 0 or state.seeded:
        raise UsageError(f"cold start seeding happens once, before the first frame (t={state.t})")
    with no_grad():
        forward_frame(state.model, state.states, _as_frame(first_frame), 1, seeding=True)
    state.seeded = True


def step(state: StreamState, frame) -> list[Tensor]:
    """Process the next frame; seeds memories on the first call."""
    frame = _as_frame(frame)
    if not state.seeded:
        seed_cold_start(state, frame)
    state.t += 1
    return forward_frame(state.model, state.states, frame, state.t)


def _as_frame(frame) -> Tensor:
    frame = frame if isinstance(frame, Tensor) else Tensor(frame)
    if frame.ndim == 2:
        frame = frame.reshape(*frame.shape, 1)
    return frame


@dataclasses.dataclass
class StreamReport:
    mode: str
    oracle: bool
    blocks: list[BlockInfo]
    outputs: list[list[np.ndarray]]  # frame -> stage -> feature map
    counters: list[BlockCounters]
    refresh_log: dict[str, list[int]]

    @property
    def frames(self) -> int:
        return len(self.outputs)

    def final_outputs(self) -> list[np.ndarray]:
        return [frame[-1] for frame in self.outputs]

    def totals(self) -> dict[str, int]:
        keys = ("q_projections", "kv_projections", "q_macs", "kv_macs", "score_macs")
        return {k: sum(getattr(c, k) for c in self.counters) for k in keys}

    def to_jsonl(self, fh: IO[str], extra: dict | None = None) -> None:
        """One record per frame, then one summary record."""
        refreshed: dict[int, list[str]] = {}
        for name, frames in self.refresh_log.items():
            for t in frames:
                refreshed.setdefault(t, []).append(name)
        for t, pyramid in enumerate(self.outputs, start=1):
            rec = {
                "type": "frame",
                "frame": t,
                "stages": [
                    {"shape": list(f.shape), "l2": float(np.linalg.norm(f)), "sha256": _digest(f)}
                    for f in pyramid
                ],
                "refreshed": refreshed.get(t, []),
            }
            fh.write(json.dumps(rec) + "\n")
        summary = {
            "type": "summary",
            "mode": "oracle" if self.oracle else self.mode,
            "frames": self.frames,
            "blocks": [
                {"block": b.name, "tag": b.tag, "dilation": b.dilation, **c.as_dict(),
                 "refreshes": self.refresh_log.get(b.name, [])}
                for b, c in zip(self.blocks, self.counters)
            ],
            "totals": self.totals(),
        }
        if extra:
            summary.update(extra)
        fh.write(json.dumps(summary) + "\n")


def _digest(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a, dtype="<f8").tobytes()).hexdigest()


def _report(state: StreamState, outputs) -> StreamReport:
    log = {b.name: list(s.refresh_log) for b, s in zip(state.blocks, state.states) if isinstance(s, TDTBState)}
    return StreamReport(state.mode, state.oracle, state.blocks, outputs,
                        [copy.copy(c) for c in state.counters()], log)


def _check_frames(frames: Sequence) -> list[Tensor]:
    if len(frames) == 0:
        raise UsageError("video has no frames")
    frames = [_as_frame(f) for f in frames]
    shape = frames[0].shape
    if any(f.shape != shape for f in frames):
        raise UsageError("all frames of a video must share one shape")
    return frames


def process_video(frames: Sequence, model: Model, mode: str = "reuse", *, oracle: bool = False) -> StreamReport:
    frames = _check_frames(frames)
    state = make_stream(model, mode, oracle)
    outputs = []
    with no_grad():
        for frame in frames:
            outputs.append([x.data for x in step(state, frame)])
    return _report(state, outputs)


def oracle_recompute(frames: Sequence, model: Model, mode: str = "reuse") -> StreamReport:
    """Same schedule as :func:`process_video` without the key/value cache."""
    return process_video(frames, model, mode, oracle=True)


def random_frames(model: Model, n: int, seed: int = 0) -> list[np.ndarray]:
    cfg = model.config
    rng = np.random.default_rng(seed)
    return [rng.standard_normal((*cfg.frame_size, cfg.in_channels)) for _ in range(n)]


def measure_trf(model: Model, T: int, probe_magnitude: float = 1.0, seed: int = 0,
                threshold: float = 1e-9) -> int:
    """Empirical temporal reach of the final-stage output at frame ``T``.

    Returns ``1 + max tau`` such that perturbing frame ``T - tau`` moves the
    last stage's output at frame ``T`` by more than ``threshold``. Runs in
    ``refresh_each_step`` mode and needs earliest sampling.
    """
    if model.config.sampling.kind != "earliest":
        raise UsageError("receptive-field measurement needs earliest sampling")
    predicted = model_receptive_field(model.config)
    if T <= predicted:
        raise UsageError(f"T={T} must exceed the predicted receptive field {predicted}")
    frames = _check_frames(random_frames(model, T, seed))
    rng = np.random.default_rng([seed, 1])
    noise = [probe_magnitude * rng.standard_normal(f.shape) for f in frames]

    snapshots = []
    with no_grad():
        state = make_stream(model, "refresh_each_step")
        for f in frames:
            snapshots.append(copy.deepcopy(state.states))
            out = step(state, f)
        reference = out[-1].data

        for tau in range(T - 1, -1, -1):
            s = T - tau  # 1-based frame to perturb
            probe = make_stream(model, "refresh_each_step")
            probe.states = copy.deepcopy(snapshots[s - 1])
            probe.t = s - 1
            probe.seeded = s > 1
            for t in range(s, T + 1):
                f = frames[t - 1]
                out = step(probe, Tensor(f.data + noise[t - 1]) if t == s else f)
            if np.max(np.abs(out[-1].data - reference)) > threshold:
                return tau + 1
    return 1


@dataclasses.dataclass(frozen=True)
class CostRow:
    block: str
    tag: str
    dilation: int
    frames: int
    q_count: int
    kv_count: int
    q_macs: int
    kv_macs: int
    score_macs: int
    oracle_macs: int

    @property
    def total_macs(self) -> int:
        return self.q_macs + self.kv_macs + self.score_macs

    @property
    def ratio(self) -> float:
        return self.total_macs / self.oracle_macs if self.oracle_macs else 1.0


def cost_summary(report: StreamReport) -> list[CostRow]:
    """Per-block counters against the no-cache cost of the same run.

    The no-cache cost projects keys/values on every frame; it is derived
    analytically from each block's map size, so no second run is needed.
    """
    return [
        CostRow(info.name, info.tag, info.dilation, c.frames, c.q_projections, c.kv_projections,
                c.q_macs, c.kv_macs, c.score_macs,
                oracle_macs=c.q_macs + c.score_macs + c.frames * info.kv_macs_per_call)
        for info, c in zip(report.blocks, report.counters)
    ]


def summary_totals(rows: Sequence[CostRow]) -> dict[str, float]:
    reuse = sum(r.total_macs for r in rows)
    oracle = sum(r.oracle_macs for r in rows)
    return {
        "q_macs": sum(r.q_macs for r in rows),
        "kv_macs": sum(r.kv_macs for r in rows),
        "score_macs": sum(r.score_macs for r in rows),
        "projection_macs": sum(r.q_macs + r.kv_macs for r in rows),
        "total_macs": reuse,
        "oracle_macs": oracle,
        "ratio": reuse / oracle if oracle else 1.0,
    }


def expected_kv_count(frames: int, dilation: int) -> int:
    return math.ceil(frames / dilation)


def format_cost_table(rows: Sequence[CostRow]) -> str:
    header = f"{'block':<16} {'tag':<8} {'D':>3} {'frames':>6} {'q':>5} {'kv':>5} " \
             f"{'proj_macs':>12} {'score_macs':>12} {'ratio':>6}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(f"{r.block:<16} {r.tag:<8} {r.dilation:>3} {r.frames:>6} {r.q_count:>5} {r.kv_count:>5} "
                     f"{r.q_macs + r.kv_macs:>12} {r.score_macs:>12} {r.ratio:>6.3f}")
    return "\n".join(lines)
