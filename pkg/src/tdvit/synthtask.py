"""Synthetic dense-video task: one moving shape per video, sometimes occluded.

While occluded, a frame shows a class-agnostic grey box over the object,
so its class can only be recovered from earlier frames. Comparing a
temporal model against the same architecture with every temporal block
swapped for a space block isolates what the memory path contributes.
"""
from __future__ import annotations

import dataclasses
import math
import struct
from typing import BinaryIO, Sequence

import numpy as np

from tdvit.backbone import Model, ModelConfig, build_model
from tdvit.errors import ConfigError, TrainingError
from tdvit.numerics import (
    LayerNormParams,
    LinearParams,
    Tensor,
    count_parameters,
    cross_entropy,
    init_layer_norm,
    init_linear,
    layer_norm,
    linear,
    named_parameters,
    no_grad,
    parameters,
)
from tdvit.streaming import make_stream, step

_OBJ = 7  # object template side
_OCC = 11  # occluder side


def _templates() -> list[np.ndarray]:
    n = _OBJ
    full = np.ones((n, n))
    ring = full.copy()
    ring[2:-2, 2:-2] = 0
    plus = np.zeros((n, n))
    plus[n // 2 - 1:n // 2 + 2, :] = 1
    plus[:, n // 2 - 1:n // 2 + 2] = 1
    cross = np.zeros((n, n))
    for i in range(n):
        cross[i, max(i - 1, 0):i + 2] = 1
        cross[i, max(n - 2 - i, 0):n + 1 - i] = 1
    bars = np.zeros((n, n))
    bars[0:2] = bars[-2:] = 1
    tri = np.tril(np.ones((n, n)))
    return [full, ring, plus, cross, bars, tri]


SHAPES = _templates()


@dataclasses.dataclass(frozen=True)
class GenParams:
    T: int = 8
    H: int = 32
    W: int = 32
    k: int = 4
    occlusion_prob: float = 1.0
    velocity_range: tuple[int, int] = (-2, 2)
    max_occlusion: int = 4  # the largest dilation of the synthetic-task model
    turn_prob: float = 0.15
    noise: float = 0.1
    intensity_step: float = 1.0  # object brightness is 1 + intensity_step * label

    def validate(self) -> None:
        if self.T < 8:
            raise ConfigError(f"videos need at least 8 frames, got T={self.T}")
        if self.H != self.W or self.H not in (32, 64):
            raise ConfigError(f"frames must be 32x32 or 64x64, got {self.H}x{self.W}")
        if not 2 <= self.k <= len(SHAPES):
            raise ConfigError(f"k must be in [2, {len(SHAPES)}], got {self.k}")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ConfigError("occlusion_prob must lie in [0, 1]")
        lo, hi = self.velocity_range
        if lo > hi or max(abs(lo), abs(hi)) > self.H // 4:
            raise ConfigError(f"invalid velocity range {self.velocity_range}")
        if self.intensity_step < 0:
            raise ConfigError("intensity_step must be non-negative")
        if not 2 <= self.max_occlusion <= self.T - 1:
            raise ConfigError(f"max_occlusion must be in [2, T-1], got {self.max_occlusion}")


@dataclasses.dataclass
class SyntheticVideo:
    frames: np.ndarray  # T x H x W x 1
    label: int
    centers: np.ndarray  # T x 2, (x, y) pixel coordinates
    visible: np.ndarray  # T bools

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def labels(self) -> np.ndarray:
        return np.full(self.T, self.label, dtype=np.int64)


def trajectory(start: tuple[int, int], velocity: tuple[int, int], T: int) -> np.ndarray:
    """Constant-velocity centers ``start + t * velocity`` for ``t = 0..T-1``."""
    steps = np.arange(T)[:, None]
    return np.asarray(start)[None, :] + steps * np.asarray(velocity)[None, :]


def _bouncing_path(rng: np.random.Generator, p: GenParams) -> np.ndarray:
    lo_v, hi_v = p.velocity_range
    margin = _OCC // 2
    lo = np.array([margin, margin])
    hi = np.array([p.W - 1 - margin, p.H - 1 - margin])
    pos = rng.integers(lo, hi + 1)
    vel = rng.integers(lo_v, hi_v + 1, size=2)
    path = [pos.copy()]
    for _ in range(p.T - 1):
        if rng.random() < p.turn_prob:
            vel = rng.integers(lo_v, hi_v + 1, size=2)
        nxt = pos + vel
        for ax in range(2):
            if nxt[ax] < lo[ax] or nxt[ax] > hi[ax]:
                vel[ax] = -vel[ax]
        pos = np.clip(pos + vel, lo, hi)
        path.append(pos.copy())
    return np.stack(path)


def _stamp(frame: np.ndarray, patch: np.ndarray, cx: int, cy: int, mask: np.ndarray | None = None) -> None:
    n = patch.shape[0]
    y0, x0 = cy - n // 2, cx - n // 2
    region = frame[y0:y0 + n, x0:x0 + n]
    if mask is None:
        region[...] = patch
    else:
        region[mask > 0] = patch[mask > 0]


def generate(seed: int, params: GenParams = GenParams()) -> SyntheticVideo:
    """Deterministic video for ``(seed, params)``."""
    params.validate()
    rng = np.random.default_rng(seed)
    label = int(rng.integers(params.k))
    centers = _bouncing_path(rng, params)
    visible = np.ones(params.T, dtype=bool)
    if rng.random() < params.occlusion_prob:
        length = int(rng.integers(2, params.max_occlusion + 1))
        start = int(rng.integers(1, params.T - length + 1))  # frame 0 always visible
        visible[start:start + length] = False
    template = SHAPES[label] * (1.0 + params.intensity_step * label)
    frames = np.empty((params.T, params.H, params.W, 1))
    for t in range(params.T):
        img = params.noise * rng.standard_normal((params.H, params.W))
        cx, cy = (int(v) for v in centers[t])
        if visible[t]:
            _stamp(img, template, cx, cy, template)
        else:
            _stamp(img, np.full((_OCC, _OCC), 0.5), cx, cy)
        frames[t, :, :, 0] = img
    return SyntheticVideo(frames, label, centers.astype(np.int64), visible)


def generate_dataset(seed: int, n: int, params: GenParams = GenParams()) -> list[SyntheticVideo]:
    seeds = np.random.SeedSequence(seed).generate_state(n)
    return [generate(int(s), params) for s in seeds]


# ------------------------------------------------------------ serialization

MAGIC = b"TDVS"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4s7i")
_RECORD = np.dtype([("label", "<i4"), ("cx", "<i4"), ("cy", "<i4"), ("visible", "<i4")])


def write_dataset(fh: BinaryIO, videos: Sequence[SyntheticVideo], k: int) -> None:
    """Flat little-endian layout; see ``docs/dataset_format.md``."""
    if not videos:
        raise ConfigError("cannot write an empty dataset")
    T, H, W, C = videos[0].frames.shape
    fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(videos), T, H, W, C, k))
    for v in videos:
        if v.frames.shape != (T, H, W, C):
            raise ConfigError("all videos in a dataset must share one shape")
        fh.write(np.ascontiguousarray(v.frames, dtype="<f8").tobytes())
        rec = np.empty(T, dtype=_RECORD)
        rec["label"] = v.label
        rec["cx"], rec["cy"] = v.centers[:, 0], v.centers[:, 1]
        rec["visible"] = v.visible
        fh.write(rec.tobytes())


def read_dataset(fh: BinaryIO) -> tuple[list[SyntheticVideo], int]:
    raw = fh.read(_HEADER.size)
    magic, version, n, T, H, W, C, k = _HEADER.unpack(raw)
    if magic != MAGIC or version != FORMAT_VERSION:
        raise ConfigError(f"not a dataset file (magic={magic!r}, version={version})")
    videos = []
    for _ in range(n):
        frames = np.frombuffer(fh.read(8 * T * H * W * C), dtype="<f8").reshape(T, H, W, C).astype(np.float64)
        rec = np.frombuffer(fh.read(_RECORD.itemsize * T), dtype=_RECORD)
        centers = np.stack([rec["cx"], rec["cy"]], axis=1).astype(np.int64)
        videos.append(SyntheticVideo(frames, int(rec["label"][0]), centers, rec["visible"].astype(bool)))
    return videos, k


# ---------------------------------------------------------------------- head

@dataclasses.dataclass
class ToyHead:
    norm: LayerNormParams
    classifier: LinearParams
    regressor: LinearParams

    @property
    def k(self) -> int:
        return self.classifier.d_out


def init_head(rng: np.random.Generator, dim: int, k: int, std: float = 0.02) -> ToyHead:
    return ToyHead(init_layer_norm(dim), init_linear(rng, dim, k, std), init_linear(rng, dim, 2, std))


def head_forward(head: ToyHead, features: Tensor) -> tuple[Tensor, Tensor]:
    """Class logits ``(B, k)`` and normalised centers ``(B, 2)`` from stage-4 maps.

    ``features`` is ``H x W x d`` or batched ``B x H x W x d``.
    """
    if features.ndim == 3:
        features = features.reshape(1, *features.shape)
    pooled = layer_norm(features, head.norm.gamma, head.norm.beta).mean(axis=(1, 2))
    return linear(pooled, head.classifier), linear(pooled, head.regressor)


# ----------------------------------------------------------------- training

class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 clip_norm: float | None = 5.0):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.clip_norm = lr, betas, eps, clip_norm
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        if self.clip_norm is not None:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
            if norm > self.clip_norm:
                grads = [g * (self.clip_norm / norm) for g in grads]
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclasses.dataclass
class TrainResult:
    losses: list[float]

    def smoothed(self, window: int = 20) -> np.ndarray:
        x = np.asarray(self.losses)
        window = max(1, min(window, len(x)))
        return np.convolve(x, np.ones(window) / window, mode="valid")


def video_loss(model: Model, head: ToyHead, videos: Sequence[SyntheticVideo], center_weight: float = 1.0) -> Tensor:
    """Mean per-frame loss over a batch of equal-length videos, streamed frame by frame."""
    frames = np.stack([v.frames for v in videos])  # B x T x H x W x 1
    labels = np.array([v.label for v in videos])
    T, h, w = frames.shape[1:4]
    centers = np.stack([v.centers for v in videos]) / np.array([w, h], dtype=np.float64)
    stream = make_stream(model, "reuse")
    total = None
    for t in range(T):
        logits, center = head_forward(head, step(stream, frames[:, t])[-1])
        err = center - Tensor(centers[:, t])
        loss = cross_entropy(logits, labels) + (err * err).mean() * center_weight
        total = loss if total is None else total + loss
    return total * (1.0 / T)


def train(model: Model, head: ToyHead, dataset: Sequence[SyntheticVideo], steps: int, lr: float = 1e-3,
          seed: int = 0, batch_size: int = 8) -> TrainResult:
    """One Adam step per batch of videos, drawn in a seeded shuffled order."""
    if not dataset:
        raise ConfigError("training needs at least one video")
    opt = Adam(parameters(model.weights) + parameters(head), lr=lr)
    rng = np.random.default_rng(seed)
    batch_size = min(batch_size, len(dataset))
    order: list[int] = []
    losses = []
    for i in range(steps):
        if len(order) < batch_size:
            order = list(rng.permutation(len(dataset)))
        batch = [dataset[order.pop()] for _ in range(batch_size)]
        opt.zero_grad()
        loss = video_loss(model, head, batch)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(i, value)
        loss.backward()
        opt.step()
        losses.append(value)
    return TrainResult(losses)


@dataclasses.dataclass(frozen=True)
class Metrics:
    accuracy: float
    occluded_accuracy: float
    visible_accuracy: float
    center_error: float
    frames: int
    occluded_frames: int

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def predict(model: Model, head: ToyHead, videos: Sequence[SyntheticVideo]) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame class predictions ``(B, T)`` and centers in pixels ``(B, T, 2)``."""
    frames = np.stack([v.frames for v in videos])
    T, h, w = frames.shape[1:4]
    stream = make_stream(model, "reuse")
    classes, centers = [], []
    with no_grad():
        for t in range(T):
            logits, center = head_forward(head, step(stream, frames[:, t])[-1])
            classes.append(np.argmax(logits.data, axis=-1))
            centers.append(center.data * np.array([w, h]))
    return np.stack(classes, axis=1), np.stack(centers, axis=1)


def evaluate(model: Model, head: ToyHead, dataset: Sequence[SyntheticVideo], batch_size: int = 16) -> Metrics:
    correct, visible, errors = [], [], []
    for i in range(0, len(dataset), batch_size):
        chunk = dataset[i:i + batch_size]
        pred, centers = predict(model, head, chunk)
        for v, p, c in zip(chunk, pred, centers):
            correct.append(p == v.label)
            visible.append(v.visible)
            errors.append(np.linalg.norm(c - v.centers, axis=1))
    correct, visible, errors = (np.concatenate(x) for x in (correct, visible, errors))
    occ = ~visible

    def rate(mask):
        return float(correct[mask].mean()) if mask.any() else float("nan")

    return Metrics(float(correct.mean()), rate(occ), rate(visible), float(errors.mean()),
                   int(correct.size), int(occ.sum()))


# ---------------------------------------------------------------- comparison

def synth_model_config(**overrides) -> ModelConfig:
    """Small four-stage model for the synthetic task (one space + one temporal block per stage)."""
    base = dict(variant="T", embed_dim=8, head_dim=4, depths=(2, 2, 2, 2), dilations=(1, 2, 2, 4),
                region=9, frame_size=(32, 32), in_channels=1, init_std=0.2)
    base.update(overrides)
    return ModelConfig(**base)


@dataclasses.dataclass
class RunResult:
    name: str
    params: int
    train: TrainResult
    metrics: Metrics
    model: Model | None = dataclasses.field(default=None, repr=False)
    head: ToyHead | None = dataclasses.field(default=None, repr=False)


def train_and_evaluate(cfg: ModelConfig, name: str, train_set, test_set, k: int, steps: int, lr: float,
                       seed: int, batch_size: int = 8) -> RunResult:
    model = build_model(cfg)
    head = init_head(np.random.default_rng([cfg.seed, 7]), model.stages[-1].dim, k)
    result = train(model, head, train_set, steps, lr, seed, batch_size)
    return RunResult(name, model.num_parameters() + count_parameters(head), result, evaluate(model, head, test_set),
                     model, head)


def compare(seed: int, cfg: ModelConfig | None = None, gen: GenParams = GenParams(), steps: int = 200,
            lr: float = 1e-3, batch_size: int = 8, n_train: int | None = None,
            n_test: int = 80) -> tuple[RunResult, RunResult]:
    """Train the temporal model and its space-only twin on identical data and initial seeds.

    By default every training step sees fresh videos (``n_train = steps * batch_size``);
    small fixed training sets are memorised rather than learned.
    """
    cfg = synth_model_config(seed=seed) if cfg is None else dataclasses.replace(cfg, seed=seed)
    n_train = steps * batch_size if n_train is None else n_train
    train_set = generate_dataset(2 * seed, n_train, gen)
    test_set = generate_dataset(2 * seed + 1, n_test, gen)
    temporal = train_and_evaluate(cfg, "tdvit", train_set, test_set, gen.k, steps, lr, seed, batch_size)
    space = train_and_evaluate(dataclasses.replace(cfg, space_only=True), "space_only", train_set, test_set,
                               gen.k, steps, lr, seed, batch_size)
    return temporal, space


# ----------------------------------------------------------------- weights

def save_weights(fh: BinaryIO, model: Model, head: ToyHead) -> None:
    arrays = {f"model.{n}": t.data for n, t in named_parameters(model.weights)}
    arrays.update({f"head.{n}": t.data for n, t in named_parameters(head)})
    np.savez(fh, **arrays)


def load_weights(fh: BinaryIO, model: Model, head: ToyHead) -> None:
    """Copy saved arrays into freshly built ``model`` and ``head`` of the same configuration."""
    with np.load(fh) as data:
        targets = [(f"model.{n}", t) for n, t in named_parameters(model.weights)]
        targets += [(f"head.{n}", t) for n, t in named_parameters(head)]
        if set(data.files) != {name for name, _ in targets}:
            raise ConfigError("weights file does not match the model configuration")
        for name, t in targets:
            if data[name].shape != t.shape:
                raise ConfigError(f"shape mismatch for {name}: {data[name].shape} vs {t.shape}")
            t.data[...] = data[name]
