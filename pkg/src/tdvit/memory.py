"""Fixed-capacity feature memory and the four reference-sampling strategies."""
from __future__ import annotations

import collections
import dataclasses

import numpy as np

from tdvit.errors import ColdStartError, ConfigError, UsageError

SAMPLING_KINDS = ("earliest", "temporal_nms", "patch_shuffle", "channel_shuffle")


class FeatureMemory:
    """Ordered buffer of ``(timestamp, feature)`` pairs; the oldest entry is evicted first.

    Features are stored as plain ``H x W x d`` float64 arrays and are never
    part of an autodiff graph.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError(f"memory capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._entries: collections.deque[tuple[int, np.ndarray]] = collections.deque()

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    @property
    def timestamps(self) -> list[int]:
        return [t for t, _ in self._entries]

    @property
    def features(self) -> list[np.ndarray]:
        return [f for _, f in self._entries]

    def update(self, feature: np.ndarray, t: int) -> None:
        feature = np.array(feature, dtype=np.float64)  # private copy
        if self._entries:
            last_t, first = self._entries[-1][0], self._entries[0][1]
            if t <= last_t:
                raise UsageError(f"timestamp {t} is not after the last stored timestamp {last_t}")
            if feature.shape != first.shape:
                raise UsageError(f"feature shape {feature.shape} does not match stored {first.shape}")
        self._entries.append((t, feature))
        if len(self._entries) > self.capacity:
            self._entries.popleft()

    def _require_entries(self) -> None:
        if not self._entries:
            raise ColdStartError("cannot sample from an empty memory; seed it first")

    def copy(self) -> FeatureMemory:
        other = FeatureMemory(self.capacity)
        other._entries = collections.deque(self._entries)  # arrays are never mutated in place
        return other


def sample_earliest(m: FeatureMemory) -> np.ndarray:
    m._require_entries()
    return m.features[0]


def sample_temporal_nms(m: FeatureMemory) -> np.ndarray:
    """Entry with the largest whole-map L2 norm; ties go to the oldest.

    Batched maps ``(B, H, W, C)`` are decided per batch element.
    """
    m._require_entries()
    stack = np.stack(m.features)
    norms = np.sqrt((stack * stack).sum(axis=(-3, -2, -1)))
    pick = np.argmax(norms, axis=0)  # first maximum, i.e. the oldest
    return np.take_along_axis(stack, pick[None, ..., None, None, None], axis=0)[0]


def temporal_groups(n: int, groups: int = 4) -> list[np.ndarray]:
    """Split entry positions ``0..n-1`` (oldest first) into contiguous near-equal groups.

    With fewer entries than groups, the trailing groups reuse the last entry.
    """
    if n >= groups:
        return np.array_split(np.arange(n), groups)
    return [np.array([min(g, n - 1)]) for g in range(groups)]


def sample_patch_shuffle(m: FeatureMemory, rng: np.random.Generator) -> np.ndarray:
    """Stitch the four quadrants from entries drawn from four temporal groups.

    On maps with a side of 1 the top/left quadrants are empty and only the
    remaining ones are filled; one draw per group is still consumed.
    """
    m._require_entries()
    feats = m.features
    h, w = feats[0].shape[-3:-1]
    hh, hw = h // 2, w // 2
    quadrants = [
        (slice(0, hh), slice(0, hw)),
        (slice(0, hh), slice(hw, w)),
        (slice(hh, h), slice(0, hw)),
        (slice(hh, h), slice(hw, w)),
    ]
    out = np.empty_like(feats[0])
    for (ys, xs), group in zip(quadrants, temporal_groups(len(feats))):
        pick = int(group[rng.integers(len(group))])
        out[..., ys, xs, :] = feats[pick][..., ys, xs, :]
    return out


def sample_channel_shuffle(m: FeatureMemory, rng: np.random.Generator) -> np.ndarray:
    """Each channel comes from an independently drawn entry."""
    m._require_entries()
    stack = np.stack(m.features)  # n x ... x C
    picks = rng.integers(stack.shape[0], size=stack.shape[-1])
    return np.stack([stack[p, ..., c] for c, p in enumerate(picks)], axis=-1)


@dataclasses.dataclass(frozen=True)
class SamplingStrategy:
    kind: str = "earliest"
    rng_seed: int = 0

    def __post_init__(self):
        if self.kind not in SAMPLING_KINDS:
            raise ConfigError(f"sampling kind must be one of {SAMPLING_KINDS}, got {self.kind!r}")

    def make_rng(self, stream: int = 0) -> np.random.Generator:
        """Independent generator for one block of one stream."""
        return np.random.default_rng([self.rng_seed, stream])

    def sample(self, m: FeatureMemory, rng: np.random.Generator | None = None) -> np.ndarray:
        if self.kind == "earliest":
            return sample_earliest(m)
        if self.kind == "temporal_nms":
            return sample_temporal_nms(m)
        if rng is None:
            raise UsageError(f"{self.kind} sampling needs a random generator")
        if self.kind == "patch_shuffle":
            return sample_patch_shuffle(m, rng)
        return sample_channel_shuffle(m, rng)
