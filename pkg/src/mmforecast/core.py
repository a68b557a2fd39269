"""Shared value types: class tables, segmentation maps, logit volumes,
feature maps and K-sample collections. Grid layout is channels-major
(C, H, W) everywhere. All types are immutable after construction."""

from dataclasses import dataclass, field

import numpy as np

# fixed render palette for the synthetic class set (RGB, 0-255)
DEFAULT_PALETTE = {
    "road": (128, 64, 128),
    "sidewalk": (244, 35, 232),
    "building": (70, 70, 70),
    "sky": (70, 130, 180),
    "car": (0, 0, 142),
    "pedestrian": (220, 20, 60),
    "void": (0, 0, 0),
}


@dataclass(frozen=True)
class ClassTable:
    """Class labels plus the void index and the movable-object subset."""
    names: tuple
    void_id: int
    movable_ids: frozenset

    def __post_init__(self):
        if not (0 <= self.void_id < len(self.names)):
            raise ValueError("void_id out of range")
        if self.void_id in self.movable_ids:
            raise ValueError("void class cannot be movable")
        if any(not (0 <= m < len(self.names)) for m in self.movable_ids):
            raise ValueError("movable id out of range")
        if len(self.names) - 1 < 2:
            raise ValueError("need at least 2 non-void classes")

    @property
    def n_classes(self) -> int:
        """Number of scoreable (non-void) classes."""
        return len(self.names) - 1

    def color(self, cid: int):
        return DEFAULT_PALETTE.get(self.names[cid], (255, 255, 255))


def default_class_table() -> ClassTable:
    names = ("road", "sidewalk", "building", "sky", "car", "pedestrian", "void")
    return ClassTable(names=names, void_id=6, movable_ids=frozenset({4, 5}))


@dataclass(frozen=True)
class SegMap:
    """Per-pixel class indices (H, W), void allowed."""
    data: np.ndarray
    table: ClassTable

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 2 or not np.issubdtype(d.dtype, np.integer):
            raise ValueError("SegMap.data must be an integer (H, W) grid")
        if d.min() < 0 or d.max() >= len(self.table.names):
            raise ValueError("SegMap contains invalid class index")
        d = d.copy()
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class LogitVolume:
    """Per-pixel per-class scores (C, H, W); C excludes void."""
    data: np.ndarray
    table: ClassTable

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 3:
            raise ValueError("LogitVolume.data must be (C, H, W)")
        if d.shape[0] != self.table.n_classes:
            raise ValueError(
                f"LogitVolume has {d.shape[0]} channels, expected {self.table.n_classes}")
        if not np.all(np.isfinite(d)):
            raise ValueError("LogitVolume contains non-finite values")
        d = d.copy()
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class FeatureMap:
    """Convolutional feature grid (C_f, H_f, W_f)."""
    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 3:
            raise ValueError("FeatureMap.data must be (C, H, W)")
        if not np.all(np.isfinite(d)):
            raise ValueError("FeatureMap contains non-finite values")
        d = d.copy()
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class SampleSet:
    """Ordered K forecasts from one conditioning input, with noise seeds."""
    samples: tuple
    noise_seeds: tuple = field(default=())

    def __post_init__(self):
        if len(self.samples) < 1:
            raise ValueError("SampleSet needs K >= 1 samples")
        shapes = {s.shape for s in self.samples}
        if len(shapes) != 1:
            raise ValueError("samples must share one shape")
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "noise_seeds", tuple(self.noise_seeds))

    @property
    def k(self) -> int:
        return len(self.samples)

    def stack(self) -> np.ndarray:
        """(K, ...) array of raw sample data."""
        return np.stack([s.data for s in self.samples])


def argmax_decode(logits: LogitVolume) -> SegMap:
    """Per-pixel argmax; ties break toward the lowest class index."""
    return SegMap(data=np.argmax(logits.data, axis=0).astype(np.int64),
                  table=logits.table)


def one_hot(seg: SegMap) -> np.ndarray:
    """(C, H, W) indicator volume; void pixels become all-zero columns."""
    c = seg.table.n_classes
    h, w = seg.data.shape
    out = np.zeros((c, h, w), dtype=np.float64)
    idx = seg.data
    valid = idx != seg.table.void_id
    ys, xs = np.nonzero(valid)
    out[idx[ys, xs], ys, xs] = 1.0
    return out
