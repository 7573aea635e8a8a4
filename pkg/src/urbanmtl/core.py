"""Shared types: model configuration, the LCZ taxonomy, sample batches and errors.

Arrays are plain ``numpy.ndarray`` (float32 for images/densities, uint8 for
label grids) outside the network and ``torch.Tensor`` inside it.
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple, Optional

import numpy as np

IGNORE = 255
NUM_LCZ_CLASSES = 17


class UrbanMTLError(Exception):
    """Base class for all package errors."""


class ConfigError(UrbanMTLError, ValueError):
    pass


class ShapeError(UrbanMTLError, ValueError):
    pass


class RangeError(UrbanMTLError, ValueError):
    pass


class DomainError(UrbanMTLError, ValueError):
    pass


class DegenerateError(UrbanMTLError, ArithmeticError):
    pass


class EmptyBatchError(UrbanMTLError, ValueError):
    pass


class EmptySplitError(UrbanMTLError, ValueError):
    pass


class MissingReferenceError(UrbanMTLError, ValueError):
    pass


class NonFiniteGradError(UrbanMTLError, FloatingPointError):
    pass


class SceneTooSmallError(UrbanMTLError, ValueError):
    pass


class FormatError(UrbanMTLError, IOError):
    """Malformed file. ``offset`` is the byte offset where decoding failed."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ValidationError(UrbanMTLError, ValueError):
    pass


class Group(enum.Enum):
    URBAN = "urban"
    NATURAL = "natural"


class LczClass(NamedTuple):
    index: int
    code: str
    name: str
    group: Group


LCZ_CLASSES: tuple[LczClass, ...] = tuple(
    LczClass(i, code, name, Group.URBAN if i < 10 else Group.NATURAL)
    for i, (code, name) in enumerate(
        [
            ("1", "Compact High-rise"),
            ("2", "Compact Mid-rise"),
            ("3", "Compact Low-rise"),
            ("4", "Open High-rise"),
            ("5", "Open Mid-rise"),
            ("6", "Open Low-rise"),
            ("7", "Lightweight Low-rise"),
            ("8", "Large Low-rise"),
            ("9", "Sparsely Built"),
            ("10", "Heavy Industry"),
            ("A", "Dense Trees"),
            ("B", "Scattered Trees"),
            ("C", "Bush (Scrub)"),
            ("D", "Low Plants"),
            ("E", "Bare Rock or Paved"),
            ("F", "Bare Soil or Sand"),
            ("G", "Water"),
        ]
    )
)

# Index constants used by the synthetic generator and tests.
COMPACT_HIGH, COMPACT_MID, COMPACT_LOW = 0, 1, 2
OPEN_HIGH, OPEN_MID, OPEN_LOW = 3, 4, 5
LIGHTWEIGHT_LOW, LARGE_LOW, SPARSELY_BUILT, HEAVY_INDUSTRY = 6, 7, 8, 9
DENSE_TREES, SCATTERED_TREES, BUSH, LOW_PLANTS = 10, 11, 12, 13
BARE_ROCK_PAVED, BARE_SOIL, WATER = 14, 15, 16


def class_group(index: int) -> Group:
    if not 0 <= index < NUM_LCZ_CLASSES:
        raise IndexError(f"LCZ class index {index} outside 0..{NUM_LCZ_CLASSES - 1}")
    return LCZ_CLASSES[index].group


@dataclass(frozen=True)
class ModelConfig:
    bands: int = 10
    patch_h: int = 128
    patch_w: int = 128
    base_features: int = 16
    num_classes: int = NUM_LCZ_CLASSES
    dropout_rate: float = 0.1
    p2f_enabled: bool = True
    cbam_enabled: bool = True
    aux_head_count: int = 3
    cbam_ratio: int = 8
    task: str = "multi"  # multi | hse | lcz
    input_gsd_m: float = 10.0
    hse_gsd_m: float = 20.0
    lcz_gsd_m: float = 100.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def validate(self) -> "ModelConfig":
        validate_config(self)
        return self


def validate_config(cfg: ModelConfig) -> None:
    """Raise ConfigError naming the first violated invariant."""
    if cfg.bands < 1:
        raise ConfigError("bands >= 1")
    if cfg.patch_h < 4 or cfg.patch_h % 4:
        raise ConfigError("patch_h divisible by 4")
    if cfg.patch_w < 4 or cfg.patch_w % 4:
        raise ConfigError("patch_w divisible by 4")
    if cfg.base_features < 1:
        raise ConfigError("base_features >= 1")
    if cfg.num_classes < 2:
        raise ConfigError("num_classes >= 2")
    if not 0.0 <= cfg.dropout_rate < 1.0:
        raise ConfigError("0 <= dropout_rate < 1")
    if cfg.aux_head_count != 3:
        raise ConfigError("aux_head_count == 3 (backbone, attention, post-pool taps)")
    if cfg.task not in ("multi", "hse", "lcz"):
        raise ConfigError("task in {multi, hse, lcz}")
    if cfg.p2f_enabled and cfg.task != "multi":
        raise ConfigError("p2f_enabled requires task == multi")
    if cfg.cbam_enabled:
        channels = 4 * cfg.base_features
        if channels < cfg.cbam_ratio:
            raise ConfigError("4*base_features >= cbam_ratio")
        if channels % cfg.cbam_ratio:
            raise ConfigError("4*base_features divisible by cbam_ratio")
    ratio = cfg.hse_gsd_m / cfg.input_gsd_m
    if ratio < 1 or ratio != int(ratio):
        raise ConfigError("hse_gsd_m / input_gsd_m is an integer >= 1")


@dataclass(frozen=True)
class TaskWeights:
    """Log-variances ``s = log(sigma^2)`` of the two task terms."""

    s_hse: float = 0.0
    s_lcz: float = 0.0


@dataclass
class SampleBatch:
    images: np.ndarray  # [N, bands, h, w] float32 in [0, 1]
    hse_ref: Optional[np.ndarray]  # [N, h/2, w/2] float32 in [0, 1]
    lcz_ref: Optional[np.ndarray]  # [N, h, w] uint8, classes or IGNORE

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ShapeError(f"images must be [N, bands, h, w], got {self.images.shape}")
        n, _, h, w = self.images.shape
        if self.hse_ref is not None:
            if self.hse_ref.shape != (n, h // 2, w // 2):
                raise ShapeError(f"hse_ref shape {self.hse_ref.shape} != {(n, h // 2, w // 2)}")
            if self.hse_ref.size and (self.hse_ref.min() < 0 or self.hse_ref.max() > 1):
                raise RangeError("hse_ref outside [0, 1]")
        if self.lcz_ref is not None:
            if self.lcz_ref.shape != (n, h, w):
                raise ShapeError(f"lcz_ref shape {self.lcz_ref.shape} != {(n, h, w)}")
            bad = (self.lcz_ref >= NUM_LCZ_CLASSES) & (self.lcz_ref != IGNORE)
            if bad.any():
                raise RangeError("lcz_ref contains labels that are neither classes nor IGNORE")

    def __len__(self) -> int:
        return self.images.shape[0]
