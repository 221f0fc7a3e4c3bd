"""Keypoints, descriptor sets and the detector/descriptor configurations."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import ClassVar, Dict, Optional, Tuple, Type, Union

import numpy as np

BINARY = "binary"
FLOAT = "float"


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    scale: float
    angle: Optional[float] = None
    response: float = 0.0

    def with_angle(self, angle: float) -> "Keypoint":
        return Keypoint(self.x, self.y, self.scale, float(angle), self.response)

    def as_row(self):
        return (self.x, self.y, self.scale, math.nan if self.angle is None else self.angle, self.response)

    @classmethod
    def from_row(cls, row) -> "Keypoint":
        x, y, s, a, r = (float(v) for v in row)
        return cls(x, y, s, None if math.isnan(a) else a, r)


@dataclass(frozen=True)
class DescriptorSet:
    """Descriptors of one view.

    ``data`` is ``uint8`` of shape ``(n, width // 8)`` (bits packed LSB-first)
    for binary sets, or ``float32`` of shape ``(n, width)`` for float sets.
    ``keypoints[i]`` is the keypoint described by row ``i``; global
    descriptors carry a single pseudo-keypoint at the image centre.
    """

    kind: str
    width: int
    data: np.ndarray
    keypoints: Tuple[Keypoint, ...] = ()
    dropped: int = 0

    def __post_init__(self):
        if self.kind not in (BINARY, FLOAT):
            raise ValueError(f"unknown descriptor kind {self.kind!r}")
        data = np.ascontiguousarray(self.data, dtype=np.uint8 if self.kind == BINARY else np.float32)
        if data.ndim != 2:
            data = data.reshape(-1, self.row_width)
        if data.shape[1] != self.row_width:
            raise ValueError(f"row width {data.shape[1]} != {self.row_width}")
        if self.kind == FLOAT and not np.all(np.isfinite(data)):
            raise ValueError("float descriptors must be finite")
        if self.keypoints and len(self.keypoints) != data.shape[0]:
            raise ValueError("one keypoint per descriptor row required")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "keypoints", tuple(self.keypoints))

    @property
    def row_width(self) -> int:
        return self.width // 8 if self.kind == BINARY else self.width

    def __len__(self):
        return self.data.shape[0]

    @classmethod
    def empty(cls, kind: str, width: int, dropped: int = 0) -> "DescriptorSet":
        cols = width // 8 if kind == BINARY else width
        return cls(kind, width, np.zeros((0, cols), dtype=np.uint8 if kind == BINARY else np.float32), (), dropped)

    def bits(self) -> np.ndarray:
        """Unpacked ``(n, width)`` 0/1 array of a binary set."""
        if self.kind != BINARY:
            raise TypeError("bits() is only defined for binary descriptors")
        return np.unpackbits(self.data, axis=1, bitorder="little")[:, : self.width]

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "width": self.width,
            "keypoints": [list(k.as_row()) for k in self.keypoints],
            "data": self.data.tolist(),
        }


# ----------------------------------------------------------------- configs


class _Config:
    kind: ClassVar[str]

    def to_dict(self) -> dict:
        return {"kind": self.kind, **asdict(self)}


@dataclass(frozen=True)
class FastConfig(_Config):
    kind: ClassVar[str] = "FAST"
    threshold: int = 20
    nms: bool = True
    max_keypoints: int = 500

    def __post_init__(self):
        if not 1 <= self.threshold <= 254:
            raise ValueError("FAST threshold must be in [1, 254]")


@dataclass(frozen=True)
class DogConfig(_Config):
    kind: ClassVar[str] = "DOG"
    contrast_thresh: float = 0.03
    edge_ratio: float = 10.0
    octaves: int = 3
    scales_per_octave: int = 3
    base_sigma: float = 1.6
    max_keypoints: int = 500

    @property
    def edge_ratio_thresh(self) -> float:
        r = self.edge_ratio
        return (r + 1) ** 2 / r


@dataclass(frozen=True)
class NoDetector(_Config):
    kind: ClassVar[str] = "NONE"


@dataclass(frozen=True)
class BriefConfig(_Config):
    kind: ClassVar[str] = "BRIEF"
    n_bits: int = 256
    patch_size: int = 31
    sampling_seed: int = 0
    smoothing_sigma: float = 2.0

    def __post_init__(self):
        if self.n_bits not in (128, 256, 512):
            raise ValueError("n_bits must be one of 128, 256, 512")

    @property
    def steered(self) -> bool:
        return False


@dataclass(frozen=True)
class SteeredBriefConfig(BriefConfig):
    kind: ClassVar[str] = "STEERED_BRIEF"

    @property
    def steered(self) -> bool:
        return True


@dataclass(frozen=True)
class LbpConfig(_Config):
    kind: ClassVar[str] = "LBP"
    radius: int = 1
    neighbors: int = 8
    grid: int = 4

    def __post_init__(self):
        if self.neighbors != 8 or self.radius != 1:
            raise ValueError("only the 8-neighbour, radius-1 LBP is supported")
        if self.grid < 1:
            raise ValueError("grid must be >= 1")


@dataclass(frozen=True)
class GradHistConfig(_Config):
    kind: ClassVar[str] = "GRADHIST"
    grid: int = 4
    bins: int = 8

    def __post_init__(self):
        if (self.grid, self.bins) != (4, 8):
            raise ValueError("the gradient histogram is fixed at 4x4 cells x 8 bins")


DetectorConfig = Union[FastConfig, DogConfig, NoDetector]
DescriptorConfig = Union[BriefConfig, SteeredBriefConfig, LbpConfig, GradHistConfig]

_REGISTRY: Dict[str, Type[_Config]] = {
    c.kind: c
    for c in (FastConfig, DogConfig, NoDetector, BriefConfig, SteeredBriefConfig, LbpConfig, GradHistConfig)
}


def config_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind")
    try:
        cls = _REGISTRY[kind]
    except KeyError:
        raise ValueError(f"unknown configuration kind {kind!r}") from None
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown fields for {kind}: {sorted(unknown)}")
    return cls(**d)


def is_global(desc: DescriptorConfig) -> bool:
    return isinstance(desc, LbpConfig)


def descriptor_kind(desc: DescriptorConfig) -> str:
    return BINARY if isinstance(desc, BriefConfig) else FLOAT
