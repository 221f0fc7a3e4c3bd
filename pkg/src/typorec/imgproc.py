"""Raster substrate: image I/O, Gaussian scale space and gradients."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import List, Union

import numpy as np
from scipy.ndimage import correlate1d


class ImageError(Exception):
    """Base class for image loading failures."""

    def __init__(self, path, message):
        self.path = str(path)
        super().__init__(f"{self.path}: {message}")


class ImageNotFoundError(ImageError, FileNotFoundError):
    pass


class UnsupportedFormatError(ImageError):
    pass


class CorruptImageError(ImageError):
    pass


@dataclass(frozen=True)
class GrayImage:
    """8-bit grayscale raster, row-major.

    ``data`` is a read-only ``uint8`` array of shape ``(height, width)``.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ValueError("GrayImage data must be 2-D")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("GrayImage must be at least 1x1")
        if arr.dtype != np.uint8:
            if np.any(arr < 0) or np.any(arr > 255):
                raise ValueError("intensities must lie in [0, 255]")
            arr = arr.astype(np.uint8)
        arr = np.ascontiguousarray(arr).copy()
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self):
        return self.data.shape

    def as_float(self) -> np.ndarray:
        """Float64 working copy scaled to [0, 1]."""
        return self.data.astype(np.float64) / 255.0

    def __eq__(self, other):
        if not isinstance(other, GrayImage):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))

    def __hash__(self):
        return hash((self.data.shape, self.data.tobytes()))


ImageLike = Union[GrayImage, np.ndarray]


def _as_array(img: ImageLike) -> np.ndarray:
    if isinstance(img, GrayImage):
        return img.data.astype(np.float64)
    return np.asarray(img, dtype=np.float64)


def luma(rgb: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma of an ``(..., 3)`` uint8 array, rounded half-up."""
    rgb = rgb.astype(np.int64)
    acc = 299 * rgb[..., 0] + 587 * rgb[..., 1] + 114 * rgb[..., 2]
    return ((acc + 500) // 1000).astype(np.uint8)


# --------------------------------------------------------------------- I/O


def _pgm_tokens(buf: bytes, path, count: int, pos: int = 2):
    """Read ``count`` whitespace-separated header integers, skipping comments."""
    out = []
    n = len(buf)
    while len(out) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise CorruptImageError(path, "truncated PGM header")
        tok = buf[start:pos]
        if not tok.isdigit():
            raise CorruptImageError(path, f"bad PGM header token {tok!r}")
        out.append(int(tok))
    return out, pos


def _read_pgm(buf: bytes, path) -> GrayImage:
    magic = buf[:2]
    (w, h, maxval), pos = _pgm_tokens(buf, path, 3)
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise CorruptImageError(path, "invalid PGM dimensions or maxval")
    if maxval > 255:
        raise UnsupportedFormatError(path, "16-bit PGM is not supported")
    if magic == b"P5":
        pos += 1  # single whitespace byte after maxval
        raw = buf[pos:pos + w * h]
        if len(raw) != w * h:
            raise CorruptImageError(path, "truncated PGM raster")
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w)
    else:
        body = buf[pos:].split()
        if len(body) < w * h:
            raise CorruptImageError(path, "truncated PGM raster")
        try:
            arr = np.array([int(t) for t in body[: w * h]], dtype=np.int64).reshape(h, w)
        except ValueError as exc:
            raise CorruptImageError(path, "non-numeric PGM sample") from exc
        if arr.max(initial=0) > maxval:
            raise CorruptImageError(path, "PGM sample exceeds maxval")
    if maxval != 255:
        arr = (arr.astype(np.int64) * 255 * 2 + maxval) // (2 * maxval)
    return GrayImage(arr.astype(np.uint8))


def _read_png(path) -> GrayImage:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "L":
                return GrayImage(np.asarray(im, dtype=np.uint8))
            if mode in ("RGB", "RGBA", "P", "LA", "1"):
                rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
                return GrayImage(luma(rgb))
            raise UnsupportedFormatError(path, f"unsupported PNG mode {mode}")
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise CorruptImageError(path, f"cannot decode PNG ({exc})") from exc


def load_image(path: Union[str, os.PathLike]) -> GrayImage:
    """Load a PGM (P2/P5) or PNG file as a grayscale image."""
    p = Path(path)
    if not p.is_file():
        raise ImageNotFoundError(p, "no such file")
    buf = p.read_bytes()
    if buf[:2] in (b"P2", b"P5"):
        return _read_pgm(buf, p)
    if buf[:8] == b"\x89PNG\r\n\x1a\n":
        return _read_png(p)
    raise UnsupportedFormatError(p, "not a PGM (P2/P5) or PNG file")


def save_pgm(img: GrayImage, path: Union[str, os.PathLike]) -> None:
    """Write ``img`` as binary P5 PGM."""
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.data.tobytes())


# ---------------------------------------------------------------- filtering


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def blur(arr: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur of a float array with edge replication."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    k = gaussian_kernel(sigma)
    out = correlate1d(np.asarray(arr, dtype=np.float64), k, axis=0, mode="nearest")
    return correlate1d(out, k, axis=1, mode="nearest")


def gaussian_blur(img: GrayImage, sigma: float) -> GrayImage:
    """Blur an 8-bit image; the result is rounded back to 8 bits."""
    out = blur(img.data, sigma)
    return GrayImage(np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8))


@dataclass(frozen=True)
class Level:
    """One Gaussian level: float image in [0,1], octave-local pixels."""

    image: np.ndarray
    octave: int
    index: int  # s, from -1 to scales_per_octave + 1
    sigma: float  # absolute, in base-image pixels
    factor: int  # downsample factor relative to the base image


@dataclass(frozen=True)
class Pyramid:
    octaves: List[List[Level]]
    base_sigma: float
    scales_per_octave: int

    def levels(self) -> List[Level]:
        return [lv for octave in self.octaves for lv in octave]


def build_pyramid(img: ImageLike, octaves: int, scales_per_octave: int, base_sigma: float = 1.6) -> Pyramid:
    """Gaussian scale space with ``scales_per_octave + 3`` levels per octave.

    Level ``s`` of octave ``o`` has absolute blur ``base_sigma * 2**(o + s/S)``
    for ``s = -1 .. S+1``.  Octave ``o+1`` starts by decimating levels
    ``S-1 .. S+1`` of octave ``o``; its remaining levels are blurred from there.
    """
    if octaves < 1:
        raise ValueError("octaves must be >= 1")
    if scales_per_octave < 3:
        raise ValueError("scales_per_octave must be >= 3")
    if not base_sigma > 0:
        raise ValueError("base_sigma must be positive")
    base = img.as_float() if isinstance(img, GrayImage) else np.asarray(img, dtype=np.float64)
    h, w = base.shape
    need = (2 ** (octaves - 1)) * 16  # coarsest octave keeps at least 16 px
    if h < need or w < need:
        raise ValueError(f"image {w}x{h} too small for {octaves} octaves (need {need}x{need})")

    S = scales_per_octave
    local = [base_sigma * 2.0 ** (s / S) for s in range(-1, S + 2)]  # octave-local sigmas
    result: List[List[Level]] = []
    for o in range(octaves):
        factor = 2 ** o
        if o == 0:
            imgs = [blur(base, sg) for sg in local]
        else:
            prev = result[-1]
            # prev index s+S covers local s; list position = s + 1
            imgs = [prev[s + S + 1].image[::2, ::2].copy() for s in (-1, 0, 1)]
            seed = imgs[-1]
            for s in range(2, S + 2):
                inc = math.sqrt(local[s + 1] ** 2 - local[2] ** 2)
                imgs.append(blur(seed, inc))
        result.append([
            Level(image=im, octave=o, index=s, sigma=local[s + 1] * factor, factor=factor)
            for s, im in zip(range(-1, S + 2), imgs)
        ])
    return Pyramid(octaves=result, base_sigma=base_sigma, scales_per_octave=S)


@dataclass(frozen=True)
class GradientField:
    magnitude: np.ndarray
    orientation: np.ndarray  # radians in [0, 2*pi)


def gradients(img: ImageLike) -> GradientField:
    """Central-difference gradients (one-sided at the border), intensity units."""
    arr = _as_array(img)
    if arr.shape[0] < 3 or arr.shape[1] < 3:
        raise ValueError("image must be at least 3x3 for gradients")
    dy, dx = np.gradient(arr)
    mag = np.hypot(dx, dy)
    ori = np.mod(np.arctan2(dy, dx), 2 * np.pi)
    ori[ori >= 2 * np.pi] = 0.0
    return GradientField(magnitude=mag, orientation=ori)
