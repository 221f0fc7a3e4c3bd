"""BRIEF / steered BRIEF, uniform LBP grid histograms and gradient histograms."""

from __future__ import annotations

import math
from functools import lru_cache
from typing import List, Tuple

import numpy as np

from typorec.features.types import (
    BINARY,
    FLOAT,
    BriefConfig,
    DescriptorSet,
    GradHistConfig,
    Keypoint,
    LbpConfig,
)
from typorec.imgproc import GrayImage, blur

# --------------------------------------------------------------------- BRIEF


@lru_cache(maxsize=32)
def brief_pairs(n_bits: int, patch_size: int, seed: int) -> np.ndarray:
    """``(n_bits, 4)`` float offsets ``(px, py, qx, qy)``, isotropic Gaussian, clipped to the patch."""
    half = patch_size // 2
    rng = np.random.default_rng(seed)
    pts = rng.normal(0.0, patch_size / 5.0, size=(n_bits, 4))
    pts = np.clip(pts, -half, half)
    pts.setflags(write=False)
    return pts


def brief_margin(cfg: BriefConfig) -> int:
    half = cfg.patch_size // 2
    return int(math.ceil(half * math.sqrt(2))) + 1 if cfg.steered else half


def _round(a: np.ndarray) -> np.ndarray:
    return np.floor(a + 0.5).astype(np.int64)


def brief_describe(img: GrayImage, kps: List[Keypoint], cfg: BriefConfig = BriefConfig()) -> DescriptorSet:
    """Binary intensity-comparison descriptor; bit i is 1 iff I(p_i) < I(q_i).

    The image is smoothed before sampling.  With a :class:`SteeredBriefConfig`
    the sampling pairs are rotated by each keypoint's angle.
    """
    margin = brief_margin(cfg)
    h, w = img.shape
    keep = [k for k in kps if margin <= math.floor(k.x + 0.5) < w - margin and margin <= math.floor(k.y + 0.5) < h - margin]
    dropped = len(kps) - len(keep)
    if cfg.steered and any(k.angle is None for k in keep):
        raise ValueError("steered BRIEF requires oriented keypoints")
    if not keep:
        return DescriptorSet.empty(BINARY, cfg.n_bits, dropped)
    smooth = blur(img.data, cfg.smoothing_sigma)
    pairs = brief_pairs(cfg.n_bits, cfg.patch_size, cfg.sampling_seed)
    kx = np.array([k.x for k in keep])[:, None]
    ky = np.array([k.y for k in keep])[:, None]
    px, py, qx, qy = (pairs[:, i][None, :] for i in range(4))
    if cfg.steered:
        a = np.array([k.angle for k in keep])[:, None]
        c, s = np.cos(a), np.sin(a)
        px, py = c * px - s * py, s * px + c * py
        qx, qy = c * qx - s * qy, s * qx + c * qy
    cx, cy = _round(kx), _round(ky)
    ip = smooth[cy + _round(py), cx + _round(px)]
    iq = smooth[cy + _round(qy), cx + _round(qx)]
    bits = (ip < iq).astype(np.uint8)
    packed = np.packbits(bits, axis=1, bitorder="little")
    return DescriptorSet(BINARY, cfg.n_bits, packed, tuple(keep), dropped)


# ----------------------------------------------------------------------- LBP

# neighbour order (dy, dx), clockwise from the top-left corner; bit k has weight 2**k
LBP_OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1))


def _transitions(code: int) -> int:
    bits = [(code >> k) & 1 for k in range(8)]
    return sum(bits[k] != bits[(k + 1) % 8] for k in range(8))


def _uniform_table() -> np.ndarray:
    table = np.full(256, 58, dtype=np.int64)
    nxt = 0
    for code in range(256):
        if _transitions(code) <= 2:
            table[code] = nxt
            nxt += 1
    assert nxt == 58
    return table


UNIFORM_TABLE = _uniform_table()
LBP_BINS = 59


def lbp_codes(img: GrayImage) -> np.ndarray:
    """Per-pixel 8-bit LBP codes, neighbour >= centre -> 1, edge-replicated."""
    a = img.data.astype(np.int16)
    p = np.pad(a, 1, mode="edge")
    h, w = a.shape
    code = np.zeros((h, w), dtype=np.int64)
    for k, (dy, dx) in enumerate(LBP_OFFSETS):
        code |= (p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w] >= a).astype(np.int64) << k
    return code


def cell_bounds(n: int, g: int) -> List[Tuple[int, int]]:
    return [(i * n // g, (i + 1) * n // g) for i in range(g)]


def lbp_describe(img: GrayImage, cfg: LbpConfig = LbpConfig()) -> DescriptorSet:
    """One global descriptor: concatenated L1-normalised 59-bin uniform-LBP histograms per grid cell."""
    g = cfg.grid
    if img.width < 8 * g or img.height < 8 * g:
        raise ValueError(f"image {img.width}x{img.height} too small for a {g}x{g} LBP grid")
    bins = UNIFORM_TABLE[lbp_codes(img)]
    hists = []
    for y0, y1 in cell_bounds(img.height, g):
        for x0, x1 in cell_bounds(img.width, g):
            hist = np.bincount(bins[y0:y1, x0:x1].ravel(), minlength=LBP_BINS).astype(np.float64)
            hists.append(hist / hist.sum())
    vec = np.concatenate(hists).astype(np.float32)[None, :]
    kp = Keypoint((img.width - 1) / 2.0, (img.height - 1) / 2.0, max(img.width, img.height) / 2.0, 0.0, 0.0)
    return DescriptorSet(FLOAT, LBP_BINS * g * g, vec, (kp,), 0)


# --------------------------------------------------------- gradient histogram

PATCH = 16
GRADHIST_DIMS = 128
PRE_BLUR = 1.0


def gradhist_spacing(scale: float) -> float:
    return max(0.75 * scale, 0.5)


def gradhist_radius(scale: float) -> float:
    """Rotation-independent bound on the sampling footprint around a keypoint."""
    return (PATCH / 2 + 1.5) * gradhist_spacing(scale) * math.sqrt(2) + 1.0


def gradhist_fits(kp: Keypoint, shape) -> bool:
    h, w = shape
    r = gradhist_radius(kp.scale)
    return kp.x - r >= 0 and kp.x + r <= w - 1 and kp.y - r >= 0 and kp.y + r <= h - 1


def _bilinear(arr: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    h, w = arr.shape
    x = np.clip(x, 0, w - 1)
    y = np.clip(y, 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(np.int64), w - 2)
    y0 = np.minimum(np.floor(y).astype(np.int64), h - 2)
    fx, fy = x - x0, y - y0
    a = arr[y0, x0]
    b = arr[y0, x0 + 1]
    c = arr[y0 + 1, x0]
    d = arr[y0 + 1, x0 + 1]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


def _sift_normalize(vec: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(vec, axis=1, keepdims=True)
    big = n[:, 0] >= 1e-12
    out = np.zeros_like(vec)
    out[big] = vec[big] / n[big]
    out = np.minimum(out, 0.2)
    n = np.linalg.norm(out, axis=1, keepdims=True)
    big &= n[:, 0] >= 1e-12
    res = np.zeros_like(vec)
    res[big] = out[big] / n[big]
    return res


def gradhist_describe(img: GrayImage, kps: List[Keypoint], cfg: GradHistConfig = GradHistConfig()) -> DescriptorSet:
    """128-d histogram of gradient orientations on a rotated, scaled 16x16 sample grid.

    Samples are taken in the keypoint frame, so orientations are relative to
    the keypoint angle.  Magnitudes are Gaussian weighted and spread
    trilinearly over 4x4 cells x 8 bins; the vector is L2-normalised,
    clamped at 0.2 and renormalised (all-zero if degenerate).
    """
    if any(k.angle is None for k in kps):
        raise ValueError("gradient histograms require oriented keypoints")
    keep = [k for k in kps if gradhist_fits(k, img.shape)]
    dropped = len(kps) - len(keep)
    if not keep:
        return DescriptorSet.empty(FLOAT, GRADHIST_DIMS, dropped)
    src = blur(img.data, PRE_BLUR)
    n = len(keep)
    # 18x18 grid: one extra ring for central differences
    g = np.arange(-1, PATCH + 1, dtype=np.float64) - (PATCH - 1) / 2.0
    gv, gu = np.meshgrid(g, g, indexing="ij")
    kx = np.array([k.x for k in keep])[:, None, None]
    ky = np.array([k.y for k in keep])[:, None, None]
    sp = np.array([gradhist_spacing(k.scale) for k in keep])[:, None, None]
    ang = np.array([k.angle for k in keep])[:, None, None]
    c, s = np.cos(ang), np.sin(ang)
    u, v = gu[None] * sp, gv[None] * sp
    X = kx + c * u - s * v
    Y = ky + s * u + c * v
    patch = _bilinear(src, X, Y)
    dx = (patch[:, 1:-1, 2:] - patch[:, 1:-1, :-2]) / 2.0
    dy = (patch[:, 2:, 1:-1] - patch[:, :-2, 1:-1]) / 2.0
    mag = np.hypot(dx, dy)
    theta = np.mod(np.arctan2(dy, dx), 2 * np.pi)
    coords = np.arange(PATCH) - (PATCH - 1) / 2.0
    wv, wu = np.meshgrid(coords, coords, indexing="ij")
    mag = mag * np.exp(-(wu ** 2 + wv ** 2) / (2 * (PATCH / 2.0) ** 2))[None]

    # continuous cell / bin coordinates
    cell = (np.arange(PATCH) + 0.5) / (PATCH / cfg.grid) - 0.5
    rc = np.broadcast_to(cell[None, :, None], mag.shape)
    cc = np.broadcast_to(cell[None, None, :], mag.shape)
    ob = theta / (2 * np.pi) * cfg.bins
    hist = np.zeros((n, cfg.grid + 2, cfg.grid + 2, cfg.bins))
    r0 = np.floor(rc).astype(np.int64)
    c0 = np.floor(cc).astype(np.int64)
    o0 = np.floor(ob).astype(np.int64)
    fr, fc, fo = rc - r0, cc - c0, ob - o0
    kid = np.broadcast_to(np.arange(n)[:, None, None], mag.shape)
    for dr in (0, 1):
        wr = fr if dr else 1 - fr
        for dc in (0, 1):
            wc = fc if dc else 1 - fc
            for do in (0, 1):
                wo = fo if do else 1 - fo
                np.add.at(
                    hist,
                    (kid, r0 + dr + 1, c0 + dc + 1, (o0 + do) % cfg.bins),
                    mag * wr * wc * wo,
                )
    vec = hist[:, 1:-1, 1:-1, :].reshape(n, -1)
    vec = _sift_normalize(vec)
    return DescriptorSet(FLOAT, GRADHIST_DIMS, vec.astype(np.float32), tuple(keep), dropped)
