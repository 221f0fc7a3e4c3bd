"""FAST and DoG keypoint detectors plus intensity-centroid orientation."""

from __future__ import annotations

import math
from typing import List, Optional, Tuple

import numpy as np
from scipy.ndimage import maximum_filter, minimum_filter

from typorec import kernels
from typorec.features.types import DogConfig, Keypoint
from typorec.imgproc import GrayImage, build_pyramid

ORIENT_RADIUS = 15
FAST_RADIUS = 3.0


def _sorted_truncated(ys, xs, resp, scales, max_keypoints: Optional[int]) -> List[Keypoint]:
    # raster order first, then a stable sort on descending response
    order = np.lexsort((xs, ys))
    ys, xs, resp, scales = ys[order], xs[order], resp[order], scales[order]
    order = np.argsort(-resp, kind="stable")
    if max_keypoints is not None:
        order = order[:max_keypoints]
    return [Keypoint(float(xs[i]), float(ys[i]), float(scales[i]), None, float(resp[i])) for i in order]


def fast_response(img: GrayImage, threshold: int, border: int = 3) -> np.ndarray:
    """Segment-test response map (0 for non-corners)."""
    return kernels.fast_response(np.ascontiguousarray(img.data), int(threshold), int(border))


def fast_detect(
    img: GrayImage,
    threshold: int = 20,
    nms: bool = True,
    max_keypoints: Optional[int] = 500,
    border: int = 3,
) -> List[Keypoint]:
    """FAST-9 corners on the 16-pixel radius-3 circle.

    A pixel is a corner when at least 9 contiguous circle pixels are all
    brighter than ``centre + threshold`` or all darker than
    ``centre - threshold``.  The response is the summed absolute contrast
    over that arc.  With ``nms`` a corner survives only if its response is a
    strict maximum of its 3x3 neighbourhood.
    """
    if not 1 <= threshold <= 254:
        raise ValueError("threshold must be in [1, 254]")
    if img.width < 7 or img.height < 7:
        raise ValueError("image must be at least 7x7 for FAST")
    resp = fast_response(img, threshold, max(border, 3))
    corner = resp > 0
    if nms:
        fp = np.ones((3, 3), dtype=bool)
        fp[1, 1] = False
        neigh = maximum_filter(resp, footprint=fp, mode="constant", cval=0.0)
        corner &= resp > neigh
    ys, xs = np.nonzero(corner)
    return _sorted_truncated(ys, xs, resp[ys, xs], np.full(len(xs), FAST_RADIUS), max_keypoints)


_FP26 = np.ones((3, 3, 3), dtype=bool)
_FP26[1, 1, 1] = False


def dog_detect(img: GrayImage, cfg: DogConfig = DogConfig(), border: int = 1,
               max_keypoints: Optional[int] = None) -> List[Keypoint]:
    """Difference-of-Gaussian extrema across space and scale.

    Keeps pixels of interior DoG layers whose magnitude exceeds
    ``cfg.contrast_thresh`` (intensities in [0,1]) and which are strict
    extrema of their 26 neighbours, then rejects edge-like responses with
    the Hessian ratio test.  ``border`` is in base-image pixels.
    """
    pyr = build_pyramid(img, cfg.octaves, cfg.scales_per_octave, cfg.base_sigma)
    edge_thresh = cfg.edge_ratio_thresh
    all_y, all_x, all_r, all_s = [], [], [], []
    for octave in pyr.octaves:
        stack = np.stack([b.image - a.image for a, b in zip(octave[:-1], octave[1:])])
        mx = maximum_filter(stack, footprint=_FP26, mode="nearest")
        mn = minimum_filter(stack, footprint=_FP26, mode="nearest")
        factor = octave[0].factor
        pad = max(1, int(math.ceil(border / factor)))
        for li in range(1, stack.shape[0] - 1):
            D = stack[li]
            cand = ((D > mx[li]) | (D < mn[li])) & (np.abs(D) > cfg.contrast_thresh)
            cand[:pad, :] = False
            cand[-pad:, :] = False
            cand[:, :pad] = False
            cand[:, -pad:] = False
            ys, xs = np.nonzero(cand)
            if len(ys) == 0:
                continue
            c = D[ys, xs]
            dxx = D[ys, xs + 1] + D[ys, xs - 1] - 2 * c
            dyy = D[ys + 1, xs] + D[ys - 1, xs] - 2 * c
            dxy = (D[ys + 1, xs + 1] - D[ys + 1, xs - 1] - D[ys - 1, xs + 1] + D[ys - 1, xs - 1]) / 4.0
            tr = dxx + dyy
            det = dxx * dyy - dxy * dxy
            with np.errstate(divide="ignore", invalid="ignore"):
                ok = (det > 0) & (tr * tr / det <= edge_thresh)
            ys, xs, c = ys[ok], xs[ok], c[ok]
            by, bx = ys * factor, xs * factor
            inside = (by >= border) & (by < img.height - border) & (bx >= border) & (bx < img.width - border)
            all_y.append(by[inside])
            all_x.append(bx[inside])
            all_r.append(np.abs(c[inside]))
            all_s.append(np.full(int(inside.sum()), octave[li].sigma))
    if not all_y:
        return []
    return _sorted_truncated(
        np.concatenate(all_y), np.concatenate(all_x), np.concatenate(all_r), np.concatenate(all_s), max_keypoints
    )


def _disc(radius: int):
    r = np.arange(-radius, radius + 1)
    yy, xx = np.meshgrid(r, r, indexing="ij")
    m = xx * xx + yy * yy <= radius * radius
    return xx[m], yy[m]


_DISC_X, _DISC_Y = _disc(ORIENT_RADIUS)


def orient(img: GrayImage, kps: List[Keypoint]) -> Tuple[List[Keypoint], int]:
    """Assign intensity-centroid angles.

    The angle is ``atan2(m01, m10)`` of the first-order moments over the
    radius-15 disc; keypoints closer than 15 px to the border are dropped.
    Returns the oriented keypoints and the number dropped.
    """
    if not kps:
        return [], 0
    h, w = img.shape
    cx = np.array([int(math.floor(k.x + 0.5)) for k in kps])
    cy = np.array([int(math.floor(k.y + 0.5)) for k in kps])
    ok = (cx >= ORIENT_RADIUS) & (cx < w - ORIENT_RADIUS) & (cy >= ORIENT_RADIUS) & (cy < h - ORIENT_RADIUS)
    idx = np.nonzero(ok)[0]
    if len(idx) == 0:
        return [], len(kps)
    data = img.data.astype(np.float64)
    vals = data[cy[idx, None] + _DISC_Y[None, :], cx[idx, None] + _DISC_X[None, :]]
    m10 = vals @ _DISC_X.astype(np.float64)
    m01 = vals @ _DISC_Y.astype(np.float64)
    ang = np.arctan2(m01, m10)
    ang = np.where((m01 == 0) & (m10 == 0), 0.0, np.mod(ang, 2 * np.pi))
    ang[ang >= 2 * np.pi] = 0.0
    out = [kps[i].with_angle(float(a)) for i, a in zip(idx, ang)]
    return out, len(kps) - len(idx)
