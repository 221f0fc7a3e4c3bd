"""Keypoint detectors and descriptors."""

from __future__ import annotations

from typing import List

from typorec.features.descriptors import (
    brief_describe,
    brief_margin,
    gradhist_describe,
    gradhist_fits,
    lbp_describe,
)
from typorec.features.detectors import ORIENT_RADIUS, dog_detect, fast_detect, orient
from typorec.features.types import (
    BINARY,
    FLOAT,
    BriefConfig,
    DescriptorConfig,
    DescriptorSet,
    DetectorConfig,
    DogConfig,
    FastConfig,
    GradHistConfig,
    Keypoint,
    LbpConfig,
    NoDetector,
    SteeredBriefConfig,
    config_from_dict,
    descriptor_kind,
    is_global,
)
from typorec.imgproc import GrayImage

__all__ = [
    "BINARY", "FLOAT", "BriefConfig", "DescriptorConfig", "DescriptorSet", "DetectorConfig",
    "DogConfig", "FastConfig", "GradHistConfig", "Keypoint", "LbpConfig", "NoDetector",
    "SteeredBriefConfig", "brief_describe", "config_from_dict", "descriptor_kind", "dog_detect",
    "extract", "fast_detect", "gradhist_describe", "is_global", "lbp_describe", "orient",
]


def _needs_angle(desc: DescriptorConfig) -> bool:
    return isinstance(desc, (SteeredBriefConfig, GradHistConfig))


def _margin(desc: DescriptorConfig) -> int:
    m = brief_margin(desc) if isinstance(desc, BriefConfig) else 0
    if _needs_angle(desc):
        m = max(m, ORIENT_RADIUS)
    return m


def check_compatible(detector: DetectorConfig, descriptor: DescriptorConfig) -> None:
    if isinstance(detector, NoDetector) != is_global(descriptor):
        raise ValueError("a NONE detector pairs exactly with a global descriptor (LBP)")


def extract(img: GrayImage, detector: DetectorConfig, descriptor: DescriptorConfig) -> DescriptorSet:
    """Detect, orient if needed, and describe one view.

    Keypoints that would violate a downstream border constraint are removed
    before the ``max_keypoints`` cap, so every reported keypoint is described.
    """
    check_compatible(detector, descriptor)
    if isinstance(descriptor, LbpConfig):
        return lbp_describe(img, descriptor)
    margin = _margin(descriptor)
    if isinstance(detector, FastConfig):
        kps = fast_detect(img, detector.threshold, detector.nms, None, border=max(3, margin))
    else:
        kps = dog_detect(img, detector, border=max(1, margin))
    if isinstance(descriptor, GradHistConfig):
        kps = [k for k in kps if gradhist_fits(k, img.shape)]
    kps = kps[: detector.max_keypoints]
    if _needs_angle(descriptor):
        kps, _ = orient(img, kps)
    if isinstance(descriptor, BriefConfig):
        return brief_describe(img, kps, descriptor)
    return gradhist_describe(img, kps, descriptor)


def describe_all(images: List[GrayImage], detector: DetectorConfig, descriptor: DescriptorConfig) -> List[DescriptorSet]:
    return [extract(im, detector, descriptor) for im in images]
