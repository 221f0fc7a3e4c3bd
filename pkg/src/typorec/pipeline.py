"""Recognition pipelines: detector + descriptor + matcher, model indexes and the TPLG container."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import struct
import time
from dataclasses import dataclass
from typing import Callable, Dict, Hashable, List, Sequence, Tuple

import numpy as np

from typorec import features as F
from typorec.features import DescriptorSet, Keypoint
from typorec.imgproc import GrayImage
from typorec.match import (
    BRUTE_FORCE,
    HAMMING,
    KDTREE,
    L2,
    UNKNOWN,
    DescriptorIndex,
    MatcherConfig,
    VoteTally,
    check_metric,
    ratio_filter,
    vote,
)

log = logging.getLogger(__name__)

MAGIC = b"TPLG"
FORMAT_VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False)


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class ModelBuildError(RuntimeError):
    pass


@dataclass(frozen=True)
class PipelineSpec:
    id: str
    detector: F.DetectorConfig
    descriptor: F.DescriptorConfig
    matcher: MatcherConfig

    def __post_init__(self):
        F.check_compatible(self.detector, self.descriptor)
        check_metric(F.descriptor_kind(self.descriptor), self.matcher.metric)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "detector": self.detector.to_dict(),
            "descriptor": self.descriptor.to_dict(),
            "matcher": self.matcher.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineSpec":
        return cls(
            d["id"],
            F.config_from_dict(d["detector"]),
            F.config_from_dict(d["descriptor"]),
            MatcherConfig.from_dict(d["matcher"]),
        )

    def canonical(self) -> str:
        return canonical_json(self.to_dict())

    @property
    def feature_key(self) -> str:
        """Identity of the extracted features; pipelines differing only in matcher share it."""
        return canonical_json([self.detector.to_dict(), self.descriptor.to_dict()])

    def extract(self, img: GrayImage) -> DescriptorSet:
        return F.extract(img, self.detector, self.descriptor)


class PipelineRegistry(tuple):
    """Ordered, id-unique collection of pipelines (at least two)."""

    def __new__(cls, specs: Sequence[PipelineSpec]):
        specs = tuple(specs)
        if len(specs) < 2:
            raise ValueError("a registry needs at least 2 pipelines")
        ids = [s.id for s in specs]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate pipeline ids in {ids}")
        return super().__new__(cls, specs)

    @property
    def ids(self) -> List[str]:
        return [s.id for s in self]

    def get(self, pid: str) -> PipelineSpec:
        for s in self:
            if s.id == pid:
                return s
        raise KeyError(f"unknown pipeline id {pid!r}")

    def to_dict(self) -> list:
        return [s.to_dict() for s in self]

    @classmethod
    def from_dict(cls, items: list) -> "PipelineRegistry":
        return cls([PipelineSpec.from_dict(d) for d in items])

    def digest(self) -> str:
        return sha256_hex(canonical_json(self.to_dict()).encode())


def default_registry(max_keypoints: int = 500, sampling_seed: int = 0) -> PipelineRegistry:
    """The six built-in pipelines spanning float, binary and global descriptors."""
    dog = F.DogConfig(max_keypoints=max_keypoints)
    fast = F.FastConfig(max_keypoints=max_keypoints)
    brief = F.BriefConfig(sampling_seed=sampling_seed)
    steered = F.SteeredBriefConfig(sampling_seed=sampling_seed)
    return PipelineRegistry([
        PipelineSpec("P0", dog, F.GradHistConfig(), MatcherConfig(BRUTE_FORCE, L2)),
        PipelineSpec("P1", dog, brief, MatcherConfig(BRUTE_FORCE, HAMMING)),
        PipelineSpec("P2", fast, steered, MatcherConfig(BRUTE_FORCE, HAMMING)),
        PipelineSpec("P3", F.NoDetector(), F.LbpConfig(), MatcherConfig(BRUTE_FORCE, L2)),
        PipelineSpec("P4", fast, brief, MatcherConfig(BRUTE_FORCE, HAMMING)),
        PipelineSpec("P5", dog, F.GradHistConfig(), MatcherConfig(KDTREE, L2)),
    ])


class FeatureCache:
    """Memoises descriptor sets per ``(view key, feature_key)``."""

    def __init__(self):
        self._store: Dict[Tuple[Hashable, str], DescriptorSet] = {}
        self.hits = 0
        self.misses = 0

    def get(self, key: Hashable, spec: PipelineSpec, load: Callable[[], GrayImage]) -> DescriptorSet:
        k = (key, spec.feature_key)
        out = self._store.get(k)
        if out is None:
            self.misses += 1
            out = spec.extract(load())
            self._store[k] = out
        else:
            self.hits += 1
        return out

    def __len__(self):
        return len(self._store)


# --------------------------------------------------------------------- models


@dataclass(frozen=True)
class ModelIndex:
    spec: PipelineSpec
    labels: Tuple[str, ...]
    descriptors: Tuple[DescriptorSet, ...]
    index: DescriptorIndex

    @property
    def n_descriptors(self) -> int:
        return len(self.index)

    @property
    def label_set(self):
        return sorted(set(self.labels))

    def relabel(self, labels: Sequence[str]) -> "ModelIndex":
        """Same features and search structure under new per-view labels."""
        if len(labels) != len(self.labels):
            raise ValueError("one label per view required")
        return ModelIndex(self.spec, tuple(labels), self.descriptors, self.index)

    def to_bytes(self) -> bytes:
        return serialize_model(self)

    def digest(self) -> str:
        return sha256_hex(self.to_bytes())


def model_from_features(spec: PipelineSpec, labels: Sequence[str], sets: Sequence[DescriptorSet]) -> ModelIndex:
    if len(sets) != len(labels):
        raise ValueError("one descriptor set per view required")
    if len(sets) < 2:
        raise ModelBuildError(f"pipeline {spec.id}: at least 2 training views required")
    if len(set(labels)) < 2:
        log.warning("pipeline %s: model built from a single label", spec.id)
    counts = [len(s) for s in sets]
    if sum(counts) == 0:
        raise ModelBuildError(f"pipeline {spec.id}: no training view produced any descriptor")
    kind = F.descriptor_kind(spec.descriptor)
    for s in sets:
        if s.kind != kind:
            raise ValueError(f"pipeline {spec.id}: descriptor kind mismatch")
    stacked = np.concatenate([s.data for s in sets], axis=0)
    views = np.repeat(np.arange(len(sets)), counts)
    index = DescriptorIndex(stacked, spec.matcher, width=sets[0].width, views=views)
    return ModelIndex(spec, tuple(labels), tuple(sets), index)


def build_model(spec: PipelineSpec, train_views: Sequence[Tuple[GrayImage, str]]) -> ModelIndex:
    """Extract features from every training view and assemble the matcher index."""
    sets = [spec.extract(img) for img, _ in train_views]
    return model_from_features(spec, [lbl for _, lbl in train_views], sets)


@dataclass(frozen=True)
class Recognition:
    label: str
    tally: VoteTally
    elapsed: float


def recognize_features(model: ModelIndex, query: DescriptorSet) -> VoteTally:
    if len(query) == 0 or model.n_descriptors == 0:
        return VoteTally({}, UNKNOWN, 0)
    nb = model.index.knn2(query.data)
    good = ratio_filter(nb, model.spec.matcher.ratio_threshold)
    return vote(good, dict(enumerate(model.labels)))


def recognize(model: ModelIndex, view: GrayImage) -> Recognition:
    """detect -> describe -> two-NN -> ratio test -> vote, timed end to end."""
    t0 = time.perf_counter()
    query = model.spec.extract(view)
    tl = recognize_features(model, query)
    elapsed = time.perf_counter() - t0
    return Recognition(tl.winner, tl, elapsed)


# --------------------------------------------------------------- container
#
# "TPLG" | u16 version | u32 len + canonical spec JSON | u32 n_views |
# per view: u32 block length, then
#   u16 len + label utf-8 | u32 n_kp | n_kp x 5 float64 (x, y, scale, angle|NaN, response)
#   u8 kind (0 binary, 1 float) | u32 width | u32 rows | u32 row bytes | payload


def _view_block(label: str, ds: DescriptorSet) -> bytes:
    b = io.BytesIO()
    lb = label.encode("utf-8")
    b.write(struct.pack("<H", len(lb)))
    b.write(lb)
    kps = np.array([k.as_row() for k in ds.keypoints], dtype="<f8").reshape(-1, 5)
    b.write(struct.pack("<I", kps.shape[0]))
    b.write(kps.tobytes())
    payload = ds.data.astype("<f4" if ds.kind == F.FLOAT else np.uint8).tobytes()
    b.write(struct.pack("<BIII", 0 if ds.kind == F.BINARY else 1, ds.width, len(ds), ds.data.shape[1] * ds.data.itemsize))
    b.write(payload)
    return b.getvalue()


def serialize_model(model: ModelIndex) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<H", FORMAT_VERSION))
    spec = model.spec.canonical().encode("ascii")
    out.write(struct.pack("<I", len(spec)))
    out.write(spec)
    out.write(struct.pack("<I", len(model.labels)))
    for label, ds in zip(model.labels, model.descriptors):
        block = _view_block(label, ds)
        out.write(struct.pack("<I", len(block)))
        out.write(block)
    return out.getvalue()


class ContainerError(ValueError):
    pass


def deserialize_model(data: bytes) -> ModelIndex:
    buf = memoryview(data)
    if bytes(buf[:4]) != MAGIC:
        raise ContainerError("not a TPLG model container")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported container version {version}")
    pos = 6
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    spec = PipelineSpec.from_dict(json.loads(bytes(buf[pos:pos + n]).decode("ascii")))
    pos += n
    (n_views,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    labels, sets = [], []
    for _ in range(n_views):
        (blen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        end = pos + blen
        (ll,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        labels.append(bytes(buf[pos:pos + ll]).decode("utf-8"))
        pos += ll
        (nk,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        kps = np.frombuffer(buf[pos:pos + nk * 40], dtype="<f8").reshape(nk, 5)
        pos += nk * 40
        kind_code, width, rows, row_bytes = struct.unpack_from("<BIII", buf, pos)
        pos += 13
        kind = F.BINARY if kind_code == 0 else F.FLOAT
        dtype = np.uint8 if kind == F.BINARY else np.dtype("<f4")
        arr = np.frombuffer(buf[pos:pos + rows * row_bytes], dtype=dtype).reshape(rows, -1)
        pos += rows * row_bytes
        if pos != end:
            raise ContainerError("view block length mismatch")
        sets.append(DescriptorSet(kind, width, arr.copy(), tuple(Keypoint.from_row(r) for r in kps)))
    if pos != len(buf):
        raise ContainerError("trailing bytes after last view block")
    return model_from_features(spec, labels, sets)
