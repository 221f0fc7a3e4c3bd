"""On-disk datasets, deterministic synthetic views and p x t subsets."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import zlib
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from typorec.imgproc import GrayImage, load_image, save_pgm

log = logging.getLogger(__name__)

TEXTURED = "TEXTURED"
SHAPE = "SHAPE"
MIXED = "MIXED"
FAMILIES = (TEXTURED, SHAPE, MIXED)
IMAGE_SUFFIXES = (".pgm", ".png")


class DatasetError(Exception):
    pass


@dataclass(frozen=True)
class View:
    label: str
    path: Path

    @property
    def key(self) -> str:
        return str(self.path.resolve())

    def load(self) -> GrayImage:
        return _load_cached(self.key)


@lru_cache(maxsize=4096)
def _load_cached(path: str) -> GrayImage:
    return load_image(path)


@dataclass(frozen=True)
class Dataset:
    root: Path
    instances: Tuple[str, ...]
    views: Dict[str, Tuple[Path, ...]]
    content_hash: str

    def items(self) -> List[View]:
        """All views in dataset order: labels sorted, files in listed order."""
        return [View(lbl, p) for lbl in self.instances for p in self.views[lbl]]

    def view_counts(self) -> Dict[str, int]:
        return {lbl: len(self.views[lbl]) for lbl in self.instances}

    def __len__(self):
        return sum(len(v) for v in self.views.values())


def _hash_layout(root: Path, views: Dict[str, Sequence[Path]]) -> str:
    h = hashlib.sha256()
    for lbl in sorted(views):
        for p in views[lbl]:
            rel = f"{lbl}/{p.name}".encode("utf-8")
            h.update(len(rel).to_bytes(4, "little"))
            h.update(rel)
            data = p.read_bytes()
            h.update(len(data).to_bytes(8, "little"))
            h.update(data)
    return h.hexdigest()


def load(root) -> Dataset:
    """Read ``root/<label>/*.pgm|png``; labels are sorted subdirectory names."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root}: not a directory")
    views: Dict[str, Tuple[Path, ...]] = {}
    for entry in sorted(root.iterdir()):
        if entry.is_dir():
            files = tuple(sorted(p for p in entry.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES))
            if not files:
                raise DatasetError(f"{entry}: label directory without images")
            views[entry.name] = files
        elif entry.is_file() and entry.suffix.lower() in IMAGE_SUFFIXES:
            log.warning("ignoring image %s outside any label directory", entry)
    if not views:
        raise DatasetError(f"{root}: no label directories found")
    return Dataset(root, tuple(sorted(views)), views, _hash_layout(root, views))


@dataclass(frozen=True)
class SubsetSpec:
    p: int
    t: int
    seed: int = 0


def _label_stream(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(label.encode("utf-8"))]))


def subset(ds: Dataset, spec: SubsetSpec) -> Dataset:
    """First ``p`` labels; per label the first ``t`` views of a seeded permutation.

    The permutation depends only on ``(seed, label)``, so for fixed ``p`` a
    larger ``t`` always extends a smaller one.  Selected views keep dataset order.
    """
    if spec.p < 2 or spec.p > len(ds.instances):
        raise DatasetError(f"p={spec.p} outside [2, {len(ds.instances)}]")
    labels = ds.instances[: spec.p]
    min_views = min(len(ds.views[l]) for l in labels)
    if spec.t < 2 or spec.t > min_views:
        raise DatasetError(f"t={spec.t} outside [2, {min_views}]")
    views = {}
    for lbl in labels:
        paths = ds.views[lbl]
        perm = _label_stream(spec.seed, lbl).permutation(len(paths))
        chosen = sorted(perm[: spec.t].tolist())
        views[lbl] = tuple(paths[i] for i in chosen)
    h = hashlib.sha256(f"{ds.content_hash}|subset|{spec.p}|{spec.t}|{spec.seed}".encode()).hexdigest()
    return Dataset(ds.root, tuple(labels), views, h)


# ---------------------------------------------------------------- generator


@dataclass(frozen=True)
class SynthSpec:
    n_instances: int = 7
    views_per_instance: int = 50
    image_size: int = 256
    families: Tuple[str, ...] = ()
    rotation: Tuple[float, float] = (0.0, 2 * math.pi)
    scale: Tuple[float, float] = (0.8, 1.2)
    translation: float = 10.0
    noise: Tuple[float, float] = (0.0, 8.0)
    seed: int = 0

    def __post_init__(self):
        fams = tuple(self.families) or tuple(FAMILIES[i % 3] for i in range(self.n_instances))
        object.__setattr__(self, "families", fams)
        for name in ("rotation", "scale", "noise"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.n_instances < 1 or self.views_per_instance < 1:
            raise ValueError("need at least one instance and one view")
        if len(fams) != self.n_instances:
            raise ValueError("one family per instance required")
        bad = set(fams) - set(FAMILIES)
        if bad:
            raise ValueError(f"unknown families {sorted(bad)}")
        if self.image_size < 32:
            raise ValueError("image_size must be >= 32")
        for name in ("rotation", "scale", "noise"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise ValueError(f"{name} range is inverted")
        if self.scale[0] <= 0 or self.noise[0] < 0 or self.translation < 0:
            raise ValueError("scale must be positive; noise and translation non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["families"] = list(self.families)
        for k in ("rotation", "scale", "noise"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown SynthSpec fields {sorted(unknown)}")
        for k in ("families", "rotation", "scale", "noise"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def engineered_spec(seed: int = 2024, views_per_instance: int = 50) -> SynthSpec:
    """Seven instances (3 textured, 3 shape, 1 mixed) interleaved so every ``p >= 2`` prefix mixes families."""
    fams = (TEXTURED, SHAPE, TEXTURED, SHAPE, TEXTURED, SHAPE, MIXED)
    return SynthSpec(n_instances=7, views_per_instance=views_per_instance, families=fams, seed=seed)


def instance_label(i: int) -> str:
    return f"part{i:02d}"


BACKGROUND = 235.0


class _ValueNoise:
    """Smooth multi-octave value noise on a periodic lattice, evaluated at arbitrary points."""

    def __init__(self, rng: np.random.Generator, base_freq: float, octaves: int, persistence: float, contrast: float):
        self.period = 64
        self.lattices = [rng.random((self.period, self.period)) for _ in range(octaves)]
        self.base_freq = base_freq
        self.persistence = persistence
        self.contrast = contrast

    def __call__(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        total = np.zeros_like(u)
        norm = 0.0
        amp, freq = 1.0, self.base_freq
        for lat in self.lattices:
            x, y = u * freq, v * freq
            x0, y0 = np.floor(x), np.floor(y)
            fx, fy = x - x0, y - y0
            fx = fx * fx * (3 - 2 * fx)
            fy = fy * fy * (3 - 2 * fy)
            xi = x0.astype(np.int64) % self.period
            yi = y0.astype(np.int64) % self.period
            xj, yj = (xi + 1) % self.period, (yi + 1) % self.period
            top = lat[yi, xi] * (1 - fx) + lat[yi, xj] * fx
            bot = lat[yj, xi] * (1 - fx) + lat[yj, xj] * fx
            total += amp * (top * (1 - fy) + bot * fy)
            norm += amp
            amp *= self.persistence
            freq *= 2.0
        val = total / norm  # roughly in [0, 1], centred near 0.5
        return np.clip(0.5 + (val - 0.5) * self.contrast, 0.0, 1.0)


class _Knurl:
    """Crossed fine grating over coarse value noise, like a knurled or machined surface."""

    def __init__(self, rng: np.random.Generator, period: float, amplitude: float):
        self.noise = _ValueNoise(rng, base_freq=float(rng.uniform(0.02, 0.04)), octaves=1, persistence=0.5,
                                 contrast=float(rng.uniform(2.0, 3.0)))
        self.period = period
        self.theta = float(rng.uniform(0, np.pi))
        self.amplitude = amplitude

    def __call__(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        w = 2 * np.pi / self.period
        c, s = math.cos(self.theta), math.sin(self.theta)
        g = 0.5 * np.cos(w * (c * u + s * v)) * np.cos(w * (-s * u + c * v))
        return np.clip(self.noise(u, v) * (1 - self.amplitude) + self.amplitude * (0.5 + g), 0.0, 1.0)


class _Outline:
    """Star-shaped outline r(phi): a gear or a random polygon."""

    def __init__(self, rng: np.random.Generator, radius: float):
        self.radius = radius
        self.gear = bool(rng.random() < 0.5)
        if self.gear:
            self.teeth = int(rng.integers(5, 13))
            self.depth = float(rng.uniform(0.12, 0.25))
            self.duty = float(rng.uniform(0.35, 0.6))
        else:
            k = int(rng.integers(5, 9))
            ang = np.sort(rng.uniform(0, 2 * np.pi, k))
            gaps = np.diff(np.concatenate([ang, [ang[0] + 2 * np.pi]]))
            while gaps.max() > 2.2:
                ang = np.sort(rng.uniform(0, 2 * np.pi, k))
                gaps = np.diff(np.concatenate([ang, [ang[0] + 2 * np.pi]]))
            self.vertex_angles = ang
            self.vertex_radii = rng.uniform(0.55, 1.0, k)

    def boundary(self, phi: np.ndarray) -> np.ndarray:
        phi = np.mod(phi, 2 * np.pi)
        if self.gear:
            frac = np.mod(phi * self.teeth / (2 * np.pi), 1.0)
            tooth = np.clip((self.duty / 2 - np.abs(frac - 0.5)) / 0.06 + 0.5, 0.0, 1.0)
            return self.radius * (1 - self.depth + self.depth * tooth)
        # radial distance to the polygon edge, per angular sector
        a = self.vertex_angles
        r = self.vertex_radii * self.radius
        k = len(a)
        idx = np.searchsorted(a, phi, side="right") - 1
        i0 = idx % k
        i1 = (idx + 1) % k
        p0 = np.stack([r[i0] * np.cos(a[i0]), r[i0] * np.sin(a[i0])], -1)
        p1 = np.stack([r[i1] * np.cos(a[i1]), r[i1] * np.sin(a[i1])], -1)
        d = np.stack([np.cos(phi), np.sin(phi)], -1)
        e = p1 - p0
        num = p0[..., 0] * e[..., 1] - p0[..., 1] * e[..., 0]
        den = d[..., 0] * e[..., 1] - d[..., 1] * e[..., 0]
        return np.abs(num / np.where(np.abs(den) < 1e-12, 1e-12, den))


class _Instance:
    """The canonical appearance of one synthetic part, in object coordinates."""

    def __init__(self, family: str, rng: np.random.Generator, size: int):
        self.family = family
        self.radius = size * float(rng.uniform(0.26, 0.34))
        self.fill = float(rng.uniform(40, 110))
        self.outline = _Outline(rng, self.radius) if family in (SHAPE, MIXED) else None
        if family == TEXTURED:
            self.texture = _Knurl(rng, period=float(rng.uniform(5.5, 7.0)), amplitude=float(rng.uniform(0.55, 0.7)))
        elif family == MIXED:
            self.texture = _ValueNoise(
                rng,
                base_freq=float(rng.uniform(0.03, 0.12)),
                octaves=int(rng.integers(2, 5)),
                persistence=float(rng.uniform(0.35, 0.7)),
                contrast=float(rng.uniform(1.6, 2.6)),
            )
        else:
            self.texture = None

    def render(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Intensity in [0, 255] at object coordinates (supersampled by the caller)."""
        rho = np.hypot(u, v)
        if self.outline is not None:
            inside = rho < self.outline.boundary(np.arctan2(v, u))
        else:
            inside = rho < self.radius
        if self.texture is not None:
            obj = 255.0 * self.texture(u, v)
        else:
            obj = np.full_like(u, self.fill)
        return np.where(inside, obj, BACKGROUND)


_SUPER = 3


def render_view(inst: _Instance, size: int, angle: float, scale: float, tx: float, ty: float,
                noise_sigma: float, rng: np.random.Generator) -> GrayImage:
    offs = (np.arange(_SUPER) + 0.5) / _SUPER - 0.5
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    acc = np.zeros((size, size))
    ca, sa = math.cos(angle), math.sin(angle)
    for oy in offs:
        for ox in offs:
            x = xs + ox - c - tx
            y = ys + oy - c - ty
            # inverse rigid transform into object coordinates
            u = (ca * x + sa * y) / scale
            v = (-sa * x + ca * y) / scale
            acc += inst.render(u, v)
    img = acc / (_SUPER * _SUPER)
    if noise_sigma > 0:
        img = img + rng.normal(0.0, noise_sigma, img.shape)
    return GrayImage(np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8))


def synth_views(spec: SynthSpec):
    """Yield ``(label, index, GrayImage)`` for every view, deterministically."""
    for i, fam in enumerate(spec.families):
        ss = np.random.SeedSequence([spec.seed, i])
        app_seq, view_seq = ss.spawn(2)
        inst = _Instance(fam, np.random.default_rng(app_seq), spec.image_size)
        vrng = np.random.default_rng(view_seq)
        for j in range(spec.views_per_instance):
            angle = vrng.uniform(*spec.rotation)
            scale = vrng.uniform(*spec.scale)
            tx = vrng.uniform(-spec.translation, spec.translation)
            ty = vrng.uniform(-spec.translation, spec.translation)
            sigma = vrng.uniform(*spec.noise)
            noise_rng = np.random.default_rng(vrng.integers(0, 2**63 - 1))
            yield instance_label(i), j, render_view(inst, spec.image_size, angle, scale, tx, ty, sigma, noise_rng)


def generate(spec: SynthSpec, out) -> Dataset:
    """Render the synthetic dataset to ``out/<label>/<index>.pgm``."""
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise DatasetError(f"{out}: not writable ({exc})") from exc
    width = max(3, len(str(spec.views_per_instance - 1)))
    for label, j, img in synth_views(spec):
        d = out / label
        d.mkdir(exist_ok=True)
        save_pgm(img, d / f"{j:0{width}d}.pgm")
    (out / "synth.json").write_text(json.dumps(spec.to_dict(), sort_keys=True, indent=2) + "\n")
    return load(out)
