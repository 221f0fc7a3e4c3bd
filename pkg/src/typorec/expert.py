"""Typologies by k-means over F1 profiles and the two-stage hierarchical recognizer."""

from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from typorec.eval import F1Matrix, _first_argmax, best_overall, f1_matrix, view_features
from typorec.match import UNKNOWN, MatchTable, VoteTally, ratio_filter, tally
from typorec.pipeline import (
    FeatureCache,
    ModelBuildError,
    ModelIndex,
    PipelineRegistry,
    canonical_json,
    deserialize_model,
    model_from_features,
    sha256_hex,
)
from typorec.imgproc import GrayImage

log = logging.getLogger(__name__)

AUTO = "auto"
POOL = "pool"
MAP = "map"


def typology_name(t: int) -> str:
    return f"T{t}"


@dataclass(frozen=True)
class Typologies:
    k: int
    assignment: Dict[str, int]
    centroids: np.ndarray
    inertia: float

    def members(self, t: int) -> List[str]:
        return sorted(l for l, a in self.assignment.items() if a == t)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "assignment": dict(sorted(self.assignment.items())),
            "centroids": self.centroids.tolist(),
            "inertia": self.inertia,
        }


# ------------------------------------------------------------------ k-means


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=-1)


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    for _ in range(1, k):
        d = _sq_dists(X, np.array(centers)).min(axis=1)
        total = d.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(rng.choice(n, p=d / total))
        centers.append(X[idx])
    return np.array(centers, dtype=np.float64)


def _repair_empty(X, labels, centers, k):
    """Move the point farthest from its centroid into each empty cluster."""
    for c in range(k):
        if np.any(labels == c):
            continue
        d = ((X - centers[labels]) ** 2).sum(axis=1)
        sizes = np.bincount(labels, minlength=k)
        d[sizes[labels] <= 1] = -1.0  # never empty another cluster
        j = int(np.argmax(d))
        labels[j] = c
        centers[c] = X[j]
    return labels


def _lloyd(X, centers, max_iters, check_monotone, history):
    k = centers.shape[0]
    labels = np.argmin(_sq_dists(X, centers), axis=1)
    labels = _repair_empty(X, labels, centers, k)
    prev_inertia = np.inf
    for _ in range(max_iters):
        centers = np.array([X[labels == c].mean(axis=0) for c in range(k)])
        inertia = float(((X - centers[labels]) ** 2).sum())
        if history is not None:
            history.append(inertia)
        if check_monotone and inertia > prev_inertia * (1 + 1e-12) + 1e-12:
            raise AssertionError(f"k-means inertia increased: {prev_inertia} -> {inertia}")
        prev_inertia = inertia
        new = np.argmin(_sq_dists(X, centers), axis=1)
        new = _repair_empty(X, new, centers.copy(), k)
        if np.array_equal(new, labels):
            break
        labels = new
    centers = np.array([X[labels == c].mean(axis=0) for c in range(k)])
    inertia = float(((X - centers[labels]) ** 2).sum())
    return labels, centers, inertia


def _canonical_order(labels: np.ndarray, centers: np.ndarray, k: int):
    # renumber clusters by first appearance in row order
    order = []
    for l in labels:
        if l not in order:
            order.append(int(l))
    remap = {old: new for new, old in enumerate(order)}
    return np.array([remap[int(l)] for l in labels]), centers[order]


def kmeans(m: F1Matrix, k: int, seed: int = 0, max_iters: int = 100, n_init: int = 10,
           check_monotone: bool = True, history: Optional[list] = None) -> Typologies:
    """k-means++ seeded Lloyd iterations over F1 rows; best of ``n_init`` restarts by inertia."""
    X = m.values
    n = X.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"K={k} must satisfy 1 <= K <= |Y|={n}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        centers = _kmeans_pp(X, k, rng)
        labels, centers, inertia = _lloyd(X, centers, max_iters, check_monotone, history)
        if best is None or inertia < best[2] - 1e-12:
            best = (labels, centers, inertia)
    labels, centers = _canonical_order(best[0], best[1], k)
    return Typologies(k, {lbl: int(a) for lbl, a in zip(m.labels, labels)}, centers, best[2])


def silhouette(X: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette; points in singleton clusters score 0."""
    n = X.shape[0]
    D = np.sqrt(_sq_dists(X, X))
    s = np.zeros(n)
    ks = np.unique(labels)
    for i in range(n):
        own = labels == labels[i]
        if own.sum() <= 1:
            continue
        a = D[i, own].sum() / (own.sum() - 1)
        b = min(D[i, labels == c].mean() for c in ks if c != labels[i])
        denom = max(a, b)
        s[i] = 0.0 if denom == 0 else (b - a) / denom
    return float(s.mean())


def choose_k(m: F1Matrix, seed: int = 0) -> int:
    """Silhouette-maximising K in [2, |Y|-1]; ties go to the smaller K."""
    n = len(m.labels)
    if n < 3:
        return 1
    X = m.values
    if np.all(X == X[0]):
        warnings.warn("all F1 rows are identical; silhouette is degenerate, choosing K=2", RuntimeWarning)
        return 2
    best_k, best_s = 2, -np.inf
    for k in range(2, n):
        t = kmeans(m, k, seed)
        labels = np.array([t.assignment[l] for l in m.labels])
        s = silhouette(X, labels)
        if s > best_s + 1e-12:
            best_k, best_s = k, s
    return best_k


def best_per_typology(m: F1Matrix, t: Typologies) -> Dict[int, str]:
    """psi*_T: argmax over pipelines of the mean F1 inside each typology."""
    out = {}
    for c in range(t.k):
        rows = [i for i, l in enumerate(m.labels) if t.assignment[l] == c]
        if not rows:
            raise ValueError(f"typology {c} is empty")
        out[c] = m.pipelines[_first_argmax(m.values[rows].sum(axis=0) / len(rows))]
    return out


# ------------------------------------------------------------ expert plan


@dataclass(frozen=True)
class ExpertPlan:
    """Everything the hierarchical recognizer needs besides the model indexes."""

    f1: F1Matrix
    psi_star_star: str
    typologies: Typologies
    psi_star_t: Dict[int, str]

    def typology_of(self, label: str) -> int:
        return self.typologies.assignment[label]

    def to_dict(self) -> dict:
        return {
            "f1_matrix": self.f1.to_dict(),
            "psi_star_star": self.psi_star_star,
            "typologies": self.typologies.to_dict(),
            "psi_star_t": {typology_name(c): p for c, p in sorted(self.psi_star_t.items())},
        }


def plan_expert(m: F1Matrix, k: Union[int, str] = AUTO, seed: int = 0) -> ExpertPlan:
    n = len(m.labels)
    if k == AUTO:
        k = choose_k(m, seed)
    k = int(k)
    if not 1 <= k <= n:
        raise ValueError(f"K={k} outside [1, {n}]")
    if k == n and n > 1:
        log.warning("K = |Y| gives singleton typologies")
    typ = kmeans(m, k, seed)
    return ExpertPlan(m, best_overall(m), typ, best_per_typology(m, typ))


# ----------------------------------------------------------- real models


@dataclass(frozen=True)
class HierarchicalModel:
    plan: ExpertPlan
    stage1: ModelIndex  # psi** over all training views, labelled by typology
    instance_labels: Tuple[str, ...]  # per stage-1 view, for the flat fallback
    stage2: Dict[int, Optional[ModelIndex]]  # None when the typology's views yield no descriptors
    stage1_mode: str = POOL

    @property
    def psi_star_star(self) -> str:
        return self.plan.psi_star_star

    @property
    def typologies(self) -> Typologies:
        return self.plan.typologies

    @property
    def psi_star_t(self) -> Dict[int, str]:
        return self.plan.psi_star_t

    def manifest(self) -> dict:
        d = self.plan.to_dict()
        d["stage1_mode"] = self.stage1_mode
        d["k"] = self.typologies.k
        d["stage1"] = {"pipeline": self.stage1.spec.id, "hash": self.stage1.digest(), "file": "stage1.tplg"}
        d["stage2"] = {
            typology_name(c): (
                {"pipeline": self.psi_star_t[c], "hash": None, "file": None} if m is None else
                {"pipeline": m.spec.id, "hash": m.digest(), "file": f"stage2_{typology_name(c)}.tplg"}
            )
            for c, m in sorted(self.stage2.items())
        }
        d["instance_labels"] = list(self.instance_labels)
        return d

    def digest(self) -> str:
        return sha256_hex(canonical_json(self.manifest()).encode())

    def save(self, out) -> Path:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        man = self.manifest()
        (out / "stage1.tplg").write_bytes(self.stage1.to_bytes())
        for c, m in self.stage2.items():
            if m is not None:
                (out / f"stage2_{typology_name(c)}.tplg").write_bytes(m.to_bytes())
        man["model_hash"] = self.digest()
        (out / "manifest.json").write_text(json.dumps(man, sort_keys=True, indent=1) + "\n")
        return out

    @classmethod
    def load(cls, root) -> "HierarchicalModel":
        root = Path(root)
        man = json.loads((root / "manifest.json").read_text())
        f1 = F1Matrix.from_dict(man["f1_matrix"])
        t = man["typologies"]
        typ = Typologies(int(t["k"]), {k: int(v) for k, v in t["assignment"].items()},
                         np.array(t["centroids"], dtype=np.float64).reshape(int(t["k"]), -1), float(t["inertia"]))
        psi_t = {int(name[1:]): p for name, p in man["psi_star_t"].items()}
        plan = ExpertPlan(f1, man["psi_star_star"], typ, psi_t)
        stage1 = deserialize_model((root / man["stage1"]["file"]).read_bytes())
        stage2 = {int(name[1:]): None if e["file"] is None else deserialize_model((root / e["file"]).read_bytes())
                  for name, e in man["stage2"].items()}
        return cls(plan, stage1, tuple(man["instance_labels"]), stage2, man.get("stage1_mode", POOL))


def build_hierarchical(plan: ExpertPlan, registry: PipelineRegistry, views, cache: Optional[FeatureCache] = None,
                       stage1_mode: str = POOL) -> HierarchicalModel:
    cache = cache if cache is not None else FeatureCache()
    views = list(views)
    inst = [v.label for v in views]
    spec1 = registry.get(plan.psi_star_star)
    sets1 = view_features(spec1, views, cache)
    stage1 = model_from_features(spec1, [typology_name(plan.typology_of(l)) for l in inst], sets1)
    stage2 = {}
    for c, pid in sorted(plan.psi_star_t.items()):
        members = [v for v in views if plan.typology_of(v.label) == c]
        spec = registry.get(pid)
        try:
            stage2[c] = model_from_features(spec, [v.label for v in members], view_features(spec, members, cache))
        except ModelBuildError:
            log.warning("typology %s: pipeline %s finds no descriptors; stage 2 answers UNKNOWN", typology_name(c), pid)
            stage2[c] = None
    return HierarchicalModel(plan, stage1, tuple(inst), stage2, stage1_mode)


def train_expert(registry: PipelineRegistry, dataset, k: Union[int, str] = AUTO, seed: int = 0,
                 cache: Optional[FeatureCache] = None, stage1_mode: str = POOL) -> HierarchicalModel:
    """Inner LOOCV F1 matrix -> psi** -> typologies -> psi*_T -> stage models."""
    cache = cache if cache is not None else FeatureCache()
    views = dataset.items() if hasattr(dataset, "items") else list(dataset)
    labels = sorted({v.label for v in views})
    if len(labels) < 2:
        raise ValueError("train_expert needs at least 2 instances")
    m = f1_matrix(registry, dataset, cache, seed=seed)
    plan = plan_expert(m, k, seed)
    return build_hierarchical(plan, registry, views, cache, stage1_mode)


@dataclass(frozen=True)
class HierarchicalResult:
    label: str
    typology: Optional[str]
    elapsed: float
    fallback: bool
    stage1: VoteTally
    stage2: Optional[VoteTally]
    stage_times: Tuple[float, float]


def _stage1(model: HierarchicalModel, query) -> Tuple[VoteTally, VoteTally]:
    """Typology tally and, from the same good matches, the flat instance tally."""
    if len(query) == 0 or model.stage1.n_descriptors == 0:
        empty = VoteTally({}, UNKNOWN, 0)
        return empty, empty
    nb = model.stage1.index.knn2(query.data)
    good = ratio_filter(nb, model.stage1.spec.matcher.ratio_threshold)
    flat = tally(model.instance_labels[g.train_view] for g in good)
    if model.stage1_mode == MAP:
        if flat.winner == UNKNOWN:
            return flat, flat
        t = typology_name(model.plan.typology_of(flat.winner))
        return VoteTally({t: flat.total_good}, t, flat.total_good), flat
    return tally(model.stage1.labels[g.train_view] for g in good), flat


def hierarchical_recognize(model: HierarchicalModel, view: GrayImage) -> HierarchicalResult:
    """Stage 1: typology by psi**; stage 2: instance by psi*_t among that typology."""
    from typorec.pipeline import recognize

    t0 = time.perf_counter()
    q1 = model.stage1.spec.extract(view)
    typ_tally, flat = _stage1(model, q1)
    t1 = time.perf_counter()
    if typ_tally.winner == UNKNOWN:
        return HierarchicalResult(flat.winner, None, t1 - t0, True, typ_tally, None, (t1 - t0, 0.0))
    c = int(typ_tally.winner[1:])
    stage2 = model.stage2[c]
    if stage2 is None:
        t2 = time.perf_counter()
        empty = VoteTally({}, UNKNOWN, 0)
        return HierarchicalResult(UNKNOWN, typ_tally.winner, t2 - t0, False, typ_tally, empty, (t1 - t0, t2 - t1))
    rec = recognize(stage2, view)
    t2 = time.perf_counter()
    return HierarchicalResult(rec.label, typ_tally.winner, t2 - t0, False, typ_tally, rec.tally, (t1 - t0, t2 - t1))


# ------------------------------------------------------------- table path


def hierarchical_predict_table(plan: ExpertPlan, tables: Mapping[str, MatchTable], view_labels: Sequence[str],
                               train: np.ndarray, queries: Sequence[int], stage1_mode: str = POOL):
    """Hierarchical predictions from match tables; identical to :func:`hierarchical_recognize`.

    ``train`` holds the global view ids forming the model, ``queries`` the
    views to classify.  Returns ``(labels, typologies, fallback flags)``.
    """
    n = len(view_labels)
    train_mask = np.zeros(n, dtype=bool)
    train_mask[np.asarray(train, dtype=np.int64)] = True
    view_typ = np.full(n, -1, dtype=np.int64)
    for i in np.nonzero(train_mask)[0]:
        view_typ[i] = plan.typology_of(view_labels[i])
    typ_names = [typology_name(int(c)) if c >= 0 else UNKNOWN for c in view_typ]
    masks = {c: train_mask & (view_typ == c) for c in plan.psi_star_t}
    t1 = tables[plan.psi_star_star]
    out_l, out_t, out_f = [], [], []
    for q in queries:
        good = t1.good_views(int(q), train_mask)
        flat = tally(view_labels[v] for v in good)
        if stage1_mode == MAP:
            typ = UNKNOWN if flat.winner == UNKNOWN else typology_name(plan.typology_of(flat.winner))
        else:
            typ = tally(typ_names[v] for v in good).winner
        if typ == UNKNOWN:
            out_l.append(flat.winner)
            out_t.append(None)
            out_f.append(True)
            continue
        c = int(typ[1:])
        out_l.append(tables[plan.psi_star_t[c]].recognize(int(q), masks[c], view_labels).winner)
        out_t.append(typ)
        out_f.append(False)
    return out_l, out_t, out_f


def flat_predict_table(table: MatchTable, view_labels: Sequence[str], train: np.ndarray, queries: Sequence[int]):
    mask = np.zeros(len(view_labels), dtype=bool)
    mask[np.asarray(train, dtype=np.int64)] = True
    return [table.recognize(int(q), mask, view_labels).winner for q in queries]
