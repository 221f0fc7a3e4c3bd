"""Leave-one-out evaluation, confusion matrices, F1 scores and pipeline selection."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from typorec.match import UNKNOWN, MatchTable
from typorec.pipeline import (
    FeatureCache,
    ModelBuildError,
    PipelineRegistry,
    PipelineSpec,
    canonical_json,
    model_from_features,
    recognize_features,
)


class EvaluationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    """``counts[predicted, actual]``; the last predicted row is UNKNOWN."""

    labels: tuple
    counts: np.ndarray

    @classmethod
    def from_predictions(cls, labels: Sequence[str], actual: Sequence[str], predicted: Sequence[str]) -> "ConfusionMatrix":
        labels = tuple(labels)
        pos = {l: i for i, l in enumerate(labels)}
        counts = np.zeros((len(labels) + 1, len(labels)), dtype=np.int64)
        for a, p in zip(actual, predicted):
            counts[pos.get(p, len(labels)), pos[a]] += 1
        return cls(labels, counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def column_sums(self) -> Dict[str, int]:
        return dict(zip(self.labels, self.counts.sum(axis=0).tolist()))

    def to_dict(self) -> dict:
        return {"labels": list(self.labels), "rows": list(self.labels) + [UNKNOWN], "counts": self.counts.tolist()}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["predicted\\actual", *self.labels])
        for name, row in zip(list(self.labels) + [UNKNOWN], self.counts.tolist()):
            w.writerow([name, *row])
        return buf.getvalue()


@dataclass(frozen=True)
class PRF1:
    labels: tuple
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray

    @property
    def mean_f1(self) -> float:
        return float(np.mean(self.f1)) if len(self.f1) else 0.0

    def to_dict(self) -> dict:
        return {
            "labels": list(self.labels),
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "f1": self.f1.tolist(),
            "mean_f1": self.mean_f1,
        }


def prf1(cm: ConfusionMatrix) -> PRF1:
    """Per-label precision, recall and F1; F1 is 0 when precision + recall is 0."""
    n = len(cm.labels)
    tp = np.diag(cm.counts[:n, :n]).astype(np.float64)
    pred = cm.counts[:n, :].sum(axis=1).astype(np.float64)
    act = cm.counts.sum(axis=0).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(pred > 0, tp / pred, 0.0)
        recall = np.where(act > 0, tp / act, 0.0)
        s = precision + recall
        f1 = np.where(s > 0, 2 * precision * recall / s, 0.0)
    return PRF1(cm.labels, precision, recall, f1)


def mean_f1(labels: Sequence[str], actual: Sequence[str], predicted: Sequence[str]) -> float:
    return prf1(ConfusionMatrix.from_predictions(labels, actual, predicted)).mean_f1


# ------------------------------------------------------------------ LOOCV


def _check_views(views) -> List[str]:
    labels = sorted({v.label for v in views})
    counts = {l: 0 for l in labels}
    for v in views:
        counts[v.label] += 1
    few = [l for l, c in counts.items() if c < 2]
    if few:
        raise EvaluationError(f"LOOCV needs >= 2 views per instance; too few for {few}")
    return labels


def view_features(spec: PipelineSpec, views, cache: Optional[FeatureCache] = None):
    cache = cache if cache is not None else FeatureCache()
    return [cache.get(v.key, spec, v.load) for v in views]


def loocv_from_table(table: MatchTable, members: np.ndarray, view_labels: Sequence[str]) -> List[str]:
    """Predicted label of each member view with the model built on the other members."""
    members = np.asarray(members, dtype=np.int64)
    allowed = np.zeros(table.n_views, dtype=bool)
    allowed[members] = True
    preds = []
    for i in members:
        allowed[i] = False
        preds.append(table.recognize(int(i), allowed, view_labels).winner)
        allowed[i] = True
    return preds


def loocv_confusion(spec: PipelineSpec, dataset, cache: Optional[FeatureCache] = None,
                    literal: bool = False) -> ConfusionMatrix:
    """|X| folds; fold i trains on every view but x_i and classifies x_i.

    The default path classifies every fold from one :class:`MatchTable`
    (identical results, no rebuilt index).  ``literal=True`` rebuilds the
    model for every fold and exists to check that equivalence.
    """
    views = dataset.items() if hasattr(dataset, "items") else list(dataset)
    labels = _check_views(views)
    sets = view_features(spec, views, cache)
    actual = [v.label for v in views]
    if literal:
        preds = []
        for i in range(len(views)):
            rest = [j for j in range(len(views)) if j != i]
            try:
                model = model_from_features(spec, [actual[j] for j in rest], [sets[j] for j in rest])
            except ModelBuildError as exc:
                raise EvaluationError(f"fold {i}: {exc}") from exc
            preds.append(recognize_features(model, sets[i]).winner)
    else:
        if sum(len(s) for s in sets) == 0:
            raise EvaluationError(f"fold 0: pipeline {spec.id}: no training view produced any descriptor")
        table = MatchTable(sets, spec.matcher)
        preds = loocv_from_table(table, np.arange(len(views)), actual)
    return ConfusionMatrix.from_predictions(labels, actual, preds)


# -------------------------------------------------------------- F1 matrix


@dataclass(frozen=True)
class F1Matrix:
    labels: tuple
    pipelines: tuple
    values: np.ndarray  # (|Y|, |Psi|)
    provenance: Mapping = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (len(self.labels), len(self.pipelines)):
            raise ValueError("F1 matrix shape does not match labels x pipelines")
        if not np.all(np.isfinite(v)):
            raise ValueError("F1 matrix entries must be finite")
        object.__setattr__(self, "values", v)

    def column_means(self) -> np.ndarray:
        return self.values.mean(axis=0)

    def row(self, label: str) -> np.ndarray:
        return self.values[self.labels.index(label)]

    def scaled(self, c: float) -> "F1Matrix":
        return F1Matrix(self.labels, self.pipelines, self.values * c, self.provenance)

    def to_dict(self) -> dict:
        return {
            "labels": list(self.labels),
            "pipelines": list(self.pipelines),
            "values": self.values.tolist(),
            "provenance": dict(self.provenance),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "F1Matrix":
        return cls(tuple(d["labels"]), tuple(d["pipelines"]), np.array(d["values"], dtype=np.float64), d.get("provenance", {}))

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["instance", *self.pipelines])
        for lbl, row in zip(self.labels, self.values):
            w.writerow([lbl, *[repr(float(x)) for x in row]])
        w.writerow(["mean_f1", *[repr(float(x)) for x in self.column_means()]])
        return buf.getvalue()


def f1_matrix(registry: PipelineRegistry, dataset, cache: Optional[FeatureCache] = None,
              seed: Optional[int] = None, confusions: Optional[Dict[str, ConfusionMatrix]] = None) -> F1Matrix:
    """Run LOOCV for every pipeline; entry (y, psi) is that pipeline's F1 on instance y.

    When ``confusions`` is a dict it receives each pipeline's confusion matrix.
    """
    if len(registry) < 2:
        raise ValueError("registry needs at least 2 pipelines")
    cache = cache if cache is not None else FeatureCache()
    views = dataset.items() if hasattr(dataset, "items") else list(dataset)
    cols, labels = [], None
    for spec in registry:
        try:
            cm = loocv_confusion(spec, views, cache)
        except EvaluationError as exc:
            raise EvaluationError(f"pipeline {spec.id}: {exc}") from exc
        if confusions is not None:
            confusions[spec.id] = cm
        res = prf1(cm)
        labels = res.labels
        cols.append(res.f1)
    prov = {
        "dataset_hash": getattr(dataset, "content_hash", None),
        "registry_hash": registry.digest(),
        "seed": seed,
    }
    return F1Matrix(tuple(labels), tuple(registry.ids), np.stack(cols, axis=1), prov)


def _first_argmax(values: np.ndarray) -> int:
    # exact comparison; earliest index wins ties
    return int(np.flatnonzero(values == values.max())[0])


def best_per_instance(m: F1Matrix) -> Dict[str, str]:
    """psi* for every instance: row-wise argmax, ties to registry order."""
    return {lbl: m.pipelines[_first_argmax(row)] for lbl, row in zip(m.labels, m.values)}


def best_overall(m: F1Matrix) -> str:
    """psi**: the pipeline with the highest mean F1 over instances."""
    return m.pipelines[_first_argmax(m.values.sum(axis=0) / len(m.labels))]
