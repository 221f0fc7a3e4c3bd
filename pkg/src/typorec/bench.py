"""Hierarchical versus flat benchmark over a p x t grid of dataset subsets."""

from __future__ import annotations

import io
import csv
import json
import logging
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from typorec import kernels
from typorec.data import Dataset, DatasetError, SubsetSpec, subset
from typorec.eval import F1Matrix, loocv_from_table, mean_f1, prf1, ConfusionMatrix, view_features
from typorec.expert import (
    AUTO,
    POOL,
    ExpertPlan,
    build_hierarchical,
    flat_predict_table,
    hierarchical_predict_table,
    hierarchical_recognize,
    plan_expert,
    typology_name,
)
from typorec.match import MatchTable
from typorec.pipeline import FeatureCache, ModelBuildError, PipelineRegistry, model_from_features, recognize

log = logging.getLogger(__name__)

HOLDOUT = "holdout"
LOOCV = "loocv"
TEST_FRACTION = 0.2
TIMING_SLACK = 1.25


def parse_range(text: str, default_step: int = 1) -> List[int]:
    """``"a..b"`` or ``"a..b:step"`` to an inclusive integer list."""
    try:
        body, _, step = text.partition(":")
        a, sep, b = body.partition("..")
        if not sep:
            vals = [int(a)]
        else:
            s = int(step) if step else default_step
            if s <= 0 or int(b) < int(a):
                raise ValueError
            vals = list(range(int(a), int(b) + 1, s))
    except ValueError:
        raise ValueError(f"bad range {text!r}; expected a..b or a..b:step") from None
    return vals


@dataclass(frozen=True)
class BenchConfig:
    p_values: Tuple[int, ...]
    t_values: Tuple[int, ...]
    seed: int = 0
    k: Union[int, str] = AUTO
    outer: str = HOLDOUT
    stage1_mode: str = POOL
    max_keypoints: int = 500
    timing: bool = True

    def to_dict(self) -> dict:
        return {
            "p_values": list(self.p_values),
            "t_values": list(self.t_values),
            "seed": self.seed,
            "k": self.k,
            "outer": self.outer,
            "stage1_mode": self.stage1_mode,
            "max_keypoints": self.max_keypoints,
            "test_fraction": TEST_FRACTION,
        }


class TableBank:
    """One :class:`MatchTable` per pipeline over every view of the dataset."""

    def __init__(self, registry: PipelineRegistry, dataset: Dataset, cache: Optional[FeatureCache] = None):
        self.registry = registry
        self.views = dataset.items()
        self.labels = [v.label for v in self.views]
        self.position = {v.key: i for i, v in enumerate(self.views)}
        self.cache = cache if cache is not None else FeatureCache()
        self.tables: Dict[str, MatchTable] = {}
        for spec in registry:
            t0 = time.perf_counter()
            sets = view_features(spec, self.views, self.cache)
            self.tables[spec.id] = MatchTable(sets, spec.matcher)
            log.info("table %s: %d descriptors in %.1fs", spec.id, int(self.tables[spec.id].offsets[-1]),
                     time.perf_counter() - t0)

    def ids(self, views) -> np.ndarray:
        return np.array([self.position[v.key] for v in views], dtype=np.int64)


def split_views(sub: Dataset, seed: int, p: int, t: int) -> Tuple[list, list]:
    """Per-instance seeded 80/20 split, at least one test view each."""
    train, test = [], []
    for lbl in sub.instances:
        paths = sub.views[lbl]
        n_test = max(1, int(round(TEST_FRACTION * len(paths))))
        rng = np.random.default_rng(np.random.SeedSequence([seed, p, t, zlib.crc32(lbl.encode("utf-8"))]))
        held = set(rng.permutation(len(paths))[:n_test].tolist())
        for i, path in enumerate(paths):
            (test if i in held else train).append((lbl, path))
    return train, test


def inner_f1(bank: TableBank, train_ids: np.ndarray, provenance: dict) -> F1Matrix:
    """Per-pipeline LOOCV F1 over the training views only."""
    labels = sorted({bank.labels[i] for i in train_ids})
    actual = [bank.labels[i] for i in train_ids]
    cols = []
    for spec in bank.registry:
        preds = loocv_from_table(bank.tables[spec.id], train_ids, bank.labels)
        cols.append(prf1(ConfusionMatrix.from_predictions(labels, actual, preds)).f1)
    return F1Matrix(tuple(labels), tuple(bank.registry.ids), np.stack(cols, axis=1), provenance)


@dataclass
class CellResult:
    p: int
    t: int
    n_train: int = 0
    n_test: int = 0
    psi_star_star: Optional[str] = None
    k: Optional[int] = None
    assignment: Dict[str, int] = field(default_factory=dict)
    psi_star_t: Dict[str, str] = field(default_factory=dict)
    f1_flat: Optional[float] = None
    f1_hier: Optional[float] = None
    fallbacks: int = 0
    f1_matrix: Optional[dict] = None
    error: Optional[str] = None

    @property
    def winner(self) -> Optional[str]:
        if self.error is not None:
            return None
        if self.f1_hier > self.f1_flat:
            return "hierarchical"
        if self.f1_flat > self.f1_hier:
            return "flat"
        return "tie"

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "p", "t", "n_train", "n_test", "psi_star_star", "k", "assignment", "psi_star_t",
            "f1_flat", "f1_hier", "fallbacks", "f1_matrix", "error")}
        d["winner"] = self.winner
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CellResult":
        d = {k: v for k, v in d.items() if k != "winner"}
        return cls(**d)


def _run_holdout(bank: TableBank, sub: Dataset, cfg: BenchConfig, cell: CellResult):
    train, test = split_views(sub, cfg.seed, cell.p, cell.t)
    key = {v.key: i for i, v in enumerate(bank.views)}
    from typorec.data import View

    train_ids = np.array([key[View(l, p).key] for l, p in train], dtype=np.int64)
    test_ids = np.array([key[View(l, p).key] for l, p in test], dtype=np.int64)
    m = inner_f1(bank, train_ids, {"subset_hash": sub.content_hash, "seed": cfg.seed})
    plan = plan_expert(m, cfg.k, cfg.seed)
    hier, _, flags = hierarchical_predict_table(plan, bank.tables, bank.labels, train_ids, test_ids, cfg.stage1_mode)
    flat = flat_predict_table(bank.tables[plan.psi_star_star], bank.labels, train_ids, test_ids)
    actual = [bank.labels[i] for i in test_ids]
    cell.n_train, cell.n_test = len(train_ids), len(test_ids)
    cell.psi_star_star = plan.psi_star_star
    cell.k = plan.typologies.k
    cell.assignment = dict(sorted(plan.typologies.assignment.items()))
    cell.psi_star_t = {typology_name(c): p for c, p in sorted(plan.psi_star_t.items())}
    cell.f1_flat = mean_f1(sub.instances, actual, flat)
    cell.f1_hier = mean_f1(sub.instances, actual, hier)
    cell.fallbacks = int(sum(flags))
    cell.f1_matrix = m.to_dict()
    return plan, train, test, hier


def _run_nested(bank: TableBank, sub: Dataset, cfg: BenchConfig, cell: CellResult):
    ids = bank.ids(sub.items())
    hier, flat, flags = [], [], 0
    for i in range(len(ids)):
        train_ids = np.delete(ids, i)
        m = inner_f1(bank, train_ids, {"subset_hash": sub.content_hash, "seed": cfg.seed})
        plan = plan_expert(m, cfg.k, cfg.seed)
        h, _, f = hierarchical_predict_table(plan, bank.tables, bank.labels, train_ids, ids[i:i + 1], cfg.stage1_mode)
        hier += h
        flags += int(sum(f))
        flat += flat_predict_table(bank.tables[plan.psi_star_star], bank.labels, train_ids, ids[i:i + 1])
    actual = [bank.labels[i] for i in ids]
    m = inner_f1(bank, ids, {"subset_hash": sub.content_hash, "seed": cfg.seed})
    plan = plan_expert(m, cfg.k, cfg.seed)
    cell.n_train, cell.n_test = len(ids) - 1, len(ids)
    cell.psi_star_star = plan.psi_star_star
    cell.k = plan.typologies.k
    cell.assignment = dict(sorted(plan.typologies.assignment.items()))
    cell.psi_star_t = {typology_name(c): p for c, p in sorted(plan.psi_star_t.items())}
    cell.f1_flat = mean_f1(sub.instances, actual, flat)
    cell.f1_hier = mean_f1(sub.instances, actual, hier)
    cell.fallbacks = flags
    cell.f1_matrix = m.to_dict()
    return None


def run_cell(bank: TableBank, dataset: Dataset, cfg: BenchConfig, p: int, t: int):
    cell = CellResult(p, t)
    try:
        sub = subset(dataset, SubsetSpec(p, t, cfg.seed))
        if cfg.outer == LOOCV:
            extra = _run_nested(bank, sub, cfg, cell)
        else:
            extra = _run_holdout(bank, sub, cfg, cell)
        return cell, extra
    except (DatasetError, ModelBuildError, ValueError) as exc:
        cell.error = f"{type(exc).__name__}: {exc}"
        return cell, None


# ------------------------------------------------------------------ timing


def measure_timing(registry: PipelineRegistry, plan: ExpertPlan, train, test, stage1_mode: str = POOL,
                   repeats: int = 1) -> dict:
    """Mean seconds per test view for every flat pipeline and for the hierarchical recognizer.

    Models are built once and excluded from timing; each timed call runs the
    full chain from the decoded image: detect, describe, match, vote.
    """
    from typorec.data import View

    train_views = [View(l, p) for l, p in train]
    test_views = [View(l, p) for l, p in test]
    cache = FeatureCache()
    flat_models = {}
    for spec in registry:
        try:
            flat_models[spec.id] = model_from_features(spec, [v.label for v in train_views],
                                                       view_features(spec, train_views, cache))
        except ModelBuildError:
            flat_models[spec.id] = None
    hmodel = build_hierarchical(plan, registry, train_views, cache, stage1_mode)
    images = [v.load() for v in test_views]
    per_view = {pid: [] for pid in flat_models}
    hier_times, stage_pid, labels_real = [], [], []
    for img in images:
        for pid, model in flat_models.items():
            if model is None:
                per_view[pid].append(float("nan"))
                continue
            best = min(recognize(model, img).elapsed for _ in range(repeats))
            per_view[pid].append(best)
        runs = [hierarchical_recognize(hmodel, img) for _ in range(repeats)]
        res = min(runs, key=lambda r: r.elapsed)
        hier_times.append(res.elapsed)
        labels_real.append(res.label)
        stage_pid.append(None if res.typology is None else plan.psi_star_t[int(res.typology[1:])])
    mean = {pid: float(np.nanmean(v)) if np.any(np.isfinite(v)) else None for pid, v in per_view.items()}
    t_hier = float(np.mean(hier_times))
    t_ss = mean[plan.psi_star_star]
    used = [per_view[pid][i] if pid is not None else 0.0 for i, pid in enumerate(stage_pid)]
    t_stage2 = float(np.mean(used))
    t_max_t = max(mean[pid] for pid in set(plan.psi_star_t.values()) if mean[pid] is not None)
    lower = max(t_ss, t_stage2)
    upper = TIMING_SLACK * (t_ss + t_max_t)
    return {
        "backend": kernels.BACKEND,
        "n_test_views": len(images),
        "pipelines": mean,
        "hierarchical": t_hier,
        "psi_star_star": plan.psi_star_star,
        "t_psi_star_star": t_ss,
        "t_psi_star_t_used": t_stage2,
        "t_psi_star_t_max": t_max_t,
        "lower_bound": lower,
        "upper_bound": upper,
        "within_bounds": bool(lower <= t_hier <= upper),
        "labels": labels_real,
    }


# ------------------------------------------------------------------ report


@dataclass
class BenchmarkReport:
    cells: List[CellResult]
    provenance: dict
    timing: Optional[dict] = None

    def grid_means(self) -> Tuple[Optional[float], Optional[float]]:
        ok = [c for c in self.cells if c.error is None]
        if not ok:
            return None, None
        return float(np.mean([c.f1_flat for c in ok])), float(np.mean([c.f1_hier for c in ok]))

    def cell(self, p: int, t: int) -> CellResult:
        for c in self.cells:
            if (c.p, c.t) == (p, t):
                return c
        raise KeyError((p, t))

    @property
    def all_failed(self) -> bool:
        return all(c.error is not None for c in self.cells)

    def to_dict(self) -> dict:
        flat, hier = self.grid_means()
        return {
            "provenance": self.provenance,
            "cells": [c.to_dict() for c in self.cells],
            "grid_mean_f1_flat": flat,
            "grid_mean_f1_hier": hier,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1, allow_nan=False) + "\n"

    @classmethod
    def from_dict(cls, d: dict, timing: Optional[dict] = None) -> "BenchmarkReport":
        return cls([CellResult.from_dict(c) for c in d["cells"]], d["provenance"], timing)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["p", "t", "n_train", "n_test", "psi_star_star", "k", "psi_star_t",
                    "f1_flat", "f1_hier", "winner", "fallbacks", "error"])
        for c in self.cells:
            w.writerow([c.p, c.t, c.n_train, c.n_test, c.psi_star_star or "", "" if c.k is None else c.k,
                        " ".join(f"{k}={v}" for k, v in c.psi_star_t.items()),
                        "" if c.f1_flat is None else repr(c.f1_flat), "" if c.f1_hier is None else repr(c.f1_hier),
                        c.winner or "", c.fallbacks, c.error or ""])
        return buf.getvalue()

    def to_markdown(self) -> str:
        prov = self.provenance
        out = ["# Hierarchical vs flat recognition", ""]
        out.append(f"dataset `{prov.get('dataset_hash')}`, registry `{prov.get('registry_hash')}`, "
                   f"seed {prov.get('config', {}).get('seed')}, outer protocol {prov.get('config', {}).get('outer')}")
        out.append("")
        ps = sorted({c.p for c in self.cells})
        ts = sorted({c.t for c in self.cells})
        out.append("Each cell shows mean F1 of the best single pipeline / the hierarchical recognizer; the winner is bold.")
        out.append("")
        out.append("| p \\ t | " + " | ".join(str(t) for t in ts) + " |")
        out.append("|---|" + "---|" * len(ts))
        for p in ps:
            row = [f"**{p}**"]
            for t in ts:
                try:
                    c = self.cell(p, t)
                except KeyError:
                    row.append("")
                    continue
                if c.error is not None:
                    row.append("error")
                    continue
                a, b = f"{c.f1_flat:.3f}", f"{c.f1_hier:.3f}"
                if c.winner == "flat":
                    a = f"**{a}**"
                elif c.winner == "hierarchical":
                    b = f"**{b}**"
                row.append(f"{a} / {b}")
            out.append("| " + " | ".join(row) + " |")
        flat, hier = self.grid_means()
        out.append("")
        if flat is not None:
            out.append(f"Grid mean F1: best single pipeline {flat:.4f}, hierarchical {hier:.4f}.")
        errs = [c for c in self.cells if c.error is not None]
        for c in errs:
            out.append(f"- cell p={c.p} t={c.t} failed: {c.error}")
        out.append("")
        out.append("| p | t | psi** | K | psi*_T |")
        out.append("|---|---|---|---|---|")
        for c in self.cells:
            if c.error is None:
                out.append(f"| {c.p} | {c.t} | {c.psi_star_star} | {c.k} | "
                           + ", ".join(f"{k}: {v}" for k, v in c.psi_star_t.items()) + " |")
        big = self._largest()
        if big is not None and big.f1_matrix:
            m = F1Matrix.from_dict(big.f1_matrix)
            out += ["", f"Per-instance training F1, cell p={big.p} t={big.t}:", ""]
            out.append("| instance | " + " | ".join(m.pipelines) + " |")
            out.append("|---|" + "---|" * len(m.pipelines))
            for lbl, r in zip(m.labels, m.values):
                out.append(f"| {lbl} | " + " | ".join(f"{x:.3f}" for x in r) + " |")
        if self.timing:
            tm = self.timing
            out += ["", f"## Timing (seconds per view, {tm['backend']} kernels, {tm['n_test_views']} views)", ""]
            out.append("| recognizer | s/view |")
            out.append("|---|---|")
            for pid, v in tm["pipelines"].items():
                out.append(f"| {pid} | {'n/a' if v is None else f'{v:.4f}'} |")
            out.append(f"| hierarchical | {tm['hierarchical']:.4f} |")
            out.append("")
            out.append(f"Bounds: {tm['lower_bound']:.4f} <= t(hierarchical) <= {tm['upper_bound']:.4f} "
                       f"({'holds' if tm['within_bounds'] else 'violated'}).")
        return "\n".join(out) + "\n"

    def _largest(self) -> Optional[CellResult]:
        ok = [c for c in self.cells if c.error is None]
        return max(ok, key=lambda c: (c.p, c.t)) if ok else None


def run_benchmark(registry: PipelineRegistry, dataset: Dataset, cfg: BenchConfig, jobs: int = 1,
                  bank: Optional[TableBank] = None) -> BenchmarkReport:
    bank = bank if bank is not None else TableBank(registry, dataset)
    grid = [(p, t) for p in cfg.p_values for t in cfg.t_values]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(lambda pt: run_cell(bank, dataset, cfg, *pt), grid))
    else:
        results = [run_cell(bank, dataset, cfg, p, t) for p, t in grid]
    cells = [r[0] for r in results]
    prov = {
        "dataset_hash": dataset.content_hash,
        "registry_hash": registry.digest(),
        "registry": registry.to_dict(),
        "config": cfg.to_dict(),
    }
    report = BenchmarkReport(cells, prov)
    if cfg.timing:
        ok = [(c, r[1]) for c, r in zip(cells, results) if c.error is None]
        if ok:
            c, extra = max(ok, key=lambda x: (x[0].p, x[0].t))
            if extra is None:
                sub = subset(dataset, SubsetSpec(c.p, c.t, cfg.seed))
                extra = _run_holdout(bank, sub, cfg, CellResult(c.p, c.t))
            plan, train, test, expected = extra
            report.timing = measure_timing(registry, plan, train, test, cfg.stage1_mode)
            report.timing["cell"] = [c.p, c.t]
            report.timing["matches_table_path"] = report.timing["labels"] == list(expected)
    return report
