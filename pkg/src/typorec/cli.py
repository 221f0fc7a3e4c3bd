"""Command-line interface: generate, eval, train, recognize, benchmark, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from typorec import __version__
from typorec import data as D
from typorec.bench import HOLDOUT, LOOCV, BenchConfig, BenchmarkReport, parse_range, run_benchmark
from typorec.eval import EvaluationError, F1Matrix, best_overall, best_per_instance, f1_matrix, prf1
from typorec.expert import AUTO, MAP, POOL, HierarchicalModel, hierarchical_recognize, train_expert
from typorec.imgproc import ImageError, load_image
from typorec.pipeline import ContainerError, FeatureCache, ModelBuildError, PipelineRegistry, default_registry

log = logging.getLogger("typorec")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_EVAL = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


GLOBAL_DEFAULTS = {"seed": 0, "jobs": 1, "config": None, "verbose": False}


def _add_globals(p: argparse.ArgumentParser):
    # suppressed defaults let the flags appear before or after the subcommand
    d = argparse.SUPPRESS
    p.add_argument("--seed", type=int, default=d, help="master seed (default 0)")
    p.add_argument("--jobs", type=int, default=d, help="parallel workers (default 1)")
    p.add_argument("--config", default=d, help="JSON file with option defaults and an optional 'registry'")
    p.add_argument("-v", "--verbose", action="store_true", default=d)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="typorec", description="Typology-based hierarchical object recognition.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _add_globals(parser)
    common = _Parser(add_help=False)
    _add_globals(common)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    g = sub.add_parser("generate", parents=[common], help="render a synthetic dataset")
    g.add_argument("out", help="output directory")
    g.add_argument("--spec", help="SynthSpec JSON file (default: the engineered 7-instance set)")
    g.add_argument("--views", type=int, help="views per instance for the engineered set")
    g.add_argument("--force", action="store_true", help="allow a non-empty output directory")

    e = sub.add_parser("eval", parents=[common], help="LOOCV F1 per instance and pipeline")
    e.add_argument("dataset")
    e.add_argument("--pipeline", default="all", help="pipeline id or 'all'")
    e.add_argument("--out", choices=("csv", "md", "json"), default="md")
    e.add_argument("--output", help="write to this file instead of stdout")
    e.add_argument("--max-keypoints", type=int, default=None)

    t = sub.add_parser("train", parents=[common], help="train the hierarchical recognizer")
    t.add_argument("dataset")
    t.add_argument("model_out")
    t.add_argument("--k", default=None, help="number of typologies or 'auto'")
    t.add_argument("--stage1-mode", choices=(POOL, MAP), default=None)
    t.add_argument("--max-keypoints", type=int, default=None)

    r = sub.add_parser("recognize", parents=[common], help="recognize a single image")
    r.add_argument("model")
    r.add_argument("image")
    r.add_argument("--json", action="store_true", help="machine-readable output")

    b = sub.add_parser("benchmark", parents=[common], help="hierarchical vs flat over a p x t grid")
    b.add_argument("dataset")
    b.add_argument("--p-range", default=None, help="a..b (default 3..7)")
    b.add_argument("--t-range", default=None, help="a..b:step (default 10..50:10)")
    b.add_argument("--out", default=None, help="report directory (default bench_out)")
    b.add_argument("--outer", choices=(HOLDOUT, LOOCV), default=None)
    b.add_argument("--k", default=None)
    b.add_argument("--stage1-mode", choices=(POOL, MAP), default=None)
    b.add_argument("--max-keypoints", type=int, default=None)
    b.add_argument("--no-timing", action="store_true")

    rp = sub.add_parser("report", parents=[common], help="re-render a benchmark JSON")
    rp.add_argument("json_path")
    rp.add_argument("--format", choices=("md", "csv"), default="md")
    rp.add_argument("--timing", help="timing JSON to include in Markdown")
    return parser


CMD_DEFAULTS = {
    "k": AUTO,
    "stage1_mode": POOL,
    "max_keypoints": 500,
    "p_range": "3..7",
    "t_range": "10..50:10",
    "out": None,
    "outer": HOLDOUT,
}


def _apply_config(args) -> dict:
    """Fill unset options from ``--config`` then built-in defaults; returns the config mapping."""
    cfg = {}
    if getattr(args, "config", None):
        try:
            cfg = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: line {exc.lineno}: {exc.msg}") from exc
        if not isinstance(cfg, dict):
            raise UsageError("config must be a JSON object")
    for k, v in GLOBAL_DEFAULTS.items():
        if not hasattr(args, k):
            setattr(args, k, cfg.get(k, v))
    for k, v in CMD_DEFAULTS.items():
        if hasattr(args, k) and getattr(args, k) is None:
            setattr(args, k, cfg.get(k, v))
    return cfg


def _registry(args, cfg) -> PipelineRegistry:
    if "registry" in cfg:
        try:
            return PipelineRegistry.from_dict(cfg["registry"])
        except (KeyError, ValueError, TypeError) as exc:
            raise UsageError(f"invalid registry in config: {exc}") from exc
    return default_registry(max_keypoints=getattr(args, "max_keypoints", None) or 500)


def _parse_k(value):
    if value == AUTO:
        return AUTO
    try:
        k = int(value)
    except (TypeError, ValueError):
        raise UsageError(f"--k must be an integer or 'auto', got {value!r}") from None
    if k < 1:
        raise UsageError("--k must be >= 1")
    return k


def _emit(text: str, path: Optional[str]):
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


# ------------------------------------------------------------------ commands


def cmd_generate(args, cfg) -> int:
    if args.spec:
        try:
            raw = json.loads(Path(args.spec).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read {args.spec}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.spec}: line {exc.lineno}: {exc.msg}") from exc
        try:
            spec = D.SynthSpec.from_dict(raw)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"{args.spec}: {exc}") from exc
    else:
        spec = D.engineered_spec(seed=args.seed, views_per_instance=args.views or 50)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} is not empty; use --force to write into it")
    ds = D.generate(spec, out)
    print(f"wrote {len(ds)} views of {len(ds.instances)} instances to {out}")
    print(f"content_hash {ds.content_hash}")
    return EXIT_OK


def _eval_markdown(m, cms, psi_ss, stars) -> str:
    lines = [f"dataset `{m.provenance.get('dataset_hash')}`", ""]
    head = [f"{p} (psi**)" if p == psi_ss else p for p in m.pipelines]
    lines.append("| instance | " + " | ".join(head) + " | psi* |")
    lines.append("|---|" + "---|" * (len(head) + 1))
    for lbl, row in zip(m.labels, m.values):
        lines.append(f"| {lbl} | " + " | ".join(f"{x:.4f}" for x in row) + f" | {stars[lbl]} |")
    lines.append("| **mean F1** | " + " | ".join(f"{x:.4f}" for x in m.column_means()) + " | |")
    for pid, cm in cms.items():
        lines += ["", f"Confusion matrix {pid} (rows predicted, columns actual):", "", "```", cm.to_csv().rstrip(), "```"]
    return "\n".join(lines) + "\n"


def _eval_csv(m, psi_ss, stars) -> str:
    header = [f"# dataset_hash={m.provenance.get('dataset_hash')}", f"# registry_hash={m.provenance.get('registry_hash')}",
              f"# seed={m.provenance.get('seed')}", f"# psi_star_star={psi_ss}"]
    body = m.to_csv().splitlines()
    body[0] += ",psi_star"
    for i, lbl in enumerate(m.labels, start=1):
        body[i] += f",{stars[lbl]}"
    body[-1] += f",{psi_ss}"
    return "\n".join(header + body) + "\n"


def cmd_eval(args, cfg) -> int:
    ds = D.load(args.dataset)
    reg = _registry(args, cfg)
    if args.pipeline != "all":
        if args.pipeline not in reg.ids:
            raise UsageError(f"unknown pipeline id {args.pipeline!r}; known: {', '.join(reg.ids)}")
    cache = FeatureCache()
    cms = {}
    m = f1_matrix(reg, ds, cache, seed=args.seed, confusions=cms)
    if args.pipeline != "all":
        j = m.pipelines.index(args.pipeline)
        m = F1Matrix(m.labels, (args.pipeline,), m.values[:, [j]], m.provenance)
        cms = {args.pipeline: cms[args.pipeline]}
    psi_ss = best_overall(m)
    stars = best_per_instance(m)
    if args.out == "csv":
        text = _eval_csv(m, psi_ss, stars)
    elif args.out == "json":
        doc = {
            "f1_matrix": m.to_dict(),
            "mean_f1": dict(zip(m.pipelines, m.column_means().tolist())),
            "psi_star": stars,
            "psi_star_star": psi_ss,
            "confusion": {pid: cm.to_dict() for pid, cm in cms.items()},
            "prf1": {pid: prf1(cm).to_dict() for pid, cm in cms.items()},
        }
        text = json.dumps(doc, sort_keys=True, indent=1, allow_nan=False) + "\n"
    else:
        text = _eval_markdown(m, cms, psi_ss, stars)
    _emit(text, args.output)
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    ds = D.load(args.dataset)
    reg = _registry(args, cfg)
    k = _parse_k(args.k)
    if k != AUTO and k > len(ds.instances):
        raise UsageError(f"--k {k} exceeds the {len(ds.instances)} instances")
    out = Path(args.model_out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise D.DatasetError(f"{out}: not writable ({exc})") from exc
    model = train_expert(reg, ds, k=k, seed=args.seed, stage1_mode=args.stage1_mode)
    model.save(out)
    print(f"psi** {model.psi_star_star}  K {model.typologies.k}")
    for c, pid in sorted(model.psi_star_t.items()):
        print(f"T{c}: {pid}  {' '.join(model.typologies.members(c))}")
    print(f"model_hash {model.digest()}")
    return EXIT_OK


def cmd_recognize(args, cfg) -> int:
    try:
        model = HierarchicalModel.load(args.model)
    except (OSError, KeyError, json.JSONDecodeError, ContainerError) as exc:
        raise D.DatasetError(f"cannot load model {args.model}: {exc}") from exc
    img = load_image(args.image)
    res = hierarchical_recognize(model, img)
    doc = {
        "label": res.label,
        "typology": res.typology,
        "fallback": res.fallback,
        "elapsed": res.elapsed,
        "stage1_seconds": res.stage_times[0],
        "stage2_seconds": res.stage_times[1],
    }
    if args.json:
        print(json.dumps(doc, sort_keys=True))
    else:
        print(f"label {res.label}")
        print(f"typology {res.typology if res.typology else 'none (fallback to flat recognition)'}")
        print(f"time {res.elapsed:.4f}s (stage 1 {res.stage_times[0]:.4f}s, stage 2 {res.stage_times[1]:.4f}s)")
    return EXIT_OK


def cmd_benchmark(args, cfg) -> int:
    ds = D.load(args.dataset)
    reg = _registry(args, cfg)
    try:
        ps, ts = parse_range(args.p_range), parse_range(args.t_range, default_step=10)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    bc = BenchConfig(tuple(ps), tuple(ts), seed=args.seed, k=_parse_k(args.k), outer=args.outer,
                     stage1_mode=args.stage1_mode, max_keypoints=args.max_keypoints, timing=not args.no_timing)
    report = run_benchmark(reg, ds, bc, jobs=max(1, int(args.jobs)))
    out = Path(args.out or "bench_out")
    out.mkdir(parents=True, exist_ok=True)
    (out / "benchmark.json").write_text(report.to_json())
    (out / "grid.csv").write_text(report.to_csv())
    if report.timing is not None:
        (out / "timing.json").write_text(json.dumps(report.timing, sort_keys=True, indent=1) + "\n")
    md = report.to_markdown()
    (out / "report.md").write_text(md)
    sys.stdout.write(md)
    if report.all_failed:
        log.error("every benchmark cell failed")
        return EXIT_EVAL
    return EXIT_OK


def cmd_report(args, cfg) -> int:
    try:
        doc = json.loads(Path(args.json_path).read_text())
        timing = json.loads(Path(args.timing).read_text()) if args.timing else None
        report = BenchmarkReport.from_dict(doc, timing)
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise D.DatasetError(f"cannot read benchmark report: {exc}") from exc
    sys.stdout.write(report.to_csv() if args.format == "csv" else report.to_markdown())
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "eval": cmd_eval,
    "train": cmd_train,
    "recognize": cmd_recognize,
    "benchmark": cmd_benchmark,
    "report": cmd_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help, --version and usage errors
        return int(exc.code or 0)
    try:
        cfg = _apply_config(args)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"typorec: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (D.DatasetError, ImageError, FileNotFoundError) as exc:
        print(f"typorec: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (EvaluationError, ModelBuildError) as exc:
        print(f"typorec: evaluation failed: {exc}", file=sys.stderr)
        return EXIT_EVAL


if __name__ == "__main__":
    sys.exit(main())
