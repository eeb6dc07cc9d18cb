"""Single-binary command line: every capability behind one entry point.

Subcommands share a JSON configuration file (``--config`` flag or the
``SCARECROW_CONFIG`` environment variable); individual flags override
config values. Exit codes: 0 success, 1 operational failure, 2 usage
error.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .alerts import make_sink
from .backbone import (
    WEIGHTS_VERSION,
    Detector,
    DetectorScript,
    Image,
    NetDetector,
    StubDetector,
    load_weights,
    synthesize_network,
)
from .dataset import Dataset, SplitSpec, serialize_voc, validate_dataset
from .dataset import split as split_dataset
from .evaluation import HarnessConfig, pr_curve_rows, run_harness
from .geometry import DEFAULT_VARIANCES, AnchorConfig, generate_anchors
from .monitor import PipelineConfig, PolicyConfig, read_ppm, run_pipeline

CONFIG_ENV = "SCARECROW_CONFIG"

DEFAULT_CLASS_NAMES = ("cat", "cheetah", "lion")


class ConfigError(ValueError):
    """Raised with every configuration violation found, newline-joined."""


@dataclass(frozen=True)
class GlobalConfig:
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    variances: tuple[float, float] = DEFAULT_VARIANCES
    weights: str | None = None
    stub_script: str | None = None
    policy_path: str | None = None
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    class_names: tuple[str, ...] = DEFAULT_CLASS_NAMES
    score_threshold: float = 0.5
    iou_threshold: float = 0.5
    nms_iou_threshold: float = 0.45
    top_k: int = 100


def load_config(path: str | Path) -> GlobalConfig:
    """Parse and validate the shared JSON config, reporting every problem."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"config parse error at line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")

    problems: list[str] = []
    base = Path(path).parent

    anchors = AnchorConfig()
    if "anchors" in data:
        try:
            anchors = AnchorConfig(**data["anchors"])
        except (TypeError, ValueError) as exc:
            problems.append(f"anchors: {exc}")

    variances = DEFAULT_VARIANCES
    if "variances" in data:
        v = data["variances"]
        if not (isinstance(v, list) and len(v) == 2 and all(isinstance(x, (int, float)) and x > 0 for x in v)):
            problems.append(f"variances must be two positive numbers, got {v!r}")
        else:
            variances = (float(v[0]), float(v[1]))

    def resolve(key: str) -> str | None:
        value = data.get(key)
        if value is None:
            return None
        p = Path(value)
        if not p.is_absolute():
            p = base / p
        if not p.exists():
            problems.append(f"{key}: file {p} does not exist")
            return None
        return str(p)

    weights = resolve("weights")
    stub_script = resolve("stub_script")
    policy_path = resolve("policy")

    policy = PolicyConfig()
    if policy_path is not None:
        try:
            policy = PolicyConfig.from_json(Path(policy_path).read_text())
        except ValueError as exc:
            problems.append(f"policy: {exc}")

    class_names = DEFAULT_CLASS_NAMES
    if "class_names" in data:
        names = data["class_names"]
        if not (isinstance(names, list) and names and all(isinstance(n, str) and n for n in names)):
            problems.append(f"class_names must be a non-empty list of names, got {names!r}")
        else:
            class_names = tuple(names)

    def bounded(key: str, default: float, low: float, high: float) -> float:
        value = data.get(key, default)
        if not isinstance(value, (int, float)) or not low <= value <= high:
            problems.append(f"{key} must be in [{low}, {high}], got {value!r}")
            return default
        return float(value)

    score_threshold = bounded("score_threshold", 0.5, 0.0, 1.0)
    iou_threshold = bounded("iou_threshold", 0.5, 0.0, 1.0)
    nms_iou_threshold = bounded("nms_iou_threshold", 0.45, 0.0, 1.0)
    top_k = data.get("top_k", 100)
    if not isinstance(top_k, int) or top_k < 1:
        problems.append(f"top_k must be a positive integer, got {top_k!r}")
        top_k = 100

    if problems:
        raise ConfigError("\n".join(problems))
    return GlobalConfig(
        anchors=anchors,
        variances=variances,
        weights=weights,
        stub_script=stub_script,
        policy_path=policy_path,
        policy=policy,
        class_names=class_names,
        score_threshold=score_threshold,
        iou_threshold=iou_threshold,
        nms_iou_threshold=nms_iou_threshold,
        top_k=top_k,
    )


def _build_detector(cfg: GlobalConfig, weights: str | None, stub: str | None) -> Detector:
    weights = weights or cfg.weights
    stub = stub or cfg.stub_script
    if weights and stub:
        raise ValueError("choose one of --weights or --stub, not both")
    if stub:
        return StubDetector(DetectorScript.from_json(Path(stub).read_text()))
    if weights:
        return NetDetector(
            load_weights(weights),
            class_names=cfg.class_names,
            anchor_cfg=cfg.anchors,
            variances=cfg.variances,
            score_threshold=cfg.score_threshold,
            nms_iou_threshold=cfg.nms_iou_threshold,
            top_k=cfg.top_k,
        )
    raise ValueError("no detector configured: pass --weights or --stub (or set them in the config)")


def _cmd_priors(cfg: GlobalConfig, args: argparse.Namespace) -> int:
    anchors = generate_anchors(cfg.anchors)
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        out.write("layer,row,col,ratio_index,cx,cy,w,h\n")
        for idx in range(len(anchors)):
            layer, row, col, ratio = anchors.cell_of(idx)
            cx, cy, w, h = anchors.boxes[idx]
            out.write(f"{layer},{row},{col},{ratio},{cx:.9g},{cy:.9g},{w:.9g},{h:.9g}\n")
    finally:
        if args.out:
            out.close()
    return 0


def _cmd_validate(cfg: GlobalConfig, args: argparse.Namespace) -> int:
    dataset = Dataset.load(args.dataset)
    findings = validate_dataset(dataset, min_per_class=args.min_per_class)
    for finding in findings:
        print(finding)
    return 1 if any(f.level == "error" for f in findings) else 0


def _cmd_split(cfg: GlobalConfig, args: argparse.Namespace) -> int:
    dataset = Dataset.load(args.dataset)
    train, test = split_dataset(dataset, SplitSpec(train_fraction=args.train_frac, seed=args.seed))
    src_images = Path(args.dataset) / "images"
    for name, part in (("train", train), ("test", test)):
        ann_dir = Path(args.out) / name / "annotations"
        ann_dir.mkdir(parents=True, exist_ok=True)
        img_dir = Path(args.out) / name / "images"
        for img in part.images:
            stem = Path(img.filename).stem
            (ann_dir / f"{stem}.xml").write_text(serialize_voc(img))
            src = src_images / img.filename
            if src.exists():
                img_dir.mkdir(parents=True, exist_ok=True)
                shutil.copyfile(src, img_dir / img.filename)
    print(f"train={len(train.images)} test={len(test.images)}")
    return 0


def _cmd_detect(cfg: GlobalConfig, args: argparse.Namespace) -> int:
    detector = _build_detector(cfg, args.weights, args.stub)
    image = read_ppm(Path(args.image).read_bytes())
    for det in detector.detect(image, args.frame_index):
        print(
            json.dumps(
                {"label": det.label, "score": det.score, "box": list(det.box.as_tuple())}
            )
        )
    return 0


def _cmd_eval(cfg: GlobalConfig, args: argparse.Namespace) -> int:
    detector = _build_detector(cfg, args.weights, args.stub)
    dataset = Dataset.load(args.dataset)
    harness = HarnessConfig(
        steps=args.steps,
        iou_threshold=args.iou if args.iou is not None else cfg.iou_threshold,
        score_threshold=args.score if args.score is not None else cfg.score_threshold,
    )

    image_root = Path(args.dataset) / "images"

    def load_image(ann) -> Image | None:
        for candidate in (image_root / ann.filename, image_root / (Path(ann.filename).stem + ".ppm")):
            if candidate.exists():
                return read_ppm(candidate.read_bytes())
        return None

    outcomes: list = []
    log = open(args.log, "w") if args.log else None
    try:
        metrics = run_harness(
            harness,
            dataset=dataset,
            detector=detector,
            image_loader=load_image,
            log=log,
            outcomes_out=outcomes,
        )
    finally:
        if log:
            log.close()
    print(metrics.as_text())
    if args.pr_csv:
        with open(args.pr_csv, "w") as f:
            f.write("class,threshold,precision,recall\n")
            for name, threshold, precision, recall in pr_curve_rows(outcomes, dataset.class_names):
                f.write(f"{name},{threshold:.9g},{precision:.9g},{recall:.9g}\n")
    return 0


def _cmd_monitor(cfg: GlobalConfig, args: argparse.Namespace) -> int:
    detector = _build_detector(cfg, args.weights, args.stub)
    policy = cfg.policy
    if args.policy:
        policy = PolicyConfig.from_json(Path(args.policy).read_text())
    sink = make_sink(args.sink, spool_path=args.spool) if args.sink else None
    result = run_pipeline(
        PipelineConfig(
            source=args.source,
            detector=detector,
            policy=policy,
            sink=sink,
            log=args.log,
            fps=args.fps,
            queue_depth=args.queue_depth,
        )
    )
    print(
        f"frames={result.frames_processed} dropped={result.frames_dropped} "
        f"opened={result.events_opened} closed={result.events_closed} "
        f"commands={result.commands_issued} alerts={result.alerts_dispatched}"
    )
    return result.exit_code


def _cmd_bench(cfg: GlobalConfig, args: argparse.Namespace) -> int:
    try:
        width, height = (int(part) for part in args.size.lower().split("x"))
    except ValueError:
        raise ValueError(f"--size must look like 160x160, got {args.size!r}") from None
    detector = NetDetector(
        synthesize_network(num_classes=len(cfg.class_names), seed=args.seed),
        class_names=cfg.class_names,
        anchor_cfg=cfg.anchors,
        variances=cfg.variances,
        score_threshold=cfg.score_threshold,
        nms_iou_threshold=cfg.nms_iou_threshold,
        top_k=cfg.top_k,
    )
    rng = np.random.default_rng(args.seed)
    frames = [Image(pixels=rng.random((height, width, 3))) for _ in range(min(args.frames, 8))]

    detector.detect(frames[0], 0)  # warm cache before timing
    latencies = []
    start = time.perf_counter()
    for i in range(args.frames):
        t0 = time.perf_counter()
        detector.detect(frames[i % len(frames)], i)
        latencies.append(time.perf_counter() - t0)
    elapsed = time.perf_counter() - start

    latencies_ms = np.sort(np.array(latencies) * 1000.0)
    p50 = float(np.percentile(latencies_ms, 50))
    p99 = float(np.percentile(latencies_ms, 99))
    print(
        f"frames={args.frames} fps={args.frames / elapsed:.2f} "
        f"p50_ms={p50:.2f} p99_ms={p99:.2f}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scarecrow",
        description="Animal-detection monitoring pipeline tools",
    )
    parser.add_argument(
        "--version",
        action="version",
        version=f"scarecrow {__version__} (weights format SCRW v{WEIGHTS_VERSION})",
    )
    parser.add_argument("--config", help="path to the shared JSON config")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("priors", help="dump the anchor set as CSV")
    p.add_argument("--out", help="write CSV here instead of stdout")

    p = sub.add_parser("validate", help="validate a dataset directory")
    p.add_argument("dataset")
    p.add_argument("--min-per-class", type=int, default=50)

    p = sub.add_parser("split", help="deterministic train/test split")
    p.add_argument("dataset")
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("detect", help="run the detector on one PPM image")
    p.add_argument("image")
    p.add_argument("--weights")
    p.add_argument("--stub")
    p.add_argument("--frame-index", type=int, default=0)

    p = sub.add_parser("eval", help="run the stepped evaluation harness")
    p.add_argument("--dataset", required=True)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--iou", type=float)
    p.add_argument("--score", type=float)
    p.add_argument("--weights")
    p.add_argument("--stub")
    p.add_argument("--pr-csv", help="write per-class precision-recall CSV here")
    p.add_argument("--log", help="write per-step log lines here")

    p = sub.add_parser("monitor", help="run the monitoring pipeline")
    p.add_argument("--source", required=True, help="PPM directory or manifest file")
    p.add_argument("--policy", help="policy JSON (defaults to built-in policy)")
    p.add_argument("--sink", help="alert sink: 'stdout', a file path, or an http(s) URL")
    p.add_argument("--spool", default="alert_spool.jsonl", help="webhook spool path")
    p.add_argument("--fps", type=float, default=10.0)
    p.add_argument("--log", help="JSONL event log path")
    p.add_argument("--queue-depth", type=int, default=8)
    p.add_argument("--weights")
    p.add_argument("--stub")

    p = sub.add_parser("bench", help="measure end-to-end detector throughput")
    p.add_argument("--frames", type=int, default=50)
    p.add_argument("--size", default="160x160")
    p.add_argument("--seed", type=int, default=0)

    return parser


_COMMANDS = {
    "priors": _cmd_priors,
    "validate": _cmd_validate,
    "split": _cmd_split,
    "detect": _cmd_detect,
    "eval": _cmd_eval,
    "monitor": _cmd_monitor,
    "bench": _cmd_bench,
}


def run_command(argv: list[str] | None = None) -> int:
    """Dispatch a parsed command line; returns the process exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    config_path = args.config or os.environ.get(CONFIG_ENV)
    try:
        cfg = load_config(config_path) if config_path else GlobalConfig()
        return _COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        for line in str(exc).splitlines():
            print(f"error: {line}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main(argv: list[str] | None = None) -> int:
    return run_command(argv)


if __name__ == "__main__":
    sys.exit(main())
