"""Command-line entry point: ``duoclr synth | pretrain | evalseg | metrics``.

Exit codes: 0 success, 2 usage error, 3 validation error, 4 runtime failure.
Every command writes a resolved config (all defaults filled in) next to its
outputs; feeding that file back through ``--config`` reproduces the outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from .data import DataError, load_dataset, save_sequence, synth_trimmed, synth_untrimmed, write_manifest
from .encoder import EncoderConfig, load_checkpoint, parameter_digest, read_checkpoint_header, save_checkpoint
from .metrics import multiclass_report, multilabel_report, write_report
from .pretrain import PretrainConfig, pretrain, train_baseline_recognition
from .segmentation import read_prediction_dump, segment_forward, train_head, write_prediction_dump

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3, 4
MANIFEST = "manifest.json"


class ConfigError(ValueError):
    """Invalid user input; the message names the offending key path."""


@dataclasses.dataclass
class EvaluationConfig:
    epochs: int = 20
    learning_rate: float = 0.05
    momentum: float = 0.9


# -- config handling ----------------------------------------------------------------

def _check_type(path: str, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, (list, tuple)):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{path}: expected {type(default).__name__}, got {json.dumps(value)}")


def _build_section(name: str, cls, doc: dict):
    if not isinstance(doc, dict):
        raise ConfigError(f"{name}: expected an object")
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    for key, value in doc.items():
        if key not in known:
            raise ConfigError(f"{name}.{key}: unknown key")
        _check_type(f"{name}.{key}", value, getattr(defaults, key))
    try:
        return cls(**doc)
    except (ValueError, TypeError) as exc:
        msg = str(exc)
        raise ConfigError(msg if msg.startswith(name + ".") else f"{name}: {msg}") from None


SECTIONS = {"encoder": EncoderConfig, "pretrain": PretrainConfig, "evaluation": EvaluationConfig}


def load_run_config(path) -> dict:
    """Parse a run config into ``{"encoder", "pretrain", "evaluation"}`` dataclasses.

    Unknown sections or keys are rejected. A ``run`` section (written into
    resolved configs to record flags and paths) is accepted and ignored.
    """
    doc = {}
    if path is not None:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config: expected an object")
    for key in doc:
        if key not in SECTIONS and key != "run":
            raise ConfigError(f"{key}: unknown section")
    return {name: _build_section(name, cls, doc.get(name, {})) for name, cls in SECTIONS.items()}


def write_resolved_config(path, sections: dict, run: dict) -> None:
    doc = {name: dataclasses.asdict(obj) for name, obj in sections.items()}
    doc["run"] = run
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _manifest_path(data: str) -> Path:
    p = Path(data)
    return p / MANIFEST if p.is_dir() else p


def _sidecar(path, suffix: str) -> Path:
    p = Path(path)
    return p.with_name(p.stem + suffix)


# -- commands -------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise ConfigError(f"--out: {out} exists and is not empty (use --force)")
        shutil.rmtree(out)
    if args.classes < 1 or args.clips_per_class < 0 or args.untrimmed < 0:
        raise ConfigError("--classes must be >= 1, counts must be >= 0")
    if args.actions_per_video < 1:
        raise ConfigError("--actions-per-video must be >= 1")
    if args.actions_per_video > args.classes and args.task == "multiclass":
        raise ConfigError("--actions-per-video exceeds --classes")
    if not 0 <= args.test_fraction <= 1:
        raise ConfigError("--test-fraction must lie in [0, 1]")
    (out / "clips").mkdir(parents=True)
    (out / "videos").mkdir()
    entries = []
    next_id = 0
    for k in range(args.classes):
        for i in range(args.clips_per_class):
            clip = synth_trimmed(k, args.frames, args.noise, camera_seed=[args.seed, k, i],
                                 motion_seed=[args.seed, k, i, 7], clip_id=next_id)
            rel = f"clips/clip_{next_id:06d}.skl"
            save_sequence(clip.frames, out / rel)
            entries.append({"id": next_id, "path": rel, "kind": "trimmed", "label": k})
            next_id += 1
    rng = np.random.default_rng([0x5E7, args.seed])
    n_test = round(args.test_fraction * args.untrimmed)
    for n in range(args.untrimmed):
        classes = rng.choice(args.classes, size=args.actions_per_video,
                             replace=args.actions_per_video > args.classes)
        split = "train" if n < args.untrimmed - n_test else "test"
        video = synth_untrimmed([int(c) for c in classes], args.frames, args.noise,
                                seed=int(rng.integers(2**31)), task_kind=args.task,
                                num_classes=args.classes, video_id=next_id, split=split)
        rel = f"videos/video_{next_id:06d}.skl"
        save_sequence(video.frames, out / rel)
        entries.append({"id": next_id, "path": rel, "kind": "untrimmed", "task_kind": args.task,
                        "split": split,
                        "segments": [{"class": s.action_class, "start": s.start, "end": s.end}
                                     for s in video.segments]})
        next_id += 1
    write_manifest(out / MANIFEST, args.classes, entries)
    run = {k: v for k, v in vars(args).items() if k not in ("func", "force", "out")}
    with open(out / "synth_config.json", "w") as fh:
        json.dump(run, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"wrote {args.classes * args.clips_per_class} clips and {args.untrimmed} videos to {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    sections = load_run_config(args.config)
    dataset = load_dataset(_manifest_path(args.data))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = _sidecar(out, ".log.jsonl")
    pcfg, ecfg = sections["pretrain"], sections["encoder"]
    if args.baseline:
        result = train_baseline_recognition(dataset, ecfg, epochs=pcfg.epochs, lr=pcfg.learning_rate,
                                            seed=pcfg.seed, batch_size=pcfg.batch_size,
                                            log_path=log_path)
        save_checkpoint(result.encoder, out, extra={"method": "baseline-recognition",
                                                    "pretrain": dataclasses.asdict(pcfg)})
        summary = f"final train accuracy {result.train_accuracy[-1]:.4f}" if result.train_accuracy else ""
    else:
        if not dataset.clips:
            raise ConfigError("--data: the manifest holds no trimmed clips")
        result = pretrain(dataset, pcfg, ecfg, checkpoint_path=out, log_path=log_path)
        summary = f"final mean loss {result.log[-1]['mean_total']:.4f}" if result.log else ""
    write_resolved_config(_sidecar(out, ".config.json"), sections,
                          {"command": "pretrain", "baseline": bool(args.baseline)})
    print(f"wrote {out} {summary}".rstrip())
    return EXIT_OK


def _check_encoder_compat(requested: EncoderConfig, header: dict):
    stored = header["config"]
    for key, value in dataclasses.asdict(requested).items():
        if key in stored and stored[key] != value:
            raise ConfigError(f"encoder.{key}: checkpoint has {json.dumps(stored[key])}, "
                              f"config has {json.dumps(value)}")


def cmd_evalseg(args) -> int:
    sections = load_run_config(args.config)
    header = read_checkpoint_header(args.ckpt)
    if args.config is not None:
        with open(args.config) as fh:
            if "encoder" in json.load(fh):
                _check_encoder_compat(sections["encoder"], header)
    sections["encoder"] = EncoderConfig(**header["config"])
    ecfg = sections["evaluation"]
    if not 0 < args.fraction <= 1:
        raise ConfigError("--fraction must lie in (0, 1]")
    dataset = load_dataset(_manifest_path(args.data))
    train = [v for v in dataset.split("train") if v.task_kind == args.task]
    test = [v for v in dataset.split("test") if v.task_kind == args.task]
    if not train or not test:
        raise ConfigError(f"--data: need {args.task} videos in both train and test splits")
    encoder = load_checkpoint(args.ckpt)
    result = train_head(encoder, train, args.mode, args.task, dataset.num_classes,
                        fraction=args.fraction, epochs=ecfg.epochs, seed=args.seed,
                        lr=ecfg.learning_rate, momentum=ecfg.momentum)
    preds = {v.video_id: segment_forward(result.encoder, result.head, v) for v in test}
    videos = {v.video_id: v for v in test}
    scores = {vid: p.scores for vid, p in preds.items()}
    report = (multiclass_report if args.task == "multiclass" else multilabel_report)(
        scores, videos, dataset.num_classes)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_prediction_dump(_sidecar(out, ".predictions.jsonl"), preds)
    write_report(out, report, split="test", extra={
        "encoder_sha256": parameter_digest(result.encoder),
        "mode": args.mode, "task": args.task, "fraction": args.fraction,
        "train_videos": len(result.videos_used), "test_videos": len(test)})
    write_resolved_config(_sidecar(out, ".config.json"), sections, {
        "command": "evalseg", "mode": args.mode, "task": args.task,
        "fraction": args.fraction, "seed": args.seed})
    print(" ".join(f"{k}={v:.4f}" for k, v in report.items()))
    return EXIT_OK


def cmd_metrics(args) -> int:
    dataset = load_dataset(args.gt)
    preds = read_prediction_dump(args.pred)
    if not preds:
        raise ConfigError(f"--pred: {args.pred} holds no predictions")
    videos = {v.video_id: v for v in dataset.split(args.split) if v.task_kind == args.task}
    missing = sorted(set(videos) - set(preds))
    extra = sorted(set(preds) - set(videos))
    if missing or extra:
        raise ConfigError(f"--pred: video ids missing from predictions {missing}, "
                          f"unknown to the reference {extra}")
    report = (multiclass_report if args.task == "multiclass" else multilabel_report)(
        preds, videos, dataset.num_classes)
    write_report(args.out, report, split=args.split)
    print(" ".join(f"{k}={v:.4f}" for k, v in report.items()))
    return EXIT_OK


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="duoclr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic skeleton dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--clips-per-class", type=int, default=40)
    p.add_argument("--frames", type=int, default=48)
    p.add_argument("--untrimmed", type=int, default=100)
    p.add_argument("--actions-per-video", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--task", choices=("multiclass", "multilabel"), default="multiclass")
    p.add_argument("--test-fraction", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="pretrain an encoder (DuoCLR or --baseline)")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--baseline", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("evalseg", help="train and evaluate a segmentation head")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mode", choices=("linear", "finetune"), default="linear")
    p.add_argument("--task", choices=("multiclass", "multilabel"), default="multiclass")
    p.add_argument("--fraction", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evalseg)

    p = sub.add_parser("metrics", help="recompute metrics from a prediction dump")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--task", choices=("multiclass", "multilabel"), default="multiclass")
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to an exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
