"""Command-line entry point.

Exit codes: 0 success, 1 validation or metric failure, 2 usage error.
Every command that takes ``--out`` also writes ``run.json`` there.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .datamodel import EMOTIONS, Split, Task, split_statistics
from .encoders import read_window_file, stub_text_embed
from .featurestore import (
    InvalidSampleError,
    SchemaVersionError,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    write_feature_matrix,
)
from .metrics import (
    bah_score,
    emi_score,
    parse_smoothing,
    read_bah_track,
    read_emi_file,
    threshold,
    write_bah_predictions,
    write_emi_predictions,
    write_report,
)
from .model import config_hash, load_checkpoint, save_checkpoint
from .training import (
    Evaluator,
    TrainConfig,
    make_assembler,
    predict_bah,
    predict_emi,
    train,
    write_history_csv,
)
from .windowing import WindowConfig

log = logging.getLogger("affectfusion")

MODALITY_CHOICES = ("audio", "vision", "text")


class CommandFailed(Exception):
    """Raised for validation/metric failures (exit code 1)."""


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def write_run_json(out: Path, command: str, config: dict, seed, extra: dict | None = None) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    artifacts = {
        str(p.relative_to(out)): sha256_file(p)
        for p in sorted(out.rglob("*"))
        if p.is_file() and p.name != "run.json"
    }
    record = {
        "command": command,
        "version": __version__,
        "config": config,
        "seed": seed,
        "artifacts": artifacts,
    }
    if extra:
        record.update(extra)
    path = out / "run.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


def _modalities(parser: argparse.ArgumentParser, value: str | None):
    if value is None:
        return None
    mods = tuple(p.strip() for p in value.split(",") if p.strip())
    unknown = [m for m in mods if m not in MODALITY_CHOICES]
    if unknown or not mods:
        parser.error(f"unknown modality {unknown or value!r}; choose from {', '.join(MODALITY_CHOICES)}")
    return mods


def _float_list(parser, value: str):
    try:
        vals = [float(v) for v in value.split(",") if v.strip()]
    except ValueError:
        parser.error(f"expected a comma-separated list of numbers, got {value!r}")
    if not vals:
        parser.error("window list is empty")
    return vals


# -- config resolution --------------------------------------------------------------

_WINDOW_FLAGS = {
    "audio_window": "audio_window_s",
    "text_window": "text_window_s",
    "vision_window": "vision_window_s",
    "vision_frames": "vision_frames",
}
_TRAIN_FLAGS = {
    "epochs": "epochs",
    "lr": "lr0",
    "batch_size": "batch_size",
    "seed": "seed",
    "patience": "patience",
    "stride": "stride_frames",
    "frames_per_video": "frames_per_video",
    "hidden_dim": "hidden_dim",
    "fusion_dim": "fusion_dim",
    "text_dim": "text_dim",
}


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a key-value mapping")
    return data


def resolve_train_config(args, parser, base: dict | None = None) -> TrainConfig:
    data = dict(base or {})
    data.update(_load_config_file(getattr(args, "config", None)))
    window = dict(data.pop("window", {}) or {})
    if getattr(args, "task", None):
        data["task"] = args.task
    mods = _modalities(parser, getattr(args, "modalities", None))
    if mods:
        data["modalities"] = mods
    if getattr(args, "mtl", False):
        data["mtl"] = True
    for flag, key in _TRAIN_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            data[key] = value
    for flag, key in _WINDOW_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None and not isinstance(value, str):
            window[key] = value
    mtl_init = getattr(args, "mtl_init", None)
    if mtl_init:
        pairs = {}
        for part in mtl_init.split(","):
            name, _, val = part.partition("=")
            if name.strip() not in MODALITY_CHOICES:
                parser.error(f"unknown modality in --mtl-init: {name!r}")
            pairs[name.strip()] = float(val)
        data["mtl_init"] = pairs
    if "task" not in data:
        parser.error("--task is required (flag or config file)")
    data["window"] = WindowConfig(**window)
    try:
        return TrainConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        parser.error(str(exc))


# -- commands -----------------------------------------------------------------------------


def cmd_synth(args, parser) -> int:
    extra = _load_config_file(args.config)
    n_train = args.n if args.n is not None else extra.pop("n", 64)
    n_val = args.n_val if args.n_val is not None else extra.pop("n_val", max(1, n_train // 2))
    n_test = args.n_test if args.n_test is not None else extra.pop("n_test", 0)
    counts = {"train": n_train, "val": n_val}
    if n_test:
        counts["test"] = n_test
    kwargs = dict(extra)
    kwargs.update(task=args.task, n_samples=counts)
    if args.seed is not None:
        kwargs["seed"] = args.seed
    if args.signal is not None:
        kwargs["signal_strength"] = args.signal
    if args.duration is not None:
        lo, hi = _float_list(parser, args.duration)[:2]
        kwargs["duration_s"] = (lo, hi)
    elif "duration_s" not in kwargs and args.task == "bah":
        kwargs["duration_s"] = (40.0, 80.0)
    for key in ("duration_s", "latent_period_s"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    try:
        spec = SyntheticSpec(**kwargs)
    except (TypeError, ValueError) as exc:
        parser.error(str(exc))
    out = Path(args.out)
    try:
        manifest = generate_synthetic(spec, out)
    except OSError as exc:
        raise CommandFailed(f"cannot write pack to {out}: {exc}") from exc
    stats = split_statistics(manifest)
    for split, entry in stats.items():
        print(f"{split}: {entry['count']} samples, {entry['hours']:.5f} h")
    config = {k: (list(v) if isinstance(v, tuple) else v) for k, v in kwargs.items()}
    config["task"] = spec.task.value
    write_run_json(out, "synth", config, spec.seed)
    return 0


def cmd_validate(args, parser) -> int:
    try:
        dataset = load_dataset(args.pack)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: cannot load manifest: {exc}")
        return 1
    report = dataset.validate()
    n = len(dataset)
    if n == 0:
        print("warning: 0 samples in manifest")
    for sid, problems in report.items():
        for problem in problems:
            print(f"{sid}: {problem}")
    print(f"{n} samples checked, {len(report)} with violations")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "validation.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
        write_run_json(out, "validate", {"pack": str(args.pack)}, None)
    return 1 if report else 0


def _train_and_write(config: TrainConfig, dataset, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    model, history = train(config, dataset)
    write_history_csv(history, out / "history.csv")
    digest = config_hash(config.to_dict())
    save_checkpoint(model, out / "checkpoint.f32", {"config_hash": digest})
    (out / "config.yaml").write_text(yaml.safe_dump(config.to_dict(), sort_keys=True), encoding="utf-8")
    assembler = make_assembler(config, dataset)
    train_metric = Evaluator(
        assembler, list(dataset.samples(Split.TRAIN)), config.stride_frames, config.eval_batch_size
    ).metric(model)
    summary = {
        "best_epoch": history.best_epoch,
        "best_val_metric": history.best_val_metric,
        "train_metric": train_metric,
        "epochs_run": len(history),
        "config_hash": digest,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary


def _open_pack(path):
    try:
        return load_dataset(path)
    except (OSError, SchemaVersionError, ValueError) as exc:
        raise CommandFailed(f"cannot open pack {path}: {exc}") from exc


def cmd_train(args, parser) -> int:
    config = resolve_train_config(args, parser)
    dataset = _open_pack(args.pack)
    out = Path(args.out)
    try:
        summary = _train_and_write(config, dataset, out)
    except InvalidSampleError as exc:
        raise CommandFailed(str(exc)) from exc
    metric = "mean rho" if config.task is Task.EMI else "weighted F1"
    print(
        f"best epoch {summary['best_epoch']}: val {metric} {summary['best_val_metric']:.4f}, "
        f"train {metric} {summary['train_metric']:.4f}"
    )
    write_run_json(out, "train", config.to_dict(), config.seed, {"pack": str(args.pack), "summary": summary})
    return 0


def cmd_predict(args, parser) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = Path(args.checkpoint)
    if ckpt.is_dir():
        ckpt = ckpt / "checkpoint.f32"
    cfg_path = ckpt.parent / "config.yaml"
    base = yaml.safe_load(cfg_path.read_text(encoding="utf-8")) if cfg_path.exists() else {}
    config = resolve_train_config(args, parser, base)
    model = load_checkpoint(ckpt)
    dataset = _open_pack(args.pack)
    assembler = make_assembler(config, dataset)
    samples = list(dataset.samples(args.split))
    if config.task is Task.EMI:
        preds = predict_emi(model, assembler, samples)
        write_emi_predictions([s.id for s in samples], preds, out / "predictions.csv")
        write_emi_predictions([s.id for s in samples], [s.label.as_array() for s in samples], out / "labels.csv")
    else:
        for s in samples:
            frames, probs = predict_bah(model, assembler, s, config.stride_frames)
            write_bah_predictions(frames, probs, out / f"{s.id}.pred.csv")
            labels = s.label.labels[frames]
            (out / f"{s.id}.labels.csv").write_text(
                "".join(f"{f},{int(v)}\n" for f, v in zip(frames, labels)), encoding="utf-8"
            )
    write_run_json(out, "predict", config.to_dict(), config.seed, {"checkpoint": str(ckpt), "split": args.split})
    return 0


def _align_bah_file(pred_path, label_path):
    pf, pv = read_bah_track(pred_path)
    lf, lv = read_bah_track(label_path)
    if pf.shape != lf.shape or not np.array_equal(pf, lf):
        raise CommandFailed(
            f"prediction track ({pf.shape[0]} frames) and label track ({lf.shape[0]} frames) do not align"
        )
    return pf, pv, lv


def _align_bah(pred_path, label_path):
    """Single track pair, or directories of ``<id>.pred.csv`` / ``<id>.labels.csv`` pooled over videos."""
    pred_path, label_path = Path(pred_path), Path(label_path)
    if not pred_path.is_dir():
        return _align_bah_file(pred_path, label_path)
    pairs = []
    for pfile in sorted(pred_path.glob("*.pred.csv")):
        lfile = label_path / (pfile.name[: -len(".pred.csv")] + ".labels.csv")
        if not lfile.exists():
            raise CommandFailed(f"no label track {lfile.name} for {pfile.name}")
        pairs.append(_align_bah_file(pfile, lfile))
    if not pairs:
        raise CommandFailed(f"no *.pred.csv files in {pred_path}")
    return tuple(np.concatenate(parts) for parts in zip(*pairs))


def _align_emi(pred_path, label_path):
    pids, preds = read_emi_file(pred_path)
    lids, labels = read_emi_file(label_path)
    if len(pids) != len(lids):
        raise CommandFailed(f"{len(pids)} predictions vs {len(lids)} labels")
    index = {sid: i for i, sid in enumerate(lids)}
    missing = [sid for sid in pids if sid not in index]
    if missing:
        raise CommandFailed(f"no labels for samples {missing[:5]}")
    return pids, preds, labels[[index[sid] for sid in pids]]


def cmd_eval(args, parser) -> int:
    try:
        smoother = parse_smoothing(args.smooth)
    except ValueError as exc:
        parser.error(str(exc))
    out = Path(args.out)
    if args.task == "emi":
        if args.smooth:
            parser.error("--smooth applies to BAH frame tracks only")
        _, preds, labels = _align_emi(args.pred, args.labels)
        try:
            report = emi_score(preds, labels)
        except ValueError as exc:
            raise CommandFailed(str(exc)) from exc
        print(f"mean rho {report.rho_mean:.6f} over {report.n_samples} samples")
    else:
        _, probs, labels = _align_bah(args.pred, args.labels)
        binary = threshold(probs, args.tau)
        if smoother is not None:
            binary = smoother(binary)
        try:
            report = bah_score(binary, labels.astype(np.int64))
        except ValueError as exc:
            raise CommandFailed(str(exc)) from exc
        print(f"weighted F1 {report.f1_weighted:.6f} (F1_0 {report.f1_0:.6f}, F1_1 {report.f1_1:.6f})")
    write_report(report, out)
    config = {"task": args.task, "pred": str(args.pred), "labels": str(args.labels), "smooth": args.smooth, "tau": args.tau}
    write_run_json(out, "eval", config, None)
    return 0


def cmd_ablate_chunks(args, parser) -> int:
    if args.task != "bah":
        parser.error("chunk ablation is defined for --task bah")
    sizes = _float_list(parser, args.text_window)
    if args.modalities is None:
        args.modalities = "text"
    base = resolve_train_config(args, parser)
    dataset = _open_pack(args.pack)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for size in sizes:
        window = WindowConfig(**{**base.window.__dict__, "text_window_s": size})
        config = TrainConfig.from_dict({**base.to_dict(), "window": window})
        run_dir = out / f"window_{size:g}"
        summary = _train_and_write(config, dataset, run_dir)
        rows.append((size, summary["best_val_metric"]))
        print(f"text window {size:g} s: F1_val {summary['best_val_metric']:.4f}")
    lines = ["window_s,f1_val\n"] + [f"{s:g},{f!r}\n" for s, f in rows]
    (out / "ablation.csv").write_text("".join(lines), encoding="utf-8")
    write_run_json(out, "ablate-chunks", {**base.to_dict(), "text_windows": sizes}, base.seed)
    return 0


def cmd_export_plots(args, parser) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.task == "emi":
        _, preds, labels = _align_emi(args.pred, args.labels)
        report = emi_score(preds, labels)
        lines = ["emotion,mean_pred,mean_label,rho\n"]
        for k, name in enumerate(EMOTIONS):
            lines.append(f"{name},{preds[:, k].mean()!r},{labels[:, k].mean()!r},{report.rho_per_emotion[k]!r}\n")
        (out / "emotion_bars.csv").write_text("".join(lines), encoding="utf-8")
    else:
        frames, probs, labels = _align_bah(args.pred, args.labels)
        binary = threshold(probs, args.tau)
        smoother = parse_smoothing(args.smooth)
        smoothed = smoother(binary) if smoother else binary
        lines = ["frame_index,label,probability,prediction,smoothed\n"]
        for f, y, p, b, s in zip(frames, labels, probs, binary, smoothed):
            lines.append(f"{int(f)},{int(y)},{p!r},{int(b)},{int(s)}\n")
        (out / "frame_curve.csv").write_text("".join(lines), encoding="utf-8")
    write_run_json(out, "export-plots", {"task": args.task, "smooth": args.smooth, "tau": args.tau}, None)
    return 0


def cmd_adapter(args, parser) -> int:
    tokens = read_window_file(getattr(args, "in"))
    vec = stub_text_embed(tokens, args.dim, args.seed)
    write_feature_matrix(vec.astype(np.float32), args.out, "text", None)
    return 0


# -- parser ----------------------------------------------------------------------------------


def _add_train_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML file with training options; flags override it")
    p.add_argument("--modalities", help="comma-separated subset of audio,vision,text")
    p.add_argument("--mtl", action="store_true", help="uncertainty-weighted multi-task fusion")
    p.add_argument("--mtl-init", help="initial log-variances, e.g. text=-1.0986")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--stride", type=int, help="BAH evaluation stride in label frames")
    p.add_argument("--frames-per-video", type=int, help="BAH training frames per video per epoch")
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--fusion-dim", type=int)
    p.add_argument("--text-dim", type=int)
    p.add_argument("--audio-window", type=float)
    p.add_argument("--vision-window", type=float)
    p.add_argument("--vision-frames", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="affectfusion", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic planted-signal pack")
    p.add_argument("--task", choices=("emi", "bah"), required=True)
    p.add_argument("--n", type=int, help="training samples (default 64)")
    p.add_argument("--n-val", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--signal", type=float, help="signal strength in [0, 1]")
    p.add_argument("--duration", help="min,max sample duration in seconds")
    p.add_argument("--config", help="YAML file with generator options")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("validate", help="check every sample of a pack")
    p.add_argument("--pack", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("train", help="train a model on a pack")
    p.add_argument("--task", choices=("emi", "bah"))
    p.add_argument("--pack", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--text-window", type=float)
    _add_train_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write prediction files from a checkpoint")
    p.add_argument("--task", choices=("emi", "bah"))
    p.add_argument("--checkpoint", required=True, help="checkpoint.f32 or the training output dir")
    p.add_argument("--pack", required=True)
    p.add_argument("--split", default="val", choices=[s.value for s in Split])
    p.add_argument("--out", required=True)
    p.add_argument("--text-window", type=float)
    _add_train_options(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score prediction files")
    p.add_argument("--task", choices=("emi", "bah"), required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--smooth", help="median:W or minrun:L, applied before scoring")
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate-chunks", help="F1_val for a list of text window sizes")
    p.add_argument("--task", choices=("emi", "bah"), default="bah")
    p.add_argument("--text-window", required=True, help="comma-separated seconds, e.g. 5,15,20,25,35")
    p.add_argument("--pack", required=True)
    p.add_argument("--out", required=True)
    _add_train_options(p)
    p.set_defaults(func=cmd_ablate_chunks)

    p = sub.add_parser("export-plots", help="CSV data behind the modality bars / frame curves")
    p.add_argument("--task", choices=("emi", "bah"), required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--smooth")
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_plots)

    p = sub.add_parser("adapter", help="stub text encoder following the adapter convention")
    p.add_argument("--in", required=True, help="window file, one token per line")
    p.add_argument("--out", required=True, help="output .f32 vector")
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_adapter)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args, parser)
    except CommandFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
