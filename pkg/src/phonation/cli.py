"""Command-line entry point: ``phonation {synth,preprocess,train,eval,gradcam}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .audio import AudioError, read_wav, write_wav
from .checkpoint import CheckpointRecord, load_checkpoint, save_checkpoint
from .dataset import (
    PhonationMode,
    SynthConfig,
    load_manifest,
    load_segments,
    make_folds,
    save_segments,
    segment_for_test,
    synthesize_dataset,
    write_manifest,
)
from .gradcam import export_image, grad_cam, heatmap_filename, overlay_and_upsample
from .model import LAYER_NAMES, NetworkConfig
from .pipeline import PreprocessConfig, build_segment_sets, spectrogram_for, stratified_test_split
from .training import TrainConfig, cross_validate, evaluate, metrics_from_confusion

log = logging.getLogger("phonation")

RUN_CONFIG_NAME = "run_config.json"


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# run configuration


@dataclasses.dataclass
class RunConfig:
    """Fully resolved settings for one command, written next to its outputs."""

    command: str
    seed: int = 0
    paths: dict = dataclasses.field(default_factory=dict)
    synth: dict = dataclasses.field(default_factory=dict)
    preprocess: dict = dataclasses.field(default_factory=dict)
    network: dict = dataclasses.field(default_factory=dict)
    train: dict = dataclasses.field(default_factory=dict)
    options: dict = dataclasses.field(default_factory=dict)

    def write(self, directory) -> Path:
        path = Path(directory) / RUN_CONFIG_NAME
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return data


def _resolve_seed(flag, file_cfg: dict) -> int:
    if flag is not None:
        return flag
    if "seed" in file_cfg:
        return int(file_cfg["seed"])
    env = os.environ.get("PHONATION_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"PHONATION_SEED must be an integer, got {env!r}") from None
    return 0


def _option(file_cfg: dict, key: str, default):
    """Top-level key, else the ``options`` block of a written RunConfig."""
    if key in file_cfg:
        return file_cfg[key]
    return file_cfg.get("options", {}).get(key, default)


def _merge(defaults: dict, *layers: dict) -> dict:
    out = dict(defaults)
    for layer in layers:
        for k, v in layer.items():
            if v is None:
                continue
            if k not in out:
                raise UsageError(f"unknown setting {k!r}")
            out[k] = v
    return out


def _synth_defaults() -> dict:
    base = SynthConfig()
    return {f.name: getattr(base, f.name) for f in dataclasses.fields(SynthConfig) if f.name != "voices"}


def _preprocess_config(d: dict) -> PreprocessConfig:
    return PreprocessConfig(**d)


def _network_config(d: dict) -> NetworkConfig:
    return NetworkConfig.from_dict(d)


# --------------------------------------------------------------------------
# argument types


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {value}")
    return value


def _ratio(text: str) -> float:
    value = float(text)
    if not 0 <= value < 1:
        raise argparse.ArgumentTypeError("ratio must lie in [0, 1)")
    return value


def _range(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO:HI, got {text!r}") from None
    if not 0 < lo < hi:
        raise argparse.ArgumentTypeError("range needs 0 < LO < HI")
    return lo, hi


def _mode(text: str) -> PhonationMode:
    try:
        return PhonationMode.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _layer(text: str) -> str:
    if text not in LAYER_NAMES:
        raise argparse.ArgumentTypeError(f"layer must be one of {', '.join(LAYER_NAMES)}")
    return text


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror or exc}") from None
    if not os.access(out, os.W_OK):
        raise OSError(f"output directory {out} is not writable")
    return out


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    file_cfg = _load_config_file(args.config)
    seed = _resolve_seed(args.seed, file_cfg)
    synth = _merge(_synth_defaults(), file_cfg.get("synth", {}),
                   {"n_clips": args.clips, "duration_range_s": args.duration_range})
    synth["seed"] = seed
    synth["duration_range_s"] = tuple(synth["duration_range_s"])
    synth["f0_range_hz"] = tuple(synth["f0_range_hz"])
    if synth["n_clips"] < 1:
        raise UsageError("--clips must be at least 1")
    out = _out_dir(args.out)

    items = synthesize_dataset(SynthConfig(**synth))
    for clip, label in items:
        write_wav(out / label.source, clip)
    write_manifest(out / "manifest.csv", [label for _, label in items])
    RunConfig("synth", seed, {"out": str(out)}, synth=synth).write(out)
    print(f"wrote {len(items)} clips and manifest.csv to {out}")
    return 0


def cmd_preprocess(args) -> int:
    file_cfg = _load_config_file(args.config)
    seed = _resolve_seed(args.seed, file_cfg)
    pre = _merge(dataclasses.asdict(PreprocessConfig()), file_cfg.get("preprocess", {}))
    config = _preprocess_config(pre)
    ratio = args.test_split if args.test_split is not None else float(_option(file_cfg, "test_split", 0.2))
    manifest = Path(args.manifest)
    if not manifest.is_file():
        raise FileNotFoundError(f"manifest {manifest} not found")
    clips = load_manifest(manifest)
    if not clips:
        raise UsageError(f"manifest {manifest} lists no clips")
    out = _out_dir(args.out)

    test_ids = stratified_test_split(clips, ratio, seed)
    items = []
    missing = []
    for label in clips:
        path = manifest.parent / label.source
        try:
            items.append((read_wav(path), label))
        except FileNotFoundError:
            log.warning("missing audio file %s", path)
            missing.append(label.source)
        except (AudioError, ValueError) as exc:
            log.warning("cannot decode %s: %s", path, exc)
            missing.append(label.source)
    train, test, summary = build_segment_sets(items, test_ids, config)
    summary.skipped = missing + summary.skipped

    save_segments(out / "train.seg", train)
    save_segments(out / "test.seg", test)
    (out / "summary.txt").write_text(summary.format() + "\n")
    RunConfig("preprocess", seed, {"manifest": str(manifest), "out": str(out)}, preprocess=pre,
              options={"test_split": ratio}).write(out)
    print(summary.format())
    if summary.train_clips + summary.test_clips == 0:
        print("error: every clip was skipped", file=sys.stderr)
        return 1
    return 0


def cmd_train(args) -> int:
    file_cfg = _load_config_file(args.config)
    seed = _resolve_seed(args.seed, file_cfg)
    data = Path(args.data)
    train_path, test_path = data / "train.seg", data / "test.seg"
    if not train_path.is_file() or not test_path.is_file():
        raise FileNotFoundError(f"{data} holds no preprocessed train.seg/test.seg; run preprocess first")
    train, test = load_segments(train_path), load_segments(test_path)
    if len(train) == 0 or len(test) == 0:
        raise UsageError("preprocessed data has an empty train or test split")
    pre_cfg = {}
    if (data / RUN_CONFIG_NAME).is_file():
        pre_cfg = json.loads((data / RUN_CONFIG_NAME).read_text()).get("preprocess", {})

    train_d = _merge(dataclasses.asdict(TrainConfig()), file_cfg.get("train", {}),
                     {"epochs": args.epochs, "batch_size": args.batch_size})
    train_d["seed"] = seed
    net_d = dict(NetworkConfig().to_dict())
    net_d.update(file_cfg.get("network", {}))
    net_d["input_shape"] = [1, train.values.shape[1], train.values.shape[2]]
    net_d["seed"] = seed
    if args.no_mask:
        net_d["mask"] = None
    n_folds = args.folds if args.folds is not None else int(_option(file_cfg, "folds", 10))
    train_cfg = TrainConfig(**train_d)
    net_cfg = _network_config(net_d)
    out = _out_dir(args.out)

    folds = make_folds(train.unique_clips(), n_folds, seed)
    run = RunConfig("train", seed, {"data": str(data), "out": str(out)}, preprocess=pre_cfg,
                    network=net_cfg.to_dict(), train=dataclasses.asdict(train_cfg),
                    options={"folds": n_folds, "parallel_folds": args.parallel_folds})
    run.write(out)

    def on_fold(report, result):
        extra = {"fold": report.fold, "preprocess": pre_cfg, "f_average": train_cfg.f_average,
                 "test_accuracy": report.accuracy, "test_f_measure": report.f_measure,
                 "val_clips": sorted(folds.members(report.fold))}
        save_checkpoint(out / f"fold_{report.fold}.ckpt",
                        CheckpointRecord(result.net, result.optimizer, result.best_epoch, None, extra))
        print(f"fold {report.fold}: accuracy {report.accuracy:.4f}  F {report.f_measure:.4f}", flush=True)

    if args.parallel_folds > 1:
        with ProcessPoolExecutor(max_workers=args.parallel_folds) as pool:
            report = cross_validate(train, test, folds, net_cfg, train_cfg, on_fold, executor=pool)
    else:
        report = cross_validate(train, test, folds, net_cfg, train_cfg, on_fold)

    (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "report.txt").write_text(report.format() + "\n")
    print(report.format())
    return 0


def _format_confusion(cm) -> str:
    names = [m.label for m in PhonationMode]
    width = max(len(n) for n in names) + 2
    lines = ["true \\ pred".ljust(width + 2) + "".join(n.rjust(width) for n in names)]
    for name, row in zip(names, cm):
        lines.append(name.ljust(width + 2) + "".join(str(int(v)).rjust(width) for v in row))
    return "\n".join(lines)


def cmd_eval(args) -> int:
    record = load_checkpoint(args.checkpoint)
    test = load_segments(Path(args.data) / "test.seg")
    if tuple(test.values.shape[1:]) != tuple(record.network.config.input_shape[1:]):
        raise UsageError(
            f"checkpoint expects segments {record.network.config.input_shape[1:]}, data has {test.values.shape[1:]}"
        )
    cm = evaluate(record.network, test)
    m = metrics_from_confusion(cm, record.extra.get("f_average", "macro"))
    print(_format_confusion(cm))
    print(f"accuracy {m.accuracy:.4f}  F {m.f_measure:.4f}")
    return 0


def cmd_gradcam(args) -> int:
    record = load_checkpoint(args.checkpoint)
    net = record.network
    config = _preprocess_config(record.extra.get("preprocess") or {})
    clip = read_wav(args.input)
    spec = spectrogram_for(clip, config, Path(args.input).name)
    if tuple(net.config.input_shape[1:]) != (spec.values.shape[0], config.frames_per_segment):
        raise UsageError("checkpoint network does not match the preprocessing configuration")
    segment = segment_for_test(spec, args.target, config.segments)
    out = _out_dir(args.out)
    layers = args.layer or ["conv4"]
    for layer in dict.fromkeys(layers):
        cam = grad_cam(net, segment.values, int(args.target), layer, segment.clip_id)
        img = overlay_and_upsample(cam, segment.values)
        name = heatmap_filename(args.input, args.target.label, layer)
        for path in export_image(img, out / name, png=args.png):
            print(path)
    RunConfig("gradcam", 0, {"checkpoint": str(args.checkpoint), "input": str(args.input), "out": str(out)},
              preprocess=dataclasses.asdict(config),
              options={"class": args.target.label, "layers": list(dict.fromkeys(layers))}).write(out)
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="phonation", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labelled dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--clips", type=_positive_int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--duration-range", type=_range, default=None, metavar="LO:HI")
    p.add_argument("--config")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="decode, resample, trim and segment a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--test-split", type=_ratio, default=None, metavar="RATIO")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="cross-validated training")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--folds", type=_positive_int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=_positive_int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--parallel-folds", type=_positive_int, default=1, metavar="K")
    p.add_argument("--no-mask", action="store_true", help="drop the attention mask branch")
    p.add_argument("--config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on preprocessed test data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcam", help="class activation heatmaps for one WAV file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--class", dest="target", type=_mode, required=True)
    p.add_argument("--layer", type=_layer, action="append")
    p.add_argument("--out", required=True)
    p.add_argument("--png", action="store_true", help="also write PNG overlays")
    p.set_defaults(func=cmd_gradcam)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"phonation: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"phonation: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
