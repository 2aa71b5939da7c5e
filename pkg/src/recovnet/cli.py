"""Command-line interface tying the pipeline together.

Commands: ``prepare-data``, ``train-seg``, ``build-clf``, ``train-clf``,
``evaluate``, ``gradcam``. Options may come from flags or from a flat
``key=value`` config file (``--config``); flags win. Every path argument
is resolved relative to ``--workdir``. The environment variable
``RECOVNET_SEED`` supplies the default seed. Exit codes: 0 on success,
1 on runtime failure, 2 on usage or configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from .augment import build_training_set
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, RecovnetError
from .explain import gradcam, overlay
from .imaging import AugmentationSpec, load_image, resize_image
from .manifest import DatasetManifest, SplitSpec, load_manifest, save_manifest, stratified_split
from .metrics import (
    confusion_matrix,
    full_report,
    render_markdown,
    write_cm_csv,
    write_report_csv,
)
from .networks import (
    CLASS_ORDER,
    DecoderSpec,
    EncoderSpec,
    build_classifier,
    build_segmentation_network,
    classify,
    detach_encoder,
    predict_label,
)
from .training import TrainConfig, train_classifier, train_segmentation

SEED_ENV = "RECOVNET_SEED"


def _parse_bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# name -> (cast, default, is_path, help). Required options use default=None
# and are checked after config merging.
_COMMON_OPTS = {
    "workdir": (str, ".", False, "base directory for relative paths"),
    "config": (str, None, False, "flat key=value config file; flags win"),
    "seed": (int, None, False, f"random seed (default: ${SEED_ENV} or 0)"),
}

_COMMAND_OPTS = {
    "prepare-data": {
        "manifest": (str, None, True, "input manifest CSV (required)"),
        "out": (str, None, True, "output directory (required)"),
        "train-fraction": (float, 0.8, False, "per-stratum train fraction"),
        "shift-fraction": (float, 0.10, False, "max shift as a fraction of each dimension"),
        "rotation-degrees": (float, 10.0, False, "max rotation in degrees"),
        "targets": (str, None, False, "comma-separated source=count augmentation targets"),
    },
    "train-seg": {
        "manifest": (str, None, True, "segmentation training manifest (required)"),
        "out": (str, None, True, "run directory (required)"),
        "epochs": (int, 15, False, "training epochs"),
        "learning-rate": (float, 1e-4, False, "Adam learning rate"),
        "batch-size": (int, 32, False, "batch size"),
        "image-size": (int, 224, False, "square input size, divisible by 32"),
        "bn-momentum": (float, 0.99, False, "batch-norm running-average momentum"),
    },
    "build-clf": {
        "seg-checkpoint": (str, None, True, "trained segmentation checkpoint (required)"),
        "out": (str, None, True, "classifier checkpoint path (required)"),
        "head-seed": (int, None, False, "head init seed (default: --seed)"),
    },
    "train-clf": {
        "classifier": (str, None, True, "classifier checkpoint from build-clf (required)"),
        "manifest": (str, None, True, "classification training manifest (required)"),
        "out": (str, None, True, "run directory (required)"),
        "epochs": (int, 15, False, "training epochs"),
        "learning-rate": (float, 1e-5, False, "Adam learning rate"),
        "batch-size": (int, 64, False, "batch size"),
        "image-size": (int, 224, False, "square input size, divisible by 32"),
    },
    "evaluate": {
        "checkpoint": (str, None, True, "classifier checkpoint (required unless --predictions)"),
        "manifest": (str, None, True, "test manifest (required)"),
        "out": (str, None, True, "report output directory (required)"),
        "predictions": (str, None, True, "inject predictions from a CSV instead of running the model"),
        "image-size": (int, 224, False, "square input size"),
        "batch-size": (int, 64, False, "inference batch size"),
        "name": (str, "model", False, "row label for the Markdown table"),
    },
    "gradcam": {
        "checkpoint": (str, None, True, "classifier checkpoint (required)"),
        "image": (str, None, True, "input image (required)"),
        "out": (str, None, True, "output directory (required)"),
        "target-class": (str, "covid", False, "class to explain: covid or control"),
        "target-layer": (str, None, False, "encoder layer name (default: final feature map)"),
        "image-size": (int, 224, False, "square input size"),
        "raw-csv": (_parse_bool, False, False, "also write the raw map as a CSV grid"),
    },
}

_REQUIRED = {
    "prepare-data": ("manifest", "out"),
    "train-seg": ("manifest", "out"),
    "build-clf": ("seg-checkpoint", "out"),
    "train-clf": ("classifier", "manifest", "out"),
    "evaluate": ("manifest", "out"),
    "gradcam": ("checkpoint", "image", "out"),
}

_INPUT_PATHS = {
    "prepare-data": ("manifest",),
    "train-seg": ("manifest",),
    "build-clf": ("seg-checkpoint",),
    "train-clf": ("classifier", "manifest"),
    "evaluate": ("manifest", "predictions"),
    "gradcam": ("checkpoint", "image"),
}

_PATH_OPTS = {
    "prepare-data": ("manifest", "out"),
    "train-seg": ("manifest", "out"),
    "build-clf": ("seg-checkpoint", "out"),
    "train-clf": ("classifier", "manifest", "out"),
    "evaluate": ("checkpoint", "manifest", "out", "predictions"),
    "gradcam": ("checkpoint", "image", "out"),
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="recovnet",
        description="Two-phase chest X-ray screening pipeline: data prep, "
        "segmentation pretraining, classifier fine-tuning, evaluation, "
        "and activation-map export.",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for command, opts in _COMMAND_OPTS.items():
        p = sub.add_parser(command)
        for name, (cast, _default, _is_path, help_text) in {**_COMMON_OPTS, **opts}.items():
            if cast is _parse_bool:
                p.add_argument(f"--{name}", action="store_const", const=True,
                               default=None, help=help_text)
            else:
                p.add_argument(f"--{name}", type=cast, default=None, help=help_text)
    return parser


def _read_config(path: Path) -> dict[str, str]:
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    out: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def _resolve_options(args: argparse.Namespace) -> dict:
    command = args.command
    known = {**_COMMON_OPTS, **_COMMAND_OPTS[command]}
    workdir = Path(os.path.abspath(getattr(args, "workdir") or "."))

    config: dict[str, str] = {}
    config_path = getattr(args, "config", None)
    if config_path is not None:
        config = _read_config(workdir / config_path)
        unknown = sorted(set(config) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {', '.join(unknown)}")

    opts: dict = {"workdir": workdir}
    for name, (cast, default, _is_path, _help) in known.items():
        if name in ("workdir", "config"):
            continue
        value = getattr(args, name.replace("-", "_"))
        if value is None and name in config:
            try:
                value = cast(config[name])
            except (TypeError, ValueError) as err:
                raise ConfigError(f"config key {name}: {err}") from None
        if value is None:
            value = default
        opts[name] = value

    if opts.get("seed") is None:
        env = os.environ.get(SEED_ENV)
        try:
            opts["seed"] = int(env) if env else 0
        except ValueError:
            raise ConfigError(f"${SEED_ENV} is not an integer: {env!r}") from None

    for name in _PATH_OPTS[command]:
        if opts.get(name) is not None:
            p = Path(opts[name])
            opts[name] = p if p.is_absolute() else workdir / p
    for name in _REQUIRED[command]:
        if opts.get(name) is None:
            raise ConfigError(f"missing required option --{name}")
    input_paths = list(_INPUT_PATHS[command])
    if command == "evaluate":
        if opts["predictions"] is None and opts["checkpoint"] is None:
            raise ConfigError("evaluate needs --checkpoint or --predictions")
        if opts["predictions"] is None:
            input_paths.append("checkpoint")
    for name in input_paths:
        p = opts.get(name)
        if p is not None and not Path(p).is_file():
            raise ConfigError(f"input file for --{name} not found: {p}")
    return opts


def _parse_targets(text: str | None) -> dict[str, int]:
    if not text:
        return {}
    out: dict[str, int] = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        key, sep, value = part.partition("=")
        if not sep:
            raise ConfigError(f"bad target {part!r}; expected source=count")
        try:
            out[key.strip()] = int(value)
        except ValueError:
            raise ConfigError(f"bad target count in {part!r}") from None
    return out


def cmd_prepare_data(opts: dict) -> int:
    manifest = load_manifest(opts["manifest"])
    split_spec = SplitSpec(train_fraction=opts["train-fraction"], seed=opts["seed"])
    aug_spec = AugmentationSpec(
        shift_fraction=opts["shift-fraction"], rotation_degrees=opts["rotation-degrees"]
    )
    targets = _parse_targets(opts["targets"])
    sources = []
    for rec in manifest:
        if rec.source not in sources:
            sources.append(rec.source)
    unknown = sorted(set(targets) - set(sources))
    if unknown:
        raise ConfigError(f"targets name unknown sources: {', '.join(unknown)}")

    train, test = stratified_split(manifest, split_spec)
    out_dir = Path(opts["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    save_manifest(test, out_dir / "test.csv")

    groups = [
        DatasetManifest(tuple(r for r in train if r.source == src), train.task)
        for src in sources
    ]
    target_list = [targets.get(src, len(g)) for src, g in zip(sources, groups)]
    augmented = build_training_set(
        groups, target_list, aug_spec, opts["seed"], out_dir=out_dir / "augmented"
    )
    save_manifest(augmented, out_dir / "train.csv")

    test_counts = {src: sum(1 for r in test if r.source == src) for src in sources}
    print(f"{'source':<24}{'train':>8}{'augmented':>11}{'aug_train':>11}{'test':>8}")
    for src, group, target in zip(sources, groups, target_list):
        grew = "yes" if target > len(group) else "no"
        print(f"{src or '(none)':<24}{len(group):>8}{grew:>11}{target:>11}{test_counts[src]:>8}")
    print(f"{'total':<24}{len(train):>8}{'':>11}{len(augmented):>11}{len(test):>8}")
    return 0


def _train_config(opts: dict) -> TrainConfig:
    try:
        return TrainConfig(
            epochs=opts["epochs"],
            learning_rate=opts["learning-rate"],
            batch_size=opts["batch-size"],
            seed=opts["seed"],
        )
    except ValueError as err:
        raise ConfigError(str(err)) from None


def cmd_train_seg(opts: dict) -> int:
    manifest = load_manifest(opts["manifest"])
    cfg = _train_config(opts)
    image_size = opts["image-size"]
    if image_size % 32:
        raise ConfigError(f"image-size must be divisible by 32, got {image_size}")
    enc_spec = EncoderSpec(bn_momentum=opts["bn-momentum"])
    dec_spec = DecoderSpec(bn_momentum=opts["bn-momentum"])
    net = build_segmentation_network(enc_spec, dec_spec, seed=cfg.seed)
    _, history = train_segmentation(
        net, manifest, cfg, image_size=image_size, run_dir=opts["out"]
    )
    print(
        f"trained segmentation network for {cfg.epochs} epochs; "
        f"final mean loss {history.losses()[-1]:.4f}; "
        f"checkpoint at {history.checkpoint_path}"
    )
    return 0


def cmd_build_clf(opts: dict) -> int:
    net = load_checkpoint(opts["seg-checkpoint"], expect_kind="segmentation")
    head_seed = opts["head-seed"] if opts["head-seed"] is not None else opts["seed"]
    clf = build_classifier(detach_encoder(net), head_seed=head_seed)
    path = save_checkpoint(clf, opts["out"])
    print(f"classifier checkpoint written to {path}")
    return 0


def cmd_train_clf(opts: dict) -> int:
    clf = load_checkpoint(opts["classifier"], expect_kind="classifier")
    manifest = load_manifest(opts["manifest"])
    cfg = _train_config(opts)
    _, history = train_classifier(
        clf, manifest, cfg, image_size=opts["image-size"], run_dir=opts["out"]
    )
    print(
        f"fine-tuned classifier for {cfg.epochs} epochs; "
        f"final mean loss {history.losses()[-1]:.4f}; "
        f"checkpoint at {history.checkpoint_path}"
    )
    return 0


def _read_predictions(path: Path, manifest: DatasetManifest) -> list[str]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["image_path", "predicted"]:
            raise ConfigError(
                f"{path}: expected header image_path,predicted, got {header!r}"
            )
        rows = [row for row in reader if row]
    if len(rows) != len(manifest):
        raise ConfigError(
            f"{path}: {len(rows)} predictions for {len(manifest)} manifest records"
        )
    preds = []
    for row, rec in zip(rows, manifest):
        if Path(row[0]).name != Path(rec.image_path).name:
            raise ConfigError(
                f"{path}: prediction row {row[0]!r} does not line up with {rec.image_path!r}"
            )
        preds.append(row[1])
    return preds


def cmd_evaluate(opts: dict) -> int:
    manifest = load_manifest(opts["manifest"])
    truth = [rec.label for rec in manifest]
    if opts["predictions"] is not None:
        predicted = _read_predictions(Path(opts["predictions"]), manifest)
    else:
        clf = load_checkpoint(opts["checkpoint"], expect_kind="classifier")
        size = opts["image-size"]
        predicted = []
        records = list(manifest)
        for start in range(0, len(records), opts["batch-size"]):
            chunk = records[start : start + opts["batch-size"]]
            batch = np.stack(
                [resize_image(load_image(r.image_path), size, size) for r in chunk]
            ).astype(np.float32)
            predicted.extend(predict_label(classify(clf, batch), clf.class_order))
    cm = confusion_matrix(predicted, truth)
    report = full_report(cm)
    out_dir = Path(opts["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    write_report_csv(report, out_dir / "report.csv")
    write_cm_csv(cm, out_dir / "cm.csv")
    markdown = render_markdown(report, opts["name"])
    (out_dir / "report.md").write_text(markdown)
    print(markdown, end="")
    return 0


def cmd_gradcam(opts: dict) -> int:
    if opts["target-class"] not in CLASS_ORDER:
        raise ConfigError(
            f"target-class must be one of {CLASS_ORDER}, got {opts['target-class']!r}"
        )
    clf = load_checkpoint(opts["checkpoint"], expect_kind="classifier")
    size = opts["image-size"]
    image = resize_image(load_image(opts["image"]), size, size)
    class_index = clf.class_order.index(opts["target-class"])
    amap = gradcam(clf, image, class_index, target_layer=opts["target-layer"])
    out_dir = Path(opts["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(opts["image"]).stem
    png = overlay(image, amap, out_dir / f"{stem}__cam_{opts['target-class']}.png")
    print(f"activation overlay written to {png}")
    if opts["raw-csv"]:
        csv_path = out_dir / f"{stem}__cam_{opts['target-class']}.csv"
        np.savetxt(csv_path, amap.values, delimiter=",", fmt="%.8f")
        print(f"raw map written to {csv_path}")
    return 0


_HANDLERS = {
    "prepare-data": cmd_prepare_data,
    "train-seg": cmd_train_seg,
    "build-clf": cmd_build_clf,
    "train-clf": cmd_train_clf,
    "evaluate": cmd_evaluate,
    "gradcam": cmd_gradcam,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    if args.command is None:
        parser.print_help()
        return 2
    try:
        opts = _resolve_options(args)
        return _HANDLERS[args.command](opts)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except RecovnetError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main(sys.argv[1:]))
