"""Command-line entry point: ``bocf <command> [options]``.

Training and cross-validation read a flat JSON configuration. Every key in
``CONFIG_SCHEMA`` has a matching flag (``learning_rate`` -> ``--learning-rate``),
and precedence is built-in default < ``--config`` file < flag. The resolved
configuration is written to ``config.json`` in each run directory, and
``bocf train --config <run>/config.json`` repeats that run exactly.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Sequence


from . import __version__, checkpoint
from .evaluate import ErrorReport, evaluate_model
from .imageio import (
    AugmentationConfig,
    DatasetManifest,
    ImageError,
    ManifestEntry,
    load_image,
    read_manifest,
    save_image,
    write_manifest,
)
from .model import ATTENTION_MODES, BocfConfig, init_model, predict
from .statistical import METHODS, NoEvidenceError, get_method
from .synth import PALETTES, synthetic_dataset
from .train import NonFiniteLossError, TrainConfig, crossvalidate, train

log = logging.getLogger("bocf")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    """Bad flags, config keys, or input files; reported with exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit with 2, which we reserve
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# configuration schema

_MODEL_DEFAULTS = BocfConfig()
_TRAIN_DEFAULTS = TrainConfig()
_AUG_DEFAULTS = AugmentationConfig()

# key -> (type, default, help)
CONFIG_SCHEMA: dict[str, tuple[type, Any, str]] = {
    "manifest": (str, None, "training manifest CSV (path,r,g,b[,camera])"),
    "seed": (int, 0, "seed for initialization, shuffling, augmentation and k-means"),
    "workers": (int, 1, "threads for per-sample gradients (results do not depend on it)"),
    # model
    "conv_layers": (int, _MODEL_DEFAULTS.conv_layers, "conv + max-pool blocks"),
    "filters": (int, _MODEL_DEFAULTS.filters, "filters per conv layer"),
    "kernel_size": (int, _MODEL_DEFAULTS.kernel_size, "conv kernel side"),
    "codebook": (int, _MODEL_DEFAULTS.codebook_size, "codebook size K"),
    "hidden": (int, _MODEL_DEFAULTS.hidden, "hidden units of the estimation head"),
    "attention": (str, _MODEL_DEFAULTS.attention, "none | variant1 | variant2"),
    "input_size": (int, _MODEL_DEFAULTS.input_size, "network input side in pixels"),
    # optimization
    "epochs": (int, _TRAIN_DEFAULTS.epochs, "passes over the training set"),
    "batch_size": (int, _TRAIN_DEFAULTS.batch_size, "samples per Adam step"),
    "learning_rate": (float, _TRAIN_DEFAULTS.learning_rate, "Adam step size"),
    "beta1": (float, _TRAIN_DEFAULTS.beta1, "Adam first-moment decay"),
    "beta2": (float, _TRAIN_DEFAULTS.beta2, "Adam second-moment decay"),
    "eps": (float, _TRAIN_DEFAULTS.eps, "Adam denominator epsilon"),
    "lam_init": (float, _TRAIN_DEFAULTS.lam_init, "initial attention blend weight"),
    "kmeans": (bool, _TRAIN_DEFAULTS.kmeans, "initialize codebook centers with k-means"),
    "kmeans_images": (int, _TRAIN_DEFAULTS.kmeans_images, "images sampled for k-means"),
    "kmeans_max_vectors": (int, _TRAIN_DEFAULTS.kmeans_max_vectors, "cap on k-means feature vectors"),
    "folds": (int, _TRAIN_DEFAULTS.folds, "cross-validation folds"),
    "checkpoint_every": (int, 0, "also save model-eNNNNN.ckpt every N epochs (0: final only)"),
    # augmentation
    "crop_size": (int, _AUG_DEFAULTS.crop_size, "random crop side before resampling"),
    "rotation": (float, _AUG_DEFAULTS.rotation, "max absolute rotation in degrees"),
    "rescale_min": (float, _AUG_DEFAULTS.rescale[0], "lowest intensity rescale factor"),
    "rescale_max": (float, _AUG_DEFAULTS.rescale[1], "highest intensity rescale factor"),
}

_GLOBAL_KEYS = ("seed", "workers")


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def load_config_file(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"config file {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise UsageError(f"config file {path}: expected a JSON object")
    out = {}
    for key, value in raw.items():
        if key not in CONFIG_SCHEMA:
            raise UsageError(f"config file {path}: unknown key {key!r}")
        typ = CONFIG_SCHEMA[key][0]
        if value is None:
            out[key] = None
        elif typ is bool:
            if not isinstance(value, bool):
                raise UsageError(f"config file {path}: {key} must be true or false")
            out[key] = value
        elif typ is int and (isinstance(value, bool) or not isinstance(value, int)):
            raise UsageError(f"config file {path}: {key} must be an integer")
        elif typ is float and (isinstance(value, bool) or not isinstance(value, (int, float))):
            raise UsageError(f"config file {path}: {key} must be a number")
        else:
            out[key] = typ(value)
    return out


def resolve_config(args: argparse.Namespace) -> dict[str, Any]:
    """Defaults, then the ``--config`` file, then explicit flags."""
    cfg = {k: spec[1] for k, spec in CONFIG_SCHEMA.items()}
    if getattr(args, "config", None):
        cfg.update(load_config_file(args.config))
    for key in CONFIG_SCHEMA:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if cfg["manifest"] is not None:
        cfg["manifest"] = str(Path(cfg["manifest"]).resolve())
    return cfg


def build_configs(cfg: dict[str, Any]) -> tuple[BocfConfig, TrainConfig, AugmentationConfig]:
    try:
        model_cfg = BocfConfig(
            conv_layers=cfg["conv_layers"], filters=cfg["filters"], kernel_size=cfg["kernel_size"],
            codebook_size=cfg["codebook"], hidden=cfg["hidden"], attention=cfg["attention"],
            input_size=cfg["input_size"],
        )
        train_cfg = TrainConfig(
            batch_size=cfg["batch_size"], learning_rate=cfg["learning_rate"], epochs=cfg["epochs"],
            beta1=cfg["beta1"], beta2=cfg["beta2"], eps=cfg["eps"], lam_init=cfg["lam_init"],
            seed=cfg["seed"], folds=cfg["folds"], workers=cfg["workers"], kmeans=cfg["kmeans"],
            kmeans_images=cfg["kmeans_images"], kmeans_max_vectors=cfg["kmeans_max_vectors"],
        )
        aug = AugmentationConfig(
            crop_size=cfg["crop_size"], rotation=cfg["rotation"],
            rescale=(cfg["rescale_min"], cfg["rescale_max"]),
            output_size=cfg["input_size"], seed=cfg["seed"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if cfg["workers"] < 1:
        raise UsageError("--workers must be >= 1")
    if cfg["checkpoint_every"] < 0:
        raise UsageError("--checkpoint-every must be >= 0")
    return model_cfg, train_cfg, aug


# ---------------------------------------------------------------------------
# helpers


def _manifest(path: str | None) -> DatasetManifest:
    if not path:
        raise UsageError("--manifest is required")
    try:
        return read_manifest(path)
    except ImageError as exc:
        raise UsageError(str(exc)) from None


def _out_dir(args, default: str) -> Path:
    out = Path(getattr(args, "out_dir", None) or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _run_dir(parent: Path, name: str | None) -> Path:
    if name:
        run = parent / name
        run.mkdir(parents=True, exist_ok=False)
        return run
    stamp = time.strftime("run-%Y%m%d-%H%M%S")
    for i in range(1000):
        run = parent / (stamp if i == 0 else f"{stamp}-{i}")
        try:
            run.mkdir(parents=True)
            return run
        except FileExistsError:
            continue
    raise UsageError(f"could not create a run directory under {parent}")


def _write_report(report: ErrorReport, out: Path, errors_csv: str | None, title: str | None = None) -> None:
    print(report.format_text(title=title))
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    if errors_csv:
        report.write_errors_csv(errors_csv)


def _workers(args) -> int:
    w = getattr(args, "workers", None) or 1
    if w < 1:
        raise UsageError("--workers must be >= 1")
    return w


def _load_checkpoint(path: str):
    try:
        return checkpoint.load(path)
    except (checkpoint.CheckpointError, OSError) as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    model_cfg, train_cfg, aug = build_configs(cfg)
    manifest = _manifest(cfg["manifest"])
    run = _run_dir(_out_dir(args, "runs"), args.run_name)
    (run / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log.info("run directory %s", run)

    model = init_model(model_cfg, seed=cfg["seed"], lam_init=cfg["lam_init"])
    every = cfg["checkpoint_every"]
    with (run / "loss.csv").open("w", encoding="utf-8", newline="") as loss_fh:
        loss_fh.write("epoch,mean_loss\n")

        def progress(epoch: int, loss: float) -> None:
            loss_fh.write(f"{epoch},{loss!r}\n")
            loss_fh.flush()
            log.info("epoch %d  loss %.6f rad", epoch, loss)

        def on_epoch(epoch: int, m) -> None:
            if every and epoch % every == 0:
                checkpoint.save(m, run / f"model-e{epoch:05d}.ckpt")

        try:
            result = train(model, manifest, train_cfg, aug, progress=progress, on_epoch=on_epoch)
        except NonFiniteLossError as exc:
            print(f"error: {exc}; partial history kept in {run / 'loss.csv'}", file=sys.stderr)
            return EXIT_NUMERIC
        except ValueError as exc:  # includes undecodable images
            raise UsageError(str(exc)) from None
    checkpoint.save(result.model, run / "model.ckpt")
    print(run)
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_checkpoint(args.checkpoint)
    manifest = _manifest(args.manifest)
    report = evaluate_model(model, manifest, workers=_workers(args))
    _write_report(report, _out_dir(args, "."), args.errors_csv)
    return EXIT_OK


def cmd_baseline(args) -> int:
    try:
        method = get_method(args.method, args.p, args.sigma)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    manifest = _manifest(args.manifest)
    report = evaluate_model(method, manifest, input_size=args.input_size, workers=_workers(args))
    _write_report(report, _out_dir(args, "."), args.errors_csv)
    return EXIT_OK


def cmd_predict(args) -> int:
    model = _load_checkpoint(args.checkpoint)
    manifest = _manifest(args.manifest)
    for entry in manifest.entries:
        try:
            est = predict(model, load_image(entry.path))
        except ImageError as exc:
            raise UsageError(str(exc)) from None
        print(entry.path, *(format(float(v), ".10g") for v in est))
    return EXIT_OK


def cmd_crossval(args) -> int:
    cfg = resolve_config(args)
    model_cfg, train_cfg, aug = build_configs(cfg)
    manifest = _manifest(cfg["manifest"])
    if len(manifest) < cfg["folds"]:
        raise UsageError(f"{cfg['manifest']}: insufficient data, {len(manifest)} images for {cfg['folds']} folds")
    run = _run_dir(_out_dir(args, "runs"), args.run_name)
    (run / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def progress(fold: int, epoch: int, loss: float) -> None:
        log.info("fold %d  epoch %d  loss %.6f rad", fold + 1, epoch, loss)

    try:
        result = crossvalidate(manifest, cfg["folds"], model_cfg, train_cfg, aug, progress)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ImageError as exc:
        raise UsageError(str(exc)) from None
    for i, rep in enumerate(result.folds, start=1):
        print(rep.format_text(title=f"fold {i}"))
        print()
    print(result.pooled.format_text(title="pooled"))
    doc = {"folds": [r.to_json_dict() for r in result.folds], "pooled": result.pooled.to_json_dict()}
    (run / "report.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_gensynth(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    if args.patches < 1:
        raise UsageError("--patches must be >= 1")
    palette = None if args.palette == "random" else PALETTES[args.palette]
    seed = getattr(args, "seed", None) or 0
    out = _out_dir(args, "synthetic")
    try:
        scenes = synthetic_dataset(args.n, args.size, seed, n_patches=args.patches, palette=palette,
                                   white_patch=args.white_patch, bit_depth=args.bit_depth)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    entries = []
    width = len(str(args.n - 1))
    for i, (img, gt) in enumerate(scenes):
        path = out / f"scene{i:0{width}d}.png"
        save_image(path, img, bit_depth=args.bit_depth)
        entries.append(ManifestEntry(path, gt))
    write_manifest(out / "manifest.csv", DatasetManifest(out, entries))
    print(out / "manifest.csv")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_globals(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, metavar="JSON", help="flat JSON configuration file")
    p.add_argument("--seed", type=int, default=d, help="random seed")
    p.add_argument("--workers", type=int, default=d, help="worker threads")
    p.add_argument("--out-dir", default=d, metavar="DIR", help="output directory")
    p.add_argument("-q", "--quiet", action="store_true", default=argparse.SUPPRESS if suppress else False,
                   help="only print results")


def _add_schema_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration (mirrors the JSON keys)")
    for key, (typ, default, help_) in CONFIG_SCHEMA.items():
        if key in _GLOBAL_KEYS:
            continue
        text = f"{help_} (default: {default})"
        if typ is bool:
            g.add_argument(_flag(key), dest=key, default=None, action=argparse.BooleanOptionalAction, help=help_)
        elif key == "attention":
            g.add_argument(_flag(key), dest=key, default=None, choices=ATTENTION_MODES, help=text)
        else:
            g.add_argument(_flag(key), dest=key, type=typ, default=None, help=text)
    p.add_argument("--run-name", help="run directory name (default: run-<timestamp>)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bocf", description="Illuminant estimation with Bag-of-Features networks.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model; writes a run directory")
    _add_globals(p, suppress=True)
    _add_schema_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("crossval", help="k-fold cross-validation with per-fold and pooled reports")
    _add_globals(p, suppress=True)
    _add_schema_flags(p)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    _add_globals(p, suppress=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--errors-csv", metavar="CSV", help="also write per-image errors")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="print 'path r g b' per manifest image")
    _add_globals(p, suppress=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("baseline", help="evaluate a statistical estimator")
    _add_globals(p, suppress=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--method", required=True, choices=sorted(METHODS))
    p.add_argument("--p", type=float, help="Minkowski norm order (inf allowed)")
    p.add_argument("--sigma", type=float, help="Gaussian pre-smoothing scale in pixels")
    p.add_argument("--input-size", type=int, help="centre-crop and resize before estimating")
    p.add_argument("--errors-csv", metavar="CSV", help="also write per-image errors")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("gensynth", help="write a synthetic dataset and manifest.csv")
    _add_globals(p, suppress=True)
    p.add_argument("--n", type=int, default=100, help="number of scenes")
    p.add_argument("--size", type=int, default=256, help="image side in pixels")
    p.add_argument("--patches", type=int, default=16, help="rectangles per scene")
    p.add_argument("--palette", default="random", choices=["random", *sorted(PALETTES)],
                   help="reflectance source; 'white' gives uniform scenes")
    p.add_argument("--white-patch", action="store_true", help="force one unit-reflectance patch")
    p.add_argument("--bit-depth", type=int, default=16, choices=[8, 16])
    p.set_defaults(func=cmd_gensynth)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"bocf {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NoEvidenceError as exc:
        print(f"bocf {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"bocf {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
