"""``wetseg`` command-line entry point.

Settings resolve in three layers: built-in defaults, then a TOML/JSON config
file (``--config``), then explicit flags. Every command writes the fully
resolved settings to ``resolved_config.json`` in its output directory.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

from wetseg import __version__
from wetseg.errors import ConfigError, DataError, WetsegError
from wetseg.pipeline import PreprocessConfig, SplitPolicy
from wetseg.rascore import SPLITS, get_scheme
from wetseg.train import TrainConfig

log = logging.getLogger("wetseg")

PREPROCESS_FLAGS = {
    "selected_bands": dict(nargs="+", metavar="BAND", help="bands kept, in order"),
    "patch_size": dict(type=int, help="square patch side in pixels"),
    "max_invalid_fraction": dict(type=float, help="drop patches above this invalid share"),
    "equalize": dict(action=argparse.BooleanOptionalAction, help="per-band histogram equalization"),
    "normalize": dict(choices=("minmax", "none"), help="per-patch scaling"),
}
SPLIT_FLAGS = {
    "kind": dict(choices=("by_region", "random"), help="split policy"),
    "fractions": dict(type=float, nargs=3, metavar=("TRAIN", "VAL", "TEST"), help="train/val/test shares"),
    "seed": dict(type=int, help="random seed"),
}
TRAIN_FLAGS = {
    "epochs": dict(type=int, help="training epochs"),
    "batch_size": dict(type=int, help="patches per step"),
    "lr_schedule": dict(choices=("fixed", "cosine"), help="learning-rate schedule"),
    "lr": dict(type=float, help="initial learning rate"),
    "lr_min": dict(type=float, help="cosine floor"),
    "dropout_p": dict(type=float, help="dropout probability"),
    "seed": dict(type=int, help="random seed"),
    "loss": dict(help="loss name"),
    "huber_weight": dict(type=float, help="mixed-loss Huber weight"),
    "ssim_weight": dict(type=float, help="mixed-loss SSIM weight"),
    "edge_weight": dict(type=float, help="mixed-loss edge weight"),
    "init": dict(choices=("scratch", "from_checkpoint"), help="encoder initialisation"),
    "init_checkpoint": dict(metavar="PATH", help="autoencoder checkpoint for from_checkpoint"),
    "freeze_encoder": dict(action=argparse.BooleanOptionalAction, help="keep transferred encoder fixed"),
    "patience": dict(type=int, help="early-stop patience in epochs, 0 disables"),
    "min_delta": dict(type=float, help="minimum val improvement"),
    "base_channels": dict(type=int, help="first-level channels"),
    "depth": dict(type=int, help="encoder levels"),
    "bridge_channels": dict(type=int, help="bottleneck channels"),
    "eval_batch_size": dict(type=int, help="patches per evaluation step"),
}
EVAL_DEFAULTS = {"split": "test", "tolerance": 0.05, "renders": 4}
TRANSFER_HELP = {
    "max_gap_days": "largest acquisition-date gap for a scene pair",
    "hires_patch": "high-resolution patch side in pixels",
    "lores_patch": "medium-resolution patch side in pixels",
    "hires_max_invalid": "invalid-pixel threshold for high-resolution patches",
    "lores_max_invalid": "invalid-pixel threshold for medium-resolution patches",
    "hires_bands": "high-resolution bands, in matching order",
    "lores_bands": "medium-resolution bands, in matching order",
    "seed": "seed for the random scene split",
}
TRANSFER_DEFAULTS = {"max_gap_days": 7, "hires_patch": 1024, "lores_patch": 256, "hires_max_invalid": 0.30,
                     "lores_max_invalid": 0.10, "hires_bands": ["R", "G", "B", "NIR"],
                     "lores_bands": ["B4", "B3", "B2", "B8"], "seed": 0}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_group(parser, title: str, specs: dict, defaults: dict, dest_prefix: str) -> None:
    group = parser.add_argument_group(title)
    for name, kw in specs.items():
        flag = _flag(name) if dest_prefix != "split" else "--split-" + name.replace("_", "-")
        if "metavar" not in kw and "choices" not in kw and "action" not in kw:
            kw = dict(kw, metavar=name.upper())
        group.add_argument(flag, dest=f"{dest_prefix}.{name}", default=defaults[name], **kw)


def _add_common(parser, out_required: bool = True) -> None:
    parser.add_argument("--config", metavar="FILE", default=None, help="TOML or JSON settings file")
    parser.add_argument("--out", metavar="DIR", required=out_required, default=None, help="output directory")


def _add_train_flags(parser, task: str) -> None:
    _add_group(parser, f"training ({task})", TRAIN_FLAGS, TrainConfig.defaults(task).to_dict(), "train")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="wetseg", description="Wetland land-cover segmentation toolkit.",
                                formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"wetseg {__version__}")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="BLAS threads for numeric work (forced to 1 by --deterministic)")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True,
                   help="single-threaded, byte-reproducible outputs; omits wall times")
    p.add_argument("--log-level", default="WARNING", choices=("DEBUG", "INFO", "WARNING", "ERROR"),
                   help="logging verbosity on stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    pre = sub.add_parser("preprocess", help="tile, filter and split scenes into patches", formatter_class=fmt)
    pre.add_argument("--input", metavar="DIR", required=True, help="directory of <scene>.ras (+ _label.ras)")
    _add_common(pre)
    pre.add_argument("--high-resolution", action="store_true", default=False,
                     help="start from the high-resolution preset (4 bands, 1024 px, 30%% invalid)")
    pre.add_argument("--class-scheme", default="dynamic-world", help="label scheme name")
    _add_group(pre, "preprocessing", PREPROCESS_FLAGS, PreprocessConfig().to_dict(), "preprocess")
    _add_group(pre, "split policy", SPLIT_FLAGS, PreprocessConfig().to_dict()["split_policy"], "split")
    pre.add_argument("--split-region", dest="split.regions", action="append", default=None,
                     metavar="REGION=SPLIT", help="region to split mapping (repeatable; '*' for the rest)")

    for name, task, helptext in (("pretrain", "autoencoder", "pretrain the autoencoder on unlabeled patches"),
                                 ("train", "unet", "train the U-Net on labelled patches")):
        sp = sub.add_parser(name, help=helptext, formatter_class=fmt)
        sp.add_argument("--manifest", required=True, metavar="FILE", help="dataset manifest.json")
        _add_common(sp)
        _add_train_flags(sp, task)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split", formatter_class=fmt)
    ev.add_argument("--checkpoint", required=True, metavar="FILE", help="model.wsck from pretrain or train")
    ev.add_argument("--manifest", required=True, metavar="FILE", help="dataset manifest.json")
    _add_common(ev)
    ev.add_argument("--split", dest="eval.split", default=EVAL_DEFAULTS["split"], choices=SPLITS,
                    help="split to score")
    ev.add_argument("--tolerance", dest="eval.tolerance", type=float, default=EVAL_DEFAULTS["tolerance"],
                    help="reconstruction accuracy tolerance")
    ev.add_argument("--renders", dest="eval.renders", type=int, default=EVAL_DEFAULTS["renders"],
                    help="number of patches to render as PNG (0 disables)")

    tr = sub.add_parser("transfer", help="pair scenes and downscale high-resolution labels", formatter_class=fmt)
    tr.add_argument("--hires", required=True, metavar="DIR", help="high-resolution scenes (+ _label.ras masks)")
    tr.add_argument("--lores", required=True, metavar="DIR", help="medium-resolution scenes")
    tr.add_argument("--alignment", metavar="FILE", default=None,
                    help="JSON {scene: [offset_y, offset_x]} in medium-resolution pixels")
    _add_common(tr)
    for key, val in TRANSFER_DEFAULTS.items():
        kw = dict(nargs="+", metavar="BAND") if isinstance(val, list) else dict(type=type(val), metavar=key.upper())
        tr.add_argument(_flag(key), dest=f"transfer.{key}", default=val, help=TRANSFER_HELP[key], **kw)
    tr.add_argument("--scene-split", dest="transfer.scene_splits", action="append", default=None,
                    metavar="SCENE=SPLIT", help="pin a scene to a split (repeatable)")

    ex = sub.add_parser("experiment", help="run one of the three experiments end to end", formatter_class=fmt)
    exs = ex.add_subparsers(dest="experiment", required=True, metavar="EXPERIMENT")
    rec = exs.add_parser("reconstruction", help="pretrain and score the autoencoder", formatter_class=fmt)
    rec.add_argument("--manifest", required=True, metavar="FILE", help="dataset manifest.json")
    _add_common(rec)
    _add_train_flags(rec, "autoencoder")
    pt = exs.add_parser("pretraining", help="U-Net from scratch vs autoencoder-initialised",
                        formatter_class=fmt)
    pt.add_argument("--manifest", required=True, metavar="FILE", help="labelled dataset")
    pt.add_argument("--unlabeled-manifest", metavar="FILE", default=None,
                    help="dataset for autoencoder pretraining (default: --manifest)")
    pt.add_argument("--pretrain-epochs", type=int, default=200, help="autoencoder epochs")
    pt.add_argument("--pretrain-lr", type=float, default=1e-3, help="autoencoder learning rate")
    pt.add_argument("--pretrain-batch-size", type=int, default=8, help="autoencoder patches per step")
    _add_common(pt)
    _add_train_flags(pt, "unet")
    res = exs.add_parser("resolution", help="U-Net on matched medium- and high-resolution datasets",
                         formatter_class=fmt)
    res.add_argument("--lores-manifest", required=True, metavar="FILE", help="medium-resolution manifest")
    res.add_argument("--hires-manifest", required=True, metavar="FILE", help="high-resolution manifest")
    res.add_argument("--hires-batch-size", type=int, default=4, help="batch size for the high-resolution run")
    _add_common(res)
    _add_train_flags(res, "unet")

    syn = sub.add_parser("synth", help="write a synthetic fixture dataset", formatter_class=fmt)
    _add_common(syn)
    syn.add_argument("--train", type=int, default=24, help="train patches")
    syn.add_argument("--val", type=int, default=8, help="val patches")
    syn.add_argument("--test", type=int, default=8, help="test patches")
    syn.add_argument("--size", type=int, default=64, help="patch side in pixels")
    syn.add_argument("--bands", type=int, default=9, help="spectral bands")
    syn.add_argument("--seed", type=int, default=0, help="generator seed")
    syn.add_argument("--jitter", type=float, default=0.0, help="per-patch band gain/offset variation")
    syn.add_argument("--unlabeled", action="store_true", default=False, help="omit label masks")
    syn.add_argument("--texture", type=float, default=0.1, help="stripe texture amplitude")
    syn.add_argument("--texture-defined", action="store_true", default=False,
                     help="stripe class shares the background spectrum")
    return p


# config resolution --------------------------------------------------------------


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"config: file {path} does not exist"])
    text = path.read_text()
    try:
        if path.suffix == ".json":
            return json.loads(text)
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        return tomllib.loads(text)
    except ValueError as exc:
        raise ConfigError([f"config: cannot parse {path}: {exc}"]) from None


def _explicit(parser: argparse.ArgumentParser, argv: list[str]) -> set[str]:
    """Destinations the user actually typed on the command line."""
    shadow = build_parser()
    _suppress_defaults(shadow)
    ns, _ = shadow.parse_known_args(argv)
    return set(vars(ns))


def _suppress_defaults(parser: argparse.ArgumentParser) -> None:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sp in action.choices.values():
                _suppress_defaults(sp)
        elif action.dest not in ("help", "version", "command", "experiment"):
            action.default = argparse.SUPPRESS


def _pairs(items, what: str) -> dict[str, str]:
    out, problems = {}, []
    for item in items or []:
        key, sep, val = item.partition("=")
        if not sep:
            problems.append(f"{what}: expected NAME=SPLIT, got {item!r}")
        out[key] = val
    if problems:
        raise ConfigError(problems)
    return out


def _section(args, prefix: str) -> dict:
    return {k.split(".", 1)[1]: v for k, v in vars(args).items() if k.startswith(prefix + ".")}


def _layer(defaults: dict, file_section: dict, flags: dict, explicit: set[str], prefix: str) -> dict:
    out = dict(defaults)
    out.update(file_section)
    for k, v in flags.items():
        if f"{prefix}.{k}" in explicit:
            out[k] = v
    return out


def resolve_preprocess(args, file_cfg: dict, explicit: set[str]) -> PreprocessConfig:
    base = (PreprocessConfig.high_resolution() if args.high_resolution else PreprocessConfig()).to_dict()
    split_base = base.pop("split_policy")
    section = dict(file_cfg.get("preprocess", {}))
    split_file = section.pop("split_policy", {})
    merged = _layer(base, section, _section(args, "preprocess"), explicit, "preprocess")
    split_flags = _section(args, "split")
    if split_flags.get("regions") is not None:
        split_flags["regions"] = _pairs(split_flags["regions"], "split-region")
    merged["split_policy"] = _layer(split_base, split_file, split_flags, explicit, "split")
    try:
        cfg = PreprocessConfig.from_dict(merged)
    except TypeError as exc:
        raise ConfigError([f"preprocess: {exc}"]) from None
    cfg.validate()
    return cfg


def resolve_train(args, file_cfg: dict, explicit: set[str], task: str, section: str = "train") -> TrainConfig:
    defaults = TrainConfig.defaults(task).to_dict()
    merged = _layer(defaults, file_cfg.get(section, {}), _section(args, "train"), explicit, "train")
    merged["task"] = task
    merged["deterministic"] = args.deterministic
    cfg = TrainConfig.from_dict(merged)
    cfg.validate()
    return cfg


def _write_resolved(out: Path, resolved: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")


def _summary(out: Path, name: str, payload: dict) -> None:
    from wetseg.evaluation import _jsonable

    text = json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n"
    (out / name).write_text(text)
    sys.stdout.write(text)


def _common_resolved(args) -> dict:
    return {"command": args.command, "deterministic": args.deterministic,
            "threads": 1 if args.deterministic else args.threads, "version": __version__}


# commands -----------------------------------------------------------------------


def cmd_preprocess(args, file_cfg, explicit) -> int:
    from wetseg.pipeline import discover_sources, run_pipeline

    cfg = resolve_preprocess(args, file_cfg, explicit)
    scheme = get_scheme(file_cfg.get("class_scheme", args.class_scheme)
                        if "class_scheme" not in explicit else args.class_scheme)
    out = Path(args.out)
    _write_resolved(out, {**_common_resolved(args), "input": str(args.input), "class_scheme": scheme.name,
                          "preprocess": cfg.to_dict()})
    manifest = run_pipeline(discover_sources(args.input, scheme), cfg, out, scheme)
    _summary(out, "preprocess_summary.json", {"counts": manifest.counts(),
                                               "rejections": manifest.provenance["rejections"]})
    return 0


def _load_manifest(path):
    from wetseg.rascore import load_manifest

    return load_manifest(path)


def cmd_train(args, file_cfg, explicit, task: str) -> int:
    from wetseg.train import train_autoencoder, train_unet

    cfg = resolve_train(args, file_cfg, explicit, task)
    out = Path(args.out)
    _write_resolved(out, {**_common_resolved(args), "manifest": str(args.manifest), "train": cfg.to_dict()})
    manifest = _load_manifest(args.manifest)
    fn = train_autoencoder if task == "autoencoder" else train_unet
    record, _ = fn(manifest, cfg, out, progress=sys.stdout)
    log.info("best epoch %s, val loss %s", record.best_epoch, record.best_val_loss)
    return 0


def cmd_eval(args, file_cfg, explicit) -> int:
    from wetseg.evaluation import evaluate

    opts = _layer(EVAL_DEFAULTS, file_cfg.get("eval", {}), _section(args, "eval"), explicit, "eval")
    problems = []
    if opts["split"] not in SPLITS:
        problems.append(f"eval.split: must be one of {SPLITS}")
    if not opts["tolerance"] >= 0:
        problems.append("eval.tolerance: must be >= 0")
    if opts["renders"] < 0:
        problems.append("eval.renders: must be >= 0")
    if problems:
        raise ConfigError(problems)
    out = Path(args.out)
    _write_resolved(out, {**_common_resolved(args), "checkpoint": str(args.checkpoint),
                          "manifest": str(args.manifest), "eval": opts})
    manifest = _load_manifest(args.manifest)
    report = evaluate(args.checkpoint, manifest, opts["split"], tol=opts["tolerance"],
                      render_dir=out / "renders" if opts["renders"] else None, max_renders=opts["renders"],
                      manifest_name=Path(args.manifest).name)
    (out / "report.json").write_text(report.to_json())
    sys.stdout.write(report.to_json())
    return 0


def _scenes(directory, offsets: dict) -> list:
    from wetseg.rascore import read_raster
    from wetseg.transfer import Scene

    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"scene directory {directory} does not exist")
    scenes = []
    for path in sorted(directory.glob("*.ras")):
        if path.stem.endswith("_label"):
            continue
        raster = read_raster(path)
        scenes.append(Scene.from_raster(path.stem, raster, str(path), tuple(offsets.get(path.stem, (0.0, 0.0)))))
    if not scenes:
        raise DataError(f"no scenes in {directory}")
    return scenes


def cmd_transfer(args, file_cfg, explicit) -> int:
    from wetseg.rascore import read_mask
    from wetseg.transfer import ResolutionConfig, build_resolution_experiment, pair_scenes

    flags = _section(args, "transfer")
    if flags.get("scene_splits") is not None:
        flags["scene_splits"] = _pairs(flags["scene_splits"], "scene-split")
    opts = _layer({**TRANSFER_DEFAULTS, "scene_splits": {}}, file_cfg.get("transfer", {}), flags, explicit,
                  "transfer")
    offsets = json.loads(Path(args.alignment).read_text()) if args.alignment else {}
    unknown = sorted(set(opts) - set(TRANSFER_DEFAULTS) - {"scene_splits", "fractions"})
    if unknown:
        raise ConfigError([f"transfer.{k}: unknown option" for k in unknown])
    rcfg = ResolutionConfig(hires_bands=list(opts["hires_bands"]), lores_bands=list(opts["lores_bands"]),
                            hires_patch=opts["hires_patch"], lores_patch=opts["lores_patch"],
                            hires_max_invalid=opts["hires_max_invalid"], lores_max_invalid=opts["lores_max_invalid"],
                            fractions=tuple(opts.get("fractions", (0.75, 0.15, 0.10))), seed=opts["seed"],
                            scene_splits=dict(opts["scene_splits"]), max_gap_days=opts["max_gap_days"])
    problems = rcfg.problems()
    if problems:
        raise ConfigError(problems)
    out = Path(args.out)
    _write_resolved(out, {**_common_resolved(args), "hires": str(args.hires), "lores": str(args.lores),
                          "alignment": offsets, "transfer": rcfg.to_dict()})
    hires = _scenes(args.hires, offsets)
    pairing = pair_scenes(hires, _scenes(args.lores, {}), rcfg.max_gap_days)
    (out / "pairing.json").write_text(pairing.to_json())
    masks = {}
    for pair in pairing.pairs:
        mpath = Path(args.hires) / f"{pair.hires.name}_label.ras"
        if not mpath.exists():
            raise DataError(f"missing high-resolution mask {mpath}")
        masks[pair.hires.name] = read_mask(mpath)
    hi, lo = build_resolution_experiment(pairing.pairs, masks, rcfg, out)
    _summary(out, "transfer_summary.json", {"pairs": len(pairing.pairs), "unpaired": pairing.unpaired,
                                             "hires_counts": hi.counts(), "lores_counts": lo.counts()})
    return 0


SEG_COLUMNS = ("overall_accuracy", "weighted_accuracy", "macro_dice", "macro_iou", "macro_precision",
               "macro_recall")


def _seg_row(report) -> dict:
    return {k: report.segmentation[k] for k in SEG_COLUMNS}


def cmd_experiment(args, file_cfg, explicit) -> int:
    from wetseg.evaluation import evaluate
    from wetseg.train import train_autoencoder, train_unet

    out = Path(args.out)
    kind = args.experiment
    if kind == "reconstruction":
        cfg = resolve_train(args, file_cfg, explicit, "autoencoder")
        _write_resolved(out, {**_common_resolved(args), "experiment": kind, "manifest": str(args.manifest),
                              "train": cfg.to_dict()})
        manifest = _load_manifest(args.manifest)
        _, ckpt = train_autoencoder(manifest, cfg, out / "autoencoder", progress=sys.stdout)
        report = evaluate(ckpt, manifest, "test", manifest_name=Path(args.manifest).name)
        (out / "report.json").write_text(report.to_json())
        _summary(out, "summary.json", {"experiment": kind, "rows": {"autoencoder": report.reconstruction}})
        return 0

    cfg = resolve_train(args, file_cfg, explicit, "unet")
    if kind == "pretraining":
        unl_path = args.unlabeled_manifest or args.manifest
        ae_cfg = TrainConfig.defaults("autoencoder", epochs=args.pretrain_epochs, lr=args.pretrain_lr,
                                      batch_size=args.pretrain_batch_size, seed=cfg.seed, dropout_p=cfg.dropout_p,
                                      base_channels=cfg.base_channels, depth=cfg.depth,
                                      bridge_channels=cfg.bridge_channels, deterministic=cfg.deterministic)
        ae_cfg.validate()
        _write_resolved(out, {**_common_resolved(args), "experiment": kind, "manifest": str(args.manifest),
                              "unlabeled_manifest": str(unl_path), "pretrain": ae_cfg.to_dict(),
                              "train": cfg.to_dict()})
        labeled = _load_manifest(args.manifest)
        _, ae = train_autoencoder(_load_manifest(unl_path), ae_cfg, out / "autoencoder", progress=sys.stdout)
        rows = {}
        for name, pre in (("scratch", None), ("pretrained", ae)):
            _, ckpt = train_unet(labeled, cfg, out / name, pretrained=pre, progress=sys.stdout)
            report = evaluate(ckpt, labeled, "test", manifest_name=Path(args.manifest).name)
            (out / name / "report.json").write_text(report.to_json())
            rows[name] = _seg_row(report)
        _summary(out, "summary.json", {"experiment": kind, "rows": rows})
        return 0

    # resolution
    _write_resolved(out, {**_common_resolved(args), "experiment": kind, "lores_manifest": str(args.lores_manifest),
                          "hires_manifest": str(args.hires_manifest), "train": cfg.to_dict(),
                          "hires_batch_size": args.hires_batch_size})
    rows = {}
    for name, path, batch in (("medium_resolution", args.lores_manifest, cfg.batch_size),
                              ("high_resolution", args.hires_manifest, args.hires_batch_size)):
        manifest = _load_manifest(path)
        run_cfg = TrainConfig.from_dict({**cfg.to_dict(), "batch_size": batch})
        _, ckpt = train_unet(manifest, run_cfg, out / name, progress=sys.stdout)
        report = evaluate(ckpt, manifest, "test", manifest_name=Path(path).name)
        (out / name / "report.json").write_text(report.to_json())
        rows[name] = _seg_row(report)
    _summary(out, "summary.json", {"experiment": kind, "rows": rows})
    return 0


def cmd_synth(args, file_cfg, explicit) -> int:
    from wetseg.synthetic import write_dataset

    problems = [f"{k}: must be >= 0" for k in ("train", "val", "test") if getattr(args, k) < 0]
    if args.size < 1 or args.bands < 1:
        problems.append("size and bands must be positive")
    if problems:
        raise ConfigError(problems)
    counts = {"train": args.train, "val": args.val, "test": args.test}
    out = Path(args.out)
    _write_resolved(out, {**_common_resolved(args), "counts": counts, "size": args.size, "bands": args.bands,
                          "seed": args.seed, "jitter": args.jitter, "texture": args.texture,
                          "texture_defined": args.texture_defined, "labeled": not args.unlabeled})
    write_dataset(out, counts, args.size, args.bands, args.seed, labeled=not args.unlabeled, jitter=args.jitter,
                  texture=args.texture, texture_defined=args.texture_defined)
    return 0


COMMANDS = {
    "preprocess": cmd_preprocess,
    "pretrain": lambda a, f, e: cmd_train(a, f, e, "autoencoder"),
    "train": lambda a, f, e: cmd_train(a, f, e, "unet"),
    "eval": cmd_eval,
    "transfer": cmd_transfer,
    "experiment": cmd_experiment,
    "synth": cmd_synth,
}


def _limit_threads(n: int):
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, n))


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        explicit = _explicit(parser, argv)
        file_cfg = load_config_file(args.config) if getattr(args, "config", None) else {}
        threads = 1 if args.deterministic else args.threads
        if threads < 1:
            raise ConfigError([f"threads: must be >= 1, got {threads}"])
        with _limit_threads(threads):
            return COMMANDS[args.command](args, file_cfg, explicit)
    except ConfigError as exc:
        sys.stderr.write("error: invalid configuration:\n")
        for problem in exc.problems:
            sys.stderr.write(f"  - {problem}\n")
        return exc.exit_code
    except WetsegError as exc:
        sys.stderr.write(f"error: {exc.category}: {exc}\n")
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
