"""Command-line entry point: ``migan <command> [options]``.

Options resolve as flags > config file > built-in defaults. A config file is
YAML; top-level keys apply to every command and a section named after the
command overrides them, e.g.::

    seed: 3
    train:
      mode: segmentation
      epochs: 20
"""

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from . import data as dp
from ._io import derive_seed, save_npz, write_json
from .errors import ConfigError, MiganError, MissingPairError, ModeError
from .evaluator import evaluate_dataset, evaluate_predictions, segment
from .features import convert_torchvision_vgg19
from .networks import load_checkpoint
from .trainer import TrainConfig, checkpoint_mode, generate, train

log = logging.getLogger("migan")

KINDS = [k.value for k in dp.DatasetKind]


def _csv(cast):
    def parse(text):
        if isinstance(text, (list, tuple)):
            return tuple(cast(v) for v in text)
        return tuple(cast(v) for v in str(text).split(",") if v.strip() != "")
    return parse


def _bool(text):
    if isinstance(text, bool):
        return text
    if str(text).lower() in ("1", "true", "yes", "on"):
        return True
    if str(text).lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text}")


def _opt(name, type_=str, default=None, help="", **kw):
    return dict(name=name, type=type_, default=default, help=help, **kw)


COMMON = [
    _opt("seed", int, 0, "root seed, fanned out to data/init/noise streams"),
    _opt("config", str, None, "YAML config file"),
    _opt("out", str, None, "output directory"),
    _opt("input-size", int, 512, "square network input size in pixels"),
]

_TRAIN_HELP = {
    "mode": "synthesis_l1 | synthesis_style | segmentation",
    "g_updates_per_d": "generator updates per discriminator update",
    "noise_sigma_train": "noise std during training and validation",
    "noise_sigma_eval": "noise std when generating",
    "patience": "early-stop after this many epochs without validation improvement",
    "extractor": "perceptual features: standin | vgg19",
    "vgg_weights": "VGG-19 weights container (see convert-vgg19)",
    "seg_checkpoint": "frozen segmentor checkpoint adding the segmentation term in style mode",
}


def _train_options():
    opts = []
    for f in dataclasses.fields(TrainConfig):
        if f.name in ("seed", "input_size"):
            continue
        default = f.default
        if isinstance(default, tuple):
            cast = float if f.name == "block_weights" else int
            type_ = _csv(cast)
        elif isinstance(default, bool):
            type_ = _bool
        elif default is None:
            type_ = str
        else:
            type_ = type(default)
        opts.append(_opt(f.name.replace("_", "-"), type_, default, _TRAIN_HELP.get(f.name, "")))
    return opts


COMMANDS = {
    "preprocess": ("crop, resize and rescale a dataset to arrays", [
        _opt("root", str, None, "dataset root (images/, masks/, fov/)", required=True),
        _opt("kind", str, "DRIVE", "dataset kind", choices=KINDS),
    ]),
    "train": ("train a synthesis generator or a segmentor", [
        _opt("data", str, None, "dataset root", required=True),
        _opt("kind", str, "SYNTHETIC", "dataset kind", choices=KINDS),
        _opt("rotations", _csv(float), (0.0, 90.0, 180.0, 270.0), "augmentation angles (degrees)"),
        _opt("hflip", _bool, True, "add left-right mirrored copies"),
        _opt("style-dir", str, None, "style image pool for synthesis_style (dataset root)"),
    ] + _train_options()),
    "generate": ("synthesize image/mask pairs from vessel masks", [
        _opt("checkpoint", str, None, "synthesis checkpoint", required=True),
        _opt("masks", str, None, "directory of binary mask images", required=True),
        _opt("n", int, 1, "images per mask"),
        _opt("sigma", float, 1.0, "noise standard deviation"),
    ]),
    "segment": ("write vessel probability maps for fundus images", [
        _opt("checkpoint", str, None, "segmentation checkpoint", required=True),
        _opt("images", str, None, "dataset root or directory of images", required=True),
        _opt("kind", str, "SYNTHETIC", "dataset kind", choices=KINDS),
    ]),
    "evaluate": ("compute Dice / AUC-ROC / AUC-PR inside the FOV", [
        _opt("data", str, None, "dataset root with gold masks", required=True),
        _opt("kind", str, "SYNTHETIC", "dataset kind", choices=KINDS),
        _opt("checkpoint", str, None, "segmentation checkpoint"),
        _opt("predictions", str, None, "directory of probability-map PNGs instead of a checkpoint"),
    ]),
    "synthdata": ("generate a procedural retina dataset", [
        _opt("n", int, 10, "number of samples"),
        _opt("size", int, 64, "image side in pixels"),
    ]),
    "convert-vgg19": ("convert a torchvision VGG-19 state dict to the weights container", [
        _opt("input", str, None, "torchvision vgg19 .pth file", required=True),
    ]),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="migan", description=__doc__.splitlines()[0])
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (desc, opts) in COMMANDS.items():
        p = sub.add_parser(name, help=desc, description=desc, parents=[shared])
        for o in COMMON + opts:
            shown = o["default"]
            if isinstance(shown, tuple):
                shown = ",".join(f"{v:g}" if isinstance(v, float) else str(v) for v in shown)
            kw = {"type": o["type"], "default": argparse.SUPPRESS,
                  "help": f"{o['help']} (default: {shown})".strip()}
            if "choices" in o:
                kw["choices"] = o["choices"]
            p.add_argument("--" + o["name"], dest=o["name"].replace("-", "_"), **kw)
    return parser


def resolve(command, flags):
    """Merge defaults, config file and flags into one validated dict."""
    opts = COMMON + COMMANDS[command][1]
    known = {o["name"].replace("-", "_"): o for o in opts}
    values = {k: o["default"] for k, o in known.items()}
    path = flags.get("config")
    if path:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        section = doc.pop(command, {}) or {}
        for other in COMMANDS:
            doc.pop(other, None)
        for src, strict in ((doc, False), (section, True)):
            for key, val in src.items():
                key = key.replace("-", "_")
                if key not in known:
                    # shared top-level keys may belong to other commands
                    if strict:
                        raise ConfigError(f"config key {key!r} is not an option of {command}")
                    continue
                try:
                    values[key] = known[key]["type"](val) if val is not None else None
                except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
                    raise ConfigError(f"config key {key!r}: {exc}") from exc
    values.update(flags)
    missing = [k for k, o in known.items() if o.get("required") and values.get(k) is None]
    if missing:
        raise ConfigError(f"{command}: missing required option(s) "
                          + ", ".join("--" + m.replace("_", "-") for m in missing))
    if values.get("out") is None:
        raise ConfigError(f"{command}: --out is required")
    if command == "train":
        _train_config(values)
    return values


# -- commands ----------------------------------------------------------------

def _save_png_gray(path, arr):
    Image.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)).save(path)


def _unit_to_uint8(img):
    return np.round(dp.unscale_from_unit(np.clip(img, -1, 1))).clip(0, 255).astype(np.uint8)


def cmd_preprocess(o):
    samples = dp.load_dataset(o["root"], o["kind"])
    out = Path(o["out"])
    ids = []
    for s in samples:
        p = dp.preprocess(s, size=o["input_size"])
        save_npz(out / f"{p.id}.npz", {"image": p.image, "mask": p.mask, "fov": p.fov,
                                       "zscore_image": p.zscore_image},
                 meta={"id": p.id, "original_size": list(p.original_size), "kind": p.kind.value})
        ids.append(p.id)
    write_json(out / "manifest.json", {"kind": o["kind"], "size": o["input_size"],
                                       "count": len(ids), "ids": ids})
    print(f"preprocessed {len(ids)} samples into {out}")
    return 0


def _train_config(o):
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    return TrainConfig.from_dict({k: v for k, v in o.items() if k in names})


def cmd_train(o):
    cfg = _train_config(o)
    samples = dp.load_dataset(o["data"], o["kind"])
    pre = [dp.preprocess(s, size=cfg.input_size) for s in samples]
    spec = dp.AugmentSpec(rotations=o["rotations"], hflip=o["hflip"])
    aug_seed = derive_seed(o["seed"], "augment")
    pool = [v for p in pre for v in dp.augment(p, spec, aug_seed)]
    split = dp.split_train_val(pool, derive_seed(o["seed"], "split"))
    style_pool = None
    if o.get("style_dir"):
        style_pool = [dp.preprocess(s, size=cfg.input_size).image
                      for s in dp.load_dataset(o["style_dir"], dp.DatasetKind.SYNTHETIC)]
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(
        {"train": json.loads(json.dumps(o, default=list))}, sort_keys=True))

    def progress(rec):
        log.info("epoch %d  val_loss %.5f", rec["epoch"], rec["val_loss"])

    ckpt, tlog = train(cfg, split, style_pool=style_pool, out_dir=out, progress=progress)
    print(f"selected epoch {tlog.selected_epoch} (step {tlog.selected_step}); "
          f"checkpoint {out / 'best.ckpt'}")
    return 0


def cmd_generate(o):
    ckpt = load_checkpoint(o["checkpoint"])
    size = ckpt.networks["generator"].spec.input_size
    mask_dir = Path(o["masks"])
    paths = sorted(p for p in mask_dir.iterdir() if p.suffix.lower() in dp.samples.IMAGE_SUFFIXES)
    masks = []
    for p in paths:
        with Image.open(p) as im:
            m = np.asarray(im.convert("L").resize((size, size), Image.NEAREST)) > 127
        masks.append(m.astype(np.uint8))
    images = generate(ckpt, masks, o["n"], o["sigma"], seed=derive_seed(o["seed"], "generate"))
    out = Path(o["out"])
    for sub in ("images", "masks", "fov"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for p, m, batch in zip(paths, masks, images):
        for k, img in enumerate(batch):
            rgb = _unit_to_uint8(img.transpose(1, 2, 0))
            fov = dp.samples.stare_fov(rgb.astype(np.float64)) | m
            stem = f"{p.stem}_g{k}"
            Image.fromarray(rgb).save(out / "images" / f"{stem}.png")
            Image.fromarray(m * 255).save(out / "masks" / f"{stem}.png")
            Image.fromarray(fov.astype(np.uint8) * 255).save(out / "fov" / f"{stem}.png")
    print(f"wrote {len(paths) * o['n']} image/mask pairs to {out}")
    return 0


def _unlabelled(root, kind):
    """Load images whose masks may be absent (segmentation inference)."""
    root = Path(root)
    img_dir = root / "images" if (root / "images").is_dir() else root
    fov_dir = root / "fov"
    samples = []
    for p in sorted(x for x in img_dir.iterdir() if x.suffix.lower() in dp.samples.IMAGE_SUFFIXES):
        image = dp.samples._read_rgb(p)
        fov_path = dp.samples._match(p.stem, dp.samples._list_images(fov_dir))
        fov = dp.samples._read_binary(fov_path) if fov_path else dp.samples.stare_fov(image)
        samples.append(dp.FundusSample(image=image, mask=np.zeros_like(fov), fov=fov, id=p.stem,
                                       original_size=image.shape[:2], kind=kind))
    return samples


def cmd_segment(o):
    ckpt = load_checkpoint(o["checkpoint"])
    samples = _unlabelled(o["images"], o["kind"])
    probs = segment(ckpt.networks["generator"], samples)
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    for s, p in zip(samples, probs):
        _save_png_gray(out / f"{s.id}.png", p)
    print(f"wrote {len(samples)} probability maps to {out}")
    return 0


def cmd_evaluate(o):
    samples = dp.load_dataset(o["data"], o["kind"])
    cfg = {"kind": o["kind"], "data": str(o["data"])}
    if o.get("predictions"):
        pred_dir = Path(o["predictions"])
        preds = []
        for s in samples:
            path = dp.samples._match(s.id, dp.samples._list_images(pred_dir))
            if path is None:
                raise MissingPairError(f"no prediction for {s.id}")
            with Image.open(path) as im:
                preds.append(np.asarray(im.convert("L"), dtype=np.float64) / 255.0 * s.fov)
        report = evaluate_predictions(preds, samples, dict(cfg, predictions=str(pred_dir)))
    elif o.get("checkpoint"):
        ckpt = load_checkpoint(o["checkpoint"])
        if checkpoint_mode(ckpt) != "segmentation":
            raise ModeError("evaluate needs a segmentation checkpoint")
        report = evaluate_dataset(ckpt, samples, dict(cfg, checkpoint=str(o["checkpoint"])))
    else:
        raise ConfigError("evaluate needs --checkpoint or --predictions")
    out = Path(o["out"])
    report.to_json(out / "report.json")
    (out / "table.md").write_text(report.table(o["kind"]) + "\n")
    print(report.table(o["kind"]))
    return 0


def cmd_synthdata(o):
    dp.synthesize_to_disk(o["n"], o["size"], o["seed"], o["out"])
    print(f"wrote {o['n']} synthetic samples to {o['out']}")
    return 0


def cmd_convert_vgg19(o):
    convert_torchvision_vgg19(o["input"], Path(o["out"]) / "vgg19.npz")
    print(f"wrote {Path(o['out']) / 'vgg19.npz'}")
    return 0


HANDLERS = {"preprocess": cmd_preprocess, "train": cmd_train, "generate": cmd_generate,
            "segment": cmd_segment, "evaluate": cmd_evaluate, "synthdata": cmd_synthdata,
            "convert-vgg19": cmd_convert_vgg19}


def main(argv=None):
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    logging.basicConfig(level=logging.INFO if args.pop("verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    command = args.pop("command")
    try:
        options = resolve(command, args)
        return HANDLERS[command](options)
    except MiganError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc}", file=sys.stderr)
        return 17


if __name__ == "__main__":
    sys.exit(main())
