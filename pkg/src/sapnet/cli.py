"""Command line interface.

Subcommands:

* ``train``   - optimize a model from a flat config file
* ``derain``  - restore one image or a directory of images with a checkpoint
* ``eval``    - score a checkpoint on a paired dataset, writing a TSV report
* ``inspect`` - print a checkpoint's config, epoch, and parameter count

Exit codes: 0 success, 2 configuration problems (bad config file, unknown
key, checkpoint/config mismatch), 1 runtime problems (missing images, numeric
failures, unavailable pretrained weights).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import torch

from . import config as cfgmod
from .data import DatasetSpec, load_image, load_pairs, save_image
from .errors import ConfigError, InputError, SapnetError
from .losses import build_feature_extractor
from .metrics import evaluate, write_report
from .network import derain, parameter_count, receptive_field
from .segmentation import build_segmenter
from .trainer import load_checkpoint, train

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sapnet",
                                     description="progressive recurrent single-image deraining")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a config file")
    p_train.add_argument("--config", required=True, help="flat key=value config file")
    p_train.add_argument("--seed", type=int, default=None, help="override train.seed")
    p_train.add_argument("--checkpoint", default=None, help="resume from this checkpoint")

    p_derain = sub.add_parser("derain", help="restore images with a trained model")
    p_derain.add_argument("--checkpoint", required=True)
    p_derain.add_argument("--input", required=True, help="image file or directory")
    p_derain.add_argument("--output", required=True, help="output file or directory")
    p_derain.add_argument("--stages", type=int, default=None,
                          help="run this many stages and also write every intermediate")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a paired dataset")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--input", required=True,
                        help="dataset root containing rainy/ and clean/ (or manifest.tsv)")
    p_eval.add_argument("--output", required=True, help="TSV report path")

    p_inspect = sub.add_parser("inspect", help="describe a checkpoint")
    p_inspect.add_argument("--checkpoint", required=True)
    return parser


def cmd_train(args) -> int:
    values = cfgmod.parse_config_file(args.config)
    if args.seed is not None:
        values["train.seed"] = args.seed
    run = cfgmod.resolve(values)
    if not run.rainy_dir or not run.clean_dir:
        if not run.manifest:
            raise ConfigError("data.rainy_dir and data.clean_dir (or data.manifest) must be set")
    spec = DatasetSpec(rainy_dir=run.rainy_dir, clean_dir=run.clean_dir,
                       crop=run.crop, manifest=run.manifest)
    pairs = load_pairs(spec)
    if not pairs:
        raise InputError(f"no image pairs found under {run.rainy_dir!r}")

    toggles = run.train.toggles
    segmenter = None
    if toggles.use_seg and run.weights.lambda_seg != 0.0:
        segmenter = build_segmenter(run.seg, seed=run.train.seed)
    extractor = None
    if (toggles.use_pcl and run.weights.lambda_pcl != 0.0) or \
       (toggles.use_lpisl and run.weights.lambda_lpisl != 0.0):
        extractor = build_feature_extractor(
            run.extractor_mode, taps=run.taps, widths=run.extractor_widths,
            seed=run.train.seed, weights_path=run.vgg_weights)

    out_dir = Path(run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config_resolved.cfg").write_text(cfgmod.format_config(values),
                                                 encoding="utf-8")
    print(f"config hash: {cfgmod.config_hash(values)}")
    print(f"training on {len(pairs)} pairs for {run.train.epochs} epochs "
          f"({parameter_count(run.model)} parameters, receptive field "
          f"{receptive_field(run.model)})")
    result = train(pairs, run.model, run.train, segmenter=segmenter,
                   extractor=extractor, loss_weights=run.weights, crop=run.crop,
                   lpisl_resize=run.lpisl_resize, out_dir=str(out_dir),
                   resume_from=args.checkpoint)
    last = result.log[-1]
    print(f"done: final total loss {last.total:.6f}, checkpoint {result.checkpoint_path}")
    return 0


def _input_images(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir()
                       if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise InputError(f"no images found in directory {path}")
        return files
    if path.is_file():
        return [path]
    raise InputError(f"input not found: {path}")


def cmd_derain(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    net = ckpt.net
    net.eval()
    in_path = Path(args.input)
    out_path = Path(args.output)
    images = _input_images(in_path)
    batch_mode = in_path.is_dir()
    if batch_mode:
        out_path.mkdir(parents=True, exist_ok=True)
    for src in images:
        rainy = load_image(src)
        with torch.no_grad():
            result = derain(rainy, net, stages=args.stages)
        dest = out_path / src.name if batch_mode else out_path
        if dest.parent and not dest.parent.exists():
            dest.parent.mkdir(parents=True, exist_ok=True)
        save_image(result.final, dest)
        if args.stages is not None:
            for t, inter in enumerate(result.intermediates, start=1):
                stage_dest = dest.with_name(f"{dest.stem}_t{t}{dest.suffix}")
                save_image(inter, stage_dest)
    print(f"restored {len(images)} image(s) -> {out_path}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    net = ckpt.net
    net.eval()
    spec = DatasetSpec.from_root(args.input)
    pairs = load_pairs(spec)
    if not pairs:
        raise InputError(f"no pairs found under {args.input}")

    def restore(rainy):
        return derain(rainy, net).final

    report = evaluate(restore, pairs)
    write_report(report, args.output)
    print(f"evaluated {len(pairs)} pairs: mean_psnr={report.mean_psnr:.4f} "
          f"mean_ssim={report.mean_ssim:.6f}")
    print(f"report written to {args.output}")
    return 0


def cmd_inspect(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    print(f"epoch: {ckpt.epoch}")
    print(f"rng_seed: {ckpt.rng_seed}")
    print(f"parameters: {sum(p.numel() for p in ckpt.net.parameters())}")
    print(f"receptive_field: {receptive_field(ckpt.config)}")
    for key, value in sorted(ckpt.config.to_dict().items()):
        print(f"model.{key}: {value}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {"train": cmd_train, "derain": cmd_derain,
                "eval": cmd_eval, "inspect": cmd_inspect}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SapnetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
