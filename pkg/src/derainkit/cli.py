"""Command-line entry point.

Commands: synth, train, finetune, derain, eval, bench. Every command
accepts --config plus one generated flag per config key (file values
override defaults, flags override the file). Exit codes: 0 success,
1 user error, 2 internal abort.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import torch

from . import report
from .config import SCHEMA, RunConfig, config_text, load_run_config
from .datastore import IMAGE_EXTENSIONS, DatasetKind, build_manifest, \
    write_triplets
from .errors import DerainError, NonFiniteLossError
from .images import load_image, save_image
from .metrics import REFERENCE_SECONDS, bench_inference, evaluate_corpus
from .network import DerainModel, image_to_tensor, init_weights, load_model, \
    tensor_to_image
from .rainsynth import BlendMode, synthesize_dataset
from .trainer import finetune, pretrain


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage; we reserve 2 for internal aborts."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE",
                   help="config file (key = value sections); flags override it")
    for f in SCHEMA:
        p.add_argument(f.flag, dest=f.dest, metavar="VALUE",
                       help=f"override [{f.section}] {f.key}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="derainkit",
                     description="Rain removal: synthesize data, train the "
                                 "two-branch model, derain images, evaluate.")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic triplet dataset")
    _add_config_flags(p)
    p.add_argument("--backgrounds", required=True, metavar="DIR",
                   help="directory of clean background photos")
    p.add_argument("--count", type=int, default=10_400,
                   help="number of triplets (default 10400)")
    p.add_argument("--mode", choices=[m.value for m in BlendMode],
                   default=BlendMode.SCREEN.value,
                   help="rain compositing mode (default screen)")
    p.add_argument("--crop", type=int, default=224,
                   help="triplet side length in pixels (default 224)")

    p = sub.add_parser("train", help="supervised pretraining on triplets")
    _add_config_flags(p)
    p.add_argument("--data", required=True, metavar="DIR",
                   help="triplet dataset root")
    p.add_argument("--resume", metavar="CKPT", help="checkpoint to continue from")

    p = sub.add_parser("finetune", help="adversarial fine-tuning on real photos")
    _add_config_flags(p)
    p.add_argument("--pretrained", metavar="CKPT",
                   help="pretraining checkpoint to start from")
    p.add_argument("--rainy", required=True, metavar="DIR",
                   help="directory of real rainy photos")
    p.add_argument("--clean", required=True, metavar="DIR",
                   help="directory of real rain-free photos")
    p.add_argument("--resume", metavar="CKPT", help="checkpoint to continue from")

    p = sub.add_parser("derain", help="remove rain from images")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True, metavar="CKPT",
                   help="trained model checkpoint")
    p.add_argument("input", help="image file or directory of images")

    p = sub.add_parser("eval", help="score results against ground truth")
    _add_config_flags(p)
    p.add_argument("--results", required=True, metavar="DIR",
                   help="directory of derained images")
    p.add_argument("--truth", required=True, metavar="DIR",
                   help="directory of ground-truth images with matching names")

    p = sub.add_parser("bench", help="time inference on random inputs")
    _add_config_flags(p)
    p.add_argument("--checkpoint", metavar="CKPT",
                   help="checkpoint to time (default: freshly initialized model)")
    p.add_argument("--size", type=int, action="append", metavar="N",
                   help="square input size; repeatable (default: 250 and 500)")
    p.add_argument("--warmup", type=int, default=2,
                   help="untimed warmup runs per size (default 2)")
    p.add_argument("--runs", type=int, default=10,
                   help="timed runs per size (default 10)")

    return parser


def _load_backgrounds(directory: str) -> list:
    manifest = build_manifest(directory, DatasetKind.REAL_CLEAN)
    return [load_image(manifest.path(e, "image")) for e in manifest.entries]


def cmd_synth(cfg: RunConfig, args) -> int:
    backgrounds = _load_backgrounds(args.backgrounds)
    triplets = synthesize_dataset(backgrounds, args.count, cfg.rain,
                                  BlendMode(args.mode), cfg.seed,
                                  crop=args.crop)
    manifest = write_triplets(triplets, cfg.out)
    print(f"wrote {len(manifest)} triplets to {cfg.out} "
          f"(mode={args.mode}, seed={cfg.seed}, crop={args.crop})")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    manifest = build_manifest(args.data, DatasetKind.PAIRED_TRIPLETS)
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = config_text(cfg)
    (out_dir / "config.ini").write_text(header)
    print(header, end="")
    ckpt = pretrain(manifest, cfg.train, cfg.network, out_dir=out_dir,
                    objective=cfg.loss.pretrain_objective(),
                    resume=args.resume, device=cfg.resolve_device())
    paths = report.write_training_report(out_dir / "pretrain_log.jsonl", out_dir)
    last = ckpt.loss_tail[-1] if ckpt.loss_tail else {}
    print(f"pretrained {ckpt.iteration} iterations; "
          f"final total loss {last.get('total', float('nan')):.6g}")
    print(f"checkpoint: {out_dir / 'pretrain_latest.pt'}")
    print(f"report: {paths['csv']} {paths['figure']}")
    return 0


def cmd_finetune(cfg: RunConfig, args) -> int:
    if args.pretrained is None and args.resume is None:
        raise DerainError("finetune needs --pretrained or --resume")
    rainy = build_manifest(args.rainy, DatasetKind.REAL_RAINY)
    clean = build_manifest(args.clean, DatasetKind.REAL_CLEAN)
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = config_text(cfg)
    (out_dir / "config.ini").write_text(header)
    print(header, end="")
    ckpt = finetune(args.pretrained, rainy, clean, cfg.train, out_dir=out_dir,
                    objective=cfg.loss.finetune_objective(),
                    resume=args.resume, device=cfg.resolve_device())
    paths = report.write_training_report(out_dir / "finetune_log.jsonl", out_dir)
    last = ckpt.loss_tail[-1] if ckpt.loss_tail else {}
    print(f"fine-tuned {ckpt.iteration} iterations; "
          f"final total loss {last.get('total', float('nan')):.6g}")
    print(f"checkpoint: {out_dir / 'finetune_latest.pt'}")
    print(f"report: {paths['csv']} {paths['figure']}")
    return 0


def _input_images(path: Path) -> list[Path]:
    if path.is_dir():
        return [p for p in sorted(path.iterdir())
                if p.suffix.lower() in IMAGE_EXTENSIONS and p.is_file()]
    if path.is_file():
        return [path]
    raise DerainError(f"input {path} is neither a file nor a directory")


def cmd_derain(cfg: RunConfig, args) -> int:
    model = load_model(args.checkpoint)
    device = cfg.resolve_device()
    model = model.to(device)
    model.eval()
    inputs = _input_images(Path(args.input))
    if not inputs:
        raise DerainError(f"no images found under {args.input}")
    out_dir = Path(cfg.out)
    for src in inputs:
        img = load_image(src)
        x = image_to_tensor(img).to(device)
        t0 = time.perf_counter()
        with torch.no_grad():
            y = model.derain(x)
        elapsed = time.perf_counter() - t0
        dst = out_dir / f"{src.stem}_derained.png"
        save_image(dst, tensor_to_image(y))
        print(f"{src.name}: {img.shape[0]}x{img.shape[1]} "
              f"{elapsed:.3f}s -> {dst}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    results = build_manifest(args.results, DatasetKind.REAL_CLEAN)
    truths = build_manifest(args.truth, DatasetKind.REAL_CLEAN)
    rep = evaluate_corpus(results, truths)
    print(report.format_eval_table(rep))
    paths = report.write_eval_report(rep, cfg.out)
    print(f"report: {paths['csv']} {paths['figure']}")
    return 0


def cmd_bench(cfg: RunConfig, args) -> int:
    if args.checkpoint is not None:
        model = load_model(args.checkpoint)
    else:
        model = init_weights(DerainModel(cfg.network), seed=cfg.seed)
    device = cfg.resolve_device()
    sizes = args.size or [250, 500]
    records = []
    for size in sizes:
        rec = bench_inference(model, (size, size), warmup=args.warmup,
                              runs=args.runs, seed=cfg.seed, device=device)
        records.append(rec)
        print(f"{size}x{size}: median {rec.median_seconds:.4f}s, "
              f"mean {rec.mean_seconds:.4f}s over {rec.measured_runs} runs "
              f"({rec.device_label})")
        if size in REFERENCE_SECONDS:
            cpu_s, gpu_s = REFERENCE_SECONDS[size]
            print(f"  published reference (original implementation, "
                  f"comparison only): cpu {cpu_s:.2f}s / gpu {gpu_s:.2f}s")
    paths = report.write_bench_report(records, cfg.out)
    print(f"report: {paths['csv']} {paths['figure']}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "derain": cmd_derain,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_run_config(args.config, args)
        return COMMANDS[args.command](cfg, args)
    except NonFiniteLossError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 2
    except DerainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort boundary
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
