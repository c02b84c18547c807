"""Shared helpers for the test suite: procedural images, tiny network
configurations, and the recorded-overfit recipe."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from derainkit.datastore import build_manifest, write_triplets, DatasetKind
from derainkit.network import NetworkConfig
from derainkit.rainsynth import BlendMode, RainParamRanges, synthesize_dataset
from derainkit.trainer import TrainConfig

DATA_DIR = Path(__file__).parent / "data"
OVERFIT_RECORD = DATA_DIR / "tiny_overfit_record.json"


def make_backgrounds(n: int, h: int, w: int, seed: int,
                     sigma: float = 7.0) -> list[np.ndarray]:
    """Smooth mid-range ([0.1, 0.9]) random images; easy sigmoid targets."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        img = gaussian_filter(rng.random((h, w, 3)), sigma=(sigma, sigma, 0))
        lo, hi = img.min(), img.max()
        out.append((0.1 + 0.8 * (img - lo) / (hi - lo)).astype(np.float32))
    return out


def tiny_net(patch: int = 32) -> NetworkConfig:
    """Smallest credible network; keeps per-iteration cost in milliseconds."""
    return NetworkConfig(patch=patch, encoder_channels=(4, 8, 8, 8, 8),
                         composition_channels=(4, 4),
                         discriminator_channels=(4, 8, 8, 8))


def tiny_triplet_dataset(root: Path, count: int = 4, seed: int = 11):
    """Small paired dataset with short streaks, written at 32x32."""
    bgs = make_backgrounds(3, 64, 72, seed=7, sigma=5)
    ranges = RainParamRanges(density=(0.03, 0.08), streak_length=(5, 9),
                             angle_deg=(-15, 15), intensity=(0.5, 0.9),
                             num_overlays=(1, 2))
    triplets = synthesize_dataset(bgs, count, ranges, BlendMode.SCREEN,
                                  seed=seed, crop=32)
    return write_triplets(triplets, root)


def real_image_dirs(root: Path, n: int = 3, h: int = 230, w: int = 240,
                    seed: int = 19):
    """Unpaired clean/rainy directories for fine-tune tests (>= 224 pixels)."""
    from derainkit.images import save_image
    from derainkit.rainsynth import RainParams, blend, generate_rain_layer

    clean_dir = root / "clean"
    rainy_dir = root / "rainy"
    for i, img in enumerate(make_backgrounds(n, h, w, seed=seed)):
        save_image(clean_dir / f"c{i}.png", img)
        rain = generate_rain_layer(
            h, w, RainParams(streak_length=10, seed=seed + 100 + i), channels=3)
        save_image(rainy_dir / f"r{i}.png", blend(img, rain, BlendMode.SCREEN))
    return (build_manifest(rainy_dir, DatasetKind.REAL_RAINY),
            build_manifest(clean_dir, DatasetKind.REAL_CLEAN))


# -- the recorded-overfit recipe ----------------------------------------
# Fixed in full here so the committed record in data/ can always be
# regenerated (python tests/make_overfit_record.py) and cross-checked.

OVERFIT_SEEDS = {"backgrounds": 5, "synth": 11, "train": 21}


def overfit_dataset(root: Path):
    bgs = make_backgrounds(4, 96, 96, seed=OVERFIT_SEEDS["backgrounds"])
    ranges = RainParamRanges(density=(0.03, 0.08), streak_length=(10, 18),
                             angle_deg=(-15, 15), intensity=(0.5, 0.9),
                             num_overlays=(1, 2))
    triplets = synthesize_dataset(bgs, 4, ranges, BlendMode.SCREEN,
                                  seed=OVERFIT_SEEDS["synth"], crop=64)
    return write_triplets(triplets, root)


def overfit_net() -> NetworkConfig:
    return NetworkConfig(patch=64, encoder_channels=(16, 32, 48, 64, 64),
                         composition_channels=(16, 16),
                         discriminator_channels=(8, 16, 24, 32))


def overfit_train(max_iter: int = 2000) -> TrainConfig:
    return TrainConfig(batch=4, patch=64, lr_schedule=((max_iter, 0.2),),
                       max_iter=max_iter, seed=OVERFIT_SEEDS["train"],
                       checkpoint_every=500)


def run_overfit(workdir: Path, max_iter: int = 2000) -> dict:
    """Run the overfit recipe and summarize it the way the record stores it."""
    import torch

    from derainkit.images import load_image
    from derainkit.metrics import psnr
    from derainkit.network import DerainModel, image_to_tensor, tensor_to_image
    from derainkit.trainer import pretrain

    manifest = overfit_dataset(workdir / "data")
    ckpt = pretrain(manifest, overfit_train(max_iter), overfit_net(),
                    out_dir=workdir / "run")
    records = []
    with open(workdir / "run" / "pretrain_log.jsonl") as fh:
        for line in fh:
            records.append(json.loads(line))
    background_curve = [r["components"]["background"] for r in records]

    model = DerainModel(overfit_net())
    model.load_state_dict(ckpt.model_state)
    model.eval()
    psnrs = []
    with torch.no_grad():
        for entry in manifest.entries:
            rainy = load_image(manifest.path(entry, "rainy"))
            bg = load_image(manifest.path(entry, "background"))
            derained = tensor_to_image(model.derain(image_to_tensor(rainy)))
            psnrs.append(psnr(derained, bg))
    milestones = {str(i): background_curve[i]
                  for i in (0, 100, 500, 1000, max_iter - 1)
                  if i < len(background_curve)}
    return {
        "iterations": max_iter,
        "milestone_background_loss": milestones,
        "final_background_loss": background_curve[-1],
        "tail50_max_background_loss": max(background_curve[-50:]),
        "per_image_psnr_db": psnrs,
        "trend_first20_mean": float(np.mean(background_curve[:20])),
        "trend_last20_mean": float(np.mean(background_curve[-20:])),
    }


def load_overfit_record() -> dict:
    with open(OVERFIT_RECORD) as fh:
        return json.load(fh)
