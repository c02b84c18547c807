"""PSNR/SSIM reference implementations, corpus evaluation, and a runtime
benchmark for the background-branch inference path.

Both metrics take (H, W, C) float images on [0, 1] and compute in double
precision. PSNR uses MAX=1; identical inputs report +inf as a sentinel.
SSIM uses an 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, L=1,
evaluated per channel over the valid (fully-overlapping) region and then
averaged across channels.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.signal import convolve2d

from .datastore import Manifest
from .errors import IdMismatchError, ImageSmallerThanPatchError, \
    ShapeMismatchError
from .images import load_image
from .network import DerainModel

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

# Published runtimes of the original implementation, seconds per image as
# (cpu, gpu), keyed by square input size. Printed next to our measurements
# for comparison; never asserted against.
REFERENCE_SECONDS = {250: (0.98, 0.03), 500: (4.04, 0.12)}


def _as_image(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ShapeMismatchError(f"expected (H, W, C) image, got shape {arr.shape}")
    return arr


def psnr(x, y) -> float:
    """10*log10(1 / MSE) on [0, 1] images; +inf when the images are equal."""
    a, b = _as_image(x), _as_image(y)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def _gaussian_window(size: int = SSIM_WINDOW,
                     sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    window = np.outer(g, g)
    return window / window.sum()


def ssim(x, y) -> float:
    """Mean local SSIM over the valid window region, channel-averaged."""
    a, b = _as_image(x), _as_image(y)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{a.shape} vs {b.shape}")
    h, w, channels = a.shape
    if min(h, w) < SSIM_WINDOW:
        raise ImageSmallerThanPatchError(
            f"image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} "
            f"ssim window"
        )
    window = _gaussian_window()
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    values = []
    for ch in range(channels):
        xa, yb = a[:, :, ch], b[:, :, ch]
        mu_x = convolve2d(xa, window, mode="valid")
        mu_y = convolve2d(yb, window, mode="valid")
        var_x = convolve2d(xa * xa, window, mode="valid") - mu_x ** 2
        var_y = convolve2d(yb * yb, window, mode="valid") - mu_y ** 2
        cov = convolve2d(xa * yb, window, mode="valid") - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
        values.append(float(np.mean(num / den)))
    return float(np.mean(values))


@dataclass
class TimingRecord:
    image_size: tuple[int, int]
    warmup_runs: int
    measured_runs: int
    median_seconds: float
    mean_seconds: float
    device_label: str
    per_run_seconds: list[float] = field(default_factory=list)


@dataclass
class EvalReport:
    per_image: list[dict]
    aggregate: dict
    timing: TimingRecord | None = None


def evaluate_corpus(results: Manifest, truths: Manifest) -> EvalReport:
    """Pair result and truth images by id and score every pair."""
    result_ids = {e.id for e in results.entries}
    truth_ids = {e.id for e in truths.entries}
    if result_ids != truth_ids:
        missing = sorted(truth_ids - result_ids)
        extra = sorted(result_ids - truth_ids)
        raise IdMismatchError(
            f"result/truth ids differ; missing from results: {missing}; "
            f"missing from truths: {extra}"
        )
    by_id_result = {e.id: e for e in results.entries}
    by_id_truth = {e.id: e for e in truths.entries}
    role_r = results.roles[0]
    role_t = truths.roles[0]
    per_image = []
    for id_ in sorted(result_ids):
        got = load_image(results.path(by_id_result[id_], role_r))
        want = load_image(truths.path(by_id_truth[id_], role_t))
        per_image.append({
            "id": id_,
            "psnr_db": psnr(got, want),
            "ssim": ssim(got, want),
        })
    aggregate = {
        "mean_psnr": float(np.mean([r["psnr_db"] for r in per_image])),
        "mean_ssim": float(np.mean([r["ssim"] for r in per_image])),
    }
    return EvalReport(per_image=per_image, aggregate=aggregate)


def bench_inference(model: DerainModel, size: tuple[int, int],
                    warmup: int = 2, runs: int = 10, seed: int = 0,
                    device: str = "cpu") -> TimingRecord:
    """Time `derain` on seeded random inputs of the given size."""
    if runs < 1:
        raise ValueError(f"runs must be >= 1, got {runs}")
    h, w = size
    g = torch.Generator().manual_seed(seed)
    model = model.to(device)
    model.eval()
    times = []
    with torch.no_grad():
        for i in range(warmup + runs):
            x = torch.rand(1, model.config.image_channels, h, w,
                           generator=g).to(device)
            t0 = time.perf_counter()
            model.derain(x)
            elapsed = time.perf_counter() - t0
            if i >= warmup:
                times.append(elapsed)
    return TimingRecord(
        image_size=(h, w),
        warmup_runs=warmup,
        measured_runs=runs,
        median_seconds=statistics.median(times),
        mean_seconds=statistics.fmean(times),
        device_label=str(device),
        per_run_seconds=times,
    )
