"""Report rendering: CSV plus aligned text tables, with matplotlib figures
written next to the delimited output."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .metrics import EvalReport, TimingRecord


def _fmt(value: float, digits: int = 4) -> str:
    if math.isinf(value):
        return "inf"
    return f"{value:.{digits}f}"


def format_eval_table(report: EvalReport) -> str:
    """Aligned human-readable table with the aggregate row last."""
    rows = [(r["id"], _fmt(r["psnr_db"], 2), _fmt(r["ssim"]))
            for r in report.per_image]
    rows.append(("mean", _fmt(report.aggregate["mean_psnr"], 2),
                 _fmt(report.aggregate["mean_ssim"])))
    header = ("id", "psnr_db", "ssim")
    widths = [max(len(h), *(len(row[i]) for row in rows))
              for i, h in enumerate(header)]
    lines = [
        "  ".join(h.ljust(widths[i]) for i, h in enumerate(header)),
        "  ".join("-" * w for w in widths),
    ]
    for row in rows:
        lines.append("  ".join(v.ljust(widths[i]) for i, v in enumerate(row)))
    return "\n".join(lines)


def write_eval_report(report: EvalReport, out_dir: str | Path) -> dict[str, Path]:
    """CSV of per-image scores plus a per-image bar-chart figure."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "eval.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "psnr_db", "ssim"])
        for r in report.per_image:
            writer.writerow([r["id"], repr(r["psnr_db"]), repr(r["ssim"])])
        writer.writerow(["mean", repr(report.aggregate["mean_psnr"]),
                         repr(report.aggregate["mean_ssim"])])

    fig_path = out_dir / "eval_scores.png"
    ids = [r["id"] for r in report.per_image]
    psnrs = [r["psnr_db"] if math.isfinite(r["psnr_db"]) else float("nan")
             for r in report.per_image]
    ssims = [r["ssim"] for r in report.per_image]
    plt.figure(figsize=(max(6, 0.5 * len(ids)), 6))
    plt.subplot(2, 1, 1)
    plt.bar(range(len(ids)), psnrs, color="#4878d0")
    plt.xticks(range(len(ids)), ids, rotation=90, fontsize=7)
    plt.ylabel("PSNR (dB)")
    plt.subplot(2, 1, 2)
    plt.bar(range(len(ids)), ssims, color="#ee854a")
    plt.xticks(range(len(ids)), ids, rotation=90, fontsize=7)
    plt.ylabel("SSIM")
    plt.ylim(0, 1.05)
    plt.tight_layout()
    plt.savefig(fig_path, dpi=120)
    plt.close()
    return {"csv": csv_path, "figure": fig_path}


def write_bench_report(records: list[TimingRecord],
                       out_dir: str | Path) -> dict[str, Path]:
    """CSV of timing summaries plus a median-latency figure."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "bench.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["height", "width", "warmup_runs", "measured_runs",
                         "median_seconds", "mean_seconds", "device"])
        for r in records:
            writer.writerow([r.image_size[0], r.image_size[1], r.warmup_runs,
                             r.measured_runs, repr(r.median_seconds),
                             repr(r.mean_seconds), r.device_label])

    fig_path = out_dir / "bench_times.png"
    labels = [f"{r.image_size[0]}x{r.image_size[1]}" for r in records]
    medians = [r.median_seconds for r in records]
    plt.figure(figsize=(6, 4))
    plt.bar(range(len(records)), medians, color="#4878d0", label="median")
    for i, r in enumerate(records):
        if r.per_run_seconds:
            plt.scatter([i] * len(r.per_run_seconds), r.per_run_seconds,
                        color="#333333", s=12, zorder=3, label=None)
    plt.xticks(range(len(records)), labels)
    plt.ylabel("seconds per image")
    plt.title(f"inference latency ({records[0].device_label})"
              if records else "inference latency")
    plt.tight_layout()
    plt.savefig(fig_path, dpi=120)
    plt.close()
    return {"csv": csv_path, "figure": fig_path}


def read_log(log_path: str | Path) -> list[dict]:
    records = []
    with open(log_path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def write_training_report(log_path: str | Path,
                          out_dir: str | Path) -> dict[str, Path]:
    """Loss-curve figure plus a CSV flattening of the training log."""
    records = read_log(log_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    component_names = sorted({k for r in records for k in r["components"]})
    csv_path = out_dir / "training.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "stage", "lr", "total"]
                        + component_names + ["ms_per_iter"])
        for r in records:
            writer.writerow(
                [r["iteration"], r["stage"], repr(r["lr"]), repr(r["total"])]
                + [repr(r["components"][k]) if k in r["components"] else ""
                   for k in component_names]
                + [repr(r["ms_per_iter"])])

    fig_path = out_dir / "training_losses.png"
    iters = [r["iteration"] for r in records]
    plt.figure(figsize=(8, 5))
    plt.plot(iters, [r["total"] for r in records], label="total", linewidth=2)
    for name in component_names:
        series = [(r["iteration"], r["components"][name])
                  for r in records if name in r["components"]]
        if series:
            plt.plot([s[0] for s in series], [s[1] for s in series],
                     label=name, alpha=0.7)
    plt.xlabel("iteration")
    plt.ylabel("loss")
    plt.yscale("log")
    plt.legend()
    plt.tight_layout()
    plt.savefig(fig_path, dpi=120)
    plt.close()
    return {"csv": csv_path, "figure": fig_path}
