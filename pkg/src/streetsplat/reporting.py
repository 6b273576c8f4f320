"""Report writers: JSON summaries, delimited per-frame metrics, and the
matplotlib figures rendered alongside them."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

REPORT_SCHEMA = "streetsplat-report/v1"

# Pin savefig metadata so repeated runs are byte-identical.
_PNG_META = {"Software": "streetsplat"}


def write_json_report(path, payload: dict) -> None:
    body = {"schema": REPORT_SCHEMA, **payload}
    Path(path).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def write_metrics_csv(path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def save_eval_figure(path, rows: list[dict]) -> None:
    """Per-frame PSNR/SSIM lines for an evaluation run."""
    frames = [r["frame"] for r in rows]
    fig, axes = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    axes[0].plot(frames, [r["psnr"] for r in rows], marker="o", color="tab:blue")
    axes[0].set_ylabel("PSNR (dB)")
    axes[0].grid(alpha=0.3)
    axes[1].plot(frames, [r["ssim"] for r in rows], marker="o", color="tab:orange")
    axes[1].set_ylabel("SSIM")
    axes[1].set_xlabel("frame")
    axes[1].grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)


def save_training_curves(path, metrics: list[dict]) -> None:
    """Loss / Gaussian-count / held-out PSNR curves from the trainer log."""
    iters = [m["iter"] for m in metrics]
    fig, axes = plt.subplots(3, 1, figsize=(7, 7), sharex=True)
    axes[0].plot(iters, [m["total"] for m in metrics], color="tab:red")
    axes[0].set_ylabel("total loss")
    axes[0].grid(alpha=0.3)
    axes[1].plot(iters, [m["gaussians"] for m in metrics], color="tab:green")
    axes[1].set_ylabel("gaussians")
    axes[1].grid(alpha=0.3)
    psnr = [(m["iter"], m["psnr_holdout"]) for m in metrics if m.get("psnr_holdout") is not None]
    if psnr:
        axes[2].plot([p[0] for p in psnr], [p[1] for p in psnr], color="tab:blue")
    axes[2].set_ylabel("held-out PSNR")
    axes[2].set_xlabel("iteration")
    axes[2].grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)


def training_metrics_rows(metrics: list[dict]) -> tuple[list[dict], list[str]]:
    rows = []
    term_names = sorted({k for m in metrics for k in m.get("terms", {})})
    for m in metrics:
        row = {
            "iter": m["iter"],
            "total": m["total"],
            "gaussians": m["gaussians"],
            "noise_scale": m.get("noise_scale"),
            "psnr_holdout": m.get("psnr_holdout"),
        }
        for name in term_names:
            row[f"term_{name}"] = m.get("terms", {}).get(name)
        rows.append(row)
    columns = ["iter", "total", "gaussians", "noise_scale", "psnr_holdout"] + [
        f"term_{n}" for n in term_names
    ]
    return rows, columns
