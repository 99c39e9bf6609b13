"""PNG diagnostics: intensity-histogram overlays and segmentation panels."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .core import HU_MAX, HU_MIN  # noqa: E402
from .errors import MissingArtifactError  # noqa: E402
from .storage import read_json  # noqa: E402

# Fixed savefig metadata so reruns produce byte-identical files.
_PNG_META = {"Software": "pcn"}


def _save(fig, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)


def plot_histogram_overlay(real_hist: dict, gen_hist: dict, title: str,
                           path: Path) -> None:
    """Overlay of real vs generated normalized intensity histograms."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    centers = 0.5 * (np.asarray(real_hist["bin_edges"][:-1])
                     + np.asarray(real_hist["bin_edges"][1:]))
    width = centers[1] - centers[0]
    ax.bar(centers, real_hist["freqs"], width=width, alpha=0.55, label="real")
    ax.bar(centers, gen_hist["freqs"], width=width, alpha=0.55, label="generated")
    ax.set_xlabel("HU")
    ax.set_ylabel("frequency")
    ax.set_title(title, fontsize=10)
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_segmentation_panels(cases: list[dict], path: Path, num_classes: int) -> None:
    """Rows of (input, single, fused, ground truth) panels."""
    n = len(cases)
    fig, axes = plt.subplots(n, 4, figsize=(9, 2.4 * n), squeeze=False)
    for r, case in enumerate(cases):
        panels = [
            ("input " + case["case_id"], case["image"], "gray", (HU_MIN, HU_MAX)),
            ("single", case["single"], "viridis", (0, num_classes - 1)),
            ("fused", case["fused"], "viridis", (0, num_classes - 1)),
            ("ground truth", case["gt"], "viridis", (0, num_classes - 1)),
        ]
        for c, (title, img, cmap, (vmin, vmax)) in enumerate(panels):
            ax = axes[r][c]
            ax.imshow(img, cmap=cmap, vmin=vmin, vmax=vmax, interpolation="nearest")
            ax.set_title(title, fontsize=8)
            ax.axis("off")
    fig.tight_layout()
    _save(fig, path)


def emit_plots(run_dir, out_dir=None) -> list[Path]:
    """Render the standard diagnostic PNGs from a run's eval outputs.

    Requires eval artifacts (eval_report.json, eval_panels.npz and, when
    translation was evaluated, eval_histograms.json) in the run directory.
    """
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir / "plots"
    report_path = run_dir / "eval_report.json"
    if not report_path.exists():
        raise MissingArtifactError(
            f"{run_dir} has no eval outputs; run `pcn eval` first"
        )
    report = read_json(report_path)
    written = []

    hist_path = run_dir / "eval_histograms.json"
    if hist_path.exists():
        hists = read_json(hist_path)
        for entry in hists["comparisons"]:
            png = out_dir / f"hist_{entry['name']}.png"
            plot_histogram_overlay(entry["real"], entry["generated"],
                                   entry["title"], png)
            written.append(png)

    panels_path = run_dir / "eval_panels.npz"
    if panels_path.exists():
        data = np.load(panels_path, allow_pickle=False)
        case_ids = [str(c) for c in data["case_ids"]]
        # best / median / worst by fused DSC ordering stored at eval time
        order = list(data["order"])
        picks = sorted({order[0], order[len(order) // 2], order[-1]})
        cases = []
        for i in picks:
            cases.append({
                "case_id": case_ids[i],
                "image": data["images"][i],
                "single": data["single"][i],
                "fused": data["fused"][i],
                "gt": data["gt"][i],
            })
        png = out_dir / "segmentation_panels.png"
        plot_segmentation_panels(cases, png, num_classes=int(data["num_classes"]))
        written.append(png)

    if not written:
        raise MissingArtifactError(
            f"{run_dir} eval outputs contain nothing to plot; rerun `pcn eval`"
        )
    return written
