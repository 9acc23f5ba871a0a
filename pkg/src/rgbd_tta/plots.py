"""Static SVG plots for metrics reports and adaptation traces."""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed hash salt keeps the SVG bytes stable across runs
matplotlib.rcParams["svg.hashsalt"] = "rgbd-tta"
matplotlib.rcParams["svg.fonttype"] = "none"


def _save(fig, path: Path) -> None:
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_report(report: dict, out_dir, trace_path=None) -> list[Path]:
    """Metric bars, per-image overlap F, and (given a trace) the adaptation loss curves."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    fig, ax = plt.subplots(figsize=(6, 3.5))
    names = ["overlap", "boundary"]
    for i, key in enumerate("prf"):
        ax.bar([j + 0.25 * (i - 1) for j in range(2)], [report[n][key] for n in names], 0.25, label=key.upper())
    ax.bar([2], [report["f_at_75"]], 0.25, color="0.4", label="F@.75")
    ax.set_xticks([0, 1, 2], ["Overlap", "Boundary", "F@.75"])
    ax.set_ylim(0, 100)
    ax.legend(loc="lower right")
    _save(fig, out / "metrics.svg")
    written.append(out / "metrics.svg")

    fig, ax = plt.subplots(figsize=(6, 3))
    ax.plot([r["overlap"]["f"] for r in report["per_image"]], marker="o", ms=3)
    ax.set_xlabel("image")
    ax.set_ylabel("overlap F")
    ax.set_ylim(0, 100)
    _save(fig, out / "per_image.svg")
    written.append(out / "per_image.svg")

    if trace_path is not None:
        recs = [json.loads(line) for line in Path(trace_path).read_text().splitlines() if line.strip()]
        fig, ax = plt.subplots(figsize=(6, 3.5))
        it = [r["iter"] for r in recs]
        for key in ("l_total", "l_neo", "l_ckd"):
            ax.plot(it, [r[key] for r in recs], label=key[2:])
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.legend()
        _save(fig, out / "losses.svg")
        written.append(out / "losses.svg")
    return written
