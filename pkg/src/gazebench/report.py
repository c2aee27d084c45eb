"""Metrics CSV, stats JSON and static SVG figures."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import MetricsReport  # noqa: E402

CSV_FIELDS = ("metric", "variant", "value", "threshold")

plt.rcParams["svg.hashsalt"] = "gazebench"
plt.rcParams["svg.fonttype"] = "none"


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v))


def metrics_rows(report: MetricsReport) -> list[dict]:
    if report is None or (math.isnan(report.f1) and report.frames_evaluated == 0):
        return []
    thr = report.threshold
    v = report.variant
    rows = [
        {"metric": "f1", "variant": v, "value": _fmt(report.f1), "threshold": _fmt(thr)},
        {"metric": "precision", "variant": v, "value": _fmt(report.precision), "threshold": _fmt(thr)},
        {"metric": "recall", "variant": v, "value": _fmt(report.recall), "threshold": _fmt(thr)},
        {"metric": "frames_evaluated", "variant": v, "value": str(report.frames_evaluated), "threshold": ""},
        {"metric": "frames_skipped", "variant": v, "value": str(report.frames_skipped), "threshold": ""},
    ]
    if report.confusion is not None:
        names = (("tp_rate", 0, 0), ("fn_rate", 0, 1), ("fp_rate", 1, 0), ("tn_rate", 1, 1))
        for name, i, j in names:
            rows.append({"metric": f"confusion_{name}", "variant": v,
                         "value": _fmt(report.confusion[i, j]), "threshold": _fmt(thr)})
    if report.sweep is not None:
        for tau, f in zip(report.sweep.thresholds, report.sweep.f1()):
            rows.append({"metric": "sweep_f1", "variant": v, "value": _fmt(f), "threshold": _fmt(tau)})
    if report.classifier:
        for k in ("f1", "precision", "recall", "specificity"):
            rows.append({"metric": f"classifier_{k}", "variant": v,
                         "value": _fmt(report.classifier[k]), "threshold": "0.5"})
    return rows


def metrics_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerows(metrics_rows(r))
    return buf.getvalue()


def read_metrics_csv(text: str) -> list[dict]:
    rows = []
    for row in csv.DictReader(io.StringIO(text)):
        rows.append({
            "metric": row["metric"],
            "variant": row["variant"],
            "value": float(row["value"]) if row["value"] else float("nan"),
            "threshold": float(row["threshold"]) if row["threshold"] else None,
        })
    return rows


def _save_svg(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def confusion_svg(report: MetricsReport, path) -> None:
    fig, ax = plt.subplots(figsize=(3.2, 3.0))
    m = report.confusion if report.confusion is not None else np.zeros((2, 2))
    ax.imshow(m, vmin=0, vmax=1, cmap="Blues")
    for i in range(2):
        for j in range(2):
            ax.text(j, i, f"{m[i, j]:.3f}", ha="center", va="center")
    ax.set_xticks([0, 1], ["pred +", "pred -"])
    ax.set_yticks([0, 1], ["gt +", "gt -"])
    ax.set_title(f"pixel confusion {report.variant}".strip())
    fig.tight_layout()
    _save_svg(fig, Path(path))


def loss_curve_svg(history: list, path, title: str = "training loss") -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3.0))
    keys = [k for k in (history[0] if history else {}) if k not in ("epoch", "wall_time")]
    epochs = [row["epoch"] for row in history]
    for k in keys:
        ax.plot(epochs, [row.get(k, float("nan")) for row in history], label=k)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    if keys:
        ax.legend(fontsize=7)
    fig.tight_layout()
    _save_svg(fig, Path(path))


def histogram_svg(stats: dict, path) -> None:
    views = list(stats)
    fig, axes = plt.subplots(1, len(views), figsize=(3.2 * len(views), 3.0))
    axes = np.atleast_1d(axes)
    for ax, v in zip(axes, views):
        ax.imshow(np.asarray(stats[v]["histogram"]), cmap="magma", extent=(0, 1, 1, 0))
        ax.set_title(f"{v}: OOB {100 * stats[v]['out_of_bound_rate']:.1f}%")
        ax.set_xlabel("x")
        ax.set_ylabel("y")
    fig.tight_layout()
    _save_svg(fig, Path(path))


def emit_report(reports, out_dir, histories: dict | None = None) -> list[Path]:
    """Write metrics.csv and figures/*.svg for the given reports."""
    out = Path(out_dir)
    figs = out / "figures"
    figs.mkdir(parents=True, exist_ok=True)
    reports = [r for r in reports if r is not None]
    written = [out / "metrics.csv"]
    written[0].write_text(metrics_csv(reports))
    for r in reports:
        if r.confusion is not None:
            p = figs / f"confusion_{r.variant or 'model'}.svg"
            confusion_svg(r, p)
            written.append(p)
    for name, hist in (histories or {}).items():
        if hist:
            p = figs / f"loss_{name}.svg"
            loss_curve_svg(hist, p, f"training loss ({name})")
            written.append(p)
    return written


def emit_stats(stats: dict, out_dir) -> list[Path]:
    out = Path(out_dir)
    (out / "figures").mkdir(parents=True, exist_ok=True)
    p = out / "stats.json"
    p.write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    h = out / "figures" / "gaze_histogram.svg"
    histogram_svg(stats, h)
    return [p, h]
