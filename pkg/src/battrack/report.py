"""Report emission: headline CSV, curve plot-data CSV and PNG precision/success plots."""
from __future__ import annotations

import csv
import io
from pathlib import Path

from .evaluation import PR_HEADLINE, MetricReport

HEADER = ("method", "variant", "metric", "threshold", "value")
METRICS = ("PR", "SR", "MPR", "MSR")


def _num(v: float) -> str:
    return f"{v:.6f}"


def _metric_name(metric: str, scope: str | None) -> str:
    return metric if scope is None else f"{metric}/{scope}"


def headline_rows(method: str, variant: str, reports: dict[str | None, MetricReport]) -> list[tuple]:
    """One row per metric and scope; ``None`` is the overall scope, other keys are attributes."""
    rows = []
    for scope, rep in reports.items():
        for metric, value in rep.headlines().items():
            thr = str(PR_HEADLINE) if metric in ("PR", "MPR") else "auc"
            rows.append((method, variant, _metric_name(metric, scope), thr, _num(value)))
    return rows


def curve_rows(method: str, variant: str, reports: dict[str | None, MetricReport]) -> list[tuple]:
    rows = []
    for scope, rep in reports.items():
        for metric in METRICS:
            for t, v in zip(rep.thresholds(metric), rep.curves[metric]):
                rows.append((method, variant, _metric_name(metric, scope), f"{t:g}", _num(v)))
    return rows


def to_csv(rows: list[tuple]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    w.writerows(rows)
    return buf.getvalue()


def plot_curves(path: Path, method: str, reports: dict[str | None, MetricReport]) -> None:
    """Precision and success plots side by side; one line per scope."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax_p, ax_s) = plt.subplots(1, 2, figsize=(9, 3.6))
    for scope, rep in reports.items():
        label = "all" if scope is None else scope
        ax_p.plot(rep.thresholds("PR"), rep.pr_curve, label=f"{label} [{rep.pr:.3f}]")
        ax_s.plot(rep.thresholds("SR"), rep.sr_curve, label=f"{label} [{rep.sr:.3f}]")
    ax_p.set(title=f"Precision ({method})", xlabel="center error threshold (px)", ylabel="precision", ylim=(0, 1.02))
    ax_s.set(title=f"Success ({method})", xlabel="IoU threshold", ylabel="success rate", ylim=(0, 1.02))
    for ax in (ax_p, ax_s):
        ax.grid(alpha=0.3)
        ax.legend(fontsize=7)
    fig.tight_layout()
    # fixed metadata keeps the PNG bytes reproducible
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def write_report(out_dir, method: str, variant: str, reports: dict[str | None, MetricReport],
                 plots: bool = True) -> dict[str, Path]:
    """Writes metrics.csv, curves.csv and (optionally) curves.png into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"metrics": out / "metrics.csv", "curves": out / "curves.csv"}
    paths["metrics"].write_text(to_csv(headline_rows(method, variant, reports)))
    paths["curves"].write_text(to_csv(curve_rows(method, variant, reports)))
    if plots:
        paths["plot"] = out / "curves.png"
        plot_curves(paths["plot"], method, reports)
    return paths


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def summary_value(rows: list[dict[str, str]], metric: str) -> float:
    for r in rows:
        if r["metric"] == metric:
            return float(r["value"])
    raise KeyError(metric)

