"""Human-readable renderings of metric reports: aligned text tables, the
cut-off sweep as CSV, and matplotlib figures written to files."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Mapping

from .metrics import MetricsReport

ROW_LABELS = (("mrr", "MRR"), ("map", "MAP"), ("ndcg", "nDCG"))


def _fmt(value: float) -> str:
    return "  n/a" if value != value else f"{value:.3f}"


def _table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    lines = []
    for n, row in enumerate([header] + rows):
        cells = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        lines.append(" | ".join(cells))
        if n == 0:
            lines.append("-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def publisher_table(per_publisher: Mapping[str, Mapping[str, float]], overall: Mapping[str, float],
                    corner: str = "Publisher", total: str = "All") -> str:
    """Metrics as rows, publishers as columns, aggregate in the last column."""
    pubs = sorted(per_publisher)
    header = [corner] + pubs + [total]
    rows = [
        [label] + [_fmt(per_publisher[p].get(key, float("nan"))) for p in pubs]
        + [_fmt(overall.get(key, float("nan")))]
        for key, label in ROW_LABELS
    ]
    return _table(header, rows)


def report_table(report: MetricsReport) -> str:
    return publisher_table(report.per_publisher, report.overall)


def loo_table(loo) -> str:
    per_pub = {p: r.report.overall for p, r in loo.folds.items()}
    return publisher_table(per_pub, loo.average, corner="Tested on", total="Average")


def k_table_text(k_table: Mapping[int, Mapping[str, float]]) -> str:
    ks = sorted(k_table)
    header = ["k"] + [str(k) for k in ks]
    rows = [
        [label] + [_fmt(k_table[k][key]) for k in ks]
        for key, label in (("recall", "Recall@k"), ("precision", "Precision@k"), ("f1", "F1@k"))
    ]
    return _table(header, rows)


def k_table_csv(k_table: Mapping[int, Mapping[str, float]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["k", "precision", "recall", "f1"])
    for k in sorted(k_table):
        row = k_table[k]
        writer.writerow([k] + [repr(float(row[m])) for m in ("precision", "recall", "f1")])
    return buf.getvalue()


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path: Path):
    # no Software/date metadata so reruns are byte-identical
    fig.savefig(path, format="png", dpi=100, metadata={"Software": None})


def plot_k_sweep(k_table: Mapping[int, Mapping[str, float]], path) -> Path:
    plt = _pyplot()
    ks = sorted(k_table)
    fig, ax = plt.subplots(figsize=(6, 4))
    for key, label in (("recall", "Recall@k"), ("precision", "Precision@k"), ("f1", "F1@k")):
        ax.plot(ks, [k_table[k][key] for k in ks], marker="o", label=label)
    ax.set_xlabel("cut-off k")
    ax.set_ylim(0, 1.05)
    ax.set_xticks(ks)
    ax.legend(loc="lower right")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    _save(fig, path)
    plt.close(fig)
    return path


def plot_publishers(per_publisher: Mapping[str, Mapping[str, float]], path) -> Path:
    plt = _pyplot()
    pubs = sorted(per_publisher)
    fig, ax = plt.subplots(figsize=(max(6, len(pubs) * 1.2), 4))
    width = 0.8 / len(ROW_LABELS)
    for i, (key, label) in enumerate(ROW_LABELS):
        xs = [n + (i - 1) * width for n in range(len(pubs))]
        ax.bar(xs, [per_publisher[p].get(key, 0.0) for p in pubs], width, label=label)
    ax.set_xticks(range(len(pubs)))
    ax.set_xticklabels(pubs)
    ax.set_ylim(0, 1.05)
    ax.legend(loc="lower right")
    fig.tight_layout()
    path = Path(path)
    _save(fig, path)
    plt.close(fig)
    return path


def write_report_dir(report: MetricsReport, out_dir, stem: str = "evaluate") -> list[Path]:
    """Text table, k-sweep CSV and both figures under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    table = out / f"{stem}_table.txt"
    table.write_text(report_table(report) + "\n" + k_table_text(report.k_table))
    paths.append(table)
    sweep = out / f"{stem}_k_sweep.csv"
    sweep.write_text(k_table_csv(report.k_table))
    paths.append(sweep)
    paths.append(plot_k_sweep(report.k_table, out / f"{stem}_k_sweep.png"))
    paths.append(plot_publishers(report.per_publisher, out / f"{stem}_publishers.png"))
    return paths


def write_loo_dir(loo, out_dir, stem: str = "loo") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = out / f"{stem}_table.txt"
    table.write_text(loo_table(loo))
    per_pub = {p: r.report.overall for p, r in loo.folds.items()}
    return [table, plot_publishers(per_pub, out / f"{stem}_publishers.png")]
