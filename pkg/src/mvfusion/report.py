"""Aggregate result tables (markdown + CSV) and relative-improvement lines.

The report is a pure function of a results file: rows group by
(method, merge, gate), metrics aggregate to mean +/- sample std on two
decimals, the top-3 means per classification metric are flagged, and the
best fusion method is compared against the best and worst single-view
baselines with the percent-change statistic.
"""

from __future__ import annotations

from .errors import ConfigurationError
from .metrics import aggregate, relative_improvement

METRIC_COLUMNS = ("aa", "auc", "f1", "entropy")
TOP_FLAGGED = ("aa", "auc", "f1")  # higher is better; entropy is left unmarked


def display_name(row) -> str:
    method = row["method"]
    if row.get("merge"):
        return f"{method}({row['merge']})"
    if row.get("gate"):
        return f"{method}({row['gate']})"
    return method


def summarize(rows):
    """Group result rows and aggregate their metrics (failed runs drop)."""
    groups = {}
    for row in rows:
        if row.get("failed"):
            continue
        groups.setdefault(display_name(row), []).append(row["metrics"])
    if not groups:
        raise ConfigurationError("no successful runs to report")
    return {name: aggregate(metric_rows) for name, metric_rows in groups.items()}


def _top3(summaries, metric):
    means = sorted((report[metric].mean for report in summaries.values()), reverse=True)
    cut = means[min(2, len(means) - 1)]
    return {name for name, report in summaries.items() if report[metric].mean >= cut}


def improvement_lines(summaries):
    """Best-fusion-vs-best/worst-single relative improvement in AA."""
    singles = {n: r for n, r in summaries.items() if n.startswith("single:")}
    fusions = {n: r for n, r in summaries.items() if not n.startswith("single:")}
    if not singles or not fusions:
        return []
    best_fusion = max(fusions, key=lambda n: fusions[n]["aa"].mean)
    best_single = max(singles, key=lambda n: singles[n]["aa"].mean)
    worst_single = min(singles, key=lambda n: singles[n]["aa"].mean)
    lines = []
    for label, single in (("best", best_single), ("worst", worst_single)):
        delta = relative_improvement(
            fusions[best_fusion]["aa"].mean, singles[single]["aa"].mean
        )
        lines.append(
            f"Relative improvement in AA, {best_fusion} vs {label} single view "
            f"({single}): {delta:+.1f}%"
        )
    return lines


def render_markdown(summaries) -> str:
    flagged = {metric: _top3(summaries, metric) for metric in TOP_FLAGGED}
    lines = [
        "| method | AA | AUC | F1 | entropy | runs |",
        "|---|---|---|---|---|---|",
    ]
    for name, report in summaries.items():
        cells = []
        for metric in METRIC_COLUMNS:
            cell = f"{report[metric].mean:.2f} ± {report[metric].std:.2f}"
            if metric in flagged and name in flagged[metric]:
                cell = f"**{cell}**"
            cells.append(cell)
        lines.append(f"| {name} | {cells[0]} | {cells[1]} | {cells[2]} | {cells[3]} | {report.runs} |")
    extras = improvement_lines(summaries)
    if extras:
        lines.append("")
        lines.extend(f"- {line}" for line in extras)
    return "\n".join(lines) + "\n"


def render_csv(summaries) -> str:
    header = ["method"]
    for metric in METRIC_COLUMNS:
        header += [f"{metric}_mean", f"{metric}_std"]
    header.append("runs")
    rows = [",".join(header)]
    for name, report in summaries.items():
        cells = [name]
        for metric in METRIC_COLUMNS:
            cells += [f"{report[metric].mean:.2f}", f"{report[metric].std:.2f}"]
        cells.append(str(report.runs))
        rows.append(",".join(cells))
    return "\n".join(rows) + "\n"


def build_report(rows):
    """(markdown, csv) for a list of result-row dicts."""
    summaries = summarize(rows)
    return render_markdown(summaries), render_csv(summaries)
