"""Report schema and markdown rendering.

Tables mirror the usual presentation: values on a 0-100 scale, two
decimals, "mean +- std", methods as columns, and a rank row (1 = best per
metric orientation, ties averaged).
"""

import json

import numpy as np

from .errors import ValidationError
from .metrics import average_ranks

SCHEMA_VERSION = 1

METRIC_ORDER = ("roc_auc", "aurc", "oracle_aurc", "ece")
# oracle_aurc is score-independent, so it never participates in ranking.
RANKED_METRICS = {"roc_auc": False, "aurc": True, "ece": True}  # name -> lower_is_better


def format_cell(mean: float, std: float) -> str:
    return f"{100.0 * mean:.2f} ± {100.0 * std:.2f}"


def make_report(method: str, dataset: str, eval_report, config: dict) -> dict:
    """Assemble the serializable per-method report dictionary."""
    return {
        "schema_version": SCHEMA_VERSION,
        "method": method,
        "dataset": dataset,
        "metrics": eval_report.to_dict(),
        "n_boot": eval_report.n_boot,
        "seed": eval_report.seed,
        "config": config,
    }


def check_schema(report: dict, source: str) -> dict:
    version = report.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValidationError(
            f"schema_version mismatch in {source}: {version!r} != {SCHEMA_VERSION}"
        )
    return report


def _rank_row(methods, reports) -> dict:
    """Mean rank across the oriented metrics for one dataset's reports."""
    totals = np.zeros(len(methods))
    for metric, lower in RANKED_METRICS.items():
        vals = np.array([reports[m]["metrics"][metric]["mean"] for m in methods])
        totals += average_ranks(vals if lower else -vals)
    return {m: totals[i] / len(RANKED_METRICS) for i, m in enumerate(methods)}


def eval_table_markdown(reports: dict) -> str:
    """One dataset: metrics as rows, methods as columns, rank row last.

    ``reports`` maps method -> report dict (make_report output).
    """
    methods = list(reports.keys())
    lines = ["| metric | " + " | ".join(methods) + " |",
             "|---" * (len(methods) + 1) + "|"]
    for metric in METRIC_ORDER:
        cells = [
            format_cell(reports[m]["metrics"][metric]["mean"],
                        reports[m]["metrics"][metric]["std"])
            for m in methods
        ]
        lines.append(f"| {metric} | " + " | ".join(cells) + " |")
    ranks = _rank_row(methods, reports)
    lines.append("| rank | " + " | ".join(f"{ranks[m]:.2f}" for m in methods) + " |")
    return "\n".join(lines) + "\n"


def metric_table_markdown(metric: str, datasets, methods, values, ranks) -> str:
    """Cross-dataset table for one metric: datasets as rows, rank row last.

    ``values`` maps (method, dataset) -> (mean, std); ``ranks`` maps
    method -> mean rank.
    """
    lines = [f"| {metric} | " + " | ".join(methods) + " |",
             "|---" * (len(methods) + 1) + "|"]
    for ds in datasets:
        cells = [format_cell(*values[(m, ds)]) for m in methods]
        lines.append(f"| {ds} | " + " | ".join(cells) + " |")
    lines.append("| rank | " + " | ".join(f"{ranks[m]:.2f}" for m in methods) + " |")
    return "\n".join(lines) + "\n"


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
