import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Sequence

import pandas as pd

from experiment_models import ExperimentReport
from validation_utils import sanitize_run_name

logger = logging.getLogger(__name__)

# Markdown summary: which result each experiment reproduces.
CLAIMS = {
    "edit_locality": "A rank-one update on a one-hop prompt changes that fact and leaves the others intact.",
    "theorem1": "Combining the two one-hop adapters does not answer the two-hop prompt; "
                "the output is a mixture of the two edit directions.",
    "library_comparison": "Routing only helps when the library contains an expert trained on the target task.",
    "graph_library": "Adapters for atomic relations and other compositions do not generalize "
                     "to a held-out composition, whether or not entities are shared.",
    "same_multiple": "A multi-fact adapter adds the same multiple of its edit direction "
                     "on unrelated two-hop prompts.",
    "kernel_convergence": "Finite-width feature overlaps converge to the arc-cosine kernel at rate m^-1/2.",
}


def aggregate_rows(rows: Sequence[Dict[str, Any]], group_by: Sequence[str],
                   metrics: Sequence[str]) -> List[Dict[str, Any]]:
    """mean/min/max of each metric per group; missing values are skipped."""
    if not rows:
        return []
    frame = pd.DataFrame(list(rows))
    present = [m for m in metrics if m in frame.columns]
    keys = [g for g in group_by if g in frame.columns]
    if not present:
        return []
    values = frame[present].apply(pd.to_numeric, errors="coerce")
    if keys:
        grouped = pd.concat([frame[keys], values], axis=1).groupby(keys, sort=True, dropna=False)
        stats = grouped[present].agg(["mean", "min", "max"])
        stats["count"] = grouped.size()
    else:
        stats = values.agg(["mean", "min", "max"]).unstack().to_frame().T
        stats["count"] = len(frame)
    stats.columns = [f"{metric}_{stat}" if stat else metric for metric, stat in stats.columns]
    out = stats.reset_index() if keys else stats
    return [{k: _plain(v) for k, v in record.items()} for record in out.to_dict(orient="records")]


def _plain(value):
    if isinstance(value, float) and math.isnan(value):
        return None
    if hasattr(value, "item"):
        value = value.item()
        if isinstance(value, float) and math.isnan(value):
            return None
    return value


def rows_frame(report: ExperimentReport) -> pd.DataFrame:
    frame = pd.DataFrame(report.rows)
    frame.insert(0, "config_hash", report.config_hash)
    return frame


def render_markdown(report: ExperimentReport) -> str:
    lines = [
        f"# {report.name} ({report.experiment})",
        "",
        CLAIMS.get(report.experiment, ""),
        "",
        f"config hash: `{report.config_hash}`",
        "",
        "| check | claim | value | threshold | result |",
        "|---|---|---|---|---|",
    ]
    for check in report.checks:
        value = "n/a" if check.value is None else f"{check.value:.4g}"
        lines.append(f"| {check.name} | {check.claim} | {value} | {check.threshold} | "
                     f"{'PASS' if check.passed else 'FAIL'} |")
    if report.aggregates:
        columns = list(report.aggregates[0].keys())
        lines += ["", "## Aggregates", "", "| " + " | ".join(columns) + " |",
                  "|" + "---|" * len(columns)]
        for record in report.aggregates:
            cells = [f"{v:.4g}" if isinstance(v, float) else str(v) for v in (record.get(c) for c in columns)]
            lines.append("| " + " | ".join(cells) + " |")
    if report.extras:
        lines += ["", "## Notes", ""]
        lines += [f"- {key}: {value}" for key, value in sorted(report.extras.items())]
    return "\n".join(lines) + "\n"


def write_report(report: ExperimentReport, out_dir) -> Dict[str, Path]:
    """Write <name>.csv (rows), <name>.json (full report) and <name>.md (summary)."""
    stem = sanitize_run_name(report.name)
    if not stem:
        stem = report.experiment
        logger.warning("Run name rejected; falling back to the experiment name",
                       extra={"run_name": report.name, "fallback": stem})
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "csv": out_dir / f"{stem}.csv",
        "json": out_dir / f"{stem}.json",
        "markdown": out_dir / f"{stem}.md",
    }
    rows_frame(report).to_csv(paths["csv"], index=False, lineterminator="\r\n", encoding="utf-8")
    paths["json"].write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    paths["markdown"].write_text(render_markdown(report), encoding="utf-8")
    for kind, path in paths.items():
        logger.info("Wrote report file", extra={"kind": kind, "path": str(path)})
    return paths
