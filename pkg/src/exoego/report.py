"""
Tables and plots summarizing one or more runs.

The report reads run directories (training logs in newline-delimited JSON,
plus any evaluation metric files) and produces a stage-by-stage table
(metric rows x stage columns), an ablation grid with one row per preset, and
— when plotting is requested — loss curves, cycle-error curves, and a
radar-style metric summary.  All text output is deterministic: regenerating
from the same logs yields byte-identical files.

matplotlib is imported lazily inside the plot functions so the rest of the
package (and the test suite) stays headless.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import jsonio
from .trainer import ABLATIONS, STAGES

__all__ = [
    "REPORT_SCHEMA",
    "RunSummary",
    "collect_run",
    "stage_summary",
    "stage_table",
    "ablation_grid",
    "markdown_table",
    "metrics_markdown",
    "build_report",
    "plot_loss_curves",
    "plot_cycle_curves",
    "plot_radar",
]

REPORT_SCHEMA = "exo2ego-report/1"

_LOSS_KEYS = ("vtg", "ccl_forward", "ccl_backward", "kl", "total")


def _fmt(x: float | int | None) -> str:
    if x is None:
        return "-"
    if isinstance(x, bool):
        return str(x)
    if isinstance(x, int):
        return str(x)
    return f"{x:.6f}"


# ---------------------------------------------------------------------------
# Collecting runs
# ---------------------------------------------------------------------------


@dataclass
class RunSummary:
    run_dir: str
    config_hash: str = ""
    ablation: str = "full"
    profile: str = ""
    seed: int = 0
    stages: dict = field(default_factory=dict)  # stage_id -> summary dict
    eval_metrics: dict = field(default_factory=dict)  # tag -> metrics dict


def read_stage_log(path: str | Path) -> list[dict]:
    """Parse one newline-delimited JSON training log."""
    records = []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{i + 1}: bad log line: {exc}") from exc
    return records


def stage_summary(records: Sequence[dict]) -> dict:
    """Decile / endpoint statistics of one stage's loss curve."""
    if not records:
        raise ValueError("empty training log")
    totals = [r["total"] for r in records]
    k = max(1, len(totals) // 10)
    out = {
        "steps": len(records),
        "leading_decile_total": float(np.mean(totals[:k])),
        "trailing_decile_total": float(np.mean(totals[-k:])),
        "final_total": float(totals[-1]),
    }
    for key in _LOSS_KEYS[:-1]:
        out[f"final_{key}"] = float(records[-1].get(key, 0.0))
    return out


def collect_run(run_dir: str | Path) -> RunSummary:
    """Summarize one run directory; error when it holds no training logs."""
    root = Path(run_dir)
    summary = RunSummary(run_dir=str(root))
    cfg_path = root / "config.json"
    if cfg_path.exists():
        cfg = jsonio.load(cfg_path)
        summary.config_hash = cfg.get("config_hash", "")
        summary.ablation = cfg.get("ablation", "full")
        summary.profile = cfg.get("profile", "")
        summary.seed = int(cfg.get("seed", 0))
    log_dir = root / "logs"
    if log_dir.is_dir():
        for stage_id in STAGES:
            path = log_dir / f"{stage_id}.ndjson"
            if path.exists():
                summary.stages[stage_id] = stage_summary(read_stage_log(path))
    if not summary.stages:
        raise ValueError(f"run directory {root} contains no training logs")
    reports = root / "reports"
    if reports.is_dir():
        for path in sorted(reports.glob("eval*.json")):
            summary.eval_metrics[path.stem] = jsonio.load(path)
    return summary


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------


def markdown_table(columns: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    lines = [
        "| " + " | ".join(columns) + " |",
        "| " + " | ".join("---" for _ in columns) + " |",
    ]
    for row in rows:
        if len(row) != len(columns):
            raise ValueError("table row width does not match the header")
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def stage_table(summary: RunSummary) -> dict:
    """Metric rows x stage columns for one run."""
    stages = [s for s in STAGES if s in summary.stages]
    metrics = [
        "steps",
        "leading_decile_total",
        "trailing_decile_total",
        "final_total",
        "final_vtg",
        "final_ccl_forward",
        "final_ccl_backward",
        "final_kl",
    ]
    rows = []
    for m in metrics:
        rows.append([m] + [_fmt(summary.stages[s].get(m)) for s in stages])
    return {"columns": ["metric"] + stages, "rows": rows}


def _headline_eval(summary: RunSummary) -> float | None:
    """One number per run for grid comparison: mean aggregate over eval files."""
    values = [
        m["aggregate"] for m in summary.eval_metrics.values() if "aggregate" in m
    ]
    return float(np.mean(values)) if values else None


def ablation_grid(summaries: Sequence[RunSummary]) -> dict:
    """One row per run: preset, stages completed, last loss, eval headline."""
    columns = ["ablation", "profile", "seed", "stages", "final_total", "eval"]
    rows = []
    for s in sorted(summaries, key=lambda r: (r.ablation, r.seed, r.run_dir)):
        done = [st for st in STAGES if st in s.stages]
        last = s.stages[done[-1]]["final_total"] if done else None
        rows.append(
            [
                s.ablation,
                s.profile,
                str(s.seed),
                "+".join(done),
                _fmt(last),
                _fmt(_headline_eval(s)),
            ]
        )
    return {"columns": columns, "rows": rows}


def metrics_markdown(metrics: dict) -> str:
    """Render an evaluation metrics dict as a markdown table."""
    columns = ["task", "n", "metric", "value"]
    rows = []
    for task in sorted(metrics.get("per_task", {})):
        entry = metrics["per_task"][task]
        for key in sorted(entry):
            if key == "n":
                continue
            rows.append([task, str(entry["n"]), key, _fmt(entry[key])])
    rows.append(["all", str(metrics.get("n_items", 0)), "aggregate", _fmt(metrics.get("aggregate"))])
    return markdown_table(columns, rows)


# ---------------------------------------------------------------------------
# Plots (optional; requires the matplotlib extra)
# ---------------------------------------------------------------------------


def _pyplot():
    try:
        import matplotlib
    except ImportError as exc:  # pragma: no cover - depends on extras
        raise RuntimeError(
            "plotting needs matplotlib; install the 'plots' extra"
        ) from exc
    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    return plt


_PNG_KW = {"dpi": 120, "metadata": {"Software": None}}


def plot_loss_curves(logs: dict[str, list[dict]], path: str | Path) -> None:
    """Total loss vs step, one panel per stage."""
    plt = _pyplot()
    stages = [s for s in STAGES if s in logs]
    fig, axes = plt.subplots(1, max(1, len(stages)), figsize=(4 * max(1, len(stages)), 3))
    axes = np.atleast_1d(axes)
    for ax, stage_id in zip(axes, stages):
        records = logs[stage_id]
        ax.plot([r["step"] for r in records], [r["total"] for r in records])
        ax.set_title(stage_id)
        ax.set_xlabel("step")
        ax.set_ylabel("total loss")
    fig.tight_layout()
    fig.savefig(path, **_PNG_KW)
    plt.close(fig)


def plot_cycle_curves(logs: dict[str, list[dict]], path: str | Path) -> None:
    """Cycle-consistency errors vs step for the stages that compute them."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.2))
    drew = False
    for stage_id, records in logs.items():
        fwd = [r.get("ccl_forward", 0.0) for r in records]
        if not any(fwd):
            continue
        steps = [r["step"] for r in records]
        ax.plot(steps, fwd, label=f"{stage_id} forward")
        bwd = [r.get("ccl_backward", 0.0) for r in records]
        if any(bwd):
            ax.plot(steps, bwd, label=f"{stage_id} backward", linestyle="--")
        drew = True
    if drew:
        ax.legend()
    ax.set_xlabel("step")
    ax.set_ylabel("cycle error")
    fig.tight_layout()
    fig.savefig(path, **_PNG_KW)
    plt.close(fig)


def plot_radar(series: dict[str, Sequence[float]], labels: Sequence[str], path: str | Path) -> None:
    """Radar-style summary: one polygon per named series over metric axes."""
    plt = _pyplot()
    n = len(labels)
    if n < 3:
        raise ValueError("radar plot needs at least 3 axes")
    angles = np.linspace(0, 2 * np.pi, n, endpoint=False).tolist()
    angles += angles[:1]
    fig, ax = plt.subplots(figsize=(4.5, 4.5), subplot_kw={"polar": True})
    for name in sorted(series):
        values = [float(v) for v in series[name]]
        if len(values) != n:
            raise ValueError(f"series {name!r} has {len(values)} values for {n} axes")
        closed = values + values[:1]
        ax.plot(angles, closed, label=name)
        ax.fill(angles, closed, alpha=0.1)
    ax.set_xticks(angles[:-1])
    ax.set_xticklabels(labels)
    ax.legend(loc="upper right", bbox_to_anchor=(1.3, 1.1))
    fig.tight_layout()
    fig.savefig(path, **_PNG_KW)
    plt.close(fig)


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------


def build_report(
    run_dirs: Sequence[str | Path],
    out_dir: str | Path,
    *,
    plots: bool = False,
) -> dict:
    """
    Summarize ``run_dirs`` into ``out_dir``/report.{json,md} (+ plots/).

    Returns the report dict.  Text artifacts are byte-identical across reruns
    over the same inputs.
    """
    if not run_dirs:
        raise ValueError("no run directories given")
    summaries = [collect_run(d) for d in run_dirs]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    tables = {
        "stage_tables": {s.run_dir: stage_table(s) for s in summaries},
        "ablation_grid": ablation_grid(summaries),
    }
    report = {
        "schema": REPORT_SCHEMA,
        "runs": [
            {
                "run_dir": s.run_dir,
                "config_hash": s.config_hash,
                "ablation": s.ablation,
                "note": ABLATIONS[s.ablation].note if s.ablation in ABLATIONS else "",
                "profile": s.profile,
                "seed": s.seed,
                "stages": s.stages,
                "eval": s.eval_metrics,
            }
            for s in sorted(summaries, key=lambda r: r.run_dir)
        ],
        "tables": tables,
    }
    jsonio.dump(report, out / "report.json")

    md = ["# Run report", ""]
    for s in sorted(summaries, key=lambda r: r.run_dir):
        md.append(f"## {s.run_dir}")
        md.append("")
        md.append(f"ablation: `{s.ablation}`, profile: `{s.profile}`, seed: {s.seed}, config: `{s.config_hash[:12]}`")
        md.append("")
        t = stage_table(s)
        md.append(markdown_table(t["columns"], t["rows"]))
        for tag in sorted(s.eval_metrics):
            md.append(f"### {tag}")
            md.append("")
            md.append(metrics_markdown(s.eval_metrics[tag]))
    md.append("## Ablation grid")
    md.append("")
    grid = tables["ablation_grid"]
    md.append(markdown_table(grid["columns"], grid["rows"]))
    (out / "report.md").write_text("\n".join(md), encoding="utf-8")

    if plots:
        plot_dir = out / "plots"
        plot_dir.mkdir(exist_ok=True)
        for s in summaries:
            logs = {}
            for stage_id in s.stages:
                path = Path(s.run_dir) / "logs" / f"{stage_id}.ndjson"
                if path.exists():
                    logs[stage_id] = read_stage_log(path)
            tag = Path(s.run_dir).name
            if logs:
                plot_loss_curves(logs, plot_dir / f"{tag}-loss.png")
                plot_cycle_curves(logs, plot_dir / f"{tag}-cycle.png")
        axes = ["init", "s1", "s2", "s3"]
        series = {}
        for s in summaries:
            vals = [
                s.stages.get(st, {}).get("trailing_decile_total") for st in axes
            ]
            if all(v is not None for v in vals):
                series[Path(s.run_dir).name] = [float(v) for v in vals]
        if series:
            plot_radar(series, axes, plot_dir / "radar.png")
    return report
