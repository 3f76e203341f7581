"""Shape metrics.jsonl records into the report tables and summary.txt.

Records are append-only, so a resumed run can hold several evaluations of the
same checkpoint; every table keeps the latest one. Aggregation runs in DuckDB
over the loaded frames.
"""

from pathlib import Path

import duckdb
import pandas as pd

from pipeline.quality import MetricsSchema, validate
from spin.errors import StorageError

EVAL_COLUMNS = ["energy_distance", "energy_distance_se", "loglik_mean", "loglik_se", "dsm_excess"]


def _records(metrics: pd.DataFrame, kind: str, required: list[str]) -> pd.DataFrame | None:
    if metrics.empty or "kind" not in metrics.columns:
        return None
    rows = metrics[metrics["kind"] == kind]
    if rows.empty:
        return None
    missing = [c for c in required if c not in rows.columns]
    if missing:
        raise StorageError(f"{kind} records lack column(s): {', '.join(missing)}")
    return rows


def iteration_table(metrics: pd.DataFrame) -> pd.DataFrame:
    """One row per SPIN iteration 0..K (0 is the base model)."""
    evals = _records(metrics, "eval", ["phase", "iteration", "examples_seen", *EVAL_COLUMNS])
    if evals is None:
        return pd.DataFrame(columns=["iteration", "examples_seen", *EVAL_COLUMNS])
    evals = evals[evals["phase"] == "spin"]
    return duckdb.query("""
        SELECT CAST(iteration AS INTEGER) AS iteration,
               CAST(examples_seen AS BIGINT) AS examples_seen,
               energy_distance, energy_distance_se, loglik_mean, loglik_se, dsm_excess
        FROM evals
        QUALIFY row_number() OVER (PARTITION BY iteration ORDER BY wall_time DESC) = 1
        ORDER BY iteration
    """).df()


def sft_table(metrics: pd.DataFrame) -> pd.DataFrame:
    """Evaluations along the SFT run, base model first."""
    evals = _records(metrics, "eval", ["phase", "examples_seen", *EVAL_COLUMNS])
    if evals is None:
        return pd.DataFrame(columns=["examples_seen", *EVAL_COLUMNS])
    evals = evals[evals["phase"].isin(["base", "sft"])]
    return duckdb.query("""
        SELECT CAST(examples_seen AS BIGINT) AS examples_seen,
               energy_distance, energy_distance_se, loglik_mean, loglik_se, dsm_excess
        FROM evals
        QUALIFY row_number() OVER (PARTITION BY examples_seen ORDER BY wall_time DESC) = 1
        ORDER BY examples_seen
    """).df()


def win_rate_table(metrics: pd.DataFrame) -> pd.DataFrame:
    wins = _records(metrics, "win_rate", ["iteration", "opponent", "win_rate", "wins", "ties", "losses"])
    if wins is None:
        return pd.DataFrame(columns=["iteration", "opponent", "win_rate", "wins", "ties", "losses"])
    return duckdb.query("""
        SELECT CAST(iteration AS INTEGER) AS iteration, opponent, win_rate,
               CAST(wins AS INTEGER) AS wins, CAST(ties AS INTEGER) AS ties, CAST(losses AS INTEGER) AS losses
        FROM wins
        QUALIFY row_number() OVER (PARTITION BY iteration, opponent ORDER BY wall_time DESC) = 1
        ORDER BY opponent, iteration
    """).df()


def step_table(metrics: pd.DataFrame) -> pd.DataFrame:
    """Training step records, validated."""
    if metrics.empty or "kind" not in metrics.columns:
        return pd.DataFrame(columns=["kind", "step", "loss", "lr"])
    steps = metrics[metrics["kind"].isin(["sft_step", "spin_step"])]
    if steps.empty:
        return pd.DataFrame(columns=["kind", "step", "loss", "lr"])
    keep = [c for c in ["kind", "iteration", "step", "loss", "lr", "grad_norm", "clamp_count"] if c in steps.columns]
    return validate(steps[keep].reset_index(drop=True), MetricsSchema)


def _block(title: str, frame: pd.DataFrame) -> list[str]:
    lines = [title, "-" * len(title)]
    if frame.empty:
        lines.append("(none recorded)")
    else:
        lines.append(frame.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    return [*lines, ""]


def render_summary(run_name: str, metrics: pd.DataFrame, sft_metrics: pd.DataFrame | None = None) -> str:
    steps = step_table(metrics)
    lines = [f"spinlab run summary: {run_name}", "=" * 60, ""]
    if not steps.empty:
        counts = steps.groupby("kind")["step"].count()
        lines.append("Optimizer steps: " + ", ".join(f"{kind} {int(n)}" for kind, n in counts.items()))
        final = steps.groupby("kind")["loss"].last()
        lines.append("Final loss: " + ", ".join(f"{kind} {v:.4f}" for kind, v in final.items()))
        lines.append("")
    lines += _block("SPIN iterations (0 = base)", iteration_table(metrics))
    lines += _block("Win rates", win_rate_table(metrics))
    sft = sft_table(metrics if sft_metrics is None or sft_metrics.empty else sft_metrics)
    lines += _block("SFT checkpoints", sft)
    return "\n".join(lines)


def write_summary(path: str | Path, text: str) -> Path:
    path = Path(path)
    try:
        path.write_text(text + "\n", encoding="utf-8")
    except OSError as e:
        raise StorageError(f"could not write {path}: {e}") from e
    return path
