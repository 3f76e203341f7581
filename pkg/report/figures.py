"""Report figures: metric per SPIN iteration, win-rate bars, SFT vs SPIN training curves.

Figures are written as SVG through plotly's static export. Static export needs
kaleido and a headless browser; without them the figure is written as
standalone HTML next to the intended path.
"""

import logging
from pathlib import Path

import pandas as pd
import plotly.graph_objects as go

from spin.errors import StorageError

logger = logging.getLogger(__name__)

METRIC_LABELS = {
    "energy_distance": "Energy distance to target (lower is better)",
    "loglik_mean": "Mean target log-likelihood (higher is better)",
    "dsm_excess": "DSM excess loss (lower is better)",
}

# Matching standard error column, drawn as error bars
ERROR_COLUMNS = {"energy_distance": "energy_distance_se", "loglik_mean": "loglik_se"}

SPIN_COLOR = "#1f77b4"
SFT_COLOR = "#ff7f0e"


def _layout(fig: go.Figure, title: str, x_title: str, y_title: str) -> go.Figure:
    fig.update_layout(
        title=title,
        xaxis_title=x_title,
        yaxis_title=y_title,
        template="plotly_white",
        height=420,
        width=640,
        legend=dict(orientation="h", yanchor="bottom", y=1.02, xanchor="right", x=1),
    )
    return fig


def _error_bars(table: pd.DataFrame, metric: str) -> dict | None:
    column = ERROR_COLUMNS.get(metric)
    if column is None or column not in table.columns:
        return None
    return dict(type="data", array=table[column].tolist(), visible=True)


def metric_vs_iteration(table: pd.DataFrame, metric: str) -> go.Figure:
    """One point per evaluated iteration, base model at iteration 0."""
    fig = go.Figure()
    fig.add_trace(
        go.Scatter(
            x=table["iteration"].tolist(),
            y=table[metric].tolist(),
            mode="lines+markers",
            name="SPIN",
            line=dict(color=SPIN_COLOR, width=2),
            error_y=_error_bars(table, metric),
        )
    )
    fig.update_xaxes(tickmode="linear", dtick=1)
    return _layout(fig, METRIC_LABELS.get(metric, metric), "SPIN iteration", metric)


def win_rate_bars(table: pd.DataFrame) -> go.Figure:
    fig = go.Figure()
    for opponent, rows in table.groupby("opponent", sort=True):
        fig.add_trace(
            go.Bar(
                x=[f"iter {i}" for i in rows["iteration"]],
                y=rows["win_rate"].tolist(),
                name=f"vs {opponent}",
                text=[f"{v:.1%}" for v in rows["win_rate"]],
                textposition="outside",
            )
        )
    fig.add_hline(y=0.5, line_dash="dash", line_color="gray")
    fig.update_layout(barmode="group")
    fig.update_yaxes(range=[0, 1])
    return _layout(fig, "Win rate of each SPIN iteration", "", "win rate")


def training_curves(spin: pd.DataFrame, sft: pd.DataFrame, metric: str) -> go.Figure:
    """SFT and SPIN against the number of real training examples consumed."""
    fig = go.Figure()
    for name, table, color in (("SFT", sft, SFT_COLOR), ("SPIN", spin, SPIN_COLOR)):
        if table.empty:
            continue
        fig.add_trace(
            go.Scatter(
                x=table["examples_seen"].tolist(),
                y=table[metric].tolist(),
                mode="lines+markers",
                name=name,
                line=dict(color=color, width=2),
            )
        )
    return _layout(fig, METRIC_LABELS.get(metric, metric), "training examples seen", metric)


def write_figure(fig: go.Figure, path: str | Path) -> Path:
    """Write SVG; fall back to HTML when static export is unavailable. Returns the written path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        fig.write_image(str(path), format="svg")
        return path
    except Exception as e:  # kaleido missing, or no browser for it to drive
        fallback = path.with_suffix(".html")
        logger.warning("SVG export failed for %s (%s); writing %s instead", path.name, e, fallback.name)
    try:
        fig.write_html(str(fallback), include_plotlyjs=True, full_html=True)
    except OSError as e:
        raise StorageError(f"could not write {fallback}: {e}") from e
    return fallback


def build_figures(
    plots_dir: str | Path, iterations: pd.DataFrame, wins: pd.DataFrame, sft: pd.DataFrame
) -> list[Path]:
    plots_dir = Path(plots_dir)
    written = []
    if not iterations.empty:
        for metric in METRIC_LABELS:
            fig = metric_vs_iteration(iterations, metric)
            written.append(write_figure(fig, plots_dir / f"{metric}_vs_iteration.svg"))
    if not wins.empty:
        written.append(write_figure(win_rate_bars(wins), plots_dir / "win_rate.svg"))
    if not iterations.empty or not sft.empty:
        for metric in ("energy_distance", "loglik_mean"):
            fig = training_curves(iterations, sft, metric)
            written.append(write_figure(fig, plots_dir / f"{metric}_vs_examples.svg"))
    return written
