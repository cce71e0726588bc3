"""Render figures from experiment CSVs.

Input contracts (header lines are exact; fields are separated by a comma
plus one space, and readers strip the space):

    result rows   run_id, strategy, seed, iteration, labeled_fraction,
                  metric_name, value, question_type
    score rows    item_index, strategy, value, question_type,
                  answer_set_size

learning_curve and type_table consume result rows; entropy_histogram
consumes score rows (per-run score dumps and diagnostics files share
that schema, with the strategy column carrying the score kind). The
CSVs are the only interface to the experiment code, so figures can be
rendered wherever the files end up.

Every figure is written twice, as PNG and as SVG next to each other.
The pure series builders (learning_curve_series, type_table_cells,
entropy_histogram_groups) are exposed separately so the plotted numbers
can be checked without decoding images.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

RESULT_COLUMNS = ("run_id", "strategy", "seed", "iteration",
                  "labeled_fraction", "metric_name", "value",
                  "question_type")
SCORE_COLUMNS = ("item_index", "strategy", "value", "question_type",
                 "answer_set_size")
KINDS = ("learning_curve", "type_table", "entropy_histogram")
SELECTED_PCT_METRIC = "type_selected_pct"

plt.rcParams["svg.hashsalt"] = "paraal-plots"


class SchemaError(ValueError):
    """An input CSV does not match the documented schema."""


@dataclass
class FigureSpec:
    inputs: list = field(default_factory=list)
    kind: str = "learning_curve"
    out: str | Path = "figure"
    metric: str = "paraphrase_accuracy"
    strategies: list[str] | None = None   # None or [] plots all

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not self.inputs:
            raise ValueError("at least one input CSV is required")
        missing = [str(p) for p in self.inputs if not Path(p).is_file()]
        if missing:
            raise ValueError(f"input files not found: {missing}")


# ---------------------------------------------------------------------------
# CSV loading
# ---------------------------------------------------------------------------


def _load_frame(paths, columns: tuple, numeric: tuple) -> pd.DataFrame:
    frames = []
    for path in paths:
        frame = pd.read_csv(path, skipinitialspace=True)
        got = tuple(str(c) for c in frame.columns)
        if got != columns:
            missing = [c for c in columns if c not in got]
            extra = [c for c in got if c not in columns]
            parts = []
            if missing:
                parts.append(f"missing column(s) {missing}")
            if extra:
                parts.append(f"unexpected column(s) {extra}")
            if not parts:
                parts.append(f"column order {list(got)} != {list(columns)}")
            raise SchemaError(f"{path}: {'; '.join(parts)}")
        for col in numeric:
            converted = pd.to_numeric(frame[col], errors="coerce")
            if converted.isna().any():
                raise SchemaError(
                    f"{path}: column {col!r} has non-numeric or missing "
                    f"entries")
            frame[col] = converted
        frames.append(frame)
    if not frames:
        raise ValueError("no input files given")
    return pd.concat(frames, ignore_index=True)


def load_result_frame(paths) -> pd.DataFrame:
    """Concatenate per-run metric CSVs, validating the result schema."""
    return _load_frame(paths, RESULT_COLUMNS,
                       ("seed", "iteration", "labeled_fraction", "value"))


def load_score_frame(paths) -> pd.DataFrame:
    """Concatenate score dumps, validating the score schema."""
    return _load_frame(paths, SCORE_COLUMNS,
                       ("item_index", "value", "answer_set_size"))


def _filter_strategies(frame: pd.DataFrame,
                       strategies: list[str] | None) -> pd.DataFrame:
    if not strategies:
        return frame
    known = set(frame["strategy"].unique())
    unknown = [s for s in strategies if s not in known]
    if unknown:
        raise ValueError(
            f"strategies {unknown} not present in the inputs "
            f"(have {sorted(known)})")
    return frame[frame["strategy"].isin(strategies)]


# ---------------------------------------------------------------------------
# Series builders (pure data, no drawing)
# ---------------------------------------------------------------------------


def learning_curve_series(frame: pd.DataFrame, metric: str,
                          strategies: list[str] | None = None) -> pd.DataFrame:
    """Seed mean and population std per (strategy, iteration).

    Returns columns strategy, iteration, labeled_fraction, mean, std, n
    sorted by strategy then iteration, matching the experiment runner's
    own aggregation conventions.
    """
    rows = frame[(frame["metric_name"] == metric)
                 & (frame["question_type"] == "all")]
    if rows.empty:
        have = sorted(frame["metric_name"].unique())
        raise ValueError(f"metric {metric!r} not found; inputs carry {have}")
    rows = _filter_strategies(rows, strategies)
    grouped = rows.groupby(["strategy", "iteration"], sort=True)
    series = grouped.agg(
        labeled_fraction=("labeled_fraction", "first"),
        mean=("value", "mean"),
        std=("value", lambda v: float(np.std(v))),
        n=("value", "size")).reset_index()
    return series


def type_table_cells(frame: pd.DataFrame, metric: str,
                     strategies: list[str] | None = None) -> pd.DataFrame:
    """Selection share and final metric per (strategy, question type).

    selected_pct averages the per-iteration selection percentages over
    seeds and iterations; metric_mean is the seed mean of the per-type
    metric at the final iteration. Returns one row per (strategy,
    question_type), sorted.
    """
    frame = _filter_strategies(frame, strategies)
    picks = frame[frame["metric_name"] == SELECTED_PCT_METRIC]
    if picks.empty:
        raise ValueError(
            f"no {SELECTED_PCT_METRIC!r} rows in the inputs; type_table "
            f"needs per-iteration selection composition")
    final = frame["iteration"].max()
    scores = frame[(frame["metric_name"] == metric)
                   & (frame["question_type"] != "all")
                   & (frame["iteration"] == final)]
    if scores.empty:
        have = sorted(frame["metric_name"].unique())
        raise ValueError(f"metric {metric!r} not found; inputs carry {have}")
    pct = (picks.groupby(["strategy", "question_type"], sort=True)["value"]
           .mean().rename("selected_pct"))
    acc = (scores.groupby(["strategy", "question_type"], sort=True)["value"]
           .mean().rename("metric_mean"))
    cells = pd.concat([pct, acc], axis=1).reset_index()
    if cells.isna().any().any():
        raise ValueError(
            "selection rows and metric rows disagree on the question types")
    return cells


def entropy_histogram_groups(frame: pd.DataFrame,
                             strategies: list[str] | None = None
                             ) -> list[tuple[str, np.ndarray]]:
    """Score distributions split by answer multiplicity.

    Plain score kinds contribute a single-answer and a multi-answer
    group; corrected kinds only make sense on multi-answer items and
    contribute that group alone. Empty groups are dropped.
    """
    frame = _filter_strategies(frame, strategies)
    groups: list[tuple[str, np.ndarray]] = []
    for kind in sorted(frame["strategy"].unique()):
        sub = frame[frame["strategy"] == kind]
        multi = sub[sub["answer_set_size"] > 1]["value"].to_numpy()
        if "corrected" not in kind:
            single = sub[sub["answer_set_size"] == 1]["value"].to_numpy()
            if single.size:
                groups.append((f"{kind} (single-answer)", single))
        if multi.size:
            groups.append((f"{kind} (multi-answer)", multi))
    if not groups:
        raise ValueError("no score rows left after filtering")
    return groups


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _save(fig, out) -> list[Path]:
    base = Path(out)
    if base.suffix.lower() in (".png", ".svg"):
        base = base.with_suffix("")
    base.parent.mkdir(parents=True, exist_ok=True)
    written = []
    for suffix in (".png", ".svg"):
        target = base.with_suffix(suffix)
        fig.savefig(target)
        written.append(target)
    plt.close(fig)
    return written


def _draw_learning_curve(series: pd.DataFrame, metric: str):
    fig, ax = plt.subplots(figsize=(7, 4.5), constrained_layout=True)
    for strategy, block in series.groupby("strategy", sort=True):
        x = block["labeled_fraction"].to_numpy() * 100.0
        mean = block["mean"].to_numpy()
        std = block["std"].to_numpy()
        line, = ax.plot(x, mean, marker="o", markersize=3.5, label=strategy)
        ax.fill_between(x, mean - std, mean + std, alpha=0.15,
                        color=line.get_color(), linewidth=0)
    ax.set_xlabel("labeled share of the train pool (%)")
    ax.set_ylabel(metric.replace("_", " "))
    ax.set_title(f"{metric.replace('_', ' ')} by labeling budget")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    return fig


def _draw_type_table(cells: pd.DataFrame, metric: str):
    strategies = sorted(cells["strategy"].unique())
    qtypes = sorted(cells["question_type"].unique())
    lookup = {(r.strategy, r.question_type): r
              for r in cells.itertuples(index=False)}
    text = [[(f"{lookup[(s, q)].selected_pct:.1f}%  "
              f"{lookup[(s, q)].metric_mean:.3f}") for q in qtypes]
            for s in strategies]
    fig, ax = plt.subplots(
        figsize=(1.9 + 1.5 * len(qtypes), 1.1 + 0.42 * len(strategies)),
        constrained_layout=True)
    ax.axis("off")
    table = ax.table(cellText=text, rowLabels=strategies, colLabels=qtypes,
                     cellLoc="center", loc="center")
    table.auto_set_font_size(False)
    table.set_fontsize(9)
    table.scale(1.0, 1.4)
    ax.set_title(f"selection share by question type, with final "
                 f"{metric.replace('_', ' ')}", pad=18)
    return fig


def _draw_entropy_histogram(groups: list[tuple[str, np.ndarray]]):
    all_values = np.concatenate([values for _, values in groups])
    edges = np.histogram_bin_edges(all_values, bins=30)
    fig, ax = plt.subplots(figsize=(7, 4.5), constrained_layout=True)
    for label, values in groups:
        ax.hist(values, bins=edges, histtype="step", linewidth=1.6,
                label=f"{label}, n={values.size}")
        ax.hist(values, bins=edges, alpha=0.12)
    ax.set_xlabel("uncertainty score")
    ax.set_ylabel("items")
    ax.set_title("score distributions by answer multiplicity")
    ax.legend(fontsize=8)
    return fig


def render(spec: FigureSpec) -> list[Path]:
    """Build the figure described by spec; returns the written files."""
    spec.validate()
    if spec.kind == "learning_curve":
        frame = load_result_frame(spec.inputs)
        series = learning_curve_series(frame, spec.metric, spec.strategies)
        fig = _draw_learning_curve(series, spec.metric)
    elif spec.kind == "type_table":
        frame = load_result_frame(spec.inputs)
        cells = type_table_cells(frame, spec.metric, spec.strategies)
        fig = _draw_type_table(cells, spec.metric)
    else:
        frame = load_score_frame(spec.inputs)
        groups = entropy_histogram_groups(frame, spec.strategies)
        fig = _draw_entropy_histogram(groups)
    return _save(fig, spec.out)
