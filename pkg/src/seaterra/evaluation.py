"""Mutual-information scoring, perplexity binning and report/figure output."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from seaterra.errors import DataError

BIN_NAMES = ("low", "medium", "high")


@dataclass(frozen=True)
class ContingencyTable:
    counts: np.ndarray
    labels_a: tuple
    labels_b: tuple

    @classmethod
    def from_labels(cls, a, b):
        a, b = _check_pair(a, b)
        ua, ia = np.unique(a, return_inverse=True)
        ub, ib = np.unique(b, return_inverse=True)
        counts = np.zeros((len(ua), len(ub)), dtype=np.int64)
        np.add.at(counts, (ia, ib), 1)
        return cls(counts, tuple(ua.tolist()), tuple(ub.tolist()))

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def marginal_a(self):
        return self.counts.sum(axis=1)

    @property
    def marginal_b(self):
        return self.counts.sum(axis=0)


def _check_pair(a, b):
    a = np.asarray(list(a) if not isinstance(a, np.ndarray) else a)
    b = np.asarray(list(b) if not isinstance(b, np.ndarray) else b)
    if a.ndim != 1 or b.ndim != 1:
        raise DataError("label sequences must be one-dimensional")
    if len(a) != len(b):
        raise DataError(f"label sequences differ in length ({len(a)} vs {len(b)})")
    if len(a) == 0:
        raise DataError("label sequences are empty")
    return a, b


def _entropy(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def mutual_information(a, b):
    """Plug-in mutual information (nats) of two aligned labelings."""
    table = ContingencyTable.from_labels(a, b)
    joint = table.counts / table.total
    pa = joint.sum(axis=1, keepdims=True)
    pb = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    mi = float((joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])).sum())
    return max(mi, 0.0)


def entropy(labels):
    _, counts = np.unique(np.asarray(labels), return_counts=True)
    return _entropy(counts)


def normalized_mi(a, b):
    """Mutual information divided by the larger of the two marginal entropies."""
    a, b = _check_pair(a, b)
    ha, hb = entropy(a), entropy(b)
    denom = max(ha, hb)
    if denom == 0.0:
        return 0.0
    nz = ContingencyTable.from_labels(a, b).counts > 0
    if (nz.sum(axis=0) == 1).all() and (nz.sum(axis=1) == 1).all():
        return 1.0  # bijection: exact, free of rounding in the entropy ratio
    return min(mutual_information(a, b) / denom, 1.0)


@dataclass(frozen=True)
class PerplexityBins:
    bins: tuple
    mean: float
    std: float

    @property
    def thresholds(self):
        return (self.mean + self.std, self.mean + 2 * self.std)

    def counts(self):
        return {name: self.bins.count(name) for name in BIN_NAMES}


def bin_perplexity(series):
    """Bin each value as low (<= mean+sd), medium (<= mean+2sd) or high."""
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise DataError("perplexity series must be a non-empty 1-D sequence")
    if not np.isfinite(x).all():
        raise DataError("perplexity series contains non-finite values")
    mu, sd = float(x.mean()), float(x.std())
    lo, hi = mu + sd, mu + 2 * sd
    bins = tuple("low" if v <= lo else "medium" if v <= hi else "high" for v in x)
    return PerplexityBins(bins=bins, mean=mu, std=sd)


def aligned_confusion(truth, predicted):
    """Confusion counts with predicted topics matched one-to-one onto truth labels.

    Returns ``(matrix, columns)`` where rows follow the sorted truth labels
    and ``columns`` lists predicted labels, matched ones first in row order,
    unmatched ones after in ascending id.
    """
    table = ContingencyTable.from_labels(truth, predicted)
    rows, cols = linear_sum_assignment(-table.counts)
    order = [None] * len(table.labels_a)
    for r, c in zip(rows, cols):
        order[r] = c
    matched = [c for c in order if c is not None]
    rest = [c for c in range(len(table.labels_b)) if c not in matched]
    columns = matched + rest
    return table.counts[:, columns], [table.labels_b[c] for c in columns], list(table.labels_a)


def mi_report(scene_labels, annotation, predicted_bins, k_discovered=None, extra=None):
    """Build the evaluation record comparing a run against annotations."""
    scene = list(scene_labels)
    bins = predicted_bins.bins if isinstance(predicted_bins, PerplexityBins) else tuple(predicted_bins)
    n = len(annotation.terrain)
    if len(scene) != n or len(bins) != n:
        raise DataError(f"run covers {len(scene)} frames / {len(bins)} bins but annotations have {n} rows")
    matrix, topic_cols, terrain_rows = aligned_confusion(annotation.terrain, scene)
    report = {
        "n_frames": n,
        "nmi_terrain": normalized_mi(annotation.terrain, scene),
        "nmi_interest": normalized_mi(annotation.interest, bins),
        "mi_terrain": mutual_information(annotation.terrain, scene),
        "mi_interest": mutual_information(annotation.interest, bins),
        "K_discovered": int(k_discovered) if k_discovered is not None else len(set(scene)),
        "confusion": {
            "terrain": [int(v) for v in terrain_rows],
            "topics": [int(v) for v in topic_cols],
            "counts": matrix.astype(int).tolist(),
        },
    }
    if isinstance(predicted_bins, PerplexityBins):
        report["thresholds"] = {
            "mean": predicted_bins.mean,
            "std": predicted_bins.std,
            "medium": predicted_bins.thresholds[0],
            "high": predicted_bins.thresholds[1],
        }
        report["bin_counts"] = predicted_bins.counts()
    if extra:
        report.update(extra)
    return report


def write_report(report, path):
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    Path(path).write_text(text)
    return text


# ---------------------------------------------------------------------------
# CSV helpers
# ---------------------------------------------------------------------------


def read_timeline_csv(path):
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append((int(row["t"]), int(row["topic"]), float(row["proportion"])))
    return rows


def read_series_csv(path, column):
    with open(path, newline="") as fh:
        return [float(row[column]) for row in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# SVG timeline
# ---------------------------------------------------------------------------

PALETTE = (
    "#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#edc948",
    "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac", "#1f77b4", "#8c564b",
)


def _fmt(x):
    return f"{x:.3f}".rstrip("0").rstrip(".")


def timeline_svg(timeline, perplexity, out_path, width=900, band_height=240, trace_height=140):
    """Stacked topic-proportion bands over time above a perplexity trace.

    ``timeline`` is a CSV path or rows of ``(t, topic, proportion)``.
    """
    rows = read_timeline_csv(timeline) if isinstance(timeline, (str, Path)) else list(timeline)
    series = np.asarray(perplexity, dtype=np.float64)
    if not rows or series.size == 0:
        raise DataError("timeline and perplexity series must be non-empty")
    if not np.isfinite(series).all():
        raise DataError("perplexity series contains non-finite values")
    times = sorted({t for t, _, _ in rows})
    by_t = {t: {} for t in times}
    for t, k, p in rows:
        by_t[t][k] = by_t[t].get(k, 0.0) + p

    margin, gap = 40, 30
    plot_w = width - 2 * margin
    height = margin + band_height + gap + trace_height + margin
    step = plot_w / len(times)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{margin}" y="{margin - 12}" font-family="sans-serif" font-size="12">topic proportion</text>',
    ]
    for i, t in enumerate(times):
        props = by_t[t]
        total = sum(props.values()) or 1.0
        x = margin + i * step
        top = margin + band_height
        for k in sorted(props):
            h = band_height * props[k] / total
            y = top - h
            parts.append(
                f'<rect class="band" data-t="{t}" data-topic="{k}" x="{_fmt(x)}" y="{_fmt(y)}" '
                f'width="{_fmt(step)}" height="{_fmt(h)}" fill="{PALETTE[k % len(PALETTE)]}"/>'
            )
            top = y

    y0 = margin + band_height + gap
    lo, hi = float(series.min()), float(series.max())
    mu, sd = float(series.mean()), float(series.std())
    guides = (mu + sd, mu + 2 * sd)
    hi = max(hi, guides[1])
    span = (hi - lo) or 1.0

    def ypos(v):
        return y0 + trace_height - trace_height * (v - lo) / span

    xs = [margin + (i + 0.5) * (plot_w / len(series)) for i in range(len(series))]
    points = " ".join(f"{_fmt(x)},{_fmt(ypos(v))}" for x, v in zip(xs, series))
    parts.append(f'<text x="{margin}" y="{y0 - 8}" font-family="sans-serif" font-size="12">perplexity</text>')
    parts.append(f'<polyline class="perplexity" fill="none" stroke="black" stroke-width="1" points="{points}"/>')
    for name, g in zip(("mean+sd", "mean+2sd"), guides):
        parts.append(
            f'<line class="guide" data-level="{name}" x1="{margin}" x2="{margin + plot_w}" '
            f'y1="{_fmt(ypos(g))}" y2="{_fmt(ypos(g))}" stroke="#d62728" stroke-dasharray="4 3"/>'
        )
    parts.append("</svg>")
    text = "\n".join(parts) + "\n"
    try:
        Path(out_path).write_text(text)
    except OSError as exc:
        raise DataError(f"{out_path}: cannot write SVG ({exc})") from exc
    return text
