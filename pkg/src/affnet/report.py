"""Error heat maps over gaze location and the error vs reciprocal face-width curve."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class HeatmapGrid:
    cell_size_cm: float
    cells: dict  # (ix, iy) -> (count, mean_error_cm); the camera sits in cell (0, 0)

    @property
    def total(self) -> int:
        return sum(c for c, _ in self.cells.values())

    def to_csv(self) -> str:
        lines = ["ix,iy,count,mean_error_cm"]
        for (ix, iy), (count, mean) in sorted(self.cells.items()):
            lines.append(f"{ix},{iy},{count},{mean!r}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class CurveBins:
    edges: tuple
    counts: tuple
    means: tuple  # nan for empty bins
    n_skipped: int

    def to_csv(self) -> str:
        lines = ["x_low,x_high,count,mean_error_cm"]
        for i, (count, mean) in enumerate(zip(self.counts, self.means)):
            lines.append(f"{self.edges[i]!r},{self.edges[i + 1]!r},{count},{mean!r}")
        return "\n".join(lines) + "\n"


def heatmap(report, cell_size_cm: float) -> HeatmapGrid:
    """Mean error per square cell, binned by label location."""
    if not cell_size_cm > 0:
        raise ContractError("cell_size_cm must be positive")
    groups: dict[tuple[int, int], list[float]] = {}
    for (x, y), err in zip(report.labels_cm, report.errors_cm):
        key = (math.floor(x / cell_size_cm), math.floor(y / cell_size_cm))
        groups.setdefault(key, []).append(err)
    # fsum of sorted values keeps the mean independent of sample order
    cells = {k: (len(v), math.fsum(sorted(v)) / len(v)) for k, v in groups.items()}
    return HeatmapGrid(cell_size_cm, cells)


def facewidth_curve(report, n_bins: int) -> CurveBins:
    """Mean error in equal-width bins of frame_short_px / face_width_px.

    Samples with zero face width are skipped and counted.  When every sample
    has the same x there is one bin, [x, x].
    """
    if n_bins < 2:
        raise ContractError("n_bins must be >= 2")
    xs, errs, skipped = [], [], 0
    for w, short, err in zip(report.face_width_px, report.frame_short_px, report.errors_cm):
        if w <= 0:
            skipped += 1
            continue
        xs.append(short / w)
        errs.append(err)
    if not xs:
        return CurveBins((), (), (), skipped)
    x = np.array(xs)
    lo, hi = float(x.min()), float(x.max())
    if lo == hi:
        return CurveBins((lo, hi), (len(xs),), (math.fsum(sorted(errs)) / len(errs),), skipped)
    edges = np.linspace(lo, hi, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, n_bins - 1)
    counts, means = [], []
    for b in range(n_bins):
        vals = sorted(e for e, i in zip(errs, idx) if i == b)
        counts.append(len(vals))
        means.append(math.fsum(vals) / len(vals) if vals else float("nan"))
    return CurveBins(tuple(float(e) for e in edges), tuple(counts), tuple(means), skipped)
