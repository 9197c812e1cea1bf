"""Overlapping-area comparison of feature-distance distributions.

For every feature the pairwise Euclidean distances inside the target set and
between the generated and target sets are smoothed with a Gaussian KDE; the
score is the area under the pointwise minimum of the two densities.
"""

from __future__ import annotations

import enum
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import Corpus, NotePhrase
from .features import FEATURE_NAMES, FeatureVector, extract_all

DEFAULT_GRID_POINTS = 1000
POINT_MASS_TOL = 1e-9
_CHUNK = 1 << 22  # kernel evaluations per block


class DegenerateDistances(ValueError):
    """All distances are equal; no bandwidth exists."""


class DistanceKind(str, enum.Enum):
    INTRA_TARGET = "intra-target"
    INTRA_GENERATED = "intra-generated"
    INTER = "inter"


@dataclass
class DistanceSample:
    feature_name: str
    kind: DistanceKind
    distances: np.ndarray


@dataclass
class DistancePdf:
    """Gaussian KDE of a distance sample tabulated on a uniform grid.

    The sample (as unique values with multiplicities) is kept so the density
    can be re-evaluated on any other grid.
    """

    grid: np.ndarray
    density: np.ndarray
    bandwidth: float
    values: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Density on a uniform grid ``x``, rescaled to unit trapezoid mass there.

        The tails past three bandwidths are cut off; rescaling keeps the
        tabulated density a proper PDF on whatever grid it is evaluated on.
        """
        x = np.asarray(x, dtype=float)
        d = _kde(self.values, self.weights, self.bandwidth, x)
        mass = np.trapezoid(d, x)
        return d / mass if mass > 0 else d


@dataclass
class OaReport:
    rows: dict[str, float]
    config: dict = field(default_factory=dict)

    @property
    def average(self) -> float:
        return float(np.mean([self.rows[n] for n in FEATURE_NAMES]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("feature,oa\n")
        for name in FEATURE_NAMES:
            buf.write(f"{name},{self.rows[name]:.6f}\n")
        buf.write(f"average,{self.average:.6f}\n")
        for key in sorted(self.config):
            buf.write(f"# {key}={self.config[key]}\n")
        return buf.getvalue()


def feature_distance(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"feature shapes differ: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def _stack(values: Sequence) -> np.ndarray:
    arr = np.asarray([np.ravel(np.asarray(v, dtype=float)) for v in values])
    return arr


def cross_distances(
    A: Sequence, B: Sequence | None = None, feature_name: str = "", kind: DistanceKind | None = None
) -> DistanceSample:
    """All unordered pairs within ``A``, or every pair of ``A`` x ``B``."""
    if len(A) < 2 and B is None:
        raise ValueError("intra-set distances need at least 2 items")
    if B is not None and (len(A) < 1 or len(B) < 1):
        raise ValueError("inter-set distances need non-empty sets")
    a = _stack(A)
    if B is None:
        i, j = np.triu_indices(len(a), k=1)
        d = np.sqrt(np.sum((a[i] - a[j]) ** 2, axis=1))
        kind = kind or DistanceKind.INTRA_TARGET
    else:
        b = _stack(B)
        if a.shape[1] != b.shape[1]:
            raise ValueError(f"feature shapes differ: {a.shape[1]} vs {b.shape[1]}")
        diff = a[:, None, :] - b[None, :, :]
        d = np.sqrt(np.sum(diff * diff, axis=2)).ravel()
        kind = kind or DistanceKind.INTER
    return DistanceSample(feature_name, DistanceKind(kind), d)


def _weighted_std_iqr(values: np.ndarray, weights: np.ndarray) -> tuple[float, float, int]:
    n = int(weights.sum())
    mean = np.sum(values * weights) / n
    var = np.sum(weights * (values - mean) ** 2) / (n - 1)
    cum = np.cumsum(weights)

    def quantile(q: float) -> float:
        # linear interpolation between order statistics, as numpy's default
        pos = q * (n - 1)
        lo = math.floor(pos)
        frac = pos - lo
        v_lo = values[np.searchsorted(cum, lo + 1)]
        v_hi = values[np.searchsorted(cum, min(lo + 2, n))]
        return v_lo + frac * (v_hi - v_lo)

    return math.sqrt(max(var, 0.0)), quantile(0.75) - quantile(0.25), n


def silverman_bandwidth(distances) -> float:
    """Silverman's rule of thumb, 0.9 * min(std, IQR/1.34) * n^(-1/5)."""
    values, weights = np.unique(np.asarray(distances, dtype=float), return_counts=True)
    return _silverman(values, weights)


def _silverman(values: np.ndarray, weights: np.ndarray) -> float:
    if weights.sum() < 2:
        raise ValueError("bandwidth needs at least 2 distances")
    if len(values) == 1:
        raise DegenerateDistances("all distances are equal")
    std, iqr, n = _weighted_std_iqr(values, weights.astype(float))
    spread = min(std, iqr / 1.34) if iqr > 0 else std
    return 0.9 * spread * n ** (-0.2)


def _kde(values: np.ndarray, weights: np.ndarray, h: float, x: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    total = weights.sum()
    step = max(1, _CHUNK // max(len(values), 1))
    norm = 1.0 / (total * h * math.sqrt(2 * math.pi))
    for s in range(0, len(x), step):
        u = (x[s:s + step, None] - values[None, :]) / h
        out[s:s + step] = np.exp(-0.5 * u * u) @ weights
    return out * norm


def kde_pdf(distances, bandwidth: float | None = None, grid_points: int = DEFAULT_GRID_POINTS) -> DistancePdf:
    """Gaussian KDE on a uniform grid spanning three bandwidths past the data."""
    if grid_points < 64:
        raise ValueError("grid_points must be at least 64")
    values, weights = np.unique(np.asarray(distances, dtype=float), return_counts=True)
    weights = weights.astype(float)
    if bandwidth is None:
        bandwidth = _silverman(values, weights)
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    grid = np.linspace(values[0] - 3 * bandwidth, values[-1] + 3 * bandwidth, grid_points)
    pdf = DistancePdf(grid, np.empty(0), float(bandwidth), values, weights)
    pdf.density = pdf.evaluate(grid)
    return pdf


def integrate(pdf: DistancePdf) -> float:
    return float(np.trapezoid(pdf.density, pdf.grid))


def overlap_area(p: DistancePdf, q: DistancePdf) -> float:
    lo = min(p.grid[0], q.grid[0])
    hi = max(p.grid[-1], q.grid[-1])
    grid = np.linspace(lo, hi, max(len(p.grid), len(q.grid)))
    area = float(np.trapezoid(np.minimum(p.evaluate(grid), q.evaluate(grid)), grid))
    return min(max(area, 0.0), 1.0)


def distance_oa(reference, other, grid_points: int = DEFAULT_GRID_POINTS) -> float:
    """OA of two distance samples, with the point-mass rule for constant samples."""
    reference = np.asarray(reference, dtype=float)
    other = np.asarray(other, dtype=float)
    ref_const = np.ptp(reference) == 0
    oth_const = np.ptp(other) == 0
    if ref_const or oth_const:
        if ref_const and oth_const and abs(reference[0] - other[0]) <= POINT_MASS_TOL:
            return 1.0
        return 0.0
    # one bandwidth for both: the reference sample's
    h = silverman_bandwidth(reference)
    return overlap_area(kde_pdf(reference, h, grid_points), kde_pdf(other, h, grid_points))


def evaluate_features(
    target: Sequence[FeatureVector],
    generated: Sequence[FeatureVector],
    grid_points: int = DEFAULT_GRID_POINTS,
    config: dict | None = None,
) -> OaReport:
    if len(target) < 2 or len(generated) < 2:
        raise ValueError("both sets need at least 2 phrases")
    rows = {}
    for name in FEATURE_NAMES:
        t = [f[name] for f in target]
        g = [f[name] for f in generated]
        intra = cross_distances(t, feature_name=name).distances
        inter = cross_distances(g, t, feature_name=name).distances
        rows[name] = distance_oa(intra, inter, grid_points)
    return OaReport(rows, dict(config or {}))


def evaluate_sets(
    target: Corpus | Sequence[NotePhrase],
    generated: Corpus | Sequence[NotePhrase],
    rests: bool = False,
    grid_points: int = DEFAULT_GRID_POINTS,
    config: dict | None = None,
) -> OaReport:
    """Per-feature OA of target intra-set distances vs generated-to-target distances."""
    target = list(target)
    generated = list(generated)
    if len(target) < 2 or len(generated) < 2:
        raise ValueError("corpus too small: both sets need at least 2 phrases")
    cfg = {"n_target": len(target), "n_generated": len(generated), "rests": rests, "grid_points": grid_points}
    cfg.update(config or {})
    return evaluate_features(extract_all(target, rests), extract_all(generated, rests), grid_points, cfg)
