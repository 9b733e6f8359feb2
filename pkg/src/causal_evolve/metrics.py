"""Outcome-level metrics: deterministic functionals of a solution payload.

The metric names registered for a task define the planner's action space.
Variances and standard deviations use the population convention throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .tasks import (
    AUTOCORR,
    CIRCLE_PACKING,
    HADAMARD,
    CirclePacking,
    DomainError,
    HadamardMatrix,
    SolutionPayload,
    StepFunction,
    exact_determinant,
    log10_abs,
)

SPARSITY_EPS = 1e-6
SQUARE_SIDE = 1.0


@dataclass(frozen=True)
class MetricSpec:
    name: str
    task: str
    definition: str


@dataclass
class MetricSet:
    values: dict[str, float]
    # names whose value is a degenerate-input sentinel rather than a real measurement
    flags: frozenset[str] = field(default_factory=frozenset)


METRIC_SPECS: dict[str, tuple[MetricSpec, ...]] = {
    HADAMARD: (
        MetricSpec("row_orthogonality_deviation", HADAMARD, "mean |<row_i,row_j>| over i != j"),
        MetricSpec("row_sum_variance", HADAMARD, "Var(row sums)"),
        MetricSpec("element_balance", HADAMARD, "fraction of +1 entries"),
        MetricSpec("log10_abs_det", HADAMARD, "log10 |det H|, -999 when singular"),
    ),
    AUTOCORR: (
        MetricSpec("smoothness_score", AUTOCORR, "mean |f_{i+1} - f_i|"),
        MetricSpec("center_concentration", AUTOCORR, "mass share with |x_i| <= 0.5"),
        MetricSpec("sparsity", AUTOCORR, "share of f_i < 1e-6"),
        MetricSpec("peak_to_average_ratio", AUTOCORR, "max f / mean f"),
        MetricSpec("tail_mass", AUTOCORR, "mass share with |x_i| > 0.5"),
        MetricSpec("entropy", AUTOCORR, "-sum p_i ln p_i, p = f / sum f"),
    ),
    CIRCLE_PACKING: (
        MetricSpec("density_score", CIRCLE_PACKING, "sum pi r^2 / S^2"),
        MetricSpec("center_spread_index", CIRCLE_PACKING, "mean distance to square center"),
        MetricSpec("radius_std_normalized", CIRCLE_PACKING, "Std(r) / E[r]"),
        MetricSpec("neighbor_distance_ratio", CIRCLE_PACKING, "mean nearest-center distance / r_i"),
        MetricSpec("large_circle_margin", CIRCLE_PACKING, "mean wall margin of above-mean circles"),
        MetricSpec("pairwise_radii_product_sum", CIRCLE_PACKING, "sum_{i<j} r_i r_j"),
        MetricSpec("centroid_distance_variance", CIRCLE_PACKING, "Var(|C_i - E[C]|)"),
    ),
}


def metric_names(task: str) -> tuple[str, ...]:
    return tuple(spec.name for spec in METRIC_SPECS[task])


def hadamard_metrics(matrix: HadamardMatrix) -> MetricSet:
    n = matrix.n
    if n < 2:
        raise DomainError("row orthogonality needs n >= 2")
    h = np.array(matrix.entries, dtype=np.int64)
    gram = h @ h.T
    off_diag = np.abs(gram).sum() - np.abs(np.diag(gram)).sum()
    row_sums = h.sum(axis=1).astype(float)
    det = exact_determinant(matrix.entries)
    flags = frozenset({"log10_abs_det"}) if det == 0 else frozenset()
    return MetricSet(
        {
            "row_orthogonality_deviation": float(off_diag) / (n * (n - 1)),
            "row_sum_variance": float(np.var(row_sums)),
            "element_balance": float(np.count_nonzero(h == 1)) / (n * n),
            "log10_abs_det": log10_abs(det),
        },
        flags,
    )


def center_mask(n: int) -> np.ndarray:
    """True where the midpoint x_i = -1 + (i + 1/2)(2/n) satisfies |x_i| <= 1/2.

    Evaluated in integers: |x_i| <= 1/2  <=>  2|2i + 1 - n| <= n.
    """
    i = np.arange(n)
    return 2 * np.abs(2 * i + 1 - n) <= n


def _complementary_shares(inner: float, outer: float) -> tuple[float, float]:
    """Normalize two masses so the shares add up to exactly 1.0.

    The smaller share is computed directly (full relative accuracy) and the
    larger one as its complement.
    """
    total = inner + outer
    if inner <= outer:
        a = inner / total
        return a, 1.0 - a
    b = outer / total
    return 1.0 - b, b


def autocorr_metrics(stepfn: StepFunction) -> MetricSet:
    f = np.asarray(stepfn.values, dtype=float)
    n = f.size
    if n < 1 or np.any(f < 0) or not np.any(f > 0):
        raise DomainError("step function must be nonnegative and not identically zero")
    flags = set()
    if n == 1:
        smoothness = 0.0
        flags.add("smoothness_score")
    else:
        smoothness = float(np.abs(np.diff(f)).sum()) / (n - 1)
    mask = center_mask(n)
    inner = math.fsum(f[mask].tolist())
    outer = math.fsum(f[~mask].tolist())
    center, tail = _complementary_shares(inner, outer)
    total = math.fsum(f.tolist())
    p = f / total
    nz = p[p > 0]
    entropy = float(-(nz * np.log(nz)).sum())
    return MetricSet(
        {
            "smoothness_score": smoothness,
            "center_concentration": center,
            "sparsity": float(np.count_nonzero(f < SPARSITY_EPS)) / n,
            "peak_to_average_ratio": float(f.max()) / (total / n),
            "tail_mass": tail,
            "entropy": entropy,
        },
        frozenset(flags),
    )


def circle_metrics(packing: CirclePacking) -> MetricSet:
    arr = packing.as_array()
    n = len(arr)
    if n < 1:
        raise DomainError("circle metrics need at least one circle")
    if np.any(arr[:, 2] < 0):
        raise DomainError("negative radius")
    s = SQUARE_SIDE
    xy, r = arr[:, :2], arr[:, 2]
    flags = set()

    mean_r = float(r.mean())
    if mean_r > 0:
        # constant radii: numpy's mean of equal floats can drift by an ulp, keep the spread exactly 0
        radius_std = 0.0 if r.min() == r.max() else float(r.std()) / mean_r
    else:
        radius_std = 0.0
        flags.add("radius_std_normalized")

    if n == 1 or np.any(r == 0):
        neighbor = 0.0
        flags.add("neighbor_distance_ratio")
    else:
        diff = xy[:, None, :] - xy[None, :, :]
        dist = np.sqrt((diff**2).sum(axis=-1))
        np.fill_diagonal(dist, np.inf)
        neighbor = float((dist.min(axis=1) / r).mean())

    # exact comparison so equal radii never land in the "large" set by rounding
    r_frac = [Fraction(v) for v in r.tolist()]
    total_r = sum(r_frac, Fraction(0))
    large = [i for i, v in enumerate(r_frac) if v * n > total_r]
    if large:
        margins = [
            min(arr[i, 0], s - arr[i, 0], arr[i, 1], s - arr[i, 1]) - arr[i, 2] for i in large
        ]
        large_margin = float(np.mean(margins))
    else:
        large_margin = 0.0

    pair_sum = float(np.triu(np.outer(r, r), k=1).sum())
    centroid = xy.mean(axis=0)
    centroid_dist = np.sqrt(((xy - centroid) ** 2).sum(axis=1))
    return MetricSet(
        {
            "density_score": float(np.pi * (r * r).sum()) / (s * s),
            "center_spread_index": float(np.sqrt(((xy - s / 2) ** 2).sum(axis=1)).mean()),
            "radius_std_normalized": radius_std,
            "neighbor_distance_ratio": neighbor,
            "large_circle_margin": large_margin,
            "pairwise_radii_product_sum": pair_sum,
            "centroid_distance_variance": float(np.var(centroid_dist)),
        },
        frozenset(flags),
    )


def compute_metrics(payload: SolutionPayload) -> MetricSet:
    if isinstance(payload, HadamardMatrix):
        return hadamard_metrics(payload)
    if isinstance(payload, StepFunction):
        return autocorr_metrics(payload)
    if isinstance(payload, CirclePacking):
        return circle_metrics(payload)
    raise TypeError(f"not a solution payload: {type(payload).__name__}")
