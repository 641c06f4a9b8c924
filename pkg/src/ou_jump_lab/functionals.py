"""Path functionals: jump counts, rho-variation, and weak quasinorms.

Conventions that matter (they differ across the literature, so they are
fixed here once and tested hard):

* ``jump_count(curve, lam)`` is the *length* of the longest subsequence
  whose consecutive values differ by strictly more than ``lam``.  It is
  always >= 1 (a single sample is a chain of length one).
* The seminorm builders use the *exceedance count*, i.e. chain length
  minus one -- the number of lam-moves, not the number of chain points.
  The count-variation domination lam * count^(1/rho) <= variation holds
  for the exceedance count and is false for the chain length.
* ``rho_variation`` maximizes sums of |increment|^rho over subsequences
  and reports the rho-th root, together with the lexicographically
  earliest optimal subsequence.

Comparisons against the threshold are strict (``> lam``); a gap exactly
equal to lam does not count, so integer-valued curves against integer
thresholds behave exactly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateSample,
    EmptyCurve,
    RhoOutOfRange,
    ValidationError,
)

__all__ = [
    "SampledCurve",
    "VariationResult",
    "WeakNormEstimate",
    "jump_count",
    "jump_count_dp",
    "rho_variation",
    "weak_quasinorm",
    "jump_quasi_seminorm",
    "weak_jump_quasi_seminorm",
    "lambda_grid",
    "read_curves_csv",
    "write_curves_csv",
]


@dataclass(frozen=True)
class SampledCurve:
    """A function of time known at finitely many sample times."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if times.ndim != 1 or values.ndim != 1 or times.size != values.size:
            raise ValidationError(
                f"times/values must be equal-length 1-d arrays, got "
                f"{times.shape} / {values.shape}"
            )
        if times.size == 0:
            raise EmptyCurve("curve has no samples")
        if not np.all(times > 0.0):
            raise ValidationError("sample times must be positive")
        if not np.all(np.diff(times) > 0.0):
            raise ValidationError("sample times must be strictly increasing")
        if not np.isfinite(values).all():
            raise ValidationError("curve values must be finite")
        times.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @property
    def n_samples(self) -> int:
        return self.times.size

    def restricted(self, t_lo: float, t_hi: float) -> "SampledCurve":
        """Sub-curve on the closed window [t_lo, t_hi]."""
        mask = (self.times >= t_lo) & (self.times <= t_hi)
        if not mask.any():
            raise EmptyCurve(f"no samples in [{t_lo:g}, {t_hi:g}]")
        return SampledCurve(self.times[mask], self.values[mask])

    def value_range(self) -> float:
        return float(self.values.max() - self.values.min())


def _check_lambda(lam: float) -> float:
    lam = float(lam)
    if not lam > 0.0:
        raise ValidationError(f"jump threshold must be positive, got {lam}")
    return lam


# ---------------------------------------------------------------------------
# jump counting
# ---------------------------------------------------------------------------

class _PrefixMaxTree:
    """Fenwick tree over ranks supporting prefix-max queries."""

    __slots__ = ("size", "data")

    def __init__(self, size: int) -> None:
        self.size = size
        self.data = [0] * (size + 1)

    def update(self, idx: int, value: int) -> None:
        idx += 1
        while idx <= self.size:
            if self.data[idx] < value:
                self.data[idx] = value
            idx += idx & (-idx)

    def query(self, count: int) -> int:
        """Max over the first ``count`` ranks (0 if count <= 0)."""
        best = 0
        idx = min(count, self.size)
        while idx > 0:
            if self.data[idx] > best:
                best = self.data[idx]
            idx -= idx & (-idx)
        return best


def jump_count(curve: SampledCurve, lam: float) -> int:
    """Length of the longest chain with consecutive gaps strictly > lam.

    Exact O(N log N) sweep: process samples left to right, and for each
    value query the best chain ending at a value separated by more than lam
    on either side.  The separation predicate is evaluated with the exact
    same float subtraction the quadratic reference uses, located by binary
    search (the predicate is monotone along the sorted unique values), so
    this agrees with :func:`jump_count_dp` bit for bit.
    """
    lam = _check_lambda(lam)
    v = curve.values
    if v.size == 1 or curve.value_range() <= lam:
        return 1
    uniq = np.unique(v)
    m = uniq.size
    below = _PrefixMaxTree(m)   # chains ending at small values
    above = _PrefixMaxTree(m)   # chains ending at large values (reversed ranks)
    ranks = np.searchsorted(uniq, v)
    best_overall = 1
    for val, rank in zip(v, ranks):
        # count of unique values u with val - u > lam (a prefix of uniq)
        lo, hi = 0, m
        while lo < hi:
            mid = (lo + hi) // 2
            if val - uniq[mid] > lam:
                lo = mid + 1
            else:
                hi = mid
        n_below = lo
        # count of unique values u with u - val > lam (a suffix of uniq)
        lo, hi = 0, m
        while lo < hi:
            mid = (lo + hi) // 2
            if uniq[mid] - val > lam:
                hi = mid
            else:
                lo = mid + 1
        n_above = m - lo
        best = 1 + max(below.query(n_below), above.query(n_above))
        if best > best_overall:
            best_overall = best
        below.update(int(rank), best)
        above.update(m - 1 - int(rank), best)
    return best_overall


def jump_count_dp(curve: SampledCurve, lam: float) -> int:
    """Quadratic reference for :func:`jump_count` (obviously correct form)."""
    lam = _check_lambda(lam)
    v = curve.values
    best = np.ones(v.size, dtype=np.int64)
    for i in range(1, v.size):
        reachable = np.abs(v[:i] - v[i]) > lam
        if reachable.any():
            best[i] = 1 + best[:i][reachable].max()
    return int(best.max())


def _exceedance_count(curve: SampledCurve, lam: float) -> int:
    """Number of lam-exceeding moves along the best chain (= length - 1)."""
    return jump_count(curve, lam) - 1


# ---------------------------------------------------------------------------
# rho-variation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VariationResult:
    """Value of the rho-variation plus an optimal sample subsequence.

    ``partition`` holds indices into the original curve;
    re-accumulating |increment|^rho along it reproduces value^rho.
    """

    rho: float
    value: float
    partition: tuple


def rho_variation(
    curve: SampledCurve, rho: float, method: str = "auto"
) -> VariationResult:
    """sup over subsequences of (sum |consecutive increment|^rho)^(1/rho).

    ``method="full"`` runs the quadratic dynamic program over all samples;
    ``method="extrema"`` first discards samples that are neither local
    extrema nor endpoints (for rho >= 1 an optimal subsequence only turns
    at extrema, so nothing is lost); ``"auto"`` picks the reduction.  Both
    return the same value; the test suite pins them against each other.
    """
    rho = float(rho)
    if rho < 1.0:
        raise RhoOutOfRange(f"variation exponent must be >= 1, got {rho}")
    if method not in ("auto", "full", "extrema"):
        raise ValidationError(f"unknown method {method!r}")
    v = curve.values
    if method in ("auto", "extrema"):
        keep = _extrema_indices(v)
        reduced = v[keep]
    else:
        keep = np.arange(v.size)
        reduced = v
    total, chain = _variation_dp(reduced, rho)
    partition = tuple(int(keep[i]) for i in chain)
    value = total ** (1.0 / rho) if total > 0.0 else 0.0
    return VariationResult(rho=rho, value=float(value), partition=partition)


def _extrema_indices(v: np.ndarray) -> np.ndarray:
    """Indices of endpoints and strict turning points (plateaus deduped)."""
    if v.size <= 2:
        return np.arange(v.size)
    # drop consecutive duplicates first so plateaus contribute one sample
    change = np.empty(v.size, dtype=bool)
    change[0] = True
    change[1:] = v[1:] != v[:-1]
    idx = np.nonzero(change)[0]
    w = v[idx]
    if w.size <= 2:
        return idx
    d = np.sign(np.diff(w))
    turn = np.empty(w.size, dtype=bool)
    turn[0] = True
    turn[-1] = True
    turn[1:-1] = d[1:] != d[:-1]
    return idx[turn]


def _variation_dp(v: np.ndarray, rho: float) -> tuple:
    """Suffix DP: G[i] = best sum of a subsequence starting at i.

    Returns (max G, lexicographically earliest optimal index chain).  The
    greedy reconstruction walks forward re-testing the exact float
    equalities the DP produced, so the chain always re-sums to the value.
    """
    n = v.size
    g = np.zeros(n)
    for i in range(n - 2, -1, -1):
        g[i] = float(np.max(np.abs(v[i + 1 :] - v[i]) ** rho + g[i + 1 :]))
    total = float(g.max())
    if total == 0.0:
        return 0.0, [0]
    start = int(np.argmax(g == total))
    chain = [start]
    i = start
    while g[i] > 0.0:
        tail = np.abs(v[i + 1 :] - v[i]) ** rho + g[i + 1 :]
        nxt = i + 1 + int(np.argmax(tail == g[i]))
        chain.append(nxt)
        i = nxt
    return total, chain


# ---------------------------------------------------------------------------
# weak quasinorm and the seminorm builders
# ---------------------------------------------------------------------------

def weak_quasinorm(values, weights) -> float:
    """sup over thresholds alpha of alpha * mass(|values| >= alpha).

    For finitely many atoms the sup is attained at one of the distinct
    |value| levels with its inclusive cumulative mass.
    """
    vals = np.abs(np.asarray(values, dtype=float)).reshape(-1)
    w = np.asarray(weights, dtype=float).reshape(-1)
    if vals.size != w.size:
        raise ValidationError(
            f"values/weights length mismatch: {vals.size} vs {w.size}"
        )
    if np.any(w < 0.0):
        raise ValidationError("weights must be nonnegative")
    if vals.size == 0:
        return 0.0
    order = np.argsort(-vals, kind="stable")
    sorted_vals = vals[order]
    cum = np.cumsum(w[order])
    # last index of each run of equal values carries the inclusive mass
    run_end = np.nonzero(
        np.concatenate([sorted_vals[1:] != sorted_vals[:-1], [True]])
    )[0]
    levels = sorted_vals[run_end]
    masses = cum[run_end]
    live = levels > 0.0
    if not live.any():
        return 0.0
    return float((levels[live] * masses[live]).max())


@dataclass(frozen=True)
class WeakNormEstimate:
    """A jump seminorm evaluated over a threshold grid.

    ``per_lambda[k]`` is the spatial norm of lam_k * exceedances^(1/rho);
    ``value`` is its max over the grid and ``argmax_lambda`` the maximizer.
    """

    lambda_grid: np.ndarray
    per_lambda: np.ndarray
    value: float
    argmax_lambda: float
    rho: float
    p: float

    def to_json_dict(self) -> dict:
        return {
            "rho": self.rho,
            "p": self.p,
            "value": self.value,
            "argmax_lambda": self.argmax_lambda,
            "lambda_grid": [float(v) for v in self.lambda_grid],
            "per_lambda": [float(v) for v in self.per_lambda],
        }


def _seminorm_engine(
    curves: Sequence[SampledCurve],
    weights,
    rho: float,
    p: float,
    lambdas,
    spatial_norm,
) -> WeakNormEstimate:
    rho = float(rho)
    if rho < 1.0:
        raise RhoOutOfRange(f"rho must be >= 1, got {rho}")
    p = float(p)
    if p <= 0.0:
        raise ValidationError(f"p must be positive, got {p}")
    w = np.asarray(weights, dtype=float).reshape(-1)
    if len(curves) != w.size:
        raise ValidationError(
            f"{len(curves)} curves but {w.size} weights"
        )
    if np.any(w < 0.0):
        raise ValidationError("weights must be nonnegative")
    lam_arr = np.asarray(lambdas, dtype=float).reshape(-1)
    if lam_arr.size == 0 or not np.all(lam_arr > 0.0):
        raise ValidationError("lambda grid must be nonempty and positive")
    ranges = np.array([c.value_range() for c in curves])
    per_lambda = np.empty(lam_arr.size)
    counts = np.zeros(len(curves))
    for k, lam in enumerate(lam_arr):
        for i, curve in enumerate(curves):
            # a chain needs a gap > lam somewhere; skip flat-enough curves
            counts[i] = 0 if ranges[i] <= lam else _exceedance_count(curve, lam)
        g = lam * counts ** (1.0 / rho)
        per_lambda[k] = spatial_norm(g, w, p)
    best = int(np.argmax(per_lambda))
    return WeakNormEstimate(
        lambda_grid=lam_arr.copy(),
        per_lambda=per_lambda,
        value=float(per_lambda[best]),
        argmax_lambda=float(lam_arr[best]),
        rho=rho,
        p=p,
    )


def _lp_norm(g: np.ndarray, w: np.ndarray, p: float) -> float:
    return float((w @ np.abs(g) ** p) ** (1.0 / p))


def _weak_l1_norm(g: np.ndarray, w: np.ndarray, p: float) -> float:
    del p
    return weak_quasinorm(g, w)


def jump_quasi_seminorm(
    curves: Sequence[SampledCurve],
    weights,
    rho: float,
    p: float,
    lambdas,
) -> WeakNormEstimate:
    """Strong-norm variant: max over lam of || lam * count^(1/rho) ||_Lp(w)."""
    return _seminorm_engine(curves, weights, rho, p, lambdas, _lp_norm)


def weak_jump_quasi_seminorm(
    curves: Sequence[SampledCurve],
    weights,
    rho: float,
    lambdas,
) -> WeakNormEstimate:
    """Weak-norm variant: max over lam of the weak quasinorm of
    lam * count^(1/rho) against the weights."""
    return _seminorm_engine(curves, weights, rho, 1.0, lambdas, _weak_l1_norm)


def lambda_grid(
    curves: Sequence[SampledCurve], count: int = 40, span: float = 1e-4
) -> np.ndarray:
    """Log-spaced threshold grid tied to the field's largest value range.

    Thresholds above the largest range give identically zero counts, so the
    grid tops out there and reaches down by the given span factor.  A field
    of constant curves has zero range; every positive threshold then yields
    the zero seminorm, and the single-point grid {1.0} records that.
    """
    if not curves:
        raise ValidationError("need at least one curve")
    if count < 1:
        raise ValidationError(f"grid size must be >= 1, got {count}")
    top = max(c.value_range() for c in curves)
    if top <= 0.0:
        return np.array([1.0])
    return np.geomspace(span * top, top, count)


# ---------------------------------------------------------------------------
# CSV import/export
# ---------------------------------------------------------------------------

def write_curves_csv(path, curves: Sequence[SampledCurve], ids=None) -> None:
    """Long-format CSV (curve_id, t, value); floats via repr for round-trips."""
    if ids is None:
        ids = [str(i) for i in range(len(curves))]
    if len(ids) != len(curves):
        raise ValidationError(f"{len(curves)} curves but {len(ids)} ids")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["curve_id", "t", "value"])
        for cid, curve in zip(ids, curves):
            for t, v in zip(curve.times, curve.values):
                writer.writerow([cid, repr(float(t)), repr(float(v))])


def read_curves_csv(path) -> dict:
    """Inverse of :func:`write_curves_csv`; returns {curve_id: SampledCurve}."""
    buckets: dict = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["curve_id", "t", "value"]:
            raise ValidationError(f"unexpected curves CSV header: {header}")
        for row in reader:
            if len(row) != 3:
                raise ValidationError(f"malformed curves CSV row: {row}")
            cid, t, v = row
            buckets.setdefault(cid, []).append((float(t), float(v)))
    out = {}
    for cid, pairs in buckets.items():
        arr = np.asarray(pairs, dtype=float)
        out[cid] = SampledCurve(arr[:, 0], arr[:, 1])
    return out
