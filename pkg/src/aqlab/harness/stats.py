"""Seed-level summary statistics: IQM, bootstrap intervals, steps-to-band."""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

STATISTICS = ("mean", "iqm")


def _as_values(values) -> np.ndarray:
    x = np.asarray(values, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("need at least one value")
    if not np.all(np.isfinite(x)):
        raise ValueError("values must be finite")
    return x


def iqm_weights(n: int) -> np.ndarray:
    """Weights over sorted values that keep exactly the middle half.

    Sorted value ``i`` owns the quantile interval ``[i/n, (i+1)/n]``; its
    weight is the overlap of that interval with ``[0.25, 0.75]``, divided by
    0.5. Values straddling a quartile therefore count partially.
    """
    if n < 1:
        raise ValueError("need at least one value")
    edges = np.arange(n + 1) / n
    overlap = np.clip(np.minimum(edges[1:], 0.75) - np.maximum(edges[:-1], 0.25), 0.0, None)
    return overlap / 0.5


def iqm(values: Sequence[float]) -> float:
    """Interquartile mean with fractional weights at the quartile boundaries."""
    x = np.sort(_as_values(values))
    return float(iqm_weights(x.size) @ x)


def standard_error(values: Sequence[float]) -> float:
    x = _as_values(values)
    return float(np.std(x, ddof=1) / math.sqrt(x.size)) if x.size > 1 else math.nan


def _resampled_stat(samples: np.ndarray, statistic) -> np.ndarray:
    if statistic == "mean":
        return samples.mean(axis=1)
    if statistic == "iqm":
        return np.sort(samples, axis=1) @ iqm_weights(samples.shape[1])
    return np.array([statistic(row) for row in samples])


def point_estimate(values: Sequence[float], statistic: str | Callable = "mean") -> float:
    x = _as_values(values)
    return float(_resampled_stat(x[None, :], _check_statistic(statistic))[0])


def _check_statistic(statistic):
    if callable(statistic) or statistic in STATISTICS:
        return statistic
    raise ValueError(f"unknown statistic {statistic!r}; expected one of {STATISTICS} or a callable")


def bootstrap_ci(
    values: Sequence[float],
    n_resamples: int = 10_000,
    level: float = 0.95,
    statistic: str | Callable = "mean",
    seed: int = 0,
) -> tuple[float, float]:
    """Percentile bootstrap interval of ``statistic`` with seeded resampling."""
    x = _as_values(values)
    statistic = _check_statistic(statistic)
    if n_resamples < 1000:
        raise ValueError("n_resamples must be at least 1000")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    if np.all(x == x[0]):
        return float(x[0]), float(x[0])
    rng = np.random.default_rng(seed)
    stats = np.empty(n_resamples)
    # chunks keep the index matrix small for long inputs
    chunk = max(1, 2_000_000 // x.size)
    for start in range(0, n_resamples, chunk):
        stop = min(n_resamples, start + chunk)
        idx = rng.integers(0, x.size, size=(stop - start, x.size))
        stats[start:stop] = _resampled_stat(x[idx], statistic)
    alpha = 0.5 * (1.0 - level)
    lo, hi = np.quantile(stats, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


def steps_to_band(trace: Sequence[float], target: float, band: float, steps: Sequence[int] | None = None) -> int | None:
    """First logged step from which the trace stays within ``target +- band``.

    Returns ``None`` when the last logged value is outside the band. ``steps``
    maps trace positions to step counts; by default positions are the steps.
    """
    if not band > 0:
        raise ValueError("band must be positive")
    x = np.asarray(trace, dtype=float)
    if steps is not None and len(steps) != len(x):
        raise ValueError("steps and trace differ in length")
    inside = np.abs(x - target) <= band
    if x.size == 0 or not inside[-1]:
        return None
    outside = np.flatnonzero(~inside)
    first = 0 if outside.size == 0 else int(outside[-1]) + 1
    return int(steps[first]) if steps is not None else first


def summarize(values: Sequence[float], n_resamples: int = 10_000, level: float = 0.95, seed: int = 0) -> dict:
    """Mean, IQM, standard error and bootstrap intervals of per-seed values.

    The reported interval always contains the point estimate: if the
    percentile interval misses it, the nearer bound is moved onto it.
    """
    x = _as_values(values)
    out = {"n": int(x.size), "mean": float(x.mean()), "iqm": iqm(x), "se": standard_error(x),
           "min": float(x.min()), "max": float(x.max())}
    for stat in STATISTICS:
        lo, hi = bootstrap_ci(x, n_resamples, level, stat, seed)
        out[f"{stat}_ci"] = [min(lo, out[stat]), max(hi, out[stat])]
    return out
