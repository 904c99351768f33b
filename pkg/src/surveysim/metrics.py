"""Scalar measures for comparing response distributions.

All inputs are 1-D probability vectors over a question's options. JSD uses
base-2 logs and EMD uses the (n-1)-normalized ordinal ground distance, so
both scores live in [0, 1] regardless of option count.
"""

from dataclasses import dataclass
from itertools import combinations

import numpy as np

_SUM_TOL = 1e-6


@dataclass(frozen=True)
class MetricValue:
    name: str
    value: float
    higher_is_better: bool


def as_distribution(v, name: str = "distribution") -> np.ndarray:
    """Validate and return a probability vector (nonnegative, sums to 1)."""
    arr = np.asarray(v, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    if np.any(arr < -1e-12):
        raise ValueError(f"{name} has negative entries: min={arr.min()}")
    total = arr.sum()
    if abs(total - 1.0) > _SUM_TOL:
        raise ValueError(f"{name} must sum to 1 within {_SUM_TOL}, got {total}")
    return np.clip(arr, 0.0, None)


def _check_pair(p, q):
    p = as_distribution(p, "p")
    q = as_distribution(q, "q")
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.size} vs {q.size}")
    return p, q


def _kl_base2(p: np.ndarray, m: np.ndarray) -> float:
    # 0*log(0/x) := 0; m > 0 wherever p > 0 because m is a mixture with p
    mask = p > 0
    return float(np.sum(p[mask] * np.log2(p[mask] / m[mask])))


def jsd(p, q) -> float:
    """Jensen-Shannon divergence with base-2 logs; 0 iff p == q, at most 1."""
    p, q = _check_pair(p, q)
    m = 0.5 * (p + q)
    val = 0.5 * _kl_base2(p, m) + 0.5 * _kl_base2(q, m)
    return float(np.clip(val, 0.0, 1.0))


def one_minus_jsd(p, q) -> float:
    """Similarity form of jsd: 1 means identical distributions."""
    return 1.0 - jsd(p, q)


def emd(p, q) -> float:
    """Earth mover distance between distributions over ordinal positions.

    Options are treated as positions 0..n-1 with ground distance
    |i-j|/(n-1). In one dimension this reduces to the CDF difference:
    sum_i |CDF_p(i) - CDF_q(i)| / (n-1).
    """
    p, q = _check_pair(p, q)
    if p.size < 2:
        raise ValueError("emd needs at least 2 options")
    cdf_diff = np.cumsum(p - q)
    val = np.abs(cdf_diff).sum() / (p.size - 1)
    return float(np.clip(val, 0.0, 1.0))


def argmax_accuracy(predictions, references) -> float:
    """Fraction of items whose predicted argmax option matches the reference's.

    Ties break to the lowest index on both sides.
    """
    if len(predictions) == 0:
        raise ValueError("argmax_accuracy needs at least one item")
    if len(predictions) != len(references):
        raise ValueError(f"got {len(predictions)} predictions vs {len(references)} references")
    hits = 0
    for i, (pred, ref) in enumerate(zip(predictions, references)):
        pred = np.asarray(pred, dtype=float)
        ref = np.asarray(ref, dtype=float)
        if pred.shape != ref.shape:
            raise ValueError(f"item {i}: length mismatch {pred.size} vs {ref.size}")
        hits += int(np.argmax(pred) == np.argmax(ref))
    return hits / len(predictions)


def diversity_profile(distributions) -> float:
    """Mean pairwise 1-JSD of one question's distributions across countries.

    Lower values mean more cross-country diversity. Needs >= 2 countries.
    """
    if len(distributions) < 2:
        raise ValueError("diversity_profile needs at least 2 countries")
    sims = [one_minus_jsd(a, b) for a, b in combinations(distributions, 2)]
    return float(np.mean(sims))
