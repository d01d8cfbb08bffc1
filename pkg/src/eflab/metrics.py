"""Distribution distances and self-describing pass/fail reports."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Callable, Hashable, Iterable, Mapping

import numpy as np
from scipy import stats as sps

from eflab.sequence import MixedSequence, is_image


@dataclass
class MetricReport:
    name: str
    value: float
    tolerance: float
    passed: bool
    sample_size: int
    seed: int | None = None
    comparison: str = "<="  # how value relates to tolerance when passing
    detail: str = ""

    @classmethod
    def at_most(cls, name: str, value: float, tolerance: float, sample_size: int, seed=None, detail: str = ""):
        return cls(name, float(value), tolerance, bool(value <= tolerance), sample_size, seed, "<=", detail)

    @classmethod
    def at_least(cls, name: str, value: float, tolerance: float, sample_size: int, seed=None, detail: str = ""):
        return cls(name, float(value), tolerance, bool(value >= tolerance), sample_size, seed, ">=", detail)

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} {self.name}: {self.value:.6g} {self.comparison} {self.tolerance:.6g} (n={self.sample_size}, seed={self.seed})"

    def to_json(self) -> dict:
        return asdict(self)


def empirical(items: Iterable[Hashable]) -> dict:
    counts = Counter(items)
    n = sum(counts.values())
    return {k: c / n for k, c in counts.items()} if n else {}


def tv_distance(p: Mapping, q: Mapping) -> float:
    keys = set(p) | set(q)
    return 0.5 * math.fsum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


def binomial_sigma(p: float, n: int) -> float:
    return math.sqrt(p * (1.0 - p) / n)


def within_sigma(observed: float, p: float, n: int, k: float = 3.0) -> bool:
    return abs(observed - p) <= k * binomial_sigma(p, n)


def ks_test(samples, cdf: Callable) -> tuple[float, float]:
    """One-sample Kolmogorov-Smirnov statistic and p-value against ``cdf``."""
    res = sps.kstest(np.asarray(samples, dtype=np.float64), cdf)
    return float(res.statistic), float(res.pvalue)


def nearest_centroid(values, centroids) -> int:
    centroids = np.atleast_2d(np.asarray(centroids, dtype=np.float64))
    return int(np.argmin(np.sum((centroids - np.asarray(values)) ** 2, axis=1)))


def sequence_key(seq: MixedSequence, centroids=None) -> tuple:
    """Hashable identity of a sequence; images collapse to their nearest centroid label."""
    out = []
    for el in seq:
        if is_image(el):
            out.append(("img", nearest_centroid(el.values, centroids) if centroids is not None else 0))
        else:
            out.append(int(el))
    return (seq.prompt_len, tuple(out))


def class_centroids(data: Iterable[MixedSequence]) -> np.ndarray | None:
    """Mean image value per prompt, in first-seen order."""
    groups: dict[tuple, list[np.ndarray]] = {}
    for seq in data:
        key = tuple(int(el) for el in seq.prompt if not is_image(el))
        groups.setdefault(key, []).extend(el.values for el in seq.target if is_image(el))
    means = [np.mean(v, axis=0) for v in groups.values() if v]
    return np.array(means) if means else None
