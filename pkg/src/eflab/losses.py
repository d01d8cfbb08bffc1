"""Model-output contract and the training losses.

Per gap the model predicts a zero-probability ``pi``, a rate for nonzero
counts ``lambda_nonzero`` and a bag distribution ``q`` over the vocabulary plus
the image token. These plain-float versions define the losses; the trainable
model recomputes the same quantities on its autodiff graph.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from eflab.corruption import CorruptionRecord
from eflab.errors import DataError, DomainError

CE_FLOOR = 1e-300
LAMBDA_FLOOR = 1e-6


@dataclass
class InsertionHeads:
    pi: np.ndarray  # (gaps,)
    lambda_nonzero: np.ndarray  # (gaps,)
    q: np.ndarray  # (gaps, M + 1)

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=np.float64).reshape(-1)
        self.lambda_nonzero = np.asarray(self.lambda_nonzero, dtype=np.float64).reshape(-1)
        self.q = np.atleast_2d(np.asarray(self.q, dtype=np.float64))
        g = self.pi.shape[0]
        if self.lambda_nonzero.shape[0] != g or self.q.shape[0] != g:
            raise DataError("heads disagree on the number of gaps")

    @property
    def n_gaps(self) -> int:
        return self.pi.shape[0]

    def rate(self) -> np.ndarray:
        return combine_rate(self.pi, self.lambda_nonzero)

    def check(self, atol: float = 1e-9) -> None:
        if np.any((self.pi <= 0) | (self.pi >= 1)):
            raise DomainError("pi must lie strictly inside (0, 1)")
        if np.any(self.lambda_nonzero <= 0):
            raise DomainError("lambda_nonzero must be positive")
        if np.any(self.q < 0) or np.any(np.abs(self.q.sum(axis=1) - 1.0) > atol):
            raise DomainError("each q row must be a probability vector")

    def to_json(self) -> dict:
        return {
            "pi": self.pi.tolist(),
            "lambda_nonzero": self.lambda_nonzero.tolist(),
            "q": self.q.tolist(),
        }


class CrossEntropy(NamedTuple):
    value: float
    saturated: bool


@dataclass
class LossReport:
    token_ce: float = 0.0
    poisson_nonzero: float = 0.0
    bce_zero: float = 0.0
    text_total: float = 0.0
    image_mse: float = 0.0
    grand_total: float = 0.0
    normalizer: float = 1.0
    saturated: bool = False
    # (gap, ce, poisson, bce) for every active gap, before normalization
    per_gap: list[tuple[int, float, float, float]] = field(default_factory=list)

    def to_json(self) -> dict:
        out = asdict(self)
        out["per_gap"] = [list(row) for row in self.per_gap]
        return out


def poisson_nll(lam: float, k: int) -> float:
    """Poisson negative log-likelihood with the lambda-free log k! term dropped."""
    if not lam > 0:
        raise DomainError(f"Poisson rate must be positive, got {lam}")
    if k < 0:
        raise DomainError(f"count must be non-negative, got {k}")
    return lam - k * math.log(lam)


def zero_inflated_loss(pi: float, lambda_nonzero: float, k: int) -> tuple[float, float]:
    """(BCE on the zero event, Poisson loss counted only when k > 0)."""
    if not 0.0 < pi < 1.0:
        raise DomainError(f"pi must lie in (0, 1), got {pi}")
    if not lambda_nonzero > 0:
        raise DomainError(f"lambda_nonzero must be positive, got {lambda_nonzero}")
    if k < 0:
        raise DomainError(f"count must be non-negative, got {k}")
    if k == 0:
        return -math.log(pi), 0.0
    return -math.log1p(-pi), poisson_nll(lambda_nonzero, k)


def bag_cross_entropy(q, bag) -> CrossEntropy:
    q = np.asarray(q, dtype=np.float64)
    total = 0.0
    saturated = False
    for a in bag:
        p = q[a]
        if p <= 0.0:
            saturated = True
            p = CE_FLOOR
        total -= math.log(p)
    return CrossEntropy(total, saturated)


def combine_rate(pi, lambda_nonzero):
    """Expected insertion count per unit ratio: (1 - pi) * lambda_nonzero."""
    out = (1.0 - np.asarray(pi, dtype=np.float64)) * np.asarray(lambda_nonzero, dtype=np.float64)
    return float(out) if out.ndim == 0 else out


def text_normalizer(n: int) -> float:
    """1/n weighting uses n = |x_t|; an empty x_t is weighted as if n = 1."""
    return float(max(n, 1))


def flow_matching_loss(v_pred, y0, y1) -> float:
    v_pred, y0, y1 = (np.asarray(a, dtype=np.float64) for a in (v_pred, y0, y1))
    if not (v_pred.shape == y0.shape == y1.shape):
        raise DataError(f"dimension mismatch {v_pred.shape}, {y0.shape}, {y1.shape}")
    diff = v_pred - (y1 - y0)
    return float(np.mean(diff * diff))


def _zero_inflated_terms(pi: float, lambda_nonzero: float, k: int) -> tuple[float, float, bool]:
    """Like :func:`zero_inflated_loss` but accepts the closed interval [0, 1] for pi.

    Exact oracle heads put pi on the boundary; a boundary that contradicts the
    observed count saturates instead of producing an infinity.
    """
    if k == 0:
        return (-math.log(pi), 0.0, False) if pi > 0 else (-math.log(CE_FLOOR), 0.0, True)
    pois = poisson_nll(lambda_nonzero, k)
    if pi < 1:
        return -math.log1p(-pi), pois, False
    return -math.log(CE_FLOOR), pois, True


def text_loss(heads: InsertionHeads, rec: CorruptionRecord) -> LossReport:
    x_t = rec.x_t
    if heads.n_gaps != x_t.n_gaps or len(rec.bags) != x_t.n_gaps:
        raise DataError(f"heads have {heads.n_gaps} gaps, record has {len(rec.bags)}")
    report = LossReport(normalizer=text_normalizer(len(x_t)))
    for gap in x_t.active_gaps():
        bag = rec.bags[gap]
        ce = bag_cross_entropy(heads.q[gap], bag)
        bce, pois, sat = _zero_inflated_terms(float(heads.pi[gap]), float(heads.lambda_nonzero[gap]), len(bag))
        report.per_gap.append((gap, ce.value, pois, bce))
        report.saturated |= ce.saturated or sat
        report.token_ce += ce.value
        report.poisson_nonzero += pois
        report.bce_zero += bce
    report.token_ce /= report.normalizer
    report.poisson_nonzero /= report.normalizer
    report.bce_zero /= report.normalizer
    report.text_total = report.token_ce + report.poisson_nonzero + report.bce_zero
    report.grand_total = report.text_total
    return report


def image_loss(velocities: dict[int, np.ndarray], rec: CorruptionRecord) -> float:
    """Mean flow-matching loss over the images this corruption noised."""
    if not rec.flow_pairs:
        return 0.0
    losses = [flow_matching_loss(velocities[i], y0, y1) for i, (y0, y1) in rec.flow_pairs.items()]
    return float(np.mean(losses))


def loss_report(
    heads: InsertionHeads,
    velocities: dict[int, np.ndarray],
    rec: CorruptionRecord,
    weight_img: float = 1.0,
) -> LossReport:
    report = text_loss(heads, rec)
    report.image_mse = image_loss(velocities, rec)
    report.grand_total = report.text_total + weight_img * report.image_mse
    return report
