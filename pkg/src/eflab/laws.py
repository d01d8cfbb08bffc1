"""Monte Carlo checks of the schedule's distributional laws.

``ratio_multiplier`` scales the insertion hazard kappa_dot / (1 - kappa); the
survival function then becomes (1 - kappa)**m, which lets tests confirm the
checks actually detect a wrong rate.
"""

from __future__ import annotations

import numpy as np
from scipy import integrate

from eflab.metrics import MetricReport, binomial_sigma, ks_test
from eflab.schedule import Schedule, kappa_inverse

KS_ALPHA = 0.01
PRESENCE_TIMES = (0.25, 0.5, 0.75, 1.0, 1.5)


def hazard_insertion_times(s: Schedule, rng: np.random.Generator, size: int, ratio_multiplier: float = 1.0) -> np.ndarray:
    """Insertion times of a CTMC whose hazard is ``ratio_multiplier`` times the schedule's."""
    u = rng.random(size)
    # survival (1 - kappa(t))**m = 1 - u  =>  kappa(t) = 1 - (1 - u)**(1/m)
    return np.asarray(kappa_inverse(s, -np.expm1(np.log1p(-u) / ratio_multiplier)))


def retention_report(s: Schedule, rng: np.random.Generator, draws: int, seed=None, seq_len: int = 1) -> MetricReport:
    """Mean fraction of tokens kept at a uniform time vs the integral of kappa."""
    t = rng.random(draws)
    kept = rng.random((draws, seq_len)) < s.kappa(t)[:, None]
    frac = kept.mean(axis=1)
    expected = integrate.quad(lambda x: float(s.kappa(x)), 0.0, 1.0)[0]
    sigma = frac.std(ddof=1) / np.sqrt(draws)
    z = abs(frac.mean() - expected) / sigma
    return MetricReport.at_most(
        "retention_fraction", z, 3.0, draws, seed, detail=f"mean={frac.mean():.6f} expected={expected:.6f} (|z|)"
    )


def insertion_time_report(
    s: Schedule, rng: np.random.Generator, draws: int, seed=None, ratio_multiplier: float = 1.0
) -> MetricReport:
    times = hazard_insertion_times(s, rng, draws, ratio_multiplier)
    stat, p = ks_test(times, lambda x: s.kappa(np.clip(x, 0.0, 1.0)))
    return MetricReport.at_least("insertion_time_ks_pvalue", p, KS_ALPHA, draws, seed, detail=f"D={stat:.6f}")


def image_presence_reports(
    s: Schedule, rng: np.random.Generator, draws: int, seed=None, ratio_multiplier: float = 1.0
) -> list[MetricReport]:
    """P(image present | tau_text) against kappa(clip(tau_text)), one report per tau."""
    out = []
    for tau in PRESENCE_TIMES:
        lag = hazard_insertion_times(s, rng, draws, ratio_multiplier)
        present = float(np.mean(tau - lag >= 0.0))
        expected = float(s.kappa(min(max(tau, 0.0), 1.0)))
        sigma = binomial_sigma(expected, draws)
        z = abs(present - expected) / sigma if sigma > 0 else (0.0 if present == expected else np.inf)
        out.append(
            MetricReport.at_most(
                f"image_presence_tau_{tau:g}", z, 3.0, draws, seed, detail=f"observed={present:.6f} expected={expected:.6f} (|z|)"
            )
        )
    return out


def validate_schedule(s: Schedule, draws: int, seed: int, ratio_multiplier: float = 1.0) -> list[MetricReport]:
    rng_ret, rng_ins, rng_img = np.random.default_rng(seed).spawn(3)
    return [
        retention_report(s, rng_ret, draws, seed),
        insertion_time_report(s, rng_ins, draws, seed, ratio_multiplier),
        *image_presence_reports(s, rng_img, draws, seed, ratio_multiplier),
    ]
