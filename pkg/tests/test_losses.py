import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import A, B, seq
from eflab.corruption import corrupt
from eflab.errors import DomainError
from eflab.losses import (
    CE_FLOOR,
    InsertionHeads,
    bag_cross_entropy,
    combine_rate,
    flow_matching_loss,
    loss_report,
    poisson_nll,
    text_loss,
    zero_inflated_loss,
)
from eflab.schedule import Schedule


def test_poisson_values():
    assert poisson_nll(1.0, 0) == 1.0
    assert poisson_nll(2.0, 2) == pytest.approx(2 - 2 * math.log(2), abs=1e-12)


def test_poisson_minimizer():
    from scipy.optimize import minimize_scalar

    res = minimize_scalar(lambda lam: poisson_nll(lam, 5), bounds=(0.1, 20), method="bounded", options={"xatol": 1e-9})
    assert res.x == pytest.approx(5.0, abs=1e-6)


def test_zero_inflated_values():
    assert zero_inflated_loss(0.5, 7.0, 0) == (pytest.approx(math.log(2)), 0.0)
    bce, pois = zero_inflated_loss(0.5, 3.0, 3)
    assert bce == pytest.approx(math.log(2))
    assert pois == pytest.approx(3 - 3 * math.log(3))


def test_zero_inflated_domain():
    with pytest.raises(DomainError):
        zero_inflated_loss(1.0, 1.0, 0)
    with pytest.raises(DomainError):
        poisson_nll(0.0, 1)


def test_bag_cross_entropy():
    assert bag_cross_entropy(np.full(5, 0.2), []).value == 0.0
    assert bag_cross_entropy(np.full(5, 0.2), [A]).value == pytest.approx(math.log(5))
    q = np.array([0.5, 0.25, 0.25, 0.0, 0.0])
    assert bag_cross_entropy(q, [A, A, B]).value == pytest.approx(2 * math.log(2) + math.log(4))


def test_bag_cross_entropy_saturates():
    ce = bag_cross_entropy(np.array([1.0, 0.0]), [1])
    assert ce.saturated and ce.value == pytest.approx(-math.log(CE_FLOOR))


def test_flow_matching_loss():
    y0, y1 = np.zeros(2), np.array([3.0, 4.0])
    assert flow_matching_loss(y1 - y0, y0, y1) == 0.0
    assert flow_matching_loss(np.zeros(2), y0, y1) == pytest.approx(12.5)


def test_flow_matching_gradient(rng):
    v, y0, y1 = rng.standard_normal((3, 6))
    analytic = 2 * (v - (y1 - y0)) / v.size
    eps = 1e-6
    fd = np.array([(flow_matching_loss(v + eps * e, y0, y1) - flow_matching_loss(v - eps * e, y0, y1)) / (2 * eps) for e in np.eye(6)])
    assert np.allclose(fd, analytic, rtol=1e-6, atol=1e-10)


def test_combine_rate():
    assert combine_rate(0.5, 4.0) == 2.0
    assert combine_rate(1 - 1e-15, 3.0) < 1e-14


def _uniform_heads(n_gaps, k=5, pi=0.5, lam=1.0):
    return InsertionHeads(np.full(n_gaps, pi), np.full(n_gaps, lam), np.full((n_gaps, k), 1 / k))


def test_text_loss_near_perfect_zero(rng):
    rec = corrupt(seq(A, B), Schedule.linear(), "text_only", rng, tau_text=1.0)
    n = len(rec.x_t)
    heads = _uniform_heads(rec.x_t.n_gaps, pi=1 - 1e-9)
    rep = text_loss(heads, rec)
    assert rep.text_total < 1e-8 * (n + 1) / max(n, 1)


def test_text_loss_single_gap_oracle_heads(rng):
    rec = corrupt(seq(A, B), Schedule.linear(), "text_only", rng, tau_text=0.0)
    eps = 1e-12
    q = np.array([0.5, 0.5, 0.0, 0.0, 0.0])
    rep = text_loss(InsertionHeads([eps], [2.0], [q]), rec)
    # CE 2 ln 2, Poisson 2 - 2 ln 2, BCE -log(1 - eps)
    assert rep.normalizer == 1.0
    assert rep.text_total == pytest.approx(2.0, abs=1e-9)
    assert rep.token_ce + rep.poisson_nonzero + rep.bce_zero == pytest.approx(rep.text_total)


def test_text_loss_is_recomputable_from_per_gap(rng):
    rec = corrupt(seq(A, B, A, B), Schedule.linear(), "text_only", rng, tau_text=0.4)
    heads = InsertionHeads(
        rng.uniform(0.1, 0.9, rec.x_t.n_gaps), rng.uniform(0.5, 3, rec.x_t.n_gaps), rng.dirichlet(np.ones(5), rec.x_t.n_gaps)
    )
    rep = text_loss(heads, rec)
    total = sum(ce + p + b for _, ce, p, b in rep.per_gap) / rep.normalizer
    assert rep.text_total == pytest.approx(total)


@given(st.permutations([0, 0, 1, 2, 3]))
def test_text_loss_bag_order_invariant(perm):
    rec = corrupt(seq(0, 0, 1, 2, 3), Schedule.linear(), "text_only", np.random.default_rng(0), tau_text=0.0)
    heads = InsertionHeads([0.3], [2.5], [[0.1, 0.2, 0.3, 0.3, 0.1]])
    base = text_loss(heads, rec).text_total
    rec.bags = [list(perm)]
    assert text_loss(heads, rec).text_total == pytest.approx(base, rel=1e-14)


def test_loss_report_adds_weighted_image_term(rng):
    from eflab.sequence import ImageBlock

    rec = corrupt(seq(ImageBlock([1.0, 2.0])), Schedule.linear(), "independent", rng, image_token_id=4)
    heads = _uniform_heads(rec.x_t.n_gaps)
    (idx, (y0, y1)), = rec.flow_pairs.items()
    rep = loss_report(heads, {idx: np.zeros(2)}, rec, weight_img=0.5)
    assert rep.image_mse == pytest.approx(flow_matching_loss(np.zeros(2), y0, y1))
    assert rep.grand_total == pytest.approx(rep.text_total + 0.5 * rep.image_mse)


def test_heads_check():
    with pytest.raises(DomainError):
        InsertionHeads([1.0], [1.0], [[1.0]]).check()
    InsertionHeads([0.5], [1.0], [[0.5, 0.5]]).check()
