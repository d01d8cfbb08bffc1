import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import A, B, C, seq
from eflab.corruption import corrupt, deletion_time_of_image
from eflab.errors import ConfigError, DomainError
from eflab.schedule import Schedule
from eflab.sequence import ImageBlock, is_image

IMG = 4
LIN = Schedule.linear()


def test_everything_deleted_at_time_zero(rng):
    rec = corrupt(seq(A, B), LIN, "text_only", rng, tau_text=0.0)
    assert rec.x_t.elements == ()
    assert rec.bags == [[A, B]]
    assert rec.counts == [2]


def test_nothing_deleted_at_time_one(rng):
    rec = corrupt(seq(A, B), LIN, "text_only", rng, tau_text=1.0)
    assert rec.x_t.elements == (A, B)
    assert rec.counts == [0, 0, 0]


def test_survival_frequency_at_half(rng):
    n = 20000
    kept = np.zeros(3)
    for _ in range(n):
        rec = corrupt(seq(A, B, C), LIN, "text_only", rng, tau_text=0.5)
        for el in rec.x_t:
            kept[el] += 1
    sigma = math.sqrt(0.25 / n)
    assert np.all(np.abs(kept / n - 0.5) <= 3 * sigma)


def test_prompt_never_corrupted(rng):
    x = seq(A, ImageBlock([1.0, 2.0]), B, C, prompt_len=2)
    for _ in range(200):
        rec = corrupt(x, LIN, "interleaved", rng, image_token_id=IMG)
        assert rec.x_t.elements[:2] == x.elements[:2]
        assert rec.bags[0] == [] and rec.bags[1] == []


def _source(draw_elements, p):
    return seq(*draw_elements, prompt_len=p)


elements = st.lists(
    st.one_of(st.integers(0, 3), st.just("img")), min_size=0, max_size=7
).map(lambda xs: [ImageBlock([float(i), 1.0]) if x == "img" else x for i, x in enumerate(xs)])


@settings(max_examples=60, deadline=None)
@given(elements, st.integers(0, 3), st.sampled_from(["interleaved", "independent", "text_only"]), st.integers(0, 2**31))
def test_record_invariants(els, p, mode, seed):
    p = min(p, len(els))
    x = seq(*els, prompt_len=p)
    rec = corrupt(x, LIN, mode, np.random.default_rng(seed), image_token_id=IMG)
    assert len(rec.bags) == rec.x_t.n_gaps
    assert rec.counts == [len(b) for b in rec.bags]
    surviving_imgs = sum(1 for el in rec.x_t.target if is_image(el))
    surviving_toks = len(rec.x_t.target) - surviving_imgs
    deleted_toks = sum(1 for b in rec.bags for a in b if a != IMG)
    assert deleted_toks + surviving_toks + rec.n_deleted_images + surviving_imgs == len(x) - p
    assert all(not b for b in rec.bags[:p])
    # exact reconstruction, then bag positions follow from the alignment
    assert rec.reconstruct(IMG) == x.symbols(IMG)
    survivors = sorted(rec.alignment.values())
    gap = 0
    for src in range(len(x)):
        if src in rec.alignment.values():
            gap += 1
        else:
            assert gap == sum(1 for s in survivors if s < src)


def test_independent_mode_never_deletes_images(rng):
    x = seq(A, ImageBlock([1.0, -1.0]))
    for _ in range(300):
        rec = corrupt(x, LIN, "independent", rng, image_token_id=IMG)
        assert rec.n_deleted_images == 0
        assert sum(is_image(el) for el in rec.x_t) == 1


def test_flow_pairs_interpolate(rng):
    y1 = np.array([3.0, -2.0])
    x = seq(ImageBlock(y1))
    for _ in range(50):
        rec = corrupt(x, LIN, "independent", rng, image_token_id=IMG)
        (idx, (y0, y1_rec)), = rec.flow_pairs.items()
        t = rec.x_t[idx].t
        assert np.allclose(rec.x_t[idx].values, t * y1 + (1 - t) * y0)
        assert np.array_equal(y1_rec, y1)


def test_deletion_time_of_image(rng):
    assert all(deletion_time_of_image(LIN, 0.0, rng) is None for _ in range(1000))
    assert all(deletion_time_of_image(LIN, 2.0, rng) == 1.0 for _ in range(1000))
    n = 20000
    deleted = sum(deletion_time_of_image(LIN, 0.5, rng) is None for _ in range(n))
    assert abs(deleted / n - 0.5) <= 3 * math.sqrt(0.25 / n)


def test_errors(rng):
    with pytest.raises(ConfigError):
        corrupt(seq(A), LIN, "bogus", rng)
    with pytest.raises(DomainError):
        corrupt(seq(A), LIN, "text_only", rng, tau_text=1.5)
    with pytest.raises(DomainError):
        deletion_time_of_image(LIN, 2.5, rng)


def test_record_json(rng):
    rec = corrupt(seq(A, ImageBlock([1.0, 2.0])), LIN, "interleaved", rng, tau_text=1.5, image_token_id=IMG)
    out = rec.to_json()
    assert out["x_t"]["target"][0] == A
