import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import A, B, C, seq
from eflab.errors import CapacityError, DataError
from eflab.sequence import (
    ImageBlock,
    MixedSequence,
    Vocabulary,
    dumps,
    insert,
    is_image,
    loads,
    read_dataset,
    token_histogram,
    write_dataset,
)


def test_vocabulary_ids():
    v = Vocabulary(4)
    assert v.image_token_id == 4
    assert v.head_size == 5


def test_insert_middle_and_empty(vocab):
    assert insert(seq(A, C), 1, B, vocab).elements == (A, B, C)
    assert insert(seq(), 0, A, vocab).elements == (A,)


def test_insert_does_not_mutate(vocab):
    x = seq(A, C)
    insert(x, 0, B, vocab)
    assert x.elements == (A, C)


def test_insert_image_is_standard_noise(vocab, rng):
    out = insert(seq(A), 1, vocab.image_token_id, vocab, rng=rng, n_img=256)
    img = out[1]
    assert is_image(img) and img.dim == 256 and img.t == 0.0
    # mean and variance of 256 standard normals, 3 sigma bounds
    assert abs(img.values.mean()) <= 3 / np.sqrt(256)
    assert abs(img.values.var() - 1.0) <= 3 * np.sqrt(2 / 256)


def test_insert_respects_prompt_and_capacity(vocab):
    x = seq(A, B, prompt_len=2, max_len=3)
    with pytest.raises(IndexError):
        insert(x, 1, C, vocab)
    y = insert(x, 2, C, vocab)
    with pytest.raises(CapacityError):
        insert(y, 3, C, vocab)


def test_gaps():
    x = seq(A, B, C, prompt_len=1)
    assert x.n_gaps == 4
    assert list(x.active_gaps()) == [1, 2, 3]
    assert list(seq().active_gaps()) == [0]


def test_token_histogram(vocab):
    assert token_histogram([seq(A, B), seq(A)], vocab.image_token_id) == {A: 2, B: 1}
    assert token_histogram([], vocab.image_token_id) == {}


def test_validate_rejects_bad_tokens(vocab):
    with pytest.raises(DataError):
        seq(A, 4).validate(vocab)
    with pytest.raises(DataError):
        seq(A, ImageBlock([0.0, 1.0])).validate(vocab, n_img=3)


element = st.one_of(
    st.integers(0, 3),
    st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=4).map(lambda v: ImageBlock(v)),
)


@given(st.lists(element, max_size=8), st.integers(0, 8))
def test_serialization_round_trip(elements, p):
    p = min(p, len(elements))
    x = MixedSequence(tuple(elements), p)
    y = loads(dumps(x))
    assert y == x
    for a, b in zip(x, y):
        if is_image(a):
            assert np.array_equal(a.values, b.values)


def test_dataset_file_round_trip(tmp_path):
    data = [seq(A, ImageBlock([0.1, 0.2]), prompt_len=1), seq(B, C)]
    write_dataset(tmp_path / "d.jsonl", data)
    assert read_dataset(tmp_path / "d.jsonl") == data


def test_malformed_record():
    with pytest.raises(DataError):
        loads('{"prompt": [], "tgt": [1]}')
    with pytest.raises(DataError):
        loads("not json")
