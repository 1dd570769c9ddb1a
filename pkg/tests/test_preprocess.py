import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dmla.errors import DegenerateNormError, TransformError
from dmla.preprocess import (
    RawListing,
    TransformOptions,
    average_image_embeddings,
    build_table,
    concat_features,
    empirical_quantile,
)


def _listing(i, price=100.0, score=10, **kw):
    return RawListing(id=f"L{i}", price=price, feedback_score=score,
                      image_embeddings=[[1.0, 0.0], [0.0, 1.0]], text_embedding=[0.5], **kw)


def _midrank_oracle(values, target):
    ordered = sorted(values)
    positions = [k + 1 for k, v in enumerate(ordered) if v == target]
    return sum(positions) / len(positions) / len(values)


def test_average_single_vector():
    np.testing.assert_allclose(average_image_embeddings([[3, 4]]), [0.6, 0.8])


def test_average_parallel_vectors():
    np.testing.assert_allclose(average_image_embeddings([[1, 0], [2, 0]]), [1, 0])


def test_average_orthogonal_vectors():
    out = average_image_embeddings([[1, 0], [0, 1]])
    np.testing.assert_allclose(out, [0.5, 0.5])
    assert np.linalg.norm(out) == pytest.approx(math.sqrt(0.5))


def test_average_caps_image_count():
    vecs = [[1, 0]] * 12 + [[0, 1]] * 5
    np.testing.assert_allclose(average_image_embeddings(vecs, 12), [1, 0])


def test_zero_vector_rejected():
    with pytest.raises(DegenerateNormError):
        average_image_embeddings([[1, 0], [0, 0]])


def test_concat():
    np.testing.assert_array_equal(concat_features([1, 2], [3]), [1, 2, 3])
    np.testing.assert_array_equal(concat_features([1, 2], []), [1, 2])


@pytest.mark.parametrize("values,target,expected", [((1, 2, 3), 3, 1.0), ((5, 5, 5, 5), 5, 0.625), ((10, 20), 10, 0.5)])
def test_quantile_examples(values, target, expected):
    assert empirical_quantile(values, target) == expected


@given(st.lists(st.integers(0, 20), min_size=1, max_size=40), st.data())
def test_quantile_matches_midrank_oracle(values, data):
    target = data.draw(st.sampled_from(values))
    assert empirical_quantile(values, target) == pytest.approx(_midrank_oracle(values, target), abs=1e-15)


@given(st.lists(st.integers(0, 50), min_size=1, max_size=30), st.integers(-5, 60), st.integers(-5, 60))
def test_quantile_monotone_and_bounded(values, a, b):
    lo, hi = sorted((a, b))
    qa, qb = empirical_quantile(values, lo), empirical_quantile(values, hi)
    assert 0 < qa <= qb <= 1


def test_quantile_vectorized():
    vals = [3, 1, 2, 2]
    np.testing.assert_allclose(empirical_quantile(vals, vals), [1.0, 0.25, 0.625, 0.625])


def test_build_table_transforms():
    listings = [_listing(0, price=108.49, score=5), _listing(1, price=1.0, score=7), _listing(2, score=9)]
    t = build_table(listings)
    assert t.y[0] == pytest.approx(4.6867, abs=1e-4)
    assert t.y[1] == 0.0
    np.testing.assert_allclose(t.d, [1 / 3, 2 / 3, 1.0])
    np.testing.assert_allclose(t.x[0], [0.5, 0.5, 0.5])
    assert not t.has_guesses


def test_build_table_guesses():
    listings = [_listing(i, score=s, price_guess=math.e, score_guess=9) for i, s in enumerate([5, 7, 9])]
    t = build_table(listings)
    np.testing.assert_allclose(t.y_guess, 1.0)
    np.testing.assert_allclose(t.d_guess, 1.0)


def test_build_table_rejects_nonpositive_price():
    with pytest.raises(TransformError) as info:
        build_table([_listing(0), _listing(1, price=0.0)])
    assert info.value.row == 1 and "row 1" in str(info.value)


def test_build_table_rejects_nonpositive_guess():
    listings = [_listing(0, price_guess=5.0, score_guess=1), _listing(1, price_guess=-1.0, score_guess=1)]
    with pytest.raises(TransformError) as info:
        build_table(listings)
    assert info.value.row == 1


def test_build_table_partial_guesses_rejected():
    with pytest.raises(TransformError):
        build_table([_listing(0, price_guess=5.0, score_guess=1), _listing(1)])


def test_build_table_respects_max_images():
    lst = RawListing(id="a", price=2.0, feedback_score=1, image_embeddings=[[1, 0], [0, 1]], text_embedding=[0.5])
    t = build_table([lst, _listing(1)], TransformOptions(max_images=1))
    np.testing.assert_allclose(t.x[0, :2], [1, 0])


def test_listing_dict_roundtrip():
    lst = _listing(3, price_guess=2.5, score_guess=4, text="hello", n_bids=2)
    assert RawListing.from_dict(lst.to_dict()).to_dict() == lst.to_dict()
