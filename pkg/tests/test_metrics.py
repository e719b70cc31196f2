import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mrunet.metrics import DomainError, as_percent, binarize, jaccard
from mrunet.tensor import ShapeError, Tensor


def set_oracle(a, b):
    """Jaccard via explicit pixel-coordinate sets."""
    sa = {tuple(idx) for idx in np.argwhere(np.asarray(a) > 0.5)}
    sb = {tuple(idx) for idx in np.argwhere(np.asarray(b) > 0.5)}
    union = sa | sb
    if not union:
        return 1.0
    return len(sa & sb) / len(union)


class TestBinarize:
    def test_boundary_is_foreground(self):
        out = binarize(np.array([0.49, 0.5, 0.51]))
        assert out.data.tolist() == [0.0, 1.0, 1.0]

    def test_all_zeros(self):
        assert (binarize(np.zeros((4, 4))).data == 0).all()

    def test_all_ones(self):
        assert (binarize(np.ones((4, 4))).data == 1).all()

    def test_custom_threshold(self):
        assert binarize(np.array([0.2, 0.8]), threshold=0.9).data.tolist() == [0.0, 0.0]

    def test_domain_error(self):
        with pytest.raises(DomainError):
            binarize(np.array([0.5, 1.5]))
        with pytest.raises(DomainError):
            binarize(np.array([-0.1]))

    def test_accepts_tensor(self):
        t = Tensor(np.array([0.3, 0.7], dtype=np.float32))
        assert binarize(t).data.tolist() == [0.0, 1.0]


class TestJaccard:
    def test_identical_nonempty(self):
        m = (np.random.default_rng(0).random((8, 8)) > 0.5).astype(float)
        assert jaccard(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4)); a[0, 0] = 1
        b = np.zeros((4, 4)); b[3, 3] = 1
        assert jaccard(a, b) == 0.0

    def test_one_third(self):
        a = np.zeros(4); a[[0, 1]] = 1
        b = np.zeros(4); b[[1, 2]] = 1
        assert jaccard(a, b) == 1 / 3

    def test_empty_vs_empty(self):
        assert jaccard(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0

    def test_empty_vs_nonempty(self):
        a = np.zeros((4, 4))
        b = np.zeros((4, 4)); b[1, 1] = 1
        assert jaccard(a, b) == 0.0
        assert jaccard(b, a) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            jaccard(np.zeros((2, 2)), np.zeros((3, 2)))

    def test_non_binary_rejected(self):
        with pytest.raises(DomainError):
            jaccard(np.array([0.5]), np.array([1.0]))

    def test_as_percent(self):
        assert as_percent(0.8025) == pytest.approx(80.25)


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(min_value=0, max_value=2**31), p=st.floats(0.05, 0.95))
def test_jaccard_symmetry(seed, p):
    rng = np.random.default_rng(seed)
    a = (rng.random((8, 8)) < p).astype(float)
    b = (rng.random((8, 8)) < p).astype(float)
    assert jaccard(a, b) == jaccard(b, a)


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(min_value=0, max_value=2**31))
def test_jaccard_union_dominates(seed):
    rng = np.random.default_rng(seed)
    a = (rng.random((8, 8)) < 0.4).astype(float)
    b = (rng.random((8, 8)) < 0.4).astype(float)
    union = np.maximum(a, b)
    assert jaccard(a, union) >= jaccard(a, b)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(min_value=0, max_value=2**31), p=st.floats(0.0, 1.0))
def test_jaccard_matches_set_oracle(seed, p):
    rng = np.random.default_rng(seed)
    a = (rng.random((16, 16)) < p).astype(float)
    b = (rng.random((16, 16)) < p).astype(float)
    assert jaccard(a, b) == set_oracle(a, b)
