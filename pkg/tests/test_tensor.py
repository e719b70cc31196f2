import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mrunet.tensor import (
    NumericError,
    PrecisionError,
    ShapeError,
    Tensor,
    add,
    backward,
    concat_channels,
    constant,
    elementwise,
    mul,
    parameter,
    read_tnsr,
    scale,
    sub,
    tensor_full,
    total_sum,
    write_tnsr,
)


class TestTensorFull:
    def test_fill_zeros(self):
        t = tensor_full([2, 2], 0)
        assert t.shape == (2, 2)
        assert (t.data == 0).all()

    def test_single_value(self):
        assert tensor_full([1], 3.5).tolist() == [3.5]

    def test_rank3_ones(self):
        t = tensor_full([2, 3, 4], 1)
        assert t.shape == (2, 3, 4)
        assert t.size == 24
        assert (t.data == 1).all()

    @pytest.mark.parametrize("shape", [[0], [2, 0], [-1], [3, -2]])
    def test_invalid_extents(self, shape):
        with pytest.raises(ShapeError):
            tensor_full(shape, 1.0)

    def test_rank0_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(5.0)

    def test_nonfinite_rejected(self):
        with pytest.raises(NumericError):
            Tensor([1.0, float("nan")])
        with pytest.raises(NumericError):
            Tensor([float("inf")])

    def test_precisions(self):
        assert tensor_full([2], 1, "train").precision == "train"
        assert tensor_full([2], 1, "check").precision == "check"


class TestElementwise:
    def test_add(self):
        out = elementwise("add", constant([1.0, 2.0]), constant([3.0, 4.0]))
        assert out.data.tolist() == [4.0, 6.0]

    def test_mul(self):
        out = elementwise("mul", constant([2.0, 3.0]), constant([0.0, 5.0]))
        assert out.data.tolist() == [0.0, 15.0]

    def test_sub_self_is_zero(self):
        x = constant([1.5, -2.25, 7.0])
        assert (elementwise("sub", x, x).data == 0).all()

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            add(constant([1.0]), constant([1.0, 2.0]))

    def test_precision_mismatch(self):
        with pytest.raises(PrecisionError):
            add(constant([1.0], "train"), constant([1.0], "check"))

    def test_unknown_op(self):
        with pytest.raises(ValueError):
            elementwise("div", constant([1.0]), constant([1.0]))

    def test_overflow_aborts(self):
        big = constant(np.full(2, 1e30, dtype=np.float32))
        with np.errstate(over="ignore"), pytest.raises(NumericError):
            mul(big, big)


class TestConcatChannels:
    def test_extent_arithmetic(self):
        a = constant(np.zeros((4, 4, 3)))
        b = constant(np.zeros((4, 4, 5)))
        assert concat_channels(a, b).shape == (4, 4, 8)

    def test_value_order(self):
        out = concat_channels(constant([[[7.0]]]), constant([[[9.0]]]))
        assert out.data.tolist() == [[[7.0, 9.0]]]

    def test_gradient_is_ones_through_sum(self):
        a = parameter(np.arange(6, dtype=np.float64).reshape(1, 2, 3) + 1)
        b = constant(np.ones((1, 2, 2)))
        backward(total_sum(concat_channels(a, b)))
        assert (a.grad == 1).all()

    def test_non_channel_mismatch(self):
        with pytest.raises(ShapeError):
            concat_channels(constant(np.zeros((4, 4, 3))), constant(np.zeros((5, 4, 3))))

    def test_split_restores_inputs(self):
        rng = np.random.default_rng(0)
        a = rng.random((3, 2, 4))
        b = rng.random((3, 2, 2))
        cat = concat_channels(constant(a), constant(b)).data
        assert (cat[..., :4] == a).all()
        assert (cat[..., 4:] == b).all()


class TestBackward:
    def test_sum_gradient(self):
        x = parameter([1.0, 2.0, 3.0])
        grads = backward(total_sum(x))
        assert x.grad.tolist() == [1.0, 1.0, 1.0]
        assert x in grads

    def test_quadratic_gradient(self):
        x = parameter([2.0, -1.0])
        backward(total_sum(mul(x, x)))
        assert x.grad.tolist() == [4.0, -2.0]

    def test_non_scalar_root(self):
        x = parameter([1.0, 2.0])
        with pytest.raises(ShapeError):
            backward(add(x, x))

    def test_fanout_accumulates(self):
        x = parameter([3.0])
        backward(total_sum(add(x, x)))
        assert x.grad.tolist() == [2.0]

    def test_scale(self):
        x = parameter([2.0, 4.0])
        out = scale(total_sum(x), 0.5)
        assert out.data.tolist() == [3.0]
        backward(out)
        assert x.grad.tolist() == [0.5, 0.5]

    def test_grad_map_covers_requires_grad_nodes(self):
        x = parameter([1.0])
        c = constant([2.0])
        grads = backward(total_sum(mul(x, c)))
        assert x in grads
        assert c not in grads
        assert all(n.requires_grad for n in grads)

    def test_repeat_backward_bitwise_identical(self):
        rng = np.random.default_rng(3)
        a = parameter(rng.random((2, 3)))
        b = parameter(rng.random((2, 3)))
        root = total_sum(mul(add(a, b), sub(a, b)))
        grads1 = backward(root)
        first = {n: g.copy() for n, g in grads1.items()}
        for n in grads1:
            n.grad = None
        root.grad = None
        grads2 = backward(root)
        for n, g in grads2.items():
            assert np.array_equal(first[n], g)

    def test_composite_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        av = rng.standard_normal((2, 2, 2))
        bv = rng.standard_normal((2, 2, 2))
        rv = rng.standard_normal((2, 2, 4))

        def f(a_arr, b_arr):
            a, b = constant(a_arr), constant(b_arr)
            s = mul(add(a, b), sub(a, b))
            cat = concat_channels(s, mul(a, b))
            return float(total_sum(mul(cat, constant(rv))).data[0])

        a, b = parameter(av.copy()), parameter(bv.copy())
        s = mul(add(a, b), sub(a, b))
        cat = concat_channels(s, mul(a, b))
        backward(total_sum(mul(cat, constant(rv))))

        h = 1e-5
        for target, node in (("a", a), ("b", b)):
            base = av if target == "a" else bv
            for i in range(base.size):
                bumped = base.copy().reshape(-1)
                bumped[i] += h
                fp = f(bumped.reshape(base.shape), bv) if target == "a" else f(av, bumped.reshape(base.shape))
                bumped[i] -= 2 * h
                fm = f(bumped.reshape(base.shape), bv) if target == "a" else f(av, bumped.reshape(base.shape))
                fd = (fp - fm) / (2 * h)
                ad = node.grad.reshape(-1)[i]
                assert abs(ad - fd) / max(1.0, abs(ad), abs(fd)) < 1e-6


class TestTnsrFormat:
    def test_roundtrip_float32(self, tmp_path):
        t = Tensor(np.arange(12, dtype=np.float32).reshape(3, 4))
        path = tmp_path / "a.tnsr"
        write_tnsr(path, t)
        back = read_tnsr(path)
        assert back.precision == "train"
        assert np.array_equal(back.data, t.data)

    def test_roundtrip_float64(self, tmp_path):
        t = Tensor(np.linspace(-1, 1, 8).reshape(2, 2, 2))
        path = tmp_path / "b.tnsr"
        write_tnsr(path, t)
        back = read_tnsr(path)
        assert back.precision == "check"
        assert np.array_equal(back.data, t.data)

    def test_header_layout(self):
        buf = io.BytesIO()
        write_tnsr(buf, Tensor(np.zeros((2, 3), dtype=np.float32)))
        raw = buf.getvalue()
        assert raw[:4] == b"TNSR"
        assert int.from_bytes(raw[4:8], "little") == 2  # rank
        assert raw[8] == 0x20  # 32-bit flag between rank and extents
        assert int.from_bytes(raw[9:13], "little") == 2
        assert int.from_bytes(raw[13:17], "little") == 3
        assert len(raw) == 17 + 6 * 4

    def test_flag_byte_64(self):
        buf = io.BytesIO()
        write_tnsr(buf, Tensor(np.zeros(2, dtype=np.float64)))
        assert buf.getvalue()[8] == 0x40

    def test_bad_magic(self):
        from mrunet.tensor import FormatError
        with pytest.raises(FormatError):
            read_tnsr(io.BytesIO(b"NOPE" + b"\x00" * 16))

    def test_truncated(self):
        from mrunet.tensor import FormatError
        buf = io.BytesIO()
        write_tnsr(buf, Tensor(np.zeros(4, dtype=np.float32)))
        with pytest.raises(FormatError):
            read_tnsr(io.BytesIO(buf.getvalue()[:-3]))


@settings(max_examples=40, deadline=None)
@given(
    ca=st.integers(min_value=1, max_value=5),
    cb=st.integers(min_value=1, max_value=5),
    seed=st.integers(min_value=0, max_value=2**31),
)
def test_concat_split_roundtrip_property(ca, cb, seed):
    rng = np.random.default_rng(seed)
    a = rng.random((2, 3, ca))
    b = rng.random((2, 3, cb))
    cat = concat_channels(constant(a), constant(b)).data
    assert cat.shape == (2, 3, ca + cb)
    assert np.array_equal(cat[..., :ca], a)
    assert np.array_equal(cat[..., ca:], b)
