import sys
import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from attanet.gradcheck import PRIMITIVE_TOL, run_gradcheck
from attanet.tensor import (
    ContractError,
    Dims,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    active_tape,
    add,
    backward,
    concat_channels,
    count_flops,
    flop_scope,
    matmul,
    mul,
    reshape,
    scale,
    sum_all,
    tensor_new,
    transpose,
)

dims4 = st.tuples(*(st.integers(1, 4) for _ in range(4)))


class TestTensorNew:
    def test_zero_fill(self):
        t = tensor_new(Dims(1, 1, 2, 2), 0.0)
        assert t.shape == (1, 1, 2, 2)
        assert np.array_equal(t.data, np.zeros((1, 1, 2, 2)))
        assert not t.requires_grad

    def test_constant_fill(self):
        t = tensor_new((1, 3, 2, 2), 1.5)
        assert t.data.size == 12
        assert (t.data == 1.5).all()

    @pytest.mark.parametrize("dims", [(0, 1, 1, 1), (1, -2, 1, 1), (1, 1, 1, 0)])
    def test_nonpositive_extent_rejected(self, dims):
        with pytest.raises(ShapeError):
            tensor_new(dims)

    def test_overflowing_element_count_rejected(self):
        with pytest.raises(ShapeError, match="overflow"):
            Dims(sys.maxsize, 2, 2, 2)

    def test_non_integer_extent_rejected(self):
        with pytest.raises(ShapeError):
            Dims(1, 2.5, 1, 1)

    def test_rank_is_four(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 2)))

    def test_data_is_read_only(self):
        t = tensor_new((1, 1, 2, 2))
        with pytest.raises(ValueError):
            t.data[0, 0, 0, 0] = 1.0

    def test_ids_unique(self):
        assert len({Tensor(np.zeros((1, 1, 1, 1))).id for _ in range(100)}) == 100


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2).reshape(1, 1, 2, 2))
        b = Tensor(np.array([3.0, 4.0]).reshape(1, 1, 2, 1))
        assert matmul(a, b).data.ravel().tolist() == [3.0, 4.0]

    def test_row_times_column(self):
        a = Tensor(np.array([1.0, 2.0]).reshape(1, 1, 1, 2))
        b = Tensor(np.array([3.0, 4.0]).reshape(1, 1, 2, 1))
        assert matmul(a, b).data.item() == 11.0

    @pytest.mark.parametrize("seed", range(5))
    def test_triple_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.uniform(-10, 10, (3, 4))
        b = rng.uniform(-10, 10, (4, 2))
        expected = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    expected[i, j] += a[i, k] * b[k, j]
        got = matmul(Tensor(a.reshape(1, 1, 3, 4)), Tensor(b.reshape(1, 1, 4, 2))).data[0, 0]
        assert np.abs(got - expected).max() <= 1e-12

    def test_inner_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(tensor_new((1, 1, 2, 3)), tensor_new((1, 1, 2, 3)))


class TestShapeOps:
    def test_reshape_preserves_row_major_order(self):
        x = Tensor(np.arange(8.0).reshape(1, 2, 2, 2))
        assert reshape(x, (1, 1, 2, 4)).data.ravel().tolist() == list(range(8))

    @given(dims4)
    def test_reshape_round_trip(self, shape):
        x = Tensor(np.random.default_rng(0).standard_normal(shape))
        flat = reshape(x, (1, 1, 1, x.data.size))
        assert np.array_equal(reshape(flat, shape).data, x.data)

    def test_reshape_count_mismatch(self):
        with pytest.raises(ShapeError):
            reshape(tensor_new((1, 2, 2, 2)), (1, 1, 3, 3))

    def test_concat_channel_sum(self):
        out = concat_channels([tensor_new((1, 2, 4, 4), 1.0), tensor_new((1, 3, 4, 4), 2.0)])
        assert out.shape == (1, 5, 4, 4)
        assert (out.data[:, :2] == 1).all() and (out.data[:, 2:] == 2).all()

    def test_concat_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            concat_channels([tensor_new((1, 2, 4, 4)), tensor_new((1, 2, 4, 5))])

    def test_add_zero_identity(self):
        x = Tensor(np.random.default_rng(1).standard_normal((2, 3, 4, 5)))
        assert np.array_equal(add(x, tensor_new(x.shape)).data, x.data)

    @given(dims4, st.permutations(range(4)))
    def test_transpose_inverse(self, shape, axes):
        x = Tensor(np.random.default_rng(0).standard_normal(shape))
        inverse = tuple(int(i) for i in np.argsort(axes))
        assert np.array_equal(transpose(transpose(x, axes), inverse).data, x.data)


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2), requires_grad=True)
        with Tape() as tape:
            loss = sum_all(x)
        assert np.array_equal(backward(tape, loss)[x.id].data, np.ones((1, 1, 2, 2)))

    def test_square(self):
        x = Tensor(np.array([1.0, 2.0]).reshape(1, 1, 1, 2), requires_grad=True)
        with Tape() as tape:
            loss = sum_all(mul(x, x))
        assert backward(tape, loss)[x.id].data.ravel().tolist() == [2.0, 4.0]

    def test_non_scalar_loss(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        with Tape() as tape:
            y = scale(x, 2.0)
        with pytest.raises(ContractError):
            backward(tape, y)

    def test_loss_must_come_from_tape(self):
        x = Tensor(np.ones((1, 1, 1, 1)), requires_grad=True)
        with pytest.raises(ContractError):
            backward(Tape(), x)

    def test_unreached_leaf_gets_zero(self):
        x = Tensor(np.ones((1, 1, 1, 2)), requires_grad=True)
        y = Tensor(np.ones((1, 1, 1, 2)), requires_grad=True)
        with Tape() as tape:
            loss = sum_all(x)
            _ = scale(y, 3.0)
        assert (backward(tape, loss)[y.id].data == 0).all()

    @pytest.mark.parametrize("seed", range(5))
    def test_adjoint_is_linear(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((2, 3, 2, 2)), requires_grad=True)
        w1 = Tensor(rng.standard_normal(x.shape))
        w2 = Tensor(rng.standard_normal(x.shape))

        def grad_of(fn):
            with Tape() as tape:
                loss = fn()
            return backward(tape, loss)[x.id].data

        g1 = grad_of(lambda: sum_all(mul(mul(x, x), w1)))
        g2 = grad_of(lambda: sum_all(mul(x, w2)))
        g12 = grad_of(lambda: add(sum_all(mul(mul(x, x), w1)), sum_all(mul(x, w2))))
        assert np.abs(g12 - (g1 + g2)).max() <= 1e-12

    def test_nodes_visited_in_reverse_once(self):
        x = Tensor(np.ones((1, 1, 1, 1)), requires_grad=True)
        with Tape() as tape:
            y = scale(x, 2.0)
            z = mul(y, y)
            loss = sum_all(z)
        assert [n.op for n in tape.nodes] == ["scale", "mul", "sum_all"]
        assert backward(tape, loss)[x.id].data.item() == pytest.approx(8.0)

    def test_no_recording_without_grad_inputs(self):
        with Tape() as tape:
            sum_all(tensor_new((1, 1, 2, 2), 1.0))
        assert len(tape) == 0

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_check_finite_flags_overflow(self):
        x = Tensor(np.full((1, 1, 1, 1), 1e300), requires_grad=True)
        with Tape(check_finite=True):
            with pytest.raises(NonFiniteError, match="mul"):
                mul(x, x)

    def test_tape_is_thread_local(self):
        seen = []
        with Tape():
            t = threading.Thread(target=lambda: seen.append(active_tape()))
            t.start()
            t.join()
        assert seen == [None]


class TestFlopCounting:
    def test_matmul_counts_two_per_mac(self):
        with count_flops() as fc:
            matmul(tensor_new((1, 2, 3, 4)), tensor_new((1, 2, 4, 5)))
        assert fc.by_op == {"matmul": 2 * 2 * 3 * 4 * 5}

    def test_scopes_partition_total(self):
        with count_flops() as fc:
            with flop_scope("a"):
                add(tensor_new((1, 1, 2, 2)), tensor_new((1, 1, 2, 2)))
            mul(tensor_new((1, 1, 2, 2)), tensor_new((1, 1, 2, 2)))
        assert fc.by_scope == {"a": 4, "unscoped": 4}
        assert fc.total == 8


class TestPrimitiveGradients:
    """Finite differences over 20 seeds with shapes up to (2, 4, 8, 8)."""

    @pytest.mark.parametrize(
        "op",
        ["add", "sub", "mul", "scale", "add_scalar", "reshape", "transpose",
         "concat_channels", "matmul", "sum_all", "mean_all"],
    )
    def test_matches_finite_differences(self, op):
        (result,) = run_gradcheck(seed=11, trials=20, ops=[op])
        assert result.max_rel_error <= PRIMITIVE_TOL
