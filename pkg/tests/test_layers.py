import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusenet import autograd as ag
from fusenet.autograd import Tensor, grad_check
from fusenet.errors import ContractError, IngestionError, ShapeError
from fusenet.layers import (
    MLP,
    BatchNormLayer,
    DenseLayer,
    DropoutLayer,
    batchnorm_forward,
    dense_forward,
    init_params,
    read_params,
    write_params,
    zero_params,
)


def dense_with(W, b, activation="none"):
    layer = DenseLayer(len(W), len(W[0]), np.random.default_rng(0), activation)
    layer.W.values[...] = W
    layer.b.values[...] = b
    return layer


class TestDense:
    def test_identity_weights(self):
        out = dense_forward(dense_with([[1, 0], [0, 1]], [[1, 1]]), Tensor([[1, 2]]))
        np.testing.assert_array_equal(out.values, [[2, 3]])

    def test_relu_clamp(self):
        out = dense_forward(dense_with([[1]], [[0]], "relu"), Tensor([[-1]]))
        np.testing.assert_array_equal(out.values, [[0]])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            dense_forward(dense_with([[1, 0], [0, 1]], [[0, 0]]), Tensor(np.ones((2, 3))))

    def test_gradients(self, rng):
        layer = DenseLayer(4, 3, rng, "relu")
        layer.b.values[...] = rng.standard_normal((1, 3))
        x = Tensor(rng.standard_normal((5, 4)))
        w = Tensor(rng.standard_normal((5, 3)))
        err = grad_check(lambda: ag.sum(ag.mul(layer(x), w)), layer.parameters())
        assert err < 1e-3


class TestBatchNorm:
    def test_two_point_standardization(self):
        bn = BatchNormLayer(1, epsilon=1e-12)
        out = batchnorm_forward(bn, Tensor([[1.0], [3.0]]))
        np.testing.assert_allclose(out.values, [[-1.0], [1.0]], atol=1e-9)

    def test_zero_gamma_leaves_beta(self, rng):
        bn = BatchNormLayer(3)
        bn.gamma.values[...] = 0.0
        bn.beta.values[...] = [[1.0, -2.0, 0.5]]
        out = bn(Tensor(rng.standard_normal((4, 3))))
        np.testing.assert_array_equal(out.values, np.tile([[1.0, -2.0, 0.5]], (4, 1)))

    def test_train_output_is_standardized(self, rng):
        x = rng.standard_normal((50, 4)) * [1, 5, 0.1, 3] + [0, 2, -1, 7]
        out = BatchNormLayer(4, epsilon=1e-12)(Tensor(x)).values
        # recompute directly from the definition
        np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.var(axis=0), 1.0, atol=1e-6)

    def test_single_row_batch_rejected_in_train_mode(self):
        with pytest.raises(ContractError):
            BatchNormLayer(2)(Tensor([[1.0, 2.0]]))

    def test_single_row_fine_in_eval_mode(self):
        bn = BatchNormLayer(2)
        bn.eval()
        np.testing.assert_allclose(bn(Tensor([[1.0, 2.0]])).values, [[1.0, 2.0]] / np.sqrt(1 + 1e-5))

    def test_running_statistics_update(self, rng):
        x = rng.standard_normal((10, 2))
        bn = BatchNormLayer(2, momentum=0.9)
        bn(Tensor(x))
        np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=0))
        np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * x.var(axis=0))
        assert np.all(bn.running_var >= 0)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-3, 3), st.integers(0, 10_000))
    def test_eval_mode_is_affine(self, a, seed):
        r = np.random.default_rng(seed)
        bn = BatchNormLayer(3)
        bn.running_mean[...] = r.standard_normal(3)
        bn.running_var[...] = r.uniform(0.1, 2, 3)
        bn.gamma.values[...] = r.standard_normal((1, 3))
        bn.beta.values[...] = r.standard_normal((1, 3))
        bn.eval()
        x, y = r.standard_normal((4, 3)), r.standard_normal((4, 3))
        lhs = bn(Tensor(a * x + (1 - a) * y)).values
        rhs = a * bn(Tensor(x)).values + (1 - a) * bn(Tensor(y)).values
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)


class TestDropout:
    def test_rate_zero_is_identity(self, rng):
        x = Tensor(rng.standard_normal((3, 3)))
        assert DropoutLayer(0.0, rng)(x) is x

    def test_eval_mode_is_identity(self, rng):
        layer = DropoutLayer(0.5, rng)
        layer.eval()
        x = Tensor(rng.standard_normal((3, 3)))
        np.testing.assert_array_equal(layer(x).values, x.values)

    def test_monte_carlo_expectation(self):
        x = np.random.default_rng(1).uniform(0.5, 1.5, (1, 100_000))
        out = DropoutLayer(0.5, np.random.default_rng(2))(Tensor(x)).values
        assert abs(out.mean() - x.mean()) < 0.01 * x.mean()
        survivors = out != 0
        np.testing.assert_allclose(out[survivors], 2 * x[survivors])

    def test_invalid_rate(self, rng):
        with pytest.raises(ContractError):
            DropoutLayer(1.0, rng)


class TestInit:
    def test_glorot_bound(self):
        w = init_params((2, 3), np.random.default_rng(0)).values
        assert np.all(np.abs(w) <= np.sqrt(6 / 5))

    def test_bias_is_zero(self):
        np.testing.assert_array_equal(zero_params((1, 4)).values, np.zeros((1, 4)))

    def test_same_seed_same_tensor(self):
        a = init_params((4, 5), np.random.default_rng(9)).values
        b = init_params((4, 5), np.random.default_rng(9)).values
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("shape", [(0, 3), (3, 0)])
    def test_zero_dimension(self, shape):
        with pytest.raises(ContractError):
            init_params(shape, np.random.default_rng(0))


class TestMLP:
    def test_eval_forward_is_bitwise_deterministic(self, rng):
        net = MLP(5, [7, 4], 3, rng, dropout=0.5)
        net(Tensor(rng.standard_normal((8, 5))))  # populate running statistics
        net.eval()
        x = Tensor(rng.standard_normal((6, 5)))
        assert net(x).values.tobytes() == net(x).values.tobytes()

    def test_block_order_dense_bn_relu_dropout(self, rng):
        net = MLP(3, [4], 2, rng, dropout=0.0)
        names = [n for n, _ in net.named_parameters()]
        assert names == ["block0.dense.W", "block0.dense.b", "block0.bn.gamma", "block0.bn.beta", "head.W", "head.b"]
        x = Tensor(rng.standard_normal((5, 3)))
        h = net.blocks[0](x).values
        block = net.blocks[0]
        manual = np.maximum(block.bn(block.dense(x)).values, 0)
        np.testing.assert_array_equal(h, manual)

    def test_without_batch_norm_dense_carries_relu(self, rng):
        net = MLP(3, [4], 2, rng, batch_norm=False)
        assert net.blocks[0].bn is None and net.blocks[0].dense.activation == "relu"


class TestSerialization:
    def test_round_trip_is_bit_exact(self, rng):
        net = MLP(5, [7, 4], 3, rng)
        net(Tensor(rng.standard_normal((8, 5))))
        buf = io.BytesIO()
        write_params(net.state_dict(), buf)
        raw = buf.getvalue()
        assert raw.startswith(b"FUSE1")
        restored = read_params(io.BytesIO(raw))
        original = net.state_dict()
        assert list(restored) == list(original)
        for k in original:
            assert restored[k].tobytes() == original[k].tobytes()

        other = MLP(5, [7, 4], 3, np.random.default_rng(99))
        other.load_state_dict(restored)
        net.eval(), other.eval()
        x = Tensor(rng.standard_normal((4, 5)))
        assert net(x).values.tobytes() == other(x).values.tobytes()

    def test_layout(self):
        buf = io.BytesIO()
        write_params({"w": np.array([[1.0, 2.0]])}, buf)
        raw = buf.getvalue()
        assert raw[:5] == b"FUSE1"
        assert int.from_bytes(raw[5:9], "little") == 1
        assert int.from_bytes(raw[9:13], "little") == 1 and raw[13:14] == b"w"
        assert np.frombuffer(raw[-16:], "<f8").tolist() == [1.0, 2.0]

    def test_bad_magic_and_truncation(self):
        with pytest.raises(IngestionError):
            read_params(io.BytesIO(b"NOPE1\x00\x00\x00\x00"))
        buf = io.BytesIO()
        write_params({"w": np.ones((2, 2))}, buf)
        with pytest.raises(IngestionError):
            read_params(io.BytesIO(buf.getvalue()[:-3]))

    def test_load_rejects_mismatched_state(self, rng):
        net = MLP(3, [4], 2, rng)
        state = net.state_dict()
        state.pop("head.b")
        with pytest.raises(ContractError):
            net.load_state_dict(state)
