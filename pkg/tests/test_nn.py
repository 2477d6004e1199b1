import numpy as np
import pytest

from conftest import gradcheck
from wvae.errors import ConfigError, ShapeError
from wvae.nn import (
    Activation,
    Adam,
    BatchNorm,
    Conv2d,
    ConvTranspose2d,
    Dense,
    Flatten,
    LayerSpec,
    LrSchedule,
    PointwiseConv,
    Reshape,
    Sequential,
    build_layer,
    forward,
    he_uniform,
    init_params,
    lr_at,
)
from wvae.rng import Rng
from wvae.tensor import Tensor


class TestInit:
    def test_bias_zero(self, rng):
        layer = Dense(8, 4, rng)
        assert np.all(layer.b.data == 0.0)

    def test_he_variance(self):
        fan_in = 512
        w = he_uniform(Rng(3), (fan_in, 256), fan_in)
        var = w.data.var()
        target = 2.0 / fan_in
        assert abs(var - target) <= 0.2 * target

    def test_seed_reproducibility(self):
        a = Dense(16, 8, Rng(7)).w.data
        b = Dense(16, 8, Rng(7)).w.data
        np.testing.assert_array_equal(a, b)


class TestLayers:
    def test_dense_shape(self, rng):
        out = Dense(6, 3, rng)(Tensor(np.ones((2, 6), np.float32)))
        assert out.shape == (2, 3)

    def test_conv_shape(self, rng):
        out = Conv2d(3, 8, 4, 2, 1, rng)(Tensor(np.ones((2, 3, 16, 16), np.float32)))
        assert out.shape == (2, 8, 8, 8)

    def test_conv_transpose_shape(self, rng):
        out = ConvTranspose2d(8, 4, 4, 2, 1, rng)(
            Tensor(np.ones((2, 8, 8, 8), np.float32))
        )
        assert out.shape == (2, 4, 16, 16)

    def test_pointwise_preserves_extent(self, rng):
        out = PointwiseConv(8, 12, rng)(Tensor(np.ones((1, 8, 5, 5), np.float32)))
        assert out.shape == (1, 12, 5, 5)

    def test_empty_network_is_identity(self, rng):
        x = Tensor(rng.normal((2, 3)).astype(np.float32))
        np.testing.assert_array_equal(forward([], x).data, x.data)

    def test_sequential_params_prefixed(self, rng):
        net = Sequential([Dense(4, 4, rng), Activation("relu"), Dense(4, 2, rng)])
        names = set(net.params())
        assert names == {"0.w", "0.b", "2.w", "2.b"}

    def test_activation_kinds(self):
        with pytest.raises(ConfigError):
            Activation("swish")

    def test_reshape_flatten(self, rng):
        x = Tensor(rng.normal((2, 3, 4, 4)).astype(np.float32))
        flat = Flatten()(x)
        assert flat.shape == (2, 48)
        assert Reshape(3, 4, 4)(flat).shape == (2, 3, 4, 4)


class TestBatchNorm:
    def test_train_normalizes_batch(self, rng):
        bn = BatchNorm(5)
        x = Tensor((3.0 + 2.0 * rng.normal((64, 5))).astype(np.float32))
        out = bn.forward(x).data
        np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-4)
        np.testing.assert_allclose(out.std(axis=0), 1.0, atol=1e-2)

    def test_eval_uses_running_stats(self, rng):
        bn = BatchNorm(4, momentum=1.0)
        x = (1.0 + rng.normal((32, 4))).astype(np.float32)
        bn.forward(Tensor(x))
        bn.training = False
        same_in_eval = bn.forward(Tensor(x)).data
        np.testing.assert_allclose(same_in_eval.mean(axis=0), 0.0, atol=1e-3)

    def test_gradients_4d(self, rng):
        bn = BatchNorm(3)
        proj = rng.normal((4, 3, 5, 5)).astype(np.float32)
        x = rng.normal((4, 3, 5, 5))

        def loss(xx):
            return (bn.forward(xx) * Tensor(proj)).sum()

        gradcheck(loss, {"xx": x})

    def test_gamma_beta_gradients(self, rng):
        x = Tensor(rng.normal((16, 4)).astype(np.float32))
        bn = BatchNorm(4)
        out = bn.forward(x)
        (out * out).sum().backward()
        assert bn.gamma.grad is not None and bn.beta.grad is not None

    def test_rejects_3d(self, rng):
        with pytest.raises(ShapeError):
            BatchNorm(3).forward(Tensor(np.ones((2, 3, 4))))


class TestLayerSpecs:
    @pytest.mark.parametrize(
        "spec, params",
        [
            (LayerSpec("conv", (3, 8)), {"w", "b"}),
            (LayerSpec("conv_transpose", (8, 3)), {"w", "b"}),
            (LayerSpec("dense", (4, 2)), {"w", "b"}),
            (LayerSpec("pointwise_conv", (4, 16)), {"w", "b"}),
            (LayerSpec("batchnorm", (6,)), {"gamma", "beta"}),
            (LayerSpec("activation"), set()),
        ],
    )
    def test_build_and_init(self, spec, params, rng):
        layer = build_layer(spec, rng)
        assert set(layer.params()) == params
        assert set(init_params(spec, Rng(0))) == params

    def test_unknown_kind(self, rng):
        with pytest.raises(ConfigError):
            build_layer(LayerSpec("pooling"), rng)

    def test_pointwise_kernel_is_one(self, rng):
        layer = build_layer(LayerSpec("pointwise_conv", (4, 8)), rng)
        assert layer.w.shape[2:] == (1, 1)


class TestAdam:
    def test_first_step_closed_form(self):
        p = Tensor([0.0], requires_grad=True)
        opt = Adam({"p": p}, lr=1e-4)
        p.grad = np.asarray([1.0], np.float32)
        opt.step()
        # bias-corrected m_hat / sqrt(v_hat) = 1 for any constant gradient
        assert p.data[0] == pytest.approx(-1e-4, rel=1e-4)

    def test_zero_gradient_no_move(self):
        p = Tensor([3.0], requires_grad=True)
        opt = Adam({"p": p}, lr=1e-2)
        p.grad = np.asarray([0.0], np.float32)
        opt.step()
        assert p.data[0] == 3.0

    def test_missing_gradient_treated_as_zero(self):
        p = Tensor([3.0], requires_grad=True)
        Adam({"p": p}, lr=1e-2).step()
        assert p.data[0] == 3.0

    def test_determinism(self, rng):
        def run():
            p = Tensor([1.0, -2.0], requires_grad=True)
            opt = Adam({"p": p}, lr=1e-3)
            local = Rng(4)
            for _ in range(20):
                opt.zero_grad()
                (p * p).sum().backward()
                p.grad += local.normal(2).astype(np.float32) * 0.01
                opt.step()
            return p.data.copy()

        np.testing.assert_array_equal(run(), run())

    def test_descent_on_quadratic(self):
        p = Tensor([0.7, -1.3], requires_grad=True)
        opt = Adam({"p": p}, lr=1e-3)
        before = float((p.data**2).sum())
        opt.zero_grad()
        (p * p).sum().backward()
        opt.step()
        after = float((p.data**2).sum())
        assert after < before

    def test_state_roundtrip(self, rng):
        p = Tensor(rng.normal(4).astype(np.float32), requires_grad=True)
        opt = Adam({"p": p}, lr=1e-3)
        opt.zero_grad()
        (p * p).sum().backward()
        opt.step()
        state = {k: (np.copy(v) if isinstance(v, np.ndarray) else v)
                 for k, v in opt.state().items()}
        clone = Adam({"p": p}, lr=1e-3)
        clone.load_state(state)
        assert clone.t == opt.t
        np.testing.assert_array_equal(clone.m["p"], opt.m["p"])


class TestLrSchedule:
    def test_initial(self):
        assert lr_at(LrSchedule(1e-4, 300), 0) == 1e-4

    def test_halves_at_period(self):
        assert lr_at(LrSchedule(1e-4, 300), 300) == pytest.approx(5e-5)

    def test_quarter_after_two_periods(self):
        assert lr_at(LrSchedule(1e-4, 48), 96) == pytest.approx(2.5e-5)

    def test_period_validated(self):
        with pytest.raises(ConfigError):
            LrSchedule(1e-4, 0)
