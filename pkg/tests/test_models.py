import math

import numpy as np
import pytest

import gradsuggest.autodiff as ad
from gradsuggest.autodiff import Tensor, grad_check
from gradsuggest.data import generate_phantom_dataset
from gradsuggest.exceptions import (
    ChecksumError,
    ContractViolation,
    DimensionError,
    EmptyInputError,
    FormatError,
    NumericError,
)
from gradsuggest.models import (
    AdamState,
    LatentCode,
    adam_step,
    decode_latent,
    dice_loss,
    dice_score,
    encode_latent,
    init_unet,
    init_vae,
    kl_standard_normal,
    load_model,
    mse,
    predict_proba,
    save_model,
    train_segmenter,
    train_vae,
    unet_forward,
    vae_forward,
    vae_loss,
)
from gradsuggest.models import checkpoint
from gradsuggest.models.unet import unet_logits


def kl(mu, logvar):
    return kl_standard_normal(LatentCode(Tensor(mu), Tensor(logvar))).item()


class TestKL:
    def test_prior_is_zero(self):
        assert kl([0.0], [0.0]) == 0.0

    def test_unit_mean(self):
        assert kl([1.0], [0.0]) == 0.5

    def test_variance_four(self):
        assert math.isclose(kl([0.0], [math.log(4.0)]), 0.5 * (4 - 1 - math.log(4)), rel_tol=1e-12)
        assert abs(kl([0.0], [math.log(4.0)]) - 0.8069) < 1e-4

    def test_batch_is_averaged(self):
        mu = np.array([[1.0, 0.0], [0.0, 0.0]])
        assert kl(mu, np.zeros_like(mu)) == 0.25

    def test_non_finite(self):
        with pytest.raises(NumericError):
            kl([np.nan], [0.0])
        with pytest.raises(DimensionError):
            kl([0.0, 1.0], [0.0])


class TestDice:
    def test_perfect_overlap(self):
        assert dice_loss(Tensor([1.0, 1, 0, 0]), Tensor([1.0, 1, 0, 0])).item() == pytest.approx(-1, abs=1e-12)

    def test_disjoint(self):
        val = dice_loss(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item()
        assert val == pytest.approx(-1e-6 / (2 + 1e-6), rel=1e-12)

    def test_half(self):
        assert dice_loss(Tensor([0.5] * 4), Tensor([1.0, 1, 0, 0])).item() == pytest.approx(-0.5, abs=1e-6)

    def test_empty_vs_empty_is_perfect(self):
        assert dice_loss(Tensor(np.zeros(4)), Tensor(np.zeros(4))).item() == -1.0

    def test_errors(self):
        with pytest.raises(DimensionError):
            dice_loss(Tensor(np.zeros(3)), Tensor(np.zeros(4)))
        with pytest.raises(ContractViolation):
            dice_loss(Tensor(np.zeros(2)), Tensor([0.5, 1.0]))

    def test_permutation_symmetry(self):
        rng = np.random.default_rng(0)
        yh, y = rng.uniform(size=20), (rng.uniform(size=20) > 0.5).astype(float)
        p = rng.permutation(20)
        assert dice_loss(Tensor(yh), Tensor(y)).item() == pytest.approx(dice_loss(Tensor(yh[p]), Tensor(y[p])).item(), abs=1e-15)

    def test_gradient(self):
        rng = np.random.default_rng(1)
        y = (rng.uniform(size=(4, 4)) > 0.5).astype(float)
        assert grad_check(lambda t: dice_loss(t, Tensor(y)), rng.uniform(0.05, 0.95, (4, 4))) < 1e-6

    def test_hard_score(self):
        p = np.array([1, 1, 0, 0])
        assert dice_score(p, p) == 1.0
        assert dice_score(p, 1 - p) < 1e-6
        assert dice_score(np.array([1, 1, 0, 0]), np.array([0, 1, 1, 0])) == pytest.approx(0.5, abs=1e-6)


@pytest.fixture(scope="module")
def model():
    return init_vae((32, 32), 5, seed=0)


class TestVae:
    def test_shapes(self, model):
        x = np.random.default_rng(0).normal(size=(3, 32, 32))
        x_hat, code = vae_forward(model, x, np.zeros((3, 5)))
        assert x_hat.shape == x.shape
        assert code.mu.shape == code.logvar.shape == (3, 5)
        assert encode_latent(model, x[0]).shape == (5,)
        assert decode_latent(model, encode_latent(model, x[0])).shape[-2:] == (32, 32)

    def test_zero_noise_is_decoder_of_mean(self, model):
        x = np.random.default_rng(1).normal(size=(2, 32, 32))
        x_hat, code = vae_forward(model, x, np.zeros((2, 5)))
        np.testing.assert_array_equal(np.squeeze(x_hat.numpy()), np.squeeze(decode_latent(model, code.mu.numpy())))

    def test_deterministic(self, model):
        x = np.random.default_rng(2).normal(size=(2, 32, 32))
        noise = np.random.default_rng(3).normal(size=(2, 5))
        a = vae_forward(model, x, noise)[0].numpy().tobytes()
        assert a == vae_forward(model, x, noise)[0].numpy().tobytes()
        np.testing.assert_array_equal(encode_latent(model, x), vae_forward(model, x, noise)[1].mu.numpy())

    def test_loss_is_mse_plus_kl(self, model):
        rng = np.random.default_rng(4)
        x, noise = rng.normal(size=(2, 32, 32)), rng.normal(size=(2, 5))
        x_hat, code = vae_forward(model, x, noise)
        mu, lv = code.mu.numpy(), code.logvar.numpy()
        ref = np.mean((np.squeeze(x_hat.numpy()) - x) ** 2) + np.mean(0.5 * np.sum(mu**2 + np.exp(lv) - 1 - lv, axis=1))
        assert vae_loss(model, x, noise).item() == pytest.approx(ref, abs=1e-12)

    def test_constant_offset_mse(self):
        x = np.random.default_rng(0).normal(size=(4, 4))
        assert mse(Tensor(x + 0.3), Tensor(x)).item() == pytest.approx(0.09, abs=1e-12)
        assert mse(Tensor(x), Tensor(x)).item() + kl(np.zeros(5), np.zeros(5)) == 0.0

    def test_shape_mismatch(self, model):
        with pytest.raises(DimensionError):
            vae_forward(model, np.zeros((1, 16, 16)), np.zeros((1, 5)))

    def test_loss_gradient_wrt_input_and_params(self):
        small = init_vae((8, 8), 2, channels=(2, 2, 2), seed=1)
        rng = np.random.default_rng(5)
        x, noise = rng.normal(size=(2, 8, 8)), rng.normal(size=(2, 2))
        assert grad_check(lambda t: vae_loss(small, t, noise), x) < 1e-5
        for name in ("enc0.w", "mu.w", "logvar.b", "dec2.w"):
            base = dict(small.params)

            def f(t, name=name):
                return vae_loss(small, x, noise, params={**{k: Tensor(v) for k, v in base.items()}, name: t})

            assert grad_check(f, base[name]) < 1e-5


class TestUnet:
    def test_range_and_shape(self):
        model = init_unet(seed=0)
        x = np.random.default_rng(0).normal(scale=10, size=(2, 32, 32))
        out = unet_forward(model, x).numpy()
        assert out.shape == (2, 1, 32, 32)
        assert out.min() > 0 and out.max() < 1
        assert out.tobytes() == unet_forward(model, x).numpy().tobytes()

    def test_indivisible(self):
        with pytest.raises(DimensionError):
            unet_logits(init_unet(seed=0), np.zeros((1, 30, 30)))

    def test_dice_gradient_wrt_params(self):
        model = init_unet(base_channels=2, depth=2, seed=3)
        rng = np.random.default_rng(6)
        x = rng.normal(size=(1, 1, 8, 8))
        y = (rng.uniform(size=(1, 1, 8, 8)) > 0.6).astype(float)
        base = dict(model.params)
        name = sorted(base)[0]

        def f(t):
            params = {**{k: Tensor(v) for k, v in base.items()}, name: t}
            return dice_loss(unet_forward(model, x, params=params), Tensor(y))

        assert grad_check(f, base[name]) < 1e-5
        assert grad_check(lambda t: dice_loss(unet_forward(model, t), Tensor(y)), x) < 1e-5


class TestAdam:
    def test_zero_gradient(self):
        p = {"w": np.array([1.0, -2.0])}
        new, state = adam_step(AdamState(lr=0.1), p, {"w": np.zeros(2)})
        np.testing.assert_array_equal(new["w"], p["w"])
        assert state.step == 1
        warm = AdamState(lr=0.1, step=1, m={"w": np.ones(2)}, v={"w": np.ones(2)})
        _, decayed = adam_step(warm, p, {"w": np.zeros(2)})
        np.testing.assert_allclose(decayed.m["w"], 0.9)
        np.testing.assert_allclose(decayed.v["w"], 0.999)

    def test_first_step_is_lr_sign(self):
        g = np.array([3.0, -0.01, 250.0])
        new, _ = adam_step(AdamState(lr=1e-3), {"w": np.zeros(3)}, {"w": g})
        np.testing.assert_allclose(new["w"], -1e-3 * np.sign(g), rtol=1e-5)

    def test_deterministic_and_pure(self):
        p, g = {"w": np.ones(3)}, {"w": np.array([0.1, 0.2, 0.3])}
        s = AdamState()
        a, sa = adam_step(s, p, g)
        b, sb = adam_step(s, p, g)
        np.testing.assert_array_equal(a["w"], b["w"])
        assert s.step == 0 and sa.step == sb.step == 1
        np.testing.assert_array_equal(p["w"], np.ones(3))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            adam_step(AdamState(), {"w": np.ones(3)}, {"w": np.ones(2)})


@pytest.fixture(scope="module")
def phantoms():
    return generate_phantom_dataset(0, 10, 8, "A")


class TestTraining:
    def test_zero_epochs(self, phantoms):
        ids = phantoms.sample_ids()
        m0 = init_unet(seed=0)
        m1, hist = train_segmenter(m0, phantoms.images(ids), phantoms.masks(ids), epochs=0)
        assert hist == [] and all(np.array_equal(m0.params[k], m1.params[k]) for k in m0.params)
        v0 = init_vae(seed=0)
        v1, hist = train_vae(v0, phantoms.images(ids), epochs=0)
        assert hist == [] and all(np.array_equal(v0.params[k], v1.params[k]) for k in v0.params)

    def test_empty(self):
        with pytest.raises(EmptyInputError):
            train_vae(init_vae(seed=0), np.zeros((0, 32, 32)))
        with pytest.raises(EmptyInputError):
            train_segmenter(init_unet(seed=0), np.zeros((0, 32, 32)), np.zeros((0, 32, 32)))

    def test_segmenter_learns_and_is_reproducible(self, phantoms):
        ids = phantoms.sample_ids()
        x, y = phantoms.images(ids), phantoms.masks(ids)
        m1, hist = train_segmenter(init_unet(seed=0), x, y, epochs=30, seed=1)
        m2, _ = train_segmenter(init_unet(seed=0), x, y, epochs=30, seed=1)
        assert all(m1.params[k].tobytes() == m2.params[k].tobytes() for k in m1.params)
        assert hist[-1] < hist[0]
        probs = predict_proba(m1, x)
        assert np.mean([dice_score(p > 0.5, t) for p, t in zip(probs, y)]) > 0.5

    def test_vae_loss_decreases(self, phantoms):
        ids = phantoms.sample_ids()
        _, hist = train_vae(init_vae(seed=0), phantoms.images(ids), epochs=5, lr=1e-3, seed=0)
        assert hist[-1] < hist[0]


class TestCheckpoint:
    @pytest.mark.parametrize("factory", [lambda: init_vae(seed=2), lambda: init_unet(seed=2)])
    def test_round_trip(self, tmp_path, factory):
        model = factory()
        path = tmp_path / "m.ggmd"
        save_model(model, path)
        back = load_model(path)
        assert type(back) is type(model) and back.descriptor == model.descriptor
        assert all(back.params[k].tobytes() == model.params[k].tobytes() for k in model.params)
        assert checkpoint.dumps(back) == path.read_bytes()

    def test_corruption_detected(self):
        buf = checkpoint.dumps(init_unet(base_channels=2, seed=0))
        with pytest.raises(FormatError) as exc:
            checkpoint.loads(b"XXXX" + buf[4:])
        assert exc.value.offset == 0
        with pytest.raises(FormatError):
            checkpoint.loads(buf[:-7])
        flipped = bytearray(buf)
        flipped[len(buf) // 2] ^= 0x01
        with pytest.raises(ChecksumError):
            checkpoint.loads(bytes(flipped))
