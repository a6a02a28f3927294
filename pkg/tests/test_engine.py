import numpy as np
import pytest

from torusvae import engine as e
from torusvae import geometry as g
from torusvae.errors import ConfigError, FormatError
from conftest import finite_diff_grads, max_relative_error


def tiny_model(mode="torus", dim=2, input_dim=5, hidden=(8,), seed=3):
    return e.build_vae(e.LatentSpec(mode, dim), input_dim, hidden, np.random.default_rng(seed))


class TestEncodeDecode:
    def test_zero_final_layer_gives_standard_prior(self, rng):
        model = tiny_model()
        model.encoder.weights[-1].data[...] = 0.0
        model.encoder.biases[-1].data[...] = 0.0
        out = model.encode(rng.standard_normal((4, 5)))
        assert np.all(out.mu == 0.0)
        assert np.all(out.sigma == 1.0)

    def test_encode_deterministic(self, rng):
        model = tiny_model()
        x = rng.standard_normal((3, 5))
        a, b = model.encode(x), model.encode(x)
        assert np.array_equal(a.mu, b.mu) and np.array_equal(a.logvar, b.logvar)

    def test_encoder_layout_torus(self, rng):
        # per circle: [mu0, mu1, logvar0, logvar1]
        model = tiny_model(dim=2)
        x = rng.standard_normal((1, 5))
        from torusvae.autodiff import Tensor

        raw = model.encoder.forward(Tensor(x)).data[0]
        out = model.encode(x)
        assert np.array_equal(out.mu[0, 0], raw[0:2])
        assert np.array_equal(out.logvar[0, 0], raw[2:4])
        assert np.array_equal(out.mu[0, 1], raw[4:6])

    def test_decode_range_is_tanh_bounded(self, rng):
        model = tiny_model(dim=3, input_dim=7)
        v = rng.standard_normal((50, 2**3 + 3)) * 3
        out = model.decode(v)
        assert np.all(out >= -1.0) and np.all(out <= 1.0)

    def test_shape_errors(self, rng):
        model = tiny_model()
        with pytest.raises(ValueError):
            model.decode(rng.standard_normal((2, 3)))
        with pytest.raises(ValueError):
            model.encode(rng.standard_normal((2, 9)))

    def test_encoder_input_jacobian(self, rng):
        # continuity of the output in one input pixel, against finite differences
        from torusvae.autodiff import Tensor

        model = tiny_model()
        x = rng.standard_normal((1, 5))

        xt = Tensor(x)
        out = model.encoder.forward(xt)
        out[0, 3].backward()
        analytic = xt.grad.copy()

        def value():
            return float(model.encoder.forward(Tensor(x)).data[0, 3])

        numeric = finite_diff_grads(value, [x])[0]
        assert max_relative_error(analytic, numeric, floor=1e-6) < 1e-4

    def test_decoder_input_jacobian(self, rng):
        from torusvae.autodiff import Tensor

        model = tiny_model(dim=2, input_dim=6)
        v = rng.standard_normal((1, 2**2 + 2))

        vt = Tensor(v)
        out = model.decoder.forward(vt)
        out[0, 2].backward()
        analytic = vt.grad.copy()

        def value():
            return float(model.decoder.forward(Tensor(v)).data[0, 2])

        numeric = finite_diff_grads(value, [v])[0]
        assert max_relative_error(analytic, numeric, floor=1e-6) < 1e-4


class TestElboLoss:
    def test_beta_zero_is_pure_reconstruction(self, rng):
        model = tiny_model()
        x = rng.uniform(-0.5, 0.5, size=(6, 5))
        noise = rng.standard_normal((6, 2, 2))
        res = e.elbo_loss(model, x, 0.0, noise)
        assert res.loss == res.reconstruction

    def test_loss_decomposition_is_exact(self, rng):
        model = tiny_model()
        x = rng.uniform(-0.5, 0.5, size=(6, 5))
        noise = rng.standard_normal((6, 2, 2))
        base = e.elbo_loss(model, x, 0.0, noise)
        for beta in (0.5, 3.0, 9.0):
            res = e.elbo_loss(model, x, beta, noise)
            assert res.loss == pytest.approx(base.loss + beta * res.kl, abs=1e-12)
            assert res.kl == pytest.approx(base.kl, abs=1e-15)

    def test_kl_matches_geometry_formula(self, rng):
        model = tiny_model()
        x = rng.uniform(-0.5, 0.5, size=(3, 5))
        noise = rng.standard_normal((3, 2, 2))
        res = e.elbo_loss(model, x, 1.0, noise)
        enc = model.encode(x)
        expected = np.mean([
            g.gaussian_kl(g.GaussianPairParams(enc.mu[i], enc.sigma[i]))
            for i in range(3)
        ])
        assert res.kl == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("mode,dim", [("torus", 2), ("euclidean", 3)])
    def test_gradients_match_finite_differences(self, mode, dim, rng):
        model = tiny_model(mode=mode, dim=dim)
        latent = model.latent
        x = rng.uniform(-0.8, 0.8, size=(3, 5))
        noise = rng.standard_normal(e._noise_shape(latent, 3))
        res = e.elbo_loss(model, x, 0.7, noise)
        arrays = [p.data for p in model.parameters()]

        worst = 0.0
        for analytic, arr in zip(res.grads, arrays):
            numeric = finite_diff_grads(
                lambda: e.elbo_loss(model, x, 0.7, noise).loss, [arr]
            )[0]
            worst = max(worst, max_relative_error(analytic, numeric))
        assert worst < 1e-4

    def test_degenerate_circle_sample(self, rng):
        model = tiny_model()
        model.encoder.weights[-1].data[...] = 0.0
        model.encoder.biases[-1].data[...] = 0.0
        x = rng.uniform(-0.5, 0.5, size=(2, 5))
        noise = np.zeros((2, 2, 2))  # mu = 0, sigma = 1, eps = 0 -> zero tuple
        with pytest.raises(g.DegenerateInputError):
            e.elbo_loss(model, x, 1.0, noise)

    def test_latent_invariants_hold_for_any_encoder_output(self, rng):
        # unit-norm product block no matter what the encoder emits
        from torusvae.autodiff import Tensor

        model = tiny_model(dim=3, input_dim=4)
        mu = Tensor(rng.standard_normal((10, 3, 2)) * 5)
        logvar = Tensor(rng.uniform(-3, 3, size=(10, 3, 2)))
        noise = rng.standard_normal((10, 3, 2))
        v = model._latent_input(mu, logvar, noise).data
        prod, orient = v[:, : 2**3], v[:, 2**3 :]
        assert np.abs(np.linalg.norm(prod, axis=1) - 1.0).max() < 1e-10
        assert np.all(np.abs(orient) <= 1.0 + 1e-12)


class TestAdam:
    def test_zero_gradient_keeps_params(self, rng):
        params = [type("P", (), {"data": rng.standard_normal((3, 3))})()]
        before = params[0].data.copy()
        state = e.AdamState.for_params(params)
        e.adam_step(params, [np.zeros((3, 3))], state, lr=0.1)
        assert np.array_equal(params[0].data, before)

    def test_first_step_is_signed_lr(self, rng):
        params = [type("P", (), {"data": rng.standard_normal(5)})()]
        before = params[0].data.copy()
        grad = rng.standard_normal(5)
        state = e.AdamState.for_params(params)
        e.adam_step(params, [grad], state, lr=0.01)
        delta = params[0].data - before
        assert np.allclose(delta, -0.01 * np.sign(grad), atol=1e-6)

    def test_deterministic(self, rng):
        grads = [rng.standard_normal((4, 2)) for _ in range(5)]

        def run():
            p = [type("P", (), {"data": np.ones((4, 2))})()]
            s = e.AdamState.for_params(p)
            for grad in grads:
                e.adam_step(p, [grad], s, lr=0.05)
            return p[0].data

        assert np.array_equal(run(), run())

    def test_non_finite_guard(self):
        params = [type("P", (), {"data": np.ones(2)})()]
        state = e.AdamState.for_params(params)
        with pytest.raises(e.NumericsError):
            e.adam_step(params, [np.array([1.0, np.nan])], state, lr=0.1)


class TestTrain:
    def test_empty_dataset_rejected(self):
        cfg = e.TrainConfig("torus", 2, 1.0, 1e-3, 4, 2, seed=1, hidden=(8,))
        with pytest.raises(ConfigError):
            e.train(cfg, np.zeros((0, 5)))

    def test_validation_mse_halves(self, rng):
        from torusvae import datasets as ds

        data = ds.make_synthetic_dataset(2, 600, seed=17)
        cfg = e.TrainConfig("torus", 3, 0.0, 2e-3, 32, 25, seed=4, hidden=(32,))
        _, report = e.train(cfg, data.samples)
        best = report.val_mse[report.best_epoch]
        assert best <= 0.5 * report.val_mse[0]

    def test_validation_mse_halves_on_shape_images(self):
        from torusvae import datasets as ds

        data = ds.make_2dshapes_dataset(2000, seed=51, width=16, height=16)
        cfg = e.TrainConfig("torus", 4, 0.0, 2e-3, 144, 12, seed=4,
                            hidden=(64, 32), input_scale=e.SCALE_UNIT)
        _, report = e.train(cfg, data.samples)
        best = report.val_mse[report.best_epoch]
        assert best <= 0.5 * report.val_mse[0]

    def test_seed_reproducibility(self):
        from torusvae import datasets as ds

        data = ds.make_synthetic_dataset(2, 200, seed=23)
        cfg = e.TrainConfig("torus", 2, 1.0, 1e-3, 32, 3, seed=9, hidden=(16,))
        model_a, report_a = e.train(cfg, data.samples)
        model_b, report_b = e.train(cfg, data.samples)
        assert report_a.to_dict() == report_b.to_dict()
        for pa, pb in zip(model_a.parameters(), model_b.parameters()):
            assert np.array_equal(pa.data, pb.data)

    def test_single_point_overfit(self):
        x = np.array([[0.3, -0.2, 0.5, 0.0, -0.4]])
        cfg = e.TrainConfig("torus", 2, 0.0, 5e-3, 1, 500, seed=5,
                            hidden=(16,), val_fraction=0.0)
        _, report = e.train(cfg, x)
        assert report.val_mse[report.best_epoch] < 5e-3

    def test_best_epoch_is_argmin(self):
        from torusvae import datasets as ds

        data = ds.make_synthetic_dataset(2, 300, seed=29)
        cfg = e.TrainConfig("euclidean", 4, 1.0, 1e-3, 32, 6, seed=2, hidden=(16,))
        _, report = e.train(cfg, data.samples)
        assert report.best_epoch == int(np.argmin(report.val_mse))


class TestGenerate:
    def test_periodicity(self, rng):
        model = tiny_model(dim=3, input_dim=6)
        theta = rng.uniform(0, 2 * np.pi, size=3)
        shifted = theta.copy()
        shifted[1] += 2 * np.pi
        assert np.abs(e.generate(model, theta) - e.generate(model, shifted)).max() < 1e-9

    def test_traversal_continuity(self, rng):
        model = tiny_model(dim=2, input_dim=6)
        theta = rng.uniform(0, 2 * np.pi, size=2)
        base = e.generate(model, theta)
        for delta in (1e-2, 1e-4, 1e-6):
            stepped = theta.copy()
            stepped[0] += delta
            gap = np.abs(e.generate(model, stepped) - base).max()
            assert gap < 50 * delta

    def test_matches_manual_decode_of_embed(self, rng):
        model = tiny_model(dim=2, input_dim=6)
        theta = rng.uniform(0, 2 * np.pi, size=2)
        manual = model.decode(g.embed_angles(theta).as_vector()[None, :])[0]
        assert np.array_equal(e.generate(model, theta), manual)

    def test_needs_torus_mode(self):
        model = tiny_model(mode="euclidean", dim=3)
        with pytest.raises(ConfigError):
            e.generate(model, [0.0, 0.0, 0.0])


class TestCodes:
    def test_torus_codes_are_mean_angles(self, rng):
        model = tiny_model(dim=2)
        x = rng.uniform(-0.5, 0.5, size=(8, 5))
        codes = model.codes(x)
        enc = model.encode(x)
        expected = np.mod(np.arctan2(enc.mu[:, :, 1], enc.mu[:, :, 0]), 2 * np.pi)
        assert np.array_equal(codes, expected)
        assert np.all((codes >= 0) & (codes < 2 * np.pi))

    def test_euclidean_codes_are_means(self, rng):
        model = tiny_model(mode="euclidean", dim=4)
        x = rng.uniform(-0.5, 0.5, size=(8, 5))
        assert np.array_equal(model.codes(x), model.encode(x).mu)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        model = tiny_model(dim=3, input_dim=7, hidden=(8, 4))
        path = tmp_path / "model.tdvae"
        e.save_checkpoint(model, path)
        loaded = e.load_checkpoint(path)
        assert loaded.latent.mode == model.latent.mode
        assert loaded.latent.dim == model.latent.dim
        assert loaded.input_scale == model.input_scale
        for pa, pb in zip(model.parameters(), loaded.parameters()):
            assert np.array_equal(pa.data, pb.data)
        x = rng.uniform(-0.5, 0.5, size=(4, 7))
        assert np.array_equal(model.codes(x), loaded.codes(x))

    def test_save_is_deterministic(self, tmp_path):
        model = tiny_model()
        e.save_checkpoint(model, tmp_path / "a")
        e.save_checkpoint(model, tmp_path / "b")
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad"
        path.write_bytes(b"NOTAVAE" + b"\x00" * 64)
        with pytest.raises(FormatError):
            e.load_checkpoint(path)

    def test_truncated(self, tmp_path):
        model = tiny_model()
        path = tmp_path / "model.tdvae"
        e.save_checkpoint(model, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(FormatError):
            e.load_checkpoint(path)

    def test_trailing_bytes(self, tmp_path):
        model = tiny_model()
        path = tmp_path / "model.tdvae"
        e.save_checkpoint(model, path)
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(FormatError):
            e.load_checkpoint(path)
