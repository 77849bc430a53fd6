import numpy as np
import pytest
import torch

from resadapt.encoder import EncoderConfig, init_params
from resadapt.simulation import Dataset, ResidualRegime, ScenarioConfig, TrajectoryConfig, generate_dataset
from resadapt.trainer import (
    AdamState, ResidualModel, TrainConfig, TrainingDiverged, adam_step, batch_loss,
    finite_difference_check, fit_residual_model, gradient, standardize, train, write_loss_curve,
)

SMALL = EncoderConfig(h=5, L_seg=2, d_model=8, n_heads=2, n_layers=1, d_ff=8, proj_dims=(8,), ell=4)


def random_batch(n=8, seed=0, cfg=SMALL):
    rng = np.random.default_rng(seed)
    H = rng.standard_normal((n, cfg.h + 1, cfg.n_c))
    D = rng.standard_normal((n, 17))
    return Dataset(H, D, np.arange(n, dtype=float), np.zeros(n, dtype=np.int64))


def frozen_encoder(Z):
    Z = torch.as_tensor(Z, dtype=torch.float64)
    return lambda H: Z


class TestBatchLoss:
    def test_zero_target_zero_decoder(self):
        b = random_batch()
        b = Dataset(b.H, np.zeros_like(b.delta), b.t, b.regime_id)
        assert batch_loss(init_params(SMALL, 0), np.zeros((17, 4)), b, SMALL, data_only=True) == 0.0

    def test_stub_example(self):
        b = Dataset(np.zeros((1, 6, 23)), np.r_[3.0, np.zeros(16)][None], np.zeros(1), np.zeros(1, dtype=np.int64))
        Theta = np.zeros((17, 1))
        Theta[0, 0] = 1.0
        assert batch_loss({}, Theta, b, SMALL, encoder=frozen_encoder([[2.0]])) == pytest.approx(1.0, abs=1e-15)

    def test_order_invariant(self):
        b = random_batch(16)
        params = init_params(SMALL, 1)
        Theta = np.random.default_rng(1).standard_normal((17, 4))
        perm = np.random.default_rng(2).permutation(16)
        shuffled = Dataset(b.H[perm], b.delta[perm], b.t[perm], b.regime_id[perm])
        a = batch_loss(params, Theta, b, SMALL, 1e-5)
        c = batch_loss(params, Theta, shuffled, SMALL, 1e-5)
        assert abs(a - c) <= 1e-12 * abs(a)

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            batch_loss({}, np.zeros((17, 4)), [], SMALL)


class TestGradient:
    def test_theta_closed_form(self):
        rng = np.random.default_rng(3)
        n, ell, wd = 10, 4, 1e-3
        Z = rng.standard_normal((n, ell))
        D = rng.standard_normal((n, 17))
        Theta = rng.standard_normal((17, ell))
        b = Dataset(np.zeros((n, 6, 23)), D, np.zeros(n), np.zeros(n, dtype=np.int64))
        _, gT = gradient({}, Theta, b, SMALL, wd, encoder=frozen_encoder(Z))
        expect = 2.0 / n * (Z @ Theta.T - D).T @ Z + 2 * wd * Theta
        np.testing.assert_allclose(gT, expect, atol=1e-10)

    def test_zero_residual_zero_gradients(self):
        b = random_batch(4)
        params = init_params(SMALL, 0)
        Theta = np.zeros((17, 4))
        b = Dataset(b.H, np.zeros_like(b.delta), b.t, b.regime_id)
        gp, gT = gradient(params, Theta, b, SMALL, 0.0)
        assert not np.any(gT)
        assert all(not torch.any(g) for g in gp.values())

    def test_finite_difference_agreement(self):
        b = random_batch(4, seed=5)
        res = finite_difference_check(init_params(SMALL, 5), np.random.default_rng(5).standard_normal((17, 4)),
                                      b, SMALL, n_coords=200, seed=5)
        assert res.n_coords == 200
        assert res.passed, res.format()
        assert res.max_rel_error < 1e-5

    def test_corrupted_gradient_is_caught(self):
        b = random_batch(4, seed=6)
        params = init_params(SMALL, 6)
        name = sorted(params)[0]
        res = finite_difference_check(params, np.random.default_rng(6).standard_normal((17, 4)), b, SMALL,
                                      n_coords=40, seed=6, grad_scale={name: 1.01})
        assert not res.passed
        assert res.per_tensor[name][0] > 1e-3


class TestAdam:
    def test_zero_grads_noop(self):
        p = {"w": torch.arange(6.0, dtype=torch.float64)}
        new, st = adam_step(p, {"w": torch.zeros(6, dtype=torch.float64)}, AdamState.zeros_like(p), TrainConfig())
        assert torch.equal(new["w"], p["w"])
        assert st.step == 1

    def test_first_step_sign(self):
        cfg = TrainConfig(learning_rate=1e-3)
        p = {"w": torch.zeros(4, dtype=torch.float64)}
        g = torch.tensor([2.0, -0.5, 1e-3, -30.0], dtype=torch.float64)
        new, _ = adam_step(p, {"w": g}, AdamState.zeros_like(p), cfg)
        expect = -cfg.learning_rate * g / (g.abs() + cfg.eps)
        torch.testing.assert_close(new["w"], expect, rtol=1e-12, atol=0)
        torch.testing.assert_close(new["w"], -1e-3 * torch.sign(g), rtol=1e-4, atol=0)

    def test_deterministic_ten_steps(self):
        def run():
            params = init_params(SMALL, 0)
            st = AdamState.zeros_like(params)
            Theta = np.zeros((17, 4))
            b = random_batch(8, seed=7)
            for _ in range(10):
                gp, _ = gradient(params, Theta, b, SMALL, 1e-5)
                params, st = adam_step(params, gp, st, TrainConfig())
            return params
        a, c = run(), run()
        assert all(a[k].numpy().tobytes() == c[k].numpy().tobytes() for k in a)


class TestTrain:
    def test_zero_epochs(self):
        b = random_batch(8)
        params, Theta, rep = train(b, SMALL, TrainConfig(epochs=0))
        init = init_params(SMALL, 0)
        assert all(torch.equal(params[k], init[k]) for k in init)
        assert rep.loss_curve == [] and Theta.shape == (17, 4)

    def test_config_validation(self):
        for kw in ({"learning_rate": 0.0}, {"batch_size": 0}, {"epochs": -1}):
            with pytest.raises(ValueError):
                TrainConfig(**kw)

    def test_linear_task_reaches_noise_floor(self):
        # target depends linearly on two channels of the most recent history row
        rng = np.random.default_rng(0)
        n, noise = 1024, 0.05
        H = rng.standard_normal((n, 6, 23))
        A = np.zeros((17, 23))
        A[:, :2] = rng.standard_normal((17, 2)) / np.sqrt(2)
        D = H[:, -1] @ A.T + noise * rng.standard_normal((n, 17))
        ds = Dataset(H, D, np.arange(n, dtype=float), np.zeros(n, dtype=np.int64))
        _, _, rep = train(ds, SMALL, TrainConfig(learning_rate=1e-2, batch_size=64, epochs=100, weight_decay=0.0))
        assert rep.final_rmse < 2 * noise

    def test_loss_curve_mostly_decreasing_and_deterministic(self):
        raw = generate_dataset(ScenarioConfig(TrajectoryConfig(family="random"),
                                              [ResidualRegime(payload_mass=0.3, coupling_gain=0.3)],
                                              duration=10.0, history=5, rng_seed=1))
        cfg = TrainConfig(epochs=15, batch_size=64, rng_seed=3)
        m1 = fit_residual_model(raw, SMALL, cfg)
        m2 = fit_residual_model(raw, SMALL, cfg)
        curve = np.asarray(m1.report.loss_curve)
        assert np.all(np.isfinite(curve)) and np.all(curve >= 0)
        assert np.mean(np.diff(curve) <= 0) >= 0.8
        assert m1.Theta0.tobytes() == m2.Theta0.tobytes()
        assert curve.tobytes() == np.asarray(m2.report.loss_curve).tobytes()
        assert m1.Theta0.shape == (17, 4)

    def test_divergence_raises(self):
        b = random_batch(8)
        b = Dataset(b.H, np.full_like(b.delta, np.inf), b.t, b.regime_id)
        with pytest.raises(TrainingDiverged):
            train(b, SMALL, TrainConfig(epochs=1))


class TestStandardize:
    def test_unit_moments(self):
        b = random_batch(200, seed=8)
        b = Dataset(3 + 5 * b.H, -2 + 0.1 * b.delta, b.t, b.regime_id)
        s, _ = standardize(b)
        flat = s.H.reshape(-1, 23)
        np.testing.assert_allclose(flat.mean(0), 0.0, atol=1e-12)
        np.testing.assert_allclose(flat.std(0), 1.0, atol=1e-12)
        np.testing.assert_allclose(s.delta.mean(0), 0.0, atol=1e-12)
        np.testing.assert_allclose(s.delta.std(0), 1.0, atol=1e-12)

    def test_roundtrip(self):
        b = random_batch(50, seed=9)
        s, st = standardize(b)
        back = st.invert(s)
        np.testing.assert_allclose(back.H, b.H, atol=1e-12)
        np.testing.assert_allclose(back.delta, b.delta, atol=1e-12)

    def test_constant_column(self):
        b = random_batch(20, seed=10)
        H = b.H.copy()
        H[..., 4] = 7.0
        D = b.delta.copy()
        D[:, 0] = -1.5
        s, st = standardize(Dataset(H, D, b.t, b.regime_id))
        assert st.h_std[4] == 1.0 and st.d_std[0] == 1.0
        assert not np.any(s.H[..., 4]) and not np.any(s.delta[:, 0])


class TestCheckpoint:
    def test_save_load(self, tmp_path):
        raw = generate_dataset(ScenarioConfig(duration=2.0, history=5,
                                              regimes=[ResidualRegime(payload_mass=0.2)]))
        m = fit_residual_model(raw, SMALL, TrainConfig(epochs=1, batch_size=64))
        m.save(tmp_path / "m.json")
        back = ResidualModel.load(tmp_path / "m.json")
        np.testing.assert_array_equal(back.Theta0, m.Theta0)
        np.testing.assert_array_equal(back.predict(raw.H[:5]), m.predict(raw.H[:5]))
        assert back.train_cfg == m.train_cfg

    def test_loss_curve_csv(self, tmp_path):
        raw = generate_dataset(ScenarioConfig(duration=1.0, history=5))
        m = fit_residual_model(raw, SMALL, TrainConfig(epochs=2, batch_size=64))
        write_loss_curve(m.report, tmp_path / "loss.csv")
        lines = (tmp_path / "loss.csv").read_text().splitlines()
        assert lines[0] == "epoch,mean_loss" and len(lines) == 3
