import math

import numpy as np
import pytest

from resadapt.dynamics import NominalParams, hover_input, hover_state, rk4_step
from resadapt.simulation import (
    Dataset, DivergenceError, HistoryBuffer, ResidualRegime, ScenarioConfig, TrajectoryConfig,
    generate_dataset, injected_residual, push_history, raw_residual, read_dataset_binary,
    read_dataset_jsonl, residual_target, simulate, true_step, write_dataset_binary,
    write_dataset_jsonl, write_run_log,
)

P = NominalParams()
KINEMATIC = np.r_[0:3, 6:10, 13:17]


def moving_state(rng):
    x = hover_state(qm=rng.uniform(-2, 1, 2))
    x[3:6] = rng.normal(0, 0.5, 3)
    q = rng.normal(0, 0.2, 4)
    q[0] = 1.0
    x[6:10] = q / np.linalg.norm(q)
    x[10:13] = rng.normal(0, 0.5, 3)
    x[15:17] = rng.normal(0, 1.0, 2)
    u = hover_input(x, P) + rng.normal(0, [1.0, 0.02, 0.02, 0.02, 0.1, 0.1])
    return x, u


class TestInjectedResidual:
    def test_all_sources_off(self):
        rng = np.random.default_rng(0)
        reg = ResidualRegime(payload_mass=0.0, coupling_gain=0.0)
        for _ in range(50):
            x, u = moving_state(rng)
            res, lag = injected_residual(x, u, np.zeros(6), reg, 0.01, P)
            assert not np.any(res)
            assert not np.any(lag)

    def test_fast_lag_matches_raw(self):
        rng = np.random.default_rng(1)
        reg = ResidualRegime(payload_mass=0.3, coupling_gain=0.5, lag_tau=1e-4, thrust_efficiency=0.95)
        x, u = moving_state(rng)
        raw = raw_residual(x, u, reg, P)
        res, _ = injected_residual(x, u, np.zeros(6), reg, 0.01, P)
        np.testing.assert_allclose(res[3:6], raw[:3] * 0.01, atol=1e-6)
        np.testing.assert_allclose(res[10:13], raw[3:] * 0.01, atol=1e-6)

    def test_step_response_time_constant(self):
        # hold (x, u) fixed and switch the payload on at t* = 0
        tau, dt = 0.15, 0.01
        x = hover_state()
        u = hover_input(x, P)
        reg = ResidualRegime(payload_mass=0.4, lag_tau=tau)
        lag = np.zeros(6)
        vz = []
        for _ in range(200):
            res, lag = injected_residual(x, u, lag, reg, dt, P)
            vz.append(res[5] / dt)
        vz = np.asarray(vz)
        final = raw_residual(x, u, reg, P)[2]
        assert vz[-1] == pytest.approx(final, rel=1e-4)
        # fit log(1 - y/y_inf) = -t/tau over the first ~3 tau
        t = dt * np.arange(1, 46)
        slope = np.polyfit(t, np.log(1.0 - vz[:45] / final), 1)[0]
        assert -1.0 / slope == pytest.approx(tau, rel=0.10)

    def test_mask(self):
        rng = np.random.default_rng(2)
        reg = ResidualRegime(payload_mass=0.5, coupling_gain=1.0, lag_tau=0.05, thrust_efficiency=0.9)
        lag = np.zeros(6)
        for _ in range(100):
            x, u = moving_state(rng)
            res, lag = injected_residual(x, u, lag, reg, 0.01, P)
            assert not np.any(res[KINEMATIC])
            assert np.any(res[3:6])

    def test_regime_validation(self):
        with pytest.raises(ValueError):
            ResidualRegime(payload_mass=-0.1)
        with pytest.raises(ValueError):
            ResidualRegime(lag_tau=0.0)


class TestTrueStep:
    def test_off_noise_free_is_nominal(self):
        rng = np.random.default_rng(3)
        x, u = moving_state(rng)
        xn, _ = true_step(x, u, np.zeros(6), ResidualRegime(), P, None, 0.01)
        np.testing.assert_array_equal(xn, rk4_step(x, u, P, 0.01))

    def test_seeded_bit_identical(self):
        cfg = ScenarioConfig(TrajectoryConfig(), [ResidualRegime(payload_mass=0.2, coupling_gain=0.3)],
                             duration=3.0, rng_seed=11, history=2)
        _, a = simulate(cfg)
        _, b = simulate(cfg)
        assert a.x.tobytes() == b.x.tobytes()

    def test_noise_mean(self):
        rng = np.random.default_rng(4)
        noise_rng = np.random.default_rng(5)
        sigma = np.full(17, 1e-3)
        reg = ResidualRegime(payload_mass=0.2, coupling_gain=0.2)
        x, u = moving_state(rng)
        n = 10_000
        acc = np.zeros(17)
        lag = np.zeros(6)
        for _ in range(n):
            xn, lag_next = true_step(x, u, lag, reg, P, noise_rng, 0.01, sigma)
            res, _ = injected_residual(x, u, lag, reg, 0.01, P)
            acc += xn - rk4_step(x, u, P, 0.01) - res
        mean = acc / n
        # renormalization perturbs the quaternion block, so check the flat channels
        flat = np.r_[0:6, 10:17]
        assert np.all(np.abs(mean[flat]) <= 4 * 1e-3 / math.sqrt(n))


class TestResidualTarget:
    def test_exact_nominal_is_zero(self):
        rng = np.random.default_rng(6)
        x, u = moving_state(rng)
        assert not np.any(residual_target(rk4_step(x, u, P, 0.01), x, u, P, 0.01))

    def test_componentwise(self):
        rng = np.random.default_rng(7)
        x, u = moving_state(rng)
        xn = rk4_step(x, u, P, 0.01)
        xn[3] += 0.01
        d = residual_target(xn, x, u, P, 0.01)
        expect = np.zeros(17)
        expect[3] = 0.01
        np.testing.assert_allclose(d, expect, atol=1e-15)

    def test_noise_free_equals_injected(self):
        cfg = ScenarioConfig(TrajectoryConfig(plane="yz"),
                             [ResidualRegime(payload_mass=0.3, coupling_gain=0.4, thrust_efficiency=0.95)],
                             duration=5.0, noise_std=np.zeros(17), history=0)
        _, traj = simulate(cfg)
        np.testing.assert_allclose(traj.delta[:, 3:6], traj.injected[:, :3], atol=1e-10)
        np.testing.assert_allclose(traj.delta[:, 10:13], traj.injected[:, 3:], atol=1e-10)
        np.testing.assert_allclose(traj.delta[:, KINEMATIC], 0.0, atol=1e-10)


class TestHistory:
    def test_h0_single_row(self):
        buf = HistoryBuffer(0)
        H = push_history(buf, np.arange(17.0), np.arange(6.0), 0)
        np.testing.assert_array_equal(H, np.r_[np.arange(17.0), np.arange(6.0)][None])

    def test_h15_shape_and_last_row(self):
        buf = HistoryBuffer(15)
        for k in range(20):
            H = push_history(buf, np.full(17, k), np.full(6, -k), 15)
        assert H.shape == (16, 23)
        np.testing.assert_array_equal(H[-1], np.r_[np.full(17, 19.0), np.full(6, -19.0)])
        assert H[0, 0] == 4.0

    def test_warmup_prefill(self):
        buf = HistoryBuffer(2)
        H = push_history(buf, np.ones(17), np.zeros(6), 2)
        assert H.shape == (3, 23)
        assert np.all(H == H[0])

    def test_consecutive_overlap(self):
        cfg = ScenarioConfig(duration=1.0, history=5, noise_std=np.zeros(17))
        data = generate_dataset(cfg)
        np.testing.assert_array_equal(data.H[1:, :-1], data.H[:-1, 1:])

    def test_h_mismatch(self):
        with pytest.raises(ValueError):
            push_history(HistoryBuffer(3), np.zeros(17), np.zeros(6), 4)


class TestDataset:
    def test_count(self):
        data = generate_dataset(ScenarioConfig(duration=10.0, dt=0.01, history=15))
        assert len(data) == 1000 - 15

    def test_regime_histogram(self):
        regs = [ResidualRegime(payload_mass=m, active_from=i * 3.0, active_until=(i + 1) * 3.0 if i < 2 else math.inf)
                for i, m in enumerate((0.0, 0.2, 0.4))]
        data = generate_dataset(ScenarioConfig(TrajectoryConfig(family="random"), regs, duration=9.0, history=0))
        np.testing.assert_array_equal(np.bincount(data.regime_id), [300, 300, 300])

    def test_seed_determinism_serialized(self, tmp_path):
        cfg = ScenarioConfig(duration=2.0, history=3, rng_seed=4,
                             regimes=[ResidualRegime(payload_mass=0.2, coupling_gain=0.3)])
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        write_dataset_binary(generate_dataset(cfg), a)
        write_dataset_binary(generate_dataset(cfg), b)
        assert a.read_bytes() == b.read_bytes()

    def test_jsonl_roundtrip(self, tmp_path):
        data = generate_dataset(ScenarioConfig(duration=0.5, history=3,
                                               regimes=[ResidualRegime(payload_mass=0.1, coupling_gain=0.2)]))
        write_dataset_jsonl(data, tmp_path / "d.jsonl")
        back = read_dataset_jsonl(tmp_path / "d.jsonl")
        for name in ("H", "delta", "t", "regime_id"):
            assert getattr(back, name).tobytes() == getattr(data, name).tobytes()

    def test_binary_roundtrip(self, tmp_path):
        data = generate_dataset(ScenarioConfig(duration=0.5, history=3,
                                               regimes=[ResidualRegime(payload_mass=0.1, coupling_gain=0.2)]))
        side = write_dataset_binary(data, tmp_path / "d.bin")
        assert side.name == "d.bin.json"
        back = read_dataset_binary(tmp_path / "d.bin")
        for name in ("H", "delta", "t", "regime_id"):
            assert getattr(back, name).tobytes() == getattr(data, name).tobytes()

    def test_records_view(self):
        data = generate_dataset(ScenarioConfig(duration=0.3, history=2))
        recs = list(data)
        again = Dataset.from_records(recs)
        np.testing.assert_array_equal(again.H, data.H)
        assert np.all(np.isfinite(data.delta))

    def test_divergence_aborts(self):
        cfg = ScenarioConfig(duration=5.0, history=0, divergence_bound=2.0)
        with pytest.raises(DivergenceError):
            simulate(cfg, controller=lambda t, x: np.array([40.0, 0.1, 0, 0, 0, 0]))

    def test_overlapping_regimes_rejected(self):
        with pytest.raises(ValueError):
            ScenarioConfig(regimes=[ResidualRegime(active_from=0.0, active_until=5.0),
                                    ResidualRegime(active_from=4.0, active_until=6.0)])

    def test_run_log_header(self, tmp_path):
        _, traj = simulate(ScenarioConfig(duration=0.2, history=0))
        write_run_log(traj, tmp_path / "run.csv")
        lines = (tmp_path / "run.csv").read_text().splitlines()
        head = lines[0].split(",")
        assert head[0] == "t" and head[1] == "x0" and head[18] == "u0" and head[24] == "delta0"
        assert head[-1] == "regime_id" and len(head) == 1 + 17 + 6 + 17 + 1
        assert len(lines) == 21
