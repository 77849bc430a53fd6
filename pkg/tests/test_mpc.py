import math

import numpy as np
import pytest

from resadapt.adapter import AdapterHyper, init
from resadapt.dynamics import NominalParams, hover_input, hover_state, rk4_step
from resadapt.encoder import EncoderConfig, init_params
from resadapt.mpc import (
    HorizonReference, MpcConfig, NonFiniteRollout, ResidualMpc, build_reference, control_step, cost_gradient,
    hover_reference, initial_guess, rollout, shift_warm_start, solve, total_cost, write_tick_log,
)
from resadapt.simulation import Reference, ResidualRegime, TrajectoryConfig, raw_residual, true_step
from resadapt.trainer import ResidualModel, Standardizer

P = NominalParams()
CFG = MpcConfig()


def hover_x():
    return hover_state(qm=(-math.pi / 2, 0.0))


def random_instance(rng, N=6):
    cfg = MpcConfig(N=N)
    x0 = hover_x()
    x0[:3] += rng.normal(0, 0.2, 3)
    x0[3:6] = rng.normal(0, 0.3, 3)
    x0[10:13] = rng.normal(0, 0.2, 3)
    x0[15:17] = rng.normal(0, 0.3, 2)
    ref = hover_reference(hover_x(), P, N)
    U = initial_guess(P, cfg) + rng.normal(0, [1.0, 0.02, 0.02, 0.02, 0.1, 0.1], (N, 6))
    r = np.zeros(17)
    r[3:6] = rng.normal(0, 1e-3, 3)
    r[10:13] = rng.normal(0, 1e-3, 3)
    return cfg, x0, ref, U, r


class TestConfig:
    def test_defaults(self):
        assert CFG.N == 20 and CFG.dt == 0.05
        np.testing.assert_array_equal(CFG.Pd, 4 * CFG.Qd)
        assert CFG.smoothness_weight == 10.0 and CFG.soft_constraint_weight == 1000.0

    def test_bounds(self):
        lo, hi = CFG.input_bounds(P)
        np.testing.assert_allclose(lo[4:], -1.0)
        np.testing.assert_allclose(hi[4:], 1.0)
        assert lo[0] < P.hover_thrust < hi[0]
        lo, hi = MpcConfig(joint_bounds="pinned").input_bounds(P)
        np.testing.assert_array_equal(lo[4:], hi[4:])
        np.testing.assert_allclose(hi[4:], 1.0)

    @pytest.mark.parametrize("kw", [{"N": 0}, {"dt": 0.0}, {"Q": (1.0,) * 16}, {"R": (-1.0,) * 6},
                                    {"joint_bounds": "loose"}, {"method": "sqp"}])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            MpcConfig(**kw)


class TestRollout:
    def test_hover_constant(self):
        x = hover_x()
        U = np.repeat(hover_input(x, P)[None], 20, axis=0)
        X = rollout(x, U, np.zeros(17), P, CFG)
        np.testing.assert_allclose(X, np.repeat(x[None], 21, axis=0), atol=1e-12)

    def test_zero_residual_is_nominal(self):
        rng = np.random.default_rng(0)
        cfg, x0, _, U, _ = random_instance(rng)
        X = rollout(x0, U, np.zeros(17), P, cfg)
        x = x0
        for i in range(cfg.N):
            x = rk4_step(x, U[i], P, cfg.dt)
            assert X[i + 1].tobytes() == x.tobytes()

    def test_vz_accumulates(self):
        x = hover_x()
        U = np.repeat(hover_input(x, P)[None], 20, axis=0)
        c = 1e-3
        r = np.zeros(17)
        r[5] = c
        X0 = rollout(x, U, np.zeros(17), P, CFG)
        X1 = rollout(x, U, r, P, CFG)
        np.testing.assert_allclose(X1[:, 5] - X0[:, 5], c * np.arange(21), atol=1e-14)
        assert X1[-1, 5] - X0[-1, 5] == pytest.approx(20 * c, rel=1e-10)

    def test_single_stage(self):
        rng = np.random.default_rng(1)
        cfg, x0, _, U, r = random_instance(rng, N=1)
        X = rollout(x0, U, r, P, cfg)
        assert X.shape == (2, 17)
        y = rk4_step(x0, U[0], P, cfg.dt)
        y[:6] += r[:6]
        y[10:] += r[10:]
        np.testing.assert_allclose(X[1], y, atol=1e-15)

    def test_nonfinite_reports_stage(self):
        x = hover_x()
        U = np.repeat(hover_input(x, P)[None], 5, axis=0)
        U[3, 0] = np.inf
        with pytest.raises(NonFiniteRollout) as exc:
            rollout(x, U, None, P, MpcConfig(N=5))
        assert exc.value.stage == 3


class TestCost:
    def test_zero_on_reference(self):
        x = hover_x()
        ref = hover_reference(x, P, 20)
        assert total_cost(ref.x, ref.u, ref, CFG, P) == 0.0

    def test_position_weight(self):
        x = hover_x()
        ref = hover_reference(x, P, 20)
        X = ref.x.copy()
        e = 0.03
        X[5, 0] += e
        assert total_cost(X, ref.u, ref, CFG, P) == pytest.approx(50 * e * e, rel=1e-12)

    def test_terminal_weight(self):
        ref = hover_reference(hover_x(), P, 20)
        X = ref.x.copy()
        X[-1, 2] += 0.1
        assert total_cost(X, ref.u, ref, CFG, P) == pytest.approx(4 * 80 * 0.01, rel=1e-12)

    def test_soft_constraint(self):
        cfg = MpcConfig(N=1)
        _, hi = cfg.input_bounds(P)
        x = hover_x()
        u = hover_input(x, P)
        u[0] = hi[0] + 1.0
        ref = HorizonReference(np.repeat(x[None], 2, axis=0), u[None])
        assert total_cost(ref.x, u[None], ref, cfg, P) == pytest.approx(1000.0, rel=1e-12)

    def test_smoothness(self):
        cfg = MpcConfig(N=2)
        ref = hover_reference(hover_x(), P, 2)
        U = ref.u.copy()
        U[1, 1] += 0.1
        expect = 20 * 0.01 + 10 * 0.01
        assert total_cost(ref.x, U, ref, cfg, P) == pytest.approx(expect, rel=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        for _ in range(3):
            cfg, x0, ref, U, r = random_instance(rng)
            J, G = cost_gradient(x0, U, ref, r, P, cfg)
            num = np.empty_like(U)
            for i in range(cfg.N):
                for a in range(6):
                    h = 1e-6 * max(1.0, abs(U[i, a]))
                    Up, Um = U.copy(), U.copy()
                    Up[i, a] += h
                    Um[i, a] -= h
                    jp = total_cost(rollout(x0, Up, r, P, cfg), Up, ref, cfg, P)
                    jm = total_cost(rollout(x0, Um, r, P, cfg), Um, ref, cfg, P)
                    num[i, a] = (jp - jm) / (2 * h)
            rel = np.linalg.norm(G - num) / np.linalg.norm(num)
            assert rel < 1e-4


class TestSolve:
    @pytest.mark.parametrize("method", ["gauss_newton", "lbfgs"])
    def test_hover_optimum(self, method):
        x = hover_x()
        ref = hover_reference(x, P, 20)
        cfg = MpcConfig(method=method)
        U, rep = solve(x, ref, None, P, cfg, warm_start=ref.u)
        assert rep.iterations <= 5
        assert rep.cost < 1e-6
        np.testing.assert_allclose(U, ref.u, atol=1e-6)

    @pytest.mark.parametrize("method", ["gauss_newton", "lbfgs"])
    def test_descent_and_monotone(self, method):
        rng = np.random.default_rng(3)
        for _ in range(3):
            _, x0, _, _, r = random_instance(rng)
            cfg = MpcConfig(method=method, max_iters=15)
            ref = hover_reference(hover_x(), P, cfg.N)
            warm = initial_guess(P, cfg) + rng.normal(0, 0.5, (cfg.N, 6))
            U, rep = solve(x0, ref, r, P, cfg, warm_start=warm)
            J_warm = total_cost(rollout(x0, warm, r, P, cfg), warm, ref, cfg, P)
            assert rep.cost <= J_warm
            assert rep.initial_cost == pytest.approx(J_warm, rel=1e-12)
            assert np.all(np.diff(rep.cost_history) <= 0)
            assert rep.cost == pytest.approx(total_cost(rollout(x0, U, r, P, cfg), U, ref, cfg, P), rel=1e-12)

    def test_payload_needs_more_thrust(self):
        x = hover_x()
        ref = hover_reference(x, P, 20)
        u = hover_input(x, P)
        reg = ResidualRegime(payload_mass=0.3, lag_tau=1e-4)
        r = np.zeros(17)
        r[3:6] = raw_residual(x, u, reg, P)[:3] * CFG.dt
        U_nom, _ = solve(x, ref, None, P, CFG)
        U_pay, _ = solve(x, ref, r, P, CFG)
        assert U_pay[0, 0] > U_nom[0, 0]

    def test_inputs_within_bounds(self):
        rng = np.random.default_rng(4)
        lo, hi = CFG.input_bounds(P)
        ref_traj = Reference(TrajectoryConfig(plane="xz"))
        x = ref_traj.state(0.0)
        for k in range(5):
            t = 0.7 * k
            x = ref_traj.state(t) + np.r_[rng.normal(0, 0.05, 6), np.zeros(11)]
            ref = build_reference(ref_traj, t, CFG, P, x)
            U, rep = solve(x, ref, None, P, CFG, warm_start=ref.u)
            assert np.all(U[0] >= lo - 0.1) and np.all(U[0] <= hi + 0.1)

    def test_nonconvergence_returns_best(self):
        rng = np.random.default_rng(5)
        _, x0, _, _, r = random_instance(rng)
        cfg = MpcConfig(max_iters=1)
        ref = hover_reference(hover_x(), P, cfg.N)
        U, rep = solve(x0, ref, r, P, cfg)
        assert rep.iterations <= 1
        assert rep.cost <= rep.initial_cost

    def test_shift_warm_start(self):
        U = np.arange(12.0).reshape(4, 3)
        np.testing.assert_array_equal(shift_warm_start(U), [[3, 4, 5], [6, 7, 8], [9, 10, 11], [9, 10, 11]])


def tiny_model(h=3, ell=4, seed=0):
    cfg = EncoderConfig(h=h, L_seg=2, d_model=8, n_heads=2, n_layers=1, d_ff=8, proj_dims=(8,), ell=ell)
    rng = np.random.default_rng(seed)
    stats = Standardizer(np.zeros(23), np.ones(23), np.zeros(17), np.full(17, 1e-3))
    return ResidualModel(init_params(cfg, seed), cfg, 0.01 * rng.standard_normal((17, ell)), stats)


def closed_loop(source, duration=4.0, mode="adaptive", seed=0, regime=None):
    cfg = MpcConfig(max_iters=5)
    ref = Reference(TrajectoryConfig(plane="xz"))
    regime = regime or ResidualRegime(payload_mass=0.3, coupling_gain=0.25, lag_tau=0.15)
    lag = np.zeros(6)
    kw = {}
    if source == "learned":
        model = tiny_model()
        kw = dict(model=model, adapter_state=init(model.Theta0, hyper=AdapterHyper(mode=mode)))
    elif source == "oracle":
        kw = dict(oracle=lambda t, x, u: np.r_[np.zeros(3), raw_residual(x, u, regime, P)[:3] * cfg.dt,
                                              np.zeros(4), raw_residual(x, u, regime, P)[3:] * cfg.dt,
                                              np.zeros(4)])
    ctrl = ResidualMpc(P, cfg, ref, source=source, **kw)
    rng = np.random.default_rng(seed)
    x = ref.state(0.0)
    state = {"lag": lag}

    def world(x, u):
        xn, state["lag"] = true_step(x, u, state["lag"], regime, P, rng, cfg.dt, np.zeros(17))
        return xn

    xs, ticks = [], []
    for k in range(int(round(duration / cfg.dt))):
        xs.append(x)
        _, x, info = control_step(ctrl, k * cfg.dt, x, world)
        ticks.append(info)
    xs = np.asarray(xs)
    err = xs[:, :3] - ref.sample(cfg.dt * np.arange(len(xs))).p
    return math.sqrt(np.mean(np.sum(err ** 2, axis=1))), ticks, xs, ctrl


class TestClosedLoop:
    def test_oracle_beats_nominal(self):
        r_nom, *_ = closed_loop("nominal", duration=10.0)
        r_orc, *_ = closed_loop("oracle", duration=10.0)
        assert r_orc < r_nom

    def test_frozen_decoder_stays_put(self):
        _, ticks, _, ctrl = closed_loop("learned", mode="fixed", duration=1.0)
        np.testing.assert_array_equal(ctrl.adapter.posterior.mu, ctrl.model.Theta0)
        assert all(t.lam == 1.0 for t in ticks)

    def test_adaptive_updates_decoder(self):
        _, ticks, _, ctrl = closed_loop("learned", mode="adaptive", duration=1.0)
        assert not np.array_equal(ctrl.adapter.posterior.mu, ctrl.model.Theta0)
        assert ctrl.adapter.step == len(ticks)
        assert all(np.isfinite(t.psi) for t in ticks)

    def test_deterministic_logs(self, tmp_path):
        paths = []
        for i in range(2):
            _, ticks, xs, _ = closed_loop("learned", duration=1.0)
            p = tmp_path / f"ticks{i}.csv"
            write_tick_log(ticks, xs, p)
            paths.append(p)
        assert paths[0].read_bytes() == paths[1].read_bytes()
        head = paths[0].read_text().splitlines()[0].split(",")
        assert head[:2] == ["t", "x0"] and head[18:24] == [f"u{i}" for i in range(6)]
        assert head[24:27] == ["cost", "iters", "grad_norm"] and head[-3:] == ["psi", "g", "lambda"]

    def test_observe_before_plan(self):
        ctrl = ResidualMpc(P, CFG, Reference(TrajectoryConfig()), source="nominal")
        with pytest.raises(RuntimeError):
            ctrl.observe(hover_x())

    def test_requires_model(self):
        with pytest.raises(ValueError):
            ResidualMpc(P, CFG, Reference(TrajectoryConfig()), source="learned")
