import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from resadapt import adapter as ad
from resadapt.adapter import (
    AdapterHyper, DecoderPosterior, adapt_step, compute_lambda, ewma, inflate, init, innovation_score,
    predict, ridge_solution, run_adapter, update, write_diagnostics_csv,
)


def scalar_post(mu, P, s2):
    return DecoderPosterior(np.array([[mu]], float), np.array([[[P]]], float), np.array([s2], float))


def reference_step(post, g_prev, hyper, z, dobs):
    """inflate -> predict -> innovation/EWMA -> Joseph update, from the small functions."""
    if hyper.mode in ("fixed", "bayes"):
        lam = 1.0
    elif hyper.mode == "forgetting":
        lam = hyper.lambda_bar
    else:
        lam = compute_lambda(g_prev, hyper)
    prior = inflate(post, lam)
    dhat, S = predict(prior, z)
    psi = innovation_score(dobs - dhat, S)
    g = ewma(g_prev, psi, hyper.alpha)
    new = prior if hyper.mode == "fixed" else update(prior, z, dobs)
    return new, dhat, S, psi, g, lam


class TestInit:
    def test_table_defaults(self):
        s = init(np.zeros((17, 16)))
        np.testing.assert_allclose(s.posterior.P, np.broadcast_to(0.1 * np.eye(16), (17, 16, 16)), atol=1e-15)
        np.testing.assert_array_equal(s.posterior.sigma2, np.full(17, 2.5e-3))
        assert s.g == 0.0

    def test_means_from_theta(self):
        Th = np.random.default_rng(0).standard_normal((17, 4))
        s = init(Th)
        np.testing.assert_array_equal(s.posterior.mu, Th)
        Th[0, 0] = 99.0
        assert s.posterior.mu[0, 0] != 99.0

    def test_diag_and_full_lambda(self):
        s = init(np.zeros((2, 3)), Lambda=[1.0, 2.0, 4.0])
        np.testing.assert_allclose(s.posterior.P[1], np.diag([1.0, 0.5, 0.25]))
        A = np.array([[2.0, 0.5], [0.5, 1.0]])
        s = init(np.zeros((1, 2)), Lambda=A)
        np.testing.assert_allclose(s.posterior.P[0], np.linalg.inv(A), atol=1e-14)

    @pytest.mark.parametrize("Lam", [np.diag([1.0, -1.0]), np.array([[1.0, 2.0], [0.0, 1.0]]), 0.0])
    def test_rejects_non_spd(self, Lam):
        with pytest.raises(ValueError):
            init(np.zeros((3, 2)), Lambda=Lam)

    def test_rejects_bad_sigma2(self):
        with pytest.raises(ValueError):
            init(np.zeros((3, 2)), sigma2=0.0)

    def test_hyper_validation(self):
        for kw in ({"alpha": 0.0}, {"eta": 0.0}, {"beta": -1.0}, {"mode": "rls"}, {"lambda_bar": 1.5}):
            with pytest.raises(ValueError):
                AdapterHyper(**kw)


class TestLambda:
    def test_below_threshold(self):
        h = AdapterHyper()
        assert compute_lambda(3.0, h) == 1.0
        assert compute_lambda(0.0, h) == 1.0

    def test_one_third(self):
        assert abs(compute_lambda(9.0, AdapterHyper(eta=8.0, beta=2.0)) - 1 / 3) <= 1e-15

    def test_boundary(self):
        assert compute_lambda(8.0, AdapterHyper(eta=8.0, beta=2.0)) == 1.0

    @given(st.floats(0, 1e6))
    def test_range(self, g):
        lam = compute_lambda(g, AdapterHyper())
        assert 0.0 < lam <= 1.0


class TestInflate:
    def test_unit_lambda_bit_exact(self):
        post = init(np.random.default_rng(0).standard_normal((3, 4))).posterior
        post.P = post.P * 1.37
        assert inflate(post, 1.0).P.tobytes() == post.P.tobytes()

    def test_half_doubles(self):
        post = init(np.zeros((2, 3))).posterior
        np.testing.assert_array_equal(inflate(post, 0.5).P, 2.0 * post.P)

    def test_mean_untouched(self):
        post = init(np.arange(6.0).reshape(2, 3)).posterior
        np.testing.assert_array_equal(inflate(post, 0.2).mu, post.mu)

    def test_q_form(self):
        rng = np.random.default_rng(1)
        A = rng.standard_normal((5, 5))
        P = A @ A.T
        post = DecoderPosterior(np.zeros((1, 5)), P[None], np.ones(1))
        lam = 0.37
        q = P + (1.0 / lam - 1.0) * P
        np.testing.assert_allclose(inflate(post, lam).P[0], q, rtol=1e-14, atol=0)

    def test_mean_unchanged(self):
        post = init(np.ones((2, 3))).posterior
        np.testing.assert_array_equal(inflate(post, 0.2).mu, post.mu)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            inflate(init(np.zeros((1, 1))).posterior, 0.0)


class TestPredictUpdate:
    def test_zero_feature(self):
        post = init(np.ones((17, 16))).posterior
        dhat, S = predict(post, np.zeros(16))
        assert not np.any(dhat)
        np.testing.assert_array_equal(S, post.sigma2)

    def test_hand_prediction(self):
        dhat, S = predict(scalar_post(2.0, 0.5, 1.0), [3.0])
        assert dhat[0] == 6.0 and S[0] == 5.5

    def test_inflation_raises_variance(self):
        rng = np.random.default_rng(2)
        post = init(rng.standard_normal((4, 3))).posterior
        z = rng.standard_normal(3)
        assert np.all(predict(inflate(post, 0.6), z)[1] > predict(post, z)[1])

    def test_hand_update(self):
        new = update(scalar_post(0.0, 1.0, 1.0), [1.0], [1.0])
        assert new.mu[0, 0] == 0.5
        assert new.P[0, 0, 0] == 0.5

    def test_zero_feature_update_is_noop(self):
        rng = np.random.default_rng(3)
        post = init(rng.standard_normal((5, 4))).posterior
        new = update(post, np.zeros(4), rng.standard_normal(5))
        assert new.mu.tobytes() == post.mu.tobytes()
        assert new.P.tobytes() == post.P.tobytes()

    def test_update_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            update(init(np.zeros((2, 2))).posterior, [np.nan, 0.0], [0.0, 0.0])

    def test_monotone_information(self):
        rng = np.random.default_rng(4)
        post = init(np.zeros((3, 5))).posterior
        u = rng.standard_normal(5)
        prev = np.full(3, np.inf)
        for k in range(50):
            z = (1.0 + rng.random()) * u
            post = update(post, z, rng.standard_normal(3))
            q = np.einsum("i,jik,k->j", u, post.P, u)
            assert np.all(q <= prev + 1e-15)
            prev = q


class TestScoreAndEwma:
    def test_zero_innovation(self):
        assert innovation_score(np.zeros(17), np.ones(17)) == 0.0

    def test_unit_terms(self):
        S = np.random.default_rng(5).uniform(0.1, 3.0, 17)
        assert innovation_score(np.sqrt(S), S) == pytest.approx(17.0, abs=1e-12)

    def test_quadratic(self):
        rng = np.random.default_rng(6)
        e, S = rng.standard_normal(17), rng.uniform(0.5, 2, 17)
        assert innovation_score(2 * e, S) == pytest.approx(4 * innovation_score(e, S), rel=1e-14)

    def test_alpha_one(self):
        assert ewma(5.0, 3.0, 1.0) == 3.0

    def test_geometric(self):
        g = 0.0
        for _ in range(10):
            g = ewma(g, 1.0, 0.1)
        assert g == pytest.approx(1 - 0.9 ** 10, abs=1e-15)
        assert round(g, 4) == 0.6513

    def test_fixed_point(self):
        assert ewma(2.5, 2.5, 0.3) == 2.5


class TestAdaptStep:
    @pytest.mark.parametrize("mode", ad.MODES)
    def test_kernel_matches_reference(self, mode):
        rng = np.random.default_rng(7)
        # the reference has no covariance ceiling, so lift it out of reach
        hyper = AdapterHyper(mode=mode, eta=2.0, trace_cap=1e300)
        st_ = init(rng.standard_normal((6, 4)), hyper=hyper)
        post, g = st_.posterior.copy(), 0.0
        for k in range(60):
            z = rng.standard_normal(4)
            dobs = rng.standard_normal(6) * (0.5 if k > 30 else 0.05)
            _, dhat, diag = adapt_step(st_, z, dobs)
            post, dref, S, psi, g, lam = reference_step(post, g, hyper, z, dobs)
            np.testing.assert_allclose(dhat, dref, rtol=1e-9, atol=1e-13)
            np.testing.assert_allclose(diag.S, S, rtol=1e-9)
            assert diag.psi == pytest.approx(psi, rel=1e-9)
            assert diag.g == pytest.approx(g, rel=1e-9)
            assert diag.lam == pytest.approx(lam, rel=1e-14)
            np.testing.assert_allclose(st_.posterior.mu, post.mu, rtol=1e-8, atol=1e-12)
            np.testing.assert_allclose(st_.posterior.P, post.P, rtol=1e-8, atol=1e-14)
        assert st_.step == 60

    def test_zero_innovation(self):
        # small integers keep every product exact, so the innovation is exactly zero
        rng = np.random.default_rng(8)
        Th = rng.integers(-4, 5, (5, 3)).astype(float)
        st_ = init(Th)
        mus = []
        for k in range(40):
            z = rng.integers(-3, 4, 3).astype(float)
            _, _, diag = adapt_step(st_, z, Th @ z)
            assert diag.psi == 0.0 and diag.lam == 1.0
            mus.append(st_.posterior.mu.copy())
        assert st_.g == 0.0
        assert np.max(np.abs(np.diff(mus, axis=0))) == 0.0

    def test_g_decays_geometrically(self):
        rng = np.random.default_rng(9)
        Th = rng.standard_normal((5, 3))
        st_ = init(Th, hyper=AdapterHyper(mode="fixed"))
        st_.g = 4.0
        for k in range(1, 6):
            z = rng.standard_normal(3)
            adapt_step(st_, z, Th @ z)
            assert st_.g == pytest.approx(4.0 * 0.9 ** k, rel=1e-14)

    def test_jump_triggers_and_releases_inflation(self):
        rng = np.random.default_rng(10)
        d, ell = 17, 16
        T1, T2 = rng.standard_normal((d, ell)), rng.standard_normal((d, ell))
        Z = rng.standard_normal((1200, ell)) / 4
        D = np.empty((1200, d))
        D[:400] = Z[:400] @ T1.T
        D[400:] = Z[400:] @ T2.T
        D += 0.02 * rng.standard_normal(D.shape)
        st_ = init(T1)
        run = run_adapter(st_, Z, D)
        inv = 1.0 / run.lam
        assert np.all(inv[:400] == 1.0)
        assert inv[400:420].max() > 1.0
        assert np.all(inv[-100:] == 1.0)

    def test_run_matches_steps(self):
        rng = np.random.default_rng(11)
        Z, D = rng.standard_normal((100, 4)), rng.standard_normal((100, 6))
        a = init(rng.standard_normal((6, 4)), hyper=AdapterHyper(eta=1.0))
        b = a.copy()
        run = run_adapter(a, Z, D)
        for k in range(100):
            _, dhat, diag = adapt_step(b, Z[k], D[k])
            assert dhat.tobytes() == run.delta_hat[k].tobytes()
            assert diag.lam == run.lam[k]
        assert a.posterior.P.tobytes() == b.posterior.P.tobytes()
        assert a.g == b.g

    def test_fixed_never_moves(self):
        rng = np.random.default_rng(12)
        Th = rng.standard_normal((6, 4))
        st_ = init(Th, hyper=AdapterHyper(mode="fixed"))
        run_adapter(st_, rng.standard_normal((50, 4)), rng.standard_normal((50, 6)))
        np.testing.assert_array_equal(st_.posterior.mu, Th)

    def test_forgetting_lambda_constant(self):
        rng = np.random.default_rng(13)
        st_ = init(np.zeros((3, 2)), hyper=AdapterHyper(mode="forgetting", lambda_bar=0.5))
        run = run_adapter(st_, rng.standard_normal((20, 2)), rng.standard_normal((20, 3)))
        assert np.all(run.lam == 0.5)

    def test_trace_cap(self):
        rng = np.random.default_rng(14)
        st_ = init(np.zeros((2, 3)), hyper=AdapterHyper(eta=0.1, beta=100.0, trace_cap=50.0))
        tr0 = st_.trace0.copy()
        # z = 0 so updates never shrink P; huge innovations keep inflating it
        for _ in range(200):
            adapt_step(st_, np.zeros(3), 100 * rng.standard_normal(2))
        tr = np.trace(st_.posterior.P, axis1=1, axis2=2)
        assert np.all(tr <= 50.0 * tr0 * (1 + 1e-12))
        assert np.all(tr >= 49.0 * tr0)

    def test_rejects_bad_shapes(self):
        st_ = init(np.zeros((3, 2)))
        with pytest.raises(ValueError):
            adapt_step(st_, np.zeros(3), np.zeros(3))
        with pytest.raises(ValueError):
            adapt_step(st_, np.zeros(2), np.array([0.0, np.inf, 0.0]))

    def test_error_decomposition_bound(self):
        rng = np.random.default_rng(15)
        d, ell, n = 17, 8, 500
        Tstar = rng.standard_normal((d, ell))
        Z = rng.standard_normal((n, ell))
        eps = 0.05 * rng.standard_normal((n, d))
        D = Z @ Tstar.T + eps
        st_ = init(np.zeros((d, ell)))
        cz = np.linalg.norm(Z, axis=1).max()
        for k in range(n):
            mu = st_.posterior.mu.copy()
            _, dhat, _ = adapt_step(st_, Z[k], D[k])
            bound = cz * np.linalg.norm(Tstar - mu, axis=1) + 0.0 + np.abs(eps[k])
            assert np.all(np.abs(D[k] - dhat) <= bound + 1e-12)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), scale=st.floats(1e-3, 1e3), mode=st.sampled_from(ad.MODES))
    def test_invariants_random(self, seed, scale, mode):
        rng = np.random.default_rng(seed)
        st_ = init(rng.standard_normal((4, 3)), hyper=AdapterHyper(mode=mode, eta=1.0))
        run = run_adapter(st_, scale * rng.standard_normal((50, 3)), scale * rng.standard_normal((50, 4)))
        assert np.all(run.psi >= 0) and np.all(run.g >= 0)
        assert np.all((run.lam > 0) & (run.lam <= 1))
        assert np.all(run.S >= st_.posterior.sigma2)
        P = st_.posterior.P
        assert np.max(np.abs(P - np.swapaxes(P, 1, 2))) <= 1e-10 * max(1.0, np.abs(P).max())
        assert st_.posterior.min_eigenvalue() >= -1e-10


class TestRidge:
    def test_all_channels(self):
        rng = np.random.default_rng(16)
        Z = rng.standard_normal((100, 16))
        D = rng.standard_normal((100, 17))
        st_ = init(np.zeros((17, 16)), hyper=AdapterHyper(mode="bayes"))
        run_adapter(st_, Z, D)
        R = np.linalg.solve(Z.T @ Z / 2.5e-3 + 10 * np.eye(16), Z.T @ D / 2.5e-3).T
        rel = np.linalg.norm(st_.posterior.mu - R, axis=1) / np.linalg.norm(R, axis=1)
        assert rel.max() <= 1e-8
        np.testing.assert_allclose(ridge_solution(Z, D, 10.0, 2.5e-3), R, rtol=1e-10)


def test_diagnostics_csv(tmp_path):
    rng = np.random.default_rng(17)
    run = run_adapter(init(np.zeros((3, 2))), rng.standard_normal((5, 2)), rng.standard_normal((5, 3)))
    write_diagnostics_csv(run, np.arange(5) * 0.02, tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "step,t,psi,g,lambda,nis_0,nis_1,nis_2,rmse_pred"
    assert len(lines) == 6 and lines[1].startswith("0,0.0,")
