"""
Executable invariant suites.

Each check returns a :class:`PropertyResult` holding the measured quantity,
the bound it is held to and the wall time. The ``properties`` CLI command and
the acceptance tests call the same functions.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .. import adapter as ad
from ..dynamics import NominalParams, hover_input, hover_state, rk4_step
from ..encoder import EncoderConfig, init_params
from ..simulation import Dataset
from ..trainer import finite_difference_check, init_theta


@dataclass
class PropertyResult:
    name: str
    value: float
    bound: float
    passed: bool
    seconds: float
    detail: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return f"[{tag}] {self.name}: {self.value:.3e} (bound {self.bound:.3e}){extra}"


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


# ---------------------------------------------------------------------------
# decoder algebra
# ---------------------------------------------------------------------------


def ridge_equivalence(n: int = 100, d: int = 17, ell: int = 16, seed: int = 0,
                      Lambda: float = ad.DEFAULT_PRIOR_PRECISION, sigma2: float = ad.DEFAULT_SIGMA2,
                      tol: float = 1e-8) -> PropertyResult:
    """Recursive posterior mean (lambda = 1) vs the batch ridge solve, worst channel."""
    rng = np.random.default_rng(seed)
    Theta0 = rng.standard_normal((d, ell))
    Z = rng.standard_normal((n, ell))
    Tstar = rng.standard_normal((d, ell))
    D = Z @ Tstar.T + math.sqrt(sigma2) * rng.standard_normal((n, d))

    def go():
        st = ad.init(Theta0, Lambda, sigma2, ad.AdapterHyper(mode="bayes"))
        for k in range(n):
            ad.adapt_step(st, Z[k], D[k])
        return st.posterior.mu

    mu, secs = _timed(go)
    R = ad.ridge_solution(Z, D, Lambda, sigma2, mu0=Theta0)
    rel = np.linalg.norm(mu - R, axis=1) / np.linalg.norm(R, axis=1)
    worst = float(rel.max())
    return PropertyResult("kalman/ridge equivalence", worst, tol, worst <= tol, secs,
                          f"{d} channels, {n} samples")


def inflation_identity(n_pairs: int = 1000, ell: int = 16, seed: int = 0, tol: float = 1e-14) -> PropertyResult:
    """``P / lambda`` against ``P + (1/lambda - 1) P``, worst elementwise relative gap.

    ``P`` is a random SPD matrix with unit-scale entries; ``lambda`` is drawn
    from the range the adaptive rule produces for ``g`` up to ``eta + 20``.
    Inflated entries reach ~40, where one ulp is already ~7e-15, so the gap is
    measured relative to the entry.
    """
    rng = np.random.default_rng(seed)
    hyper = ad.AdapterHyper()

    def go():
        worst = 0.0
        for _ in range(n_pairs):
            A = rng.standard_normal((ell, ell))
            P = A @ A.T / ell
            g = hyper.eta + 20.0 * rng.random()
            lam = ad.compute_lambda(g, hyper)
            post = ad.DecoderPosterior(np.zeros((1, ell)), P[None].copy(), np.ones(1))
            div = ad.inflate(post, lam).P[0]
            qform = P + (1.0 / lam - 1.0) * P
            worst = max(worst, float(np.max(np.abs(div - qform) / np.maximum(np.abs(div), 1e-300))))
        return worst

    worst, secs = _timed(go)
    return PropertyResult("inflation identity", worst, tol, worst <= tol, secs, f"{n_pairs} (P, lambda) pairs")


def psd_preservation(n_steps: int = 10_000, d: int = 17, ell: int = 16, seed: int = 0,
                     tol: float = -1e-10) -> PropertyResult:
    """Smallest symmetrized eigenvalue over every covariance after each adaptive step.

    Inputs alternate between a consistent stretch and bursts of large
    observations so the inflation branch is exercised.
    """
    rng = np.random.default_rng(seed)
    st = ad.init(rng.standard_normal((d, ell)), hyper=ad.AdapterHyper(mode="adaptive"))

    def go():
        worst = math.inf
        inflated = 0
        for k in range(n_steps):
            z = rng.standard_normal(ell) * (10.0 ** rng.uniform(-2, 1))
            scale = 5.0 if (k // 500) % 2 else 0.05
            _, _, diag = ad.adapt_step(st, z, scale * rng.standard_normal(d))
            inflated += diag.lam < 1.0
            worst = min(worst, st.posterior.min_eigenvalue())
        return worst, inflated

    (worst, inflated), secs = _timed(go)
    return PropertyResult("PSD preservation", worst, tol, worst >= tol, secs,
                          f"{n_steps} steps, {inflated} inflated")


def lambda_exactness(n: int = 1000, seed: int = 0) -> PropertyResult:
    """lambda == 1 exactly for g <= eta; lambda(eta + 1, beta = 2) == 1/3."""
    rng = np.random.default_rng(seed)
    hyper = ad.AdapterHyper(beta=2.0)

    def go():
        below = [ad.compute_lambda(g, hyper) for g in
                 np.concatenate([rng.uniform(0.0, hyper.eta, n), [0.0, hyper.eta]])]
        ok = all(v == 1.0 for v in below)
        err = abs(ad.compute_lambda(hyper.eta + 1.0, hyper) - 1.0 / 3.0)
        return ok, err

    (ok, err), secs = _timed(go)
    return PropertyResult("lambda exactness", err, 1e-15, ok and err <= 1e-15, secs,
                          f"lambda==1 below threshold: {ok}")


def ewma_convergence(c: float = 3.7, alpha: float = 0.1, n: int = 300) -> PropertyResult:
    """Under constant psi = c from g0 = 0: ``|g_k - c| <= (1-alpha)^k c`` at every k.

    Reports the largest excess ``|g_k - c| - (1-alpha)^k c`` (non-positive when
    the bound holds).
    """
    def go():
        g = 0.0
        worst = -math.inf
        for k in range(1, n + 1):
            g = ad.ewma(g, c, alpha)
            worst = max(worst, abs(g - c) - (1 - alpha) ** k * c)
        return worst

    worst, secs = _timed(go)
    return PropertyResult("EWMA convergence", worst, 0.0, worst <= 0.0, secs, f"c={c}, alpha={alpha}, {n} steps")


# ---------------------------------------------------------------------------
# encoder gradients
# ---------------------------------------------------------------------------

GRADCHECK_CONFIG = EncoderConfig(h=5, L_seg=2, d_model=8, n_heads=2, n_layers=1, d_ff=8, proj_dims=(8,), ell=4)


def gradient_check(seed: int = 0, n_coords: int = 200, batch: int = 8, tol: float = 1e-5,
                   grad_scale: dict | None = None, cfg: EncoderConfig = GRADCHECK_CONFIG):
    """Finite-difference check at the small configuration with a fresh random init."""
    rng = np.random.default_rng(seed)
    H = rng.standard_normal((batch, cfg.h + 1, cfg.n_c))
    D = rng.standard_normal((batch, 17))
    data = Dataset(H, D, np.arange(batch, dtype=float), np.zeros(batch, dtype=np.int64))
    params = init_params(cfg, seed)
    Theta = init_theta(cfg, 17, seed)
    res, secs = _timed(lambda: finite_difference_check(params, Theta, data, cfg, n_coords=n_coords,
                                                       tol=tol, seed=seed, grad_scale=grad_scale))
    return PropertyResult("encoder gradient check", res.max_rel_error, tol, res.passed, secs,
                          f"{res.n_coords} coordinates"), res


# ---------------------------------------------------------------------------
# integrator
# ---------------------------------------------------------------------------


def _torqued_input(t, u0):
    u = u0.copy()
    u[0] *= 1.0 + 0.1 * math.sin(2.0 * t)
    u[1:4] = [0.02 * math.sin(3.0 * t), 0.015 * math.cos(2.5 * t), 0.01 * math.sin(1.7 * t)]
    u[4:6] += [0.3 * math.sin(4.0 * t), 0.2 * math.cos(3.0 * t)]
    return u


def rk4_order(T: float = 1.0, dts=(0.0025, 0.00125, 0.000625), oracle_ratio: int = 100,
              params: NominalParams | None = None) -> PropertyResult:
    """Observed global order against a fine-step oracle on a torqued trajectory.

    Inputs are held piecewise constant on the coarsest grid so every run
    integrates the same ODE; the oracle uses ``dt_min / oracle_ratio``. The
    light arm links set the fastest time scale, so the grid sits well below
    the control step to be in the asymptotic range.
    """
    params = params or NominalParams()
    x0 = hover_state()
    x0[10:13] = [0.3, -0.2, 0.5]
    x0[15:17] = [0.4, -0.3]
    u0 = hover_input(x0, params)
    hold = max(dts)
    n_hold = int(round(T / hold))

    def integrate(dt):
        x = x0.copy()
        sub = int(round(hold / dt))
        for i in range(n_hold):
            u = _torqued_input(i * hold, u0)
            for _ in range(sub):
                x = rk4_step(x, u, params, dt)
        return x

    def go():
        ref = integrate(min(dts) / oracle_ratio)
        errs = [float(np.linalg.norm(integrate(dt) - ref)) for dt in dts]
        slope = np.polyfit(np.log(dts), np.log(errs), 1)[0]
        return float(slope), errs

    (slope, errs), secs = _timed(go)
    return PropertyResult("RK4 order", slope, 3.8, slope >= 3.8, secs,
                          "errors " + ", ".join(f"{e:.2e}" for e in errs))


# ---------------------------------------------------------------------------
# complexity
# ---------------------------------------------------------------------------


def step_time_scaling(ells=(8, 16, 32, 64), d: int = 17, n_steps: int = 2000, repeats: int = 5,
                      seed: int = 0) -> PropertyResult:
    """Fitted exponent of per-step decoder-update time against the latent size.

    Times the compiled update loop (the body of ``adapt_step``) so Python call
    overhead does not flatten the curve at small sizes; best of ``repeats``.
    """
    rng = np.random.default_rng(seed)
    times = []

    def go():
        for ell in ells:
            Z = rng.standard_normal((n_steps, ell))
            D = rng.standard_normal((n_steps, d))
            st = ad.init(np.zeros((d, ell)), hyper=ad.AdapterHyper(mode="adaptive"))
            ad.run_adapter(st.copy(), Z[:4], D[:4])
            best = math.inf
            for _ in range(repeats):
                s = st.copy()
                t0 = time.perf_counter()
                ad.run_adapter(s, Z, D)
                best = min(best, time.perf_counter() - t0)
            times.append(best / n_steps)
        return float(np.polyfit(np.log(ells), np.log(times), 1)[0])

    slope, secs = _timed(go)
    return PropertyResult("adapt_step complexity exponent", slope, 2.0, abs(slope - 2.0) <= 0.5, secs,
                          "us/step " + ", ".join(f"l={l}:{t * 1e6:.1f}" for l, t in zip(ells, times)))


def run_all(seed: int = 0) -> list[PropertyResult]:
    return [
        ridge_equivalence(seed=seed),
        inflation_identity(seed=seed),
        psd_preservation(seed=seed),
        lambda_exactness(seed=seed),
        ewma_convergence(),
        gradient_check(seed=seed)[0],
        rk4_order(),
    ]
