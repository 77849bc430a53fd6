"""
Online adaptation of the linear decoder.

Every output channel j keeps a Gaussian posterior N(mu_j, P_j) over its row of
Theta. A step is: forgetting factor from the previous consistency statistic,
covariance inflation, prediction, normalized innovation squared (NIS) and its
EWMA, then a Joseph-form measurement update.

The small reference functions (:func:`predict`, :func:`update`, ...) act on a
:class:`DecoderPosterior` and are what the tests check against closed forms.
The hot path, :func:`adapt_step` and :func:`run_adapter`, goes through one fused
numba kernel doing the same arithmetic in O(d l^2) per step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba as nb
import numpy as np

MODES = ("fixed", "bayes", "forgetting", "adaptive")
_MODE_CODE = {m: i for i, m in enumerate(MODES)}

# Table of deployment defaults
DEFAULT_PRIOR_PRECISION = 10.0
DEFAULT_SIGMA2 = 2.5e-3
DEFAULT_ALPHA = 0.1
DEFAULT_ETA = 8.0
DEFAULT_BETA = 2.0
TRACE_CAP = 1e6


@dataclass(frozen=True)
class AdapterHyper:
    """Consistency-monitor and forgetting settings.

    ``mode`` selects the decoder variant: ``fixed`` (no update), ``bayes``
    (lambda = 1), ``forgetting`` (lambda = ``lambda_bar`` every step) or
    ``adaptive`` (lambda from the NIS EWMA).
    """

    alpha: float = DEFAULT_ALPHA
    eta: float = DEFAULT_ETA
    beta: float = DEFAULT_BETA
    mode: str = "adaptive"
    lambda_bar: float = 0.5
    trace_cap: float = TRACE_CAP

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must be in (0, 1]")
        if not self.eta > 0 or not self.beta > 0:
            raise ValueError("eta and beta must be > 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 < self.lambda_bar <= 1.0:
            raise ValueError("lambda_bar must be in (0, 1]")
        if not self.trace_cap >= 1.0:
            raise ValueError("trace_cap must be >= 1")


@dataclass
class DecoderPosterior:
    mu: np.ndarray      # (d, l)
    P: np.ndarray       # (d, l, l)
    sigma2: np.ndarray  # (d,)

    @property
    def d(self) -> int:
        return self.mu.shape[0]

    @property
    def ell(self) -> int:
        return self.mu.shape[1]

    def copy(self) -> "DecoderPosterior":
        return DecoderPosterior(self.mu.copy(), self.P.copy(), self.sigma2.copy())

    def min_eigenvalue(self) -> float:
        Ps = 0.5 * (self.P + np.swapaxes(self.P, 1, 2))
        return float(np.linalg.eigvalsh(Ps).min())


@dataclass
class AdapterState:
    posterior: DecoderPosterior
    hyper: AdapterHyper = field(default_factory=AdapterHyper)
    g: float = 0.0
    step: int = 0
    trace0: np.ndarray | None = None

    def __post_init__(self):
        if self.trace0 is None:
            self.trace0 = np.trace(self.posterior.P, axis1=1, axis2=2).copy()

    def copy(self) -> "AdapterState":
        return AdapterState(self.posterior.copy(), self.hyper, self.g, self.step, self.trace0.copy())

    @property
    def Theta(self) -> np.ndarray:
        return self.posterior.mu


@dataclass
class StepDiagnostics:
    psi: float
    g: float
    lam: float
    e: np.ndarray
    S: np.ndarray
    delta_hat: np.ndarray
    gain_norm: np.ndarray

    @property
    def nis_per_dim(self) -> np.ndarray:
        return self.e ** 2 / self.S


# ---------------------------------------------------------------------------
# reference operations
# ---------------------------------------------------------------------------


def init(Theta0, Lambda=DEFAULT_PRIOR_PRECISION, sigma2=DEFAULT_SIGMA2,
         hyper: AdapterHyper | None = None) -> AdapterState:
    """Posterior means from the rows of ``Theta0``; every covariance is ``Lambda^-1``.

    ``Lambda`` may be a scalar (times identity), a vector (diagonal) or a full
    SPD matrix. ``sigma2`` is a scalar or one value per channel.
    """
    Theta0 = np.array(Theta0, dtype=float)
    if Theta0.ndim != 2:
        raise ValueError("Theta0 must be (d, l)")
    d, ell = Theta0.shape
    Lam = np.asarray(Lambda, dtype=float)
    if Lam.ndim == 0:
        Lam = Lam * np.eye(ell)
    elif Lam.ndim == 1:
        Lam = np.diag(Lam)
    if Lam.shape != (ell, ell):
        raise ValueError(f"Lambda must be {ell}x{ell}")
    if not np.allclose(Lam, Lam.T, atol=1e-12):
        raise ValueError("Lambda must be symmetric")
    try:
        Lc = np.linalg.cholesky(Lam)
    except np.linalg.LinAlgError:
        raise ValueError("Lambda must be positive definite") from None
    Linv = np.linalg.inv(Lc)
    P0 = Linv.T @ Linv
    P0 = 0.5 * (P0 + P0.T)
    s2 = np.broadcast_to(np.asarray(sigma2, dtype=float), (d,)).copy()
    if np.any(~(s2 > 0)):
        raise ValueError("sigma2 must be > 0")
    post = DecoderPosterior(Theta0.copy(), np.repeat(P0[None], d, axis=0), s2)
    return AdapterState(post, hyper or AdapterHyper())


def compute_lambda(g_prev: float, hyper: AdapterHyper) -> float:
    return 1.0 / (1.0 + hyper.beta * max(0.0, g_prev - hyper.eta))


def inflate(post: DecoderPosterior, lam: float) -> DecoderPosterior:
    if not lam > 0:
        raise ValueError("lambda must be > 0")
    return DecoderPosterior(post.mu.copy(), post.P / lam, post.sigma2.copy())


def predict(post: DecoderPosterior, z) -> tuple[np.ndarray, np.ndarray]:
    z = np.asarray(z, dtype=float)
    delta_hat = post.mu @ z
    S = np.einsum("i,jik,k->j", z, post.P, z) + post.sigma2
    return delta_hat, S


def update(post: DecoderPosterior, z, delta_obs) -> DecoderPosterior:
    """Per-channel Kalman correction with the Joseph covariance form, then symmetrization."""
    z = np.asarray(z, dtype=float)
    delta_obs = np.asarray(delta_obs, dtype=float)
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(delta_obs))):
        raise ValueError("non-finite feature or observation")
    ell = post.ell
    mu = post.mu.copy()
    P = post.P.copy()
    eye = np.eye(ell)
    for j in range(post.d):
        Pz = P[j] @ z
        K = Pz / (z @ Pz + post.sigma2[j])
        mu[j] = mu[j] + K * (delta_obs[j] - z @ mu[j])
        A = eye - np.outer(K, z)
        Pj = A @ P[j] @ A.T + post.sigma2[j] * np.outer(K, K)
        P[j] = 0.5 * (Pj + Pj.T)
    return DecoderPosterior(mu, P, post.sigma2.copy())


def innovation_score(e, S) -> float:
    e = np.asarray(e, dtype=float)
    return float(np.sum(e * e / np.asarray(S, dtype=float)))


def ewma(g_prev: float, psi: float, alpha: float) -> float:
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must be in (0, 1]")
    return alpha * psi + (1.0 - alpha) * g_prev


def ridge_solution(Z, D, Lambda, sigma2, mu0=None) -> np.ndarray:
    """Batch posterior mean ``(Z^T Z / s2 + Lambda)^-1 (Z^T d / s2 + Lambda mu0)`` per channel."""
    Z = np.asarray(Z, dtype=float)
    D = np.asarray(D, dtype=float)
    d, ell = D.shape[1], Z.shape[1]
    Lam = np.asarray(Lambda, dtype=float)
    Lam = Lam * np.eye(ell) if Lam.ndim == 0 else Lam
    s2 = np.broadcast_to(np.asarray(sigma2, dtype=float), (d,))
    mu0 = np.zeros((d, ell)) if mu0 is None else np.asarray(mu0, dtype=float)
    out = np.empty((d, ell))
    for j in range(d):
        A = Z.T @ Z / s2[j] + Lam
        b = Z.T @ D[:, j] / s2[j] + Lam @ mu0[j]
        out[j] = np.linalg.solve(A, b)
    return out


def excitation_level(Z, window: int) -> np.ndarray:
    """Smallest eigenvalue of the windowed feature Gram matrix, one per full window."""
    Z = np.asarray(Z, dtype=float)
    n = len(Z) // window
    return np.array([np.linalg.eigvalsh(Z[i * window:(i + 1) * window].T @ Z[i * window:(i + 1) * window])[0]
                     for i in range(n)])


# ---------------------------------------------------------------------------
# fused kernel
# ---------------------------------------------------------------------------


@nb.njit(cache=True)
def _adapt_kernel(mu, P, sigma2, trace0, z, dobs, g_prev, alpha, eta, beta, mode, lam_bar, trace_cap,
                  dhat, S, e, gain, Pz, K, w):
    d, ell = mu.shape
    if mode == 0 or mode == 1:
        lam = 1.0
    elif mode == 2:
        lam = lam_bar
    else:
        lam = 1.0 / (1.0 + beta * max(0.0, g_prev - eta))
    inv = 1.0 / lam
    psi = 0.0
    for j in range(d):
        Pj = P[j]
        if lam != 1.0:
            tr = 0.0
            for a in range(ell):
                tr += Pj[a, a]
            # covariance ceiling relative to the prior
            s = inv
            if tr * inv > trace_cap * trace0[j]:
                s = trace_cap * trace0[j] / tr
            for a in range(ell):
                for b in range(ell):
                    Pj[a, b] *= s
        pred = 0.0
        quad = 0.0
        for a in range(ell):
            pred += mu[j, a] * z[a]
            acc = 0.0
            for b in range(ell):
                acc += Pj[a, b] * z[b]
            Pz[a] = acc
            quad += z[a] * acc
        Sj = quad + sigma2[j]
        dhat[j] = pred
        S[j] = Sj
        ej = dobs[j] - pred
        e[j] = ej
        psi += ej * ej / Sj
        if mode == 0:
            gain[j] = 0.0
            continue
        kn = 0.0
        for a in range(ell):
            K[a] = Pz[a] / Sj
            kn += K[a] * K[a]
            mu[j, a] += K[a] * ej
        gain[j] = math.sqrt(kn)
        # B = P - (Pz) K^T ; w = B^T z ; P' = B - K w^T + s2 K K^T
        for a in range(ell):
            for b in range(ell):
                Pj[a, b] -= Pz[a] * K[b]
        for b in range(ell):
            acc = 0.0
            for a in range(ell):
                acc += z[a] * Pj[a, b]
            w[b] = acc
        s2 = sigma2[j]
        for a in range(ell):
            for b in range(ell):
                Pj[a, b] += -K[a] * w[b] + s2 * K[a] * K[b]
        for a in range(ell):
            for b in range(a + 1, ell):
                m = 0.5 * (Pj[a, b] + Pj[b, a])
                Pj[a, b] = m
                Pj[b, a] = m
    g = alpha * psi + (1.0 - alpha) * g_prev
    return psi, g, lam


@nb.njit(cache=True)
def _run_kernel(mu, P, sigma2, trace0, Z, Dobs, g0, alpha, eta, beta, mode, lam_bar, trace_cap,
                dhat, S, e, gain, psi, g, lam):
    ell = mu.shape[1]
    Pz = np.empty(ell)
    K = np.empty(ell)
    w = np.empty(ell)
    gp = g0
    for k in range(Z.shape[0]):
        p_, g_, l_ = _adapt_kernel(mu, P, sigma2, trace0, Z[k], Dobs[k], gp, alpha, eta, beta, mode, lam_bar,
                                   trace_cap, dhat[k], S[k], e[k], gain[k], Pz, K, w)
        psi[k] = p_
        g[k] = g_
        lam[k] = l_
        gp = g_
    return gp


def adapt_step(state: AdapterState, z, delta_obs) -> tuple[AdapterState, np.ndarray, StepDiagnostics]:
    """One online step in the deployment order; mutates and returns ``state``.

    The returned prediction is the post-inflation prior mean times ``z``, the
    value handed to the controller before ``delta_obs`` is known.
    """
    z = np.ascontiguousarray(z, dtype=float)
    dobs = np.ascontiguousarray(delta_obs, dtype=float)
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(dobs))):
        raise ValueError("non-finite feature or observation")
    post = state.posterior
    d, ell = post.mu.shape
    if z.shape != (ell,) or dobs.shape != (d,):
        raise ValueError(f"expected z of shape ({ell},) and delta of shape ({d},)")
    h = state.hyper
    dhat, S, e, gain = np.empty(d), np.empty(d), np.empty(d), np.empty(d)
    psi, g, lam = _adapt_kernel(post.mu, post.P, post.sigma2, state.trace0, z, dobs, state.g, h.alpha, h.eta,
                                h.beta, _MODE_CODE[h.mode], h.lambda_bar, h.trace_cap, dhat, S, e, gain,
                                np.empty(ell), np.empty(ell), np.empty(ell))
    state.g = g
    state.step += 1
    return state, dhat, StepDiagnostics(psi, g, lam, e, S, dhat, gain)


@dataclass
class AdapterRun:
    delta_hat: np.ndarray
    S: np.ndarray
    e: np.ndarray
    gain_norm: np.ndarray
    psi: np.ndarray
    g: np.ndarray
    lam: np.ndarray

    @property
    def nis_per_dim(self) -> np.ndarray:
        return self.e ** 2 / self.S


def run_adapter(state: AdapterState, Z, Dobs) -> AdapterRun:
    """Sequential :func:`adapt_step` over a whole feature/target sequence (one kernel call)."""
    Z = np.ascontiguousarray(Z, dtype=float)
    Dobs = np.ascontiguousarray(Dobs, dtype=float)
    post = state.posterior
    d, ell = post.mu.shape
    T = len(Z)
    if Z.shape != (T, ell) or Dobs.shape != (T, d):
        raise ValueError("shape mismatch between features, targets and posterior")
    if not (np.all(np.isfinite(Z)) and np.all(np.isfinite(Dobs))):
        raise ValueError("non-finite feature or observation")
    out = AdapterRun(np.empty((T, d)), np.empty((T, d)), np.empty((T, d)), np.empty((T, d)),
                     np.empty(T), np.empty(T), np.empty(T))
    h = state.hyper
    state.g = _run_kernel(post.mu, post.P, post.sigma2, state.trace0, Z, Dobs, state.g, h.alpha, h.eta, h.beta,
                          _MODE_CODE[h.mode], h.lambda_bar, h.trace_cap, out.delta_hat, out.S, out.e,
                          out.gain_norm, out.psi, out.g, out.lam)
    state.step += T
    return out


def write_diagnostics_csv(run: AdapterRun, t, path) -> None:
    """``step,t,psi,g,lambda,nis_0..nis_{d-1},rmse_pred`` per step."""
    nis = run.nis_per_dim
    d = nis.shape[1]
    rmse = np.sqrt(np.mean(run.e ** 2, axis=1))
    with open(path, "w") as fh:
        fh.write("step,t,psi,g,lambda," + ",".join(f"nis_{j}" for j in range(d)) + ",rmse_pred\n")
        for k in range(len(run.psi)):
            row = [k, t[k], run.psi[k], run.g[k], run.lam[k], *nis[k], rmse[k]]
            fh.write(",".join(repr(float(v)) if i else str(v) for i, v in enumerate(row)) + "\n")
