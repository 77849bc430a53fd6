"""
Tracking MPC by direct shooting over the control sequence.

The prediction model is the nominal RK4 step plus a residual vector held
constant over the horizon. The cost is quadratic tracking plus input effort,
a smoothness term on consecutive inputs and a squared-hinge penalty on the
input box. Gradients come from an adjoint sweep through the RK4 stages using
the analytic continuous-time Jacobians; the solver takes Gauss-Newton (or L-BFGS)
steps with Armijo backtracking and returns the best iterate seen.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numba as nb
import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .dynamics import (
    INPUT_DIM,
    STATE_DIM,
    NominalParams,
    _deriv,
    _deriv_jac,
    _packed,
    gravity_torque,
)

log = logging.getLogger(__name__)

Q_DIAG = (50, 50, 80, 10, 10, 10, 1, 5, 5, 5, 1, 1, 1, 20, 20, 5, 5)
R_DIAG = (10, 20, 20, 20, 10, 10)
# thrust bounds are per unit mass (see MpcConfig)
THRUST_BOUNDS_PER_KG = (0.1, 20.0)


class NonFiniteRollout(FloatingPointError):
    def __init__(self, stage: int):
        super().__init__(f"rollout produced non-finite state at stage {stage}")
        self.stage = stage


@dataclass(frozen=True)
class MpcConfig:
    """Horizon, weights and input box.

    Thrust limits are given per unit mass and multiplied by the vehicle mass;
    ``joint_bounds`` selects ``"symmetric"`` (+-1 N m) or ``"pinned"`` (both
    limits at 1 N m).
    """

    N: int = 20
    dt: float = 0.05
    Q: tuple = Q_DIAG
    terminal_scale: float = 4.0
    R: tuple = R_DIAG
    thrust_bounds: tuple = THRUST_BOUNDS_PER_KG
    moment_bound: float = 0.5
    joint_bounds: str = "symmetric"
    joint_limit: float = 1.0
    smoothness_weight: float = 10.0
    soft_constraint_weight: float = 1000.0
    method: str = "gauss_newton"
    max_iters: int = 10
    tol: float = 1e-4
    rel_decrease: float = 1e-7
    memory: int = 8

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if len(self.Q) != STATE_DIM or len(self.R) != INPUT_DIM:
            raise ValueError("Q needs 17 and R needs 6 entries")
        if min(self.Q) < 0 or min(self.R) < 0 or self.terminal_scale < 0:
            raise ValueError("weights must be >= 0")
        if self.smoothness_weight < 0 or self.soft_constraint_weight < 0:
            raise ValueError("weights must be >= 0")
        if self.joint_bounds not in ("symmetric", "pinned"):
            raise ValueError("joint_bounds must be 'symmetric' or 'pinned'")
        if self.thrust_bounds[0] > self.thrust_bounds[1]:
            raise ValueError("thrust_bounds must be ordered")
        if self.method not in ("gauss_newton", "lbfgs"):
            raise ValueError("method must be 'gauss_newton' or 'lbfgs'")
        if self.max_iters < 0 or self.memory < 1:
            raise ValueError("max_iters must be >= 0 and memory >= 1")

    @property
    def Qd(self) -> np.ndarray:
        return np.asarray(self.Q, dtype=float)

    @property
    def Pd(self) -> np.ndarray:
        return self.terminal_scale * self.Qd

    @property
    def Rd(self) -> np.ndarray:
        return np.asarray(self.R, dtype=float)

    def input_bounds(self, params: NominalParams) -> tuple[np.ndarray, np.ndarray]:
        lo = np.array([self.thrust_bounds[0] * params.m] + [-self.moment_bound] * 3 + [0.0, 0.0])
        hi = np.array([self.thrust_bounds[1] * params.m] + [self.moment_bound] * 3 + [0.0, 0.0])
        if self.joint_bounds == "symmetric":
            lo[4:], hi[4:] = -self.joint_limit, self.joint_limit
        else:
            lo[4:], hi[4:] = self.joint_limit, self.joint_limit
        return lo, hi


@dataclass
class HorizonReference:
    """Target states (N+1, 17) and inputs (N, 6) over the horizon."""

    x: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=float)
        self.u = np.ascontiguousarray(self.u, dtype=float)
        if self.x.ndim != 2 or self.x.shape[1] != STATE_DIM or self.u.shape != (len(self.x) - 1, INPUT_DIM):
            raise ValueError("reference needs (N+1, 17) states and (N, 6) inputs")

    @property
    def N(self) -> int:
        return len(self.u)


@nb.njit(cache=True)
def _trim_attitudes(F, out):
    for i in range(F.shape[0]):
        n = math.sqrt(F[i, 0] ** 2 + F[i, 1] ** 2 + F[i, 2] ** 2)
        z0, z1, z2 = F[i, 0] / n, F[i, 1] / n, F[i, 2] / n
        # y = z x e_x, x = y x z
        y0, y1, y2 = 0.0, z2, -z1
        ny = math.sqrt(y1 * y1 + y2 * y2)
        y1 /= ny
        y2 /= ny
        x0 = y1 * z2 - y2 * z1
        x1 = y2 * z0 - y0 * z2
        x2 = y0 * z1 - y1 * z0
        # rotation matrix columns (x, y, z) to quaternion, scalar first
        tr = x0 + y1 + z2
        if tr > 0.0:
            s = 2.0 * math.sqrt(tr + 1.0)
            out[i, 0] = 0.25 * s
            out[i, 1] = (y2 - z1) / s
            out[i, 2] = (z0 - x2) / s
            out[i, 3] = (x1 - y0) / s
        elif x0 > y1 and x0 > z2:
            s = 2.0 * math.sqrt(1.0 + x0 - y1 - z2)
            out[i, 0] = (y2 - z1) / s
            out[i, 1] = 0.25 * s
            out[i, 2] = (y0 + x1) / s
            out[i, 3] = (z0 + x2) / s
        elif y1 > z2:
            s = 2.0 * math.sqrt(1.0 + y1 - x0 - z2)
            out[i, 0] = (z0 - x2) / s
            out[i, 1] = (y0 + x1) / s
            out[i, 2] = 0.25 * s
            out[i, 3] = (z1 + y2) / s
        else:
            s = 2.0 * math.sqrt(1.0 + z2 - x0 - y1)
            out[i, 0] = (x1 - y0) / s
            out[i, 1] = (z0 + x2) / s
            out[i, 2] = (z1 + y2) / s
            out[i, 3] = 0.25 * s
        if out[i, 0] < 0.0:
            for k in range(4):
                out[i, k] = -out[i, k]


def trim_attitudes(F) -> np.ndarray:
    """Zero-yaw quaternions (rows) whose body z axis points along each row of ``F``."""
    F = np.ascontiguousarray(np.atleast_2d(F), dtype=float)
    out = np.empty((len(F), 4))
    _trim_attitudes(F, out)
    return out


def build_reference(ref, t0: float, cfg: MpcConfig, params: NominalParams, x_now=None,
                    residual=None, trim: bool = True) -> HorizonReference:
    """Sample a trajectory reference over the horizon.

    ``ref`` provides ``sample(ts)`` (positions, velocities, accelerations and
    joint angles, rates and accelerations at the stage times). With ``trim`` the target inputs and
    attitudes are the trim of the prediction model along the path: thrust and
    tilt that produce the reference acceleration net of the residual, body
    moments cancelling the angular residual, and joint torques for gravity plus
    the reference joint acceleration. Without it the targets are hover thrust
    plus joint gravity torques at level attitude. Reference quaternions are
    flipped into the hemisphere of ``x_now``.
    """
    ts = t0 + cfg.dt * np.arange(cfg.N + 1)
    smp = ref.sample(ts)
    X = np.zeros((cfg.N + 1, STATE_DIM))
    X[:, 0:3], X[:, 3:6], X[:, 6] = smp.p, smp.v, 1.0
    X[:, 13:15], X[:, 15:17] = smp.q, smp.dq
    c12 = np.cos(smp.q[:-1, 0] + smp.q[:-1, 1])
    grav = np.column_stack([params.gamma1 * np.cos(smp.q[:-1, 0]) + params.gamma2 * c12, params.gamma2 * c12])
    U = np.zeros((cfg.N, INPUT_DIM))
    U[:, 0] = params.hover_thrust
    U[:, 4:6] = grav
    if trim:
        r = np.zeros(STATE_DIM) if residual is None else np.asarray(residual, dtype=float)
        F = params.m * (smp.a + np.array([0.0, 0.0, params.g0]) - r[3:6] / cfg.dt)
        F[:, 2] = np.maximum(F[:, 2], 0.1 * params.m)
        X[:, 6:10] = trim_attitudes(F)
        U[:, 0] = np.linalg.norm(F[:-1], axis=1)
        U[:, 1:4] = -params.inertia @ (r[10:13] / cfg.dt)
        U[:, 4:6] += np.array([params.J1, params.J2]) * smp.ddq[:-1]
    if x_now is not None:
        flip = X[:, 6:10] @ np.asarray(x_now, dtype=float)[6:10] < 0
        X[flip, 6:10] *= -1.0
    return HorizonReference(X, U)


def hover_reference(x_ref, params: NominalParams, N: int) -> HorizonReference:
    x_ref = np.asarray(x_ref, dtype=float)
    u = np.zeros(INPUT_DIM)
    u[0] = params.hover_thrust
    u[4:6] = gravity_torque(x_ref[13:15], params)
    return HorizonReference(np.repeat(x_ref[None], N + 1, axis=0), np.repeat(u[None], N, axis=0))


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


@nb.njit(cache=True)
def _step_stages(x, u, r, pv, dt, S, out):
    """RK4 step plus residual, quaternion renormalized. Stage states go to S (4, 17)."""
    S[0] = x
    k1 = _deriv(x, u, pv)
    S[1] = x + 0.5 * dt * k1
    k2 = _deriv(S[1], u, pv)
    S[2] = x + 0.5 * dt * k2
    k3 = _deriv(S[2], u, pv)
    S[3] = x + dt * k3
    k4 = _deriv(S[3], u, pv)
    y = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    y += r
    n = np.sqrt(y[6] * y[6] + y[7] * y[7] + y[8] * y[8] + y[9] * y[9])
    for i in range(6, 10):
        y[i] = y[i] / n
    out[:] = y
    return n


@nb.njit(cache=True)
def _rollout(x0, U, r, pv, dt, X, St, Nq):
    X[0] = x0
    for i in range(U.shape[0]):
        Nq[i] = _step_stages(X[i], U[i], r, pv, dt, St[i], X[i + 1])
        for j in range(X.shape[1]):
            if not np.isfinite(X[i + 1, j]):
                return i
    return -1


@nb.njit(cache=True)
def _cost(X, U, Xr, Ur, Qd, Pd, Rd, ws, wc, lo, hi, gX, gU):
    """Total cost; fills dJ/dX (partial, per stage) and dJ/dU (explicit terms)."""
    N = U.shape[0]
    nx = X.shape[1]
    nu = U.shape[1]
    J = 0.0
    for i in range(N + 1):
        W = Pd if i == N else Qd
        for a in range(nx):
            e = X[i, a] - Xr[i, a]
            J += W[a] * e * e
            gX[i, a] = 2.0 * W[a] * e
    for i in range(N):
        for a in range(nu):
            e = U[i, a] - Ur[i, a]
            J += Rd[a] * e * e
            g = 2.0 * Rd[a] * e
            if U[i, a] > hi[a]:
                c = U[i, a] - hi[a]
                J += wc * c * c
                g += 2.0 * wc * c
            elif U[i, a] < lo[a]:
                c = lo[a] - U[i, a]
                J += wc * c * c
                g -= 2.0 * wc * c
            gU[i, a] = g
    for i in range(N - 1):
        for a in range(nu):
            du = U[i + 1, a] - U[i, a]
            J += ws * du * du
            gU[i + 1, a] += 2.0 * ws * du
            gU[i, a] -= 2.0 * ws * du
    return J


@nb.njit(cache=True)
def _adjoint(X, U, St, Nq, pv, dt, gX, gU):
    """Backpropagate dJ/dX through the rollout, accumulating into gU."""
    N = U.shape[0]
    lam = gX[N].copy()
    gk = np.empty((4, 17))
    for i in range(N - 1, -1, -1):
        # through quaternion renormalization
        q = X[i + 1, 6:10]
        dot = lam[6] * q[0] + lam[7] * q[1] + lam[8] * q[2] + lam[9] * q[3]
        gy = lam.copy()
        for a in range(4):
            gy[6 + a] = (lam[6 + a] - q[a] * dot) / Nq[i]
        gx = gy.copy()
        h6 = dt / 6.0
        for a in range(17):
            gk[0, a] = h6 * gy[a]
            gk[1, a] = 2.0 * h6 * gy[a]
            gk[2, a] = 2.0 * h6 * gy[a]
            gk[3, a] = h6 * gy[a]
        coef = (0.5 * dt, 0.5 * dt, dt)
        for s in range(3, -1, -1):
            A, B = _deriv_jac(St[i, s], U[i], pv)
            gs = A.T @ gk[s]
            gU[i] += B.T @ gk[s]
            gx += gs
            if s > 0:
                gk[s - 1] += coef[s - 1] * gs
        lam = gx + gX[i]
    return lam


@nb.njit(cache=True)
def _linearize(St, U, Nq, X, pv, dt, Phi, Gam):
    """Discrete step Jacobians dX_{i+1}/dX_i (Phi) and dX_{i+1}/dU_i (Gam) by forward mode."""
    N = U.shape[0]
    nx, nu = 17, 6
    nz = nx + nu
    acc = np.empty((nx, nz))
    prev = np.zeros((nx, nz))
    M = np.empty((nx, nz))
    ds = np.empty((nx, nz))
    wts = (1.0, 2.0, 2.0, 1.0)
    cs = (0.0, 0.5 * dt, 0.5 * dt, dt)
    for i in range(N):
        acc[:, :] = 0.0
        for a in range(nx):
            acc[a, a] = 1.0
        for s in range(4):
            A, B = _deriv_jac(St[i, s], U[i], pv)
            # ds = [I 0] + c * prev
            for r in range(nx):
                for c in range(nz):
                    ds[r, c] = cs[s] * prev[r, c] if s > 0 else 0.0
                ds[r, r] += 1.0
            # M = A ds + [0 B], skipping structural zeros of A and B
            M[:, :] = 0.0
            for r in range(nx):
                for k in range(nx):
                    akk = A[r, k]
                    if akk != 0.0:
                        for c in range(nz):
                            M[r, c] += akk * ds[k, c]
                for c in range(nu):
                    M[r, nx + c] += B[r, c]
            w = dt / 6.0 * wts[s]
            for r in range(nx):
                for c in range(nz):
                    acc[r, c] += w * M[r, c]
                    prev[r, c] = M[r, c]
        q = X[i + 1, 6:10]
        for c in range(nz):
            dot = q[0] * acc[6, c] + q[1] * acc[7, c] + q[2] * acc[8, c] + q[3] * acc[9, c]
            for a in range(4):
                acc[6 + a, c] = (acc[6 + a, c] - q[a] * dot) / Nq[i]
        for r in range(nx):
            for c in range(nx):
                Phi[i, r, c] = acc[r, c]
            for c in range(nu):
                Gam[i, r, c] = acc[r, nx + c]


@nb.njit(cache=True)
def _gn_gradient(Phi, Gam, gX, gU, out):
    """Exact gradient from the stage Jacobians: backward costate sweep."""
    N = Gam.shape[0]
    nx, nu = 17, 6
    lam = gX[N].copy()
    tmp = np.empty(nx)
    for i in range(N - 1, -1, -1):
        for a in range(nu):
            acc = gU[i, a]
            for r in range(nx):
                acc += Gam[i, r, a] * lam[r]
            out[i * nu + a] = acc
        for c in range(nx):
            acc = gX[i, c]
            for r in range(nx):
                acc += Phi[i, r, c] * lam[r]
            tmp[c] = acc
        lam[:] = tmp


@nb.njit(cache=True)
def _gn_hessian(Phi, Gam, Qd, Pd, Rd, ws, wc, U, lo, hi, H):
    """Gauss-Newton Hessian of the total cost in the stacked controls."""
    N = U.shape[0]
    nx, nu = 17, 6
    Pt = np.zeros((N + 1, nx, nx))
    tmp = np.empty((nx, nx))
    for a in range(nx):
        Pt[N, a, a] = 2.0 * Pd[a]
    for k in range(N - 1, 0, -1):
        # Pt[k] = Phi^T Pt[k+1] Phi + 2 Q
        for r in range(nx):
            for c in range(nx):
                acc = 0.0
                for m in range(nx):
                    acc += Pt[k + 1, r, m] * Phi[k, m, c]
                tmp[r, c] = acc
        for r in range(nx):
            for c in range(r, nx):
                acc = 0.0
                for m in range(nx):
                    acc += Phi[k, m, r] * tmp[m, c]
                Pt[k, r, c] = acc
                Pt[k, c, r] = acc
            Pt[k, r, r] += 2.0 * Qd[r]
    H[:, :] = 0.0
    T = np.empty((nx, nu))
    T2 = np.empty((nx, nu))
    for k in range(N):
        for r in range(nx):
            for b in range(nu):
                acc = 0.0
                for m in range(nx):
                    acc += Pt[k + 1, r, m] * Gam[k, m, b]
                T[r, b] = acc
        for j in range(k, -1, -1):
            if j < k:
                # T <- Phi[j+1]^T T
                for r in range(nx):
                    for b in range(nu):
                        acc = 0.0
                        for m in range(nx):
                            acc += Phi[j + 1, m, r] * T[m, b]
                        T2[r, b] = acc
                T[:, :] = T2
            for a in range(nu):
                for b in range(nu):
                    acc = 0.0
                    for m in range(nx):
                        acc += Gam[j, m, a] * T[m, b]
                    H[j * nu + a, k * nu + b] = acc
                    H[k * nu + b, j * nu + a] = acc
    for k in range(N):
        for a in range(nu):
            i = k * nu + a
            H[i, i] += 2.0 * Rd[a]
            if U[k, a] > hi[a] or U[k, a] < lo[a]:
                H[i, i] += 2.0 * wc
    for k in range(N - 1):
        for a in range(nu):
            i = k * nu + a
            j = (k + 1) * nu + a
            H[i, i] += 2.0 * ws
            H[j, j] += 2.0 * ws
            H[i, j] -= 2.0 * ws
            H[j, i] -= 2.0 * ws


class Problem:
    """One MPC instance: cost and gradient as functions of the flattened controls."""

    def __init__(self, x0, ref: HorizonReference, residual, params: NominalParams, cfg: MpcConfig):
        self.x0 = np.ascontiguousarray(x0, dtype=float)
        self.ref = ref
        self.r = np.ascontiguousarray(residual if residual is not None else np.zeros(STATE_DIM), dtype=float)
        if self.x0.shape != (STATE_DIM,) or self.r.shape != (STATE_DIM,):
            raise ValueError("x0 and residual must have 17 entries")
        if ref.N != cfg.N:
            raise ValueError(f"reference horizon {ref.N} != N {cfg.N}")
        self.params = params
        self.cfg = cfg
        self.pv = _packed(params)
        self.lo, self.hi = cfg.input_bounds(params)
        self.Qd, self.Pd, self.Rd = cfg.Qd, cfg.Pd, cfg.Rd
        N = cfg.N
        self.X = np.empty((N + 1, STATE_DIM))
        self.St = np.empty((N, 4, STATE_DIM))
        self.Nq = np.empty(N)
        self.gX = np.empty((N + 1, STATE_DIM))
        self.gU = np.empty((N, INPUT_DIM))

    def _forward(self, U):
        bad = _rollout(self.x0, U, self.r, self.pv, self.cfg.dt, self.X, self.St, self.Nq)
        if bad >= 0:
            raise NonFiniteRollout(bad)

    def cost(self, u_flat) -> float:
        U = np.ascontiguousarray(u_flat, dtype=float).reshape(self.cfg.N, INPUT_DIM)
        try:
            self._forward(U)
        except NonFiniteRollout:
            return math.inf
        c = self.cfg
        return _cost(self.X, U, self.ref.x, self.ref.u, self.Qd, self.Pd, self.Rd, c.smoothness_weight,
                     c.soft_constraint_weight, self.lo, self.hi, self.gX, self.gU)

    def cost_grad(self, u_flat) -> tuple[float, np.ndarray]:
        J = self.cost(u_flat)
        if not math.isfinite(J):
            return J, np.full(self.cfg.N * INPUT_DIM, np.nan)
        U = np.ascontiguousarray(u_flat, dtype=float).reshape(self.cfg.N, INPUT_DIM)
        _adjoint(self.X, U, self.St, self.Nq, self.pv, self.cfg.dt, self.gX, self.gU)
        return J, self.gU.ravel().copy()

    def gauss_newton(self, u_flat, hessian: bool = True):
        """``(gradient, GN Hessian)`` at ``u_flat``; the last :meth:`cost` call must be at ``u_flat``."""
        c = self.cfg
        U = np.ascontiguousarray(u_flat, dtype=float).reshape(c.N, INPUT_DIM)
        Phi = np.empty((c.N, STATE_DIM, STATE_DIM))
        Gam = np.empty((c.N, STATE_DIM, INPUT_DIM))
        _linearize(self.St, U, self.Nq, self.X, self.pv, c.dt, Phi, Gam)
        g = np.empty(c.N * INPUT_DIM)
        _gn_gradient(Phi, Gam, self.gX, self.gU, g)
        if not hessian:
            return g, None
        H = np.empty((c.N * INPUT_DIM, c.N * INPUT_DIM))
        _gn_hessian(Phi, Gam, self.Qd, self.Pd, self.Rd, c.smoothness_weight, c.soft_constraint_weight,
                    U, self.lo, self.hi, H)
        return g, H


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


def rollout(x0, controls, residual, params: NominalParams, cfg: MpcConfig) -> np.ndarray:
    """States ``(N+1, 17)`` from applying ``controls`` with the constant residual."""
    U = np.ascontiguousarray(controls, dtype=float)
    if U.ndim != 2 or U.shape[1] != INPUT_DIM:
        raise ValueError("controls must be (N, 6)")
    N = len(U)
    X = np.empty((N + 1, STATE_DIM))
    r = np.zeros(STATE_DIM) if residual is None else np.ascontiguousarray(residual, dtype=float)
    bad = _rollout(np.ascontiguousarray(x0, dtype=float), U, r, _packed(params), float(cfg.dt), X,
                   np.empty((N, 4, STATE_DIM)), np.empty(N))
    if bad >= 0:
        raise NonFiniteRollout(bad)
    return X


def total_cost(traj, controls, ref: HorizonReference, cfg: MpcConfig, params: NominalParams | None = None) -> float:
    params = params or NominalParams()
    X = np.ascontiguousarray(traj, dtype=float)
    U = np.ascontiguousarray(controls, dtype=float)
    lo, hi = cfg.input_bounds(params)
    return _cost(X, U, ref.x, ref.u, cfg.Qd, cfg.Pd, cfg.Rd, cfg.smoothness_weight, cfg.soft_constraint_weight,
                 lo, hi, np.empty_like(X), np.empty_like(U))


def cost_gradient(x0, controls, ref: HorizonReference, residual, params: NominalParams, cfg: MpcConfig):
    """``(cost, dcost/dcontrols)`` with the gradient shaped like ``controls``."""
    prob = Problem(x0, ref, residual, params, cfg)
    J, g = prob.cost_grad(np.asarray(controls, dtype=float).ravel())
    return J, g.reshape(cfg.N, INPUT_DIM)


@dataclass
class SolveReport:
    iterations: int
    cost: float
    grad_norm: float
    converged: bool
    initial_cost: float
    cost_history: list = field(default_factory=list)


def initial_guess(params: NominalParams, cfg: MpcConfig) -> np.ndarray:
    """Hover thrust and zero torques at every stage."""
    U = np.zeros((cfg.N, INPUT_DIM))
    U[:, 0] = params.hover_thrust
    return U


def shift_warm_start(U) -> np.ndarray:
    U = np.asarray(U, dtype=float)
    return np.concatenate([U[1:], U[-1:]], axis=0)


def _newton_direction(H, g) -> np.ndarray:
    try:
        c = cho_factor(H, check_finite=False)
    except np.linalg.LinAlgError:
        # GN Hessian is PSD; add a little damping if it is numerically singular
        c = cho_factor(H + 1e-8 * np.trace(H) / len(H) * np.eye(len(H)), check_finite=False)
    return -cho_solve(c, g, check_finite=False)


def _lbfgs_direction(g, gn, s_list, y_list) -> np.ndarray:
    q = g.copy()
    alphas = []
    for s, y in reversed(list(zip(s_list, y_list))):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        alphas.append((rho, a))
        q -= a * y
    if y_list:
        s, y = s_list[-1], y_list[-1]
        q *= (s @ y) / (y @ y)
    else:
        q *= 1.0 / max(gn, 1.0)
    for (s, y), (rho, a) in zip(zip(s_list, y_list), reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def solve(x0, ref: HorizonReference, residual, params: NominalParams, cfg: MpcConfig,
          warm_start=None) -> tuple[np.ndarray, SolveReport]:
    """Minimize the MPC cost over the control sequence; never raises on non-convergence.

    ``cfg.method`` picks Gauss-Newton (condensed Hessian from the stage
    Jacobians) or L-BFGS directions. Both use Armijo backtracking, so accepted
    iterates strictly decrease the cost and the last iterate is the best one.
    Stops when the gradient norm falls below ``cfg.tol``, when an accepted step
    lowers the cost by less than ``cfg.rel_decrease`` relative, or after
    ``cfg.max_iters`` iterations.
    """
    prob = Problem(x0, ref, residual, params, cfg)
    u = (initial_guess(params, cfg) if warm_start is None else np.array(warm_start, dtype=float)).ravel()
    if not math.isfinite(prob.cost(u)):
        # fall back to hover if the warm start blows up the rollout
        u = initial_guess(params, cfg).ravel()
    if cfg.method == "gauss_newton":
        return _solve_gn(prob, u, cfg)
    return _solve_lbfgs(prob, u, cfg)


def _armijo(prob, u, J, d, slope, with_grad):
    step = 1.0
    for _ in range(30):
        u_new = u + step * d
        if with_grad:
            J_new, g_new = prob.cost_grad(u_new)
        else:
            J_new, g_new = prob.cost(u_new), None
        if math.isfinite(J_new) and J_new <= J + 1e-4 * step * slope:
            return u_new, J_new, g_new
        step *= 0.5
    return None, J, None


def _converged(gn, decrease, J, cfg) -> bool:
    return gn <= cfg.tol or decrease <= cfg.rel_decrease * max(1.0, abs(J))


def _solve_gn(prob: Problem, u, cfg: MpcConfig):
    J = prob.cost(u)
    J0 = J
    hist = [J]
    it = 0
    g, H = prob.gauss_newton(u, hessian=cfg.max_iters > 0)
    gn = float(np.linalg.norm(g)) if math.isfinite(J) else math.inf
    converged = gn <= cfg.tol
    while it < cfg.max_iters and not converged and math.isfinite(J):
        d = _newton_direction(H, g)
        slope = g @ d
        if not slope < 0:
            d, slope = -g, -gn * gn
        u_new, J_new, _ = _armijo(prob, u, J, d, slope, with_grad=False)
        it += 1
        if u_new is None:
            prob.cost(u)
            break
        decrease = J - J_new
        u, J = u_new, J_new
        hist.append(J)
        last = it == cfg.max_iters
        g, H = prob.gauss_newton(u, hessian=not last)
        gn = float(np.linalg.norm(g))
        converged = _converged(gn, decrease, J, cfg)
    if not converged:
        log.debug("MPC stopped after %d iterations, |g|=%.3g", it, gn)
    return u.reshape(cfg.N, INPUT_DIM), SolveReport(it, J, gn, converged, J0, hist)


def _solve_lbfgs(prob: Problem, u, cfg: MpcConfig):
    J, g = prob.cost_grad(u)
    J0 = J
    hist = [J]
    s_list, y_list = [], []
    gn = float(np.linalg.norm(g)) if math.isfinite(J) else math.inf
    it = 0
    converged = gn <= cfg.tol
    while it < cfg.max_iters and not converged and math.isfinite(J):
        d = _lbfgs_direction(g, gn, s_list, y_list)
        slope = g @ d
        if not slope < 0:
            d, slope = -g, -gn * gn
            s_list.clear()
            y_list.clear()
        u_new, J_new, g_new = _armijo(prob, u, J, d, slope, with_grad=True)
        it += 1
        if u_new is None:
            break
        s_vec, y_vec = u_new - u, g_new - g
        if s_vec @ y_vec > 1e-12 * (s_vec @ s_vec):
            s_list.append(s_vec)
            y_list.append(y_vec)
            if len(s_list) > cfg.memory:
                s_list.pop(0)
                y_list.pop(0)
        decrease = J - J_new
        u, J, g = u_new, J_new, g_new
        gn = float(np.linalg.norm(g))
        hist.append(J)
        converged = _converged(gn, decrease, J, cfg)
    if not converged:
        log.debug("MPC stopped after %d iterations, |g|=%.3g", it, gn)
    return u.reshape(cfg.N, INPUT_DIM), SolveReport(it, J, gn, converged, J0, hist)


# ---------------------------------------------------------------------------
# closed loop
# ---------------------------------------------------------------------------

RESIDUAL_SOURCES = ("nominal", "learned", "oracle")


@dataclass
class TickInfo:
    t: float
    u: np.ndarray
    cost: float
    iters: int
    grad_norm: float
    delta_hat: np.ndarray
    psi: float = float("nan")
    g: float = float("nan")
    lam: float = float("nan")


class ResidualMpc:
    """MPC with a residual correction from a trained model and an online decoder.

    ``source`` is ``"nominal"`` (no correction), ``"learned"`` (encoder features
    and the adapter's prior prediction; a ``fixed`` adapter mode keeps the
    offline decoder) or ``"oracle"`` (``oracle(t, x, u)`` returns the true
    residual). The input placed in the newest history row before solving is the
    first stage of the warm start; it is replaced by the applied input after
    the solve.
    """

    def __init__(self, params: NominalParams, cfg: MpcConfig, reference, source: str = "learned",
                 model=None, adapter_state=None, oracle=None, history: int | None = None, trim: bool = True):
        from .simulation import HistoryBuffer

        if source not in RESIDUAL_SOURCES:
            raise ValueError(f"source must be one of {RESIDUAL_SOURCES}")
        if source == "learned" and (model is None or adapter_state is None):
            raise ValueError("learned residuals need a model and an adapter state")
        if source == "oracle" and oracle is None:
            raise ValueError("oracle residuals need an oracle callable")
        self.params = params
        self.cfg = cfg
        self.reference = reference
        self.source = source
        self.model = model
        self.adapter = adapter_state
        self.oracle = oracle
        h = model.cfg.h if model is not None else (history if history is not None else 0)
        self.buffer = HistoryBuffer(h)
        self.trim = trim
        self.warm = initial_guess(params, cfg)
        self._pending = None

    def plan(self, t: float, x) -> tuple[np.ndarray, TickInfo]:
        x = np.asarray(x, dtype=float)
        delta_hat = np.zeros(STATE_DIM)
        z = None
        if self.source == "learned":
            self.buffer.push(x, self.warm[0])
            z = self.model.features(self.buffer.matrix())
            delta_hat = self.model.stats.unscale_delta(self.adapter.posterior.mu @ z)
        elif self.source == "oracle":
            delta_hat = np.asarray(self.oracle(t, x, self.warm[0]), dtype=float)
        ref = build_reference(self.reference, t, self.cfg, self.params, x, delta_hat, self.trim)
        U, rep = solve(x, ref, delta_hat, self.params, self.cfg, warm_start=self.warm)
        u = U[0].copy()
        if self.source == "learned":
            self.buffer.replace_last_input(u)
        self.warm = shift_warm_start(U)
        self._pending = (x, u, z)
        return u, TickInfo(t, u, rep.cost, rep.iterations, rep.grad_norm, delta_hat)

    def observe(self, x_next, info: TickInfo | None = None) -> TickInfo | None:
        """Feed the measured next state; runs the decoder update for learned residuals."""
        from .adapter import adapt_step
        from .simulation import residual_target

        if self._pending is None:
            raise RuntimeError("observe() called before plan()")
        x, u, z = self._pending
        self._pending = None
        if self.source != "learned":
            return info
        target = residual_target(x_next, x, u, self.params, self.cfg.dt)
        _, _, diag = adapt_step(self.adapter, z, self.model.stats.scale_delta(target))
        if info is not None:
            info.psi, info.g, info.lam = diag.psi, diag.g, diag.lam
        return info


def control_step(ctrl: ResidualMpc, t: float, x, world_step) -> tuple[np.ndarray, np.ndarray, TickInfo]:
    """One closed-loop tick: plan, apply the first input through ``world_step(x, u)``, adapt."""
    u, info = ctrl.plan(t, x)
    x_next = world_step(x, u)
    ctrl.observe(x_next, info)
    return u, x_next, info


def write_tick_log(ticks: list, states, path) -> None:
    """Per-tick CSV ``t,x0..x16,u0..u5,cost,iters,grad_norm,delta_hat0..16,psi,g,lambda``.

    ``states[k]`` is the state the controller saw at tick ``k``.
    """
    header = (["t"] + [f"x{i}" for i in range(STATE_DIM)] + [f"u{i}" for i in range(INPUT_DIM)]
              + ["cost", "iters", "grad_norm"] + [f"delta_hat{i}" for i in range(STATE_DIM)]
              + ["psi", "g", "lambda"])
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for info, x in zip(ticks, states):
            vals = [info.t, *x, *info.u, info.cost]
            row = [repr(float(v)) for v in vals] + [str(int(info.iters)), repr(float(info.grad_norm))]
            row += [repr(float(v)) for v in info.delta_hat] + [repr(float(info.psi)), repr(float(info.g)),
                                                               repr(float(info.lam))]
            fh.write(",".join(row) + "\n")
