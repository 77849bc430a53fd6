"""
Nominal aerial-manipulator dynamics.

A rigid-body quadrotor and a decoupled planar 2R arm:

    p' = v
    v' = (f/m) z_B + g_I
    q' = 1/2 q (x) [0, w]
    w' = J^-1 (M - w x J w)
    qm' = vm
    vm' = B (um - g_m(qm))

State layout (17): p(0:3) v(3:6) q(6:10, scalar-first) w(10:13) qm(13:15) vm(15:17).
Input layout (6): f(0) M(1:4) um(4:6).

The hot paths are numba kernels operating on flat float64 arrays and a packed
parameter vector (see ``NominalParams.packed``). The public functions validate
their inputs and call the kernels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba as nb
import numpy as np

STATE_DIM = 17
INPUT_DIM = 6

P_SL = slice(0, 3)
V_SL = slice(3, 6)
Q_SL = slice(6, 10)
W_SL = slice(10, 13)
QM_SL = slice(13, 15)
VM_SL = slice(15, 17)

# packed parameter vector offsets
_M, _G0, _J, _JINV, _J1, _J2, _GAM1, _GAM2 = 0, 1, 2, 11, 20, 21, 22, 23
PACKED_LEN = 24


@dataclass(frozen=True)
class NominalParams:
    """Physical constants of the nominal model.

    ``gamma1``/``gamma2`` are derived properties, always recomputed from the
    link masses and lengths.
    """

    m: float = 2.2
    J: tuple = (0.032, 0.032, 0.058)
    g0: float = 9.81
    m1: float = 0.22
    m2: float = 0.3
    l1: float = 0.12
    l2: float = 0.16
    lc1: float = 0.05
    lc2: float = 0.1
    J1: float = 8.36e-4
    J2: float = 3.76e-3

    def __post_init__(self):
        J = self.inertia
        if J.shape != (3, 3):
            raise ValueError(f"J must be a 3-vector (diagonal) or 3x3 matrix, got shape {J.shape}")
        if not np.allclose(J, J.T) or np.min(np.linalg.eigvalsh(J)) <= 0:
            raise ValueError("J must be symmetric positive definite")
        for name in ("m", "g0", "m1", "m2", "l1", "l2", "lc1", "lc2", "J1", "J2"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val > 0):
                raise ValueError(f"{name} must be finite and > 0, got {val}")

    @property
    def inertia(self) -> np.ndarray:
        J = np.asarray(self.J, dtype=float)
        return np.diag(J) if J.ndim == 1 else J

    @property
    def gamma1(self) -> float:
        return (self.m1 * self.lc1 + self.m2 * self.l1) * self.g0

    @property
    def gamma2(self) -> float:
        return self.m2 * self.lc2 * self.g0

    @property
    def hover_thrust(self) -> float:
        return self.m * self.g0

    def packed(self) -> np.ndarray:
        """Flat parameter vector for the compiled kernels (cached; returns a copy)."""
        cached = self.__dict__.get("_packed_cache")
        if cached is None:
            cached = self._pack()
            object.__setattr__(self, "_packed_cache", cached)
        return cached.copy()

    def _pack(self) -> np.ndarray:
        J = self.inertia
        out = np.empty(PACKED_LEN)
        out[_M] = self.m
        out[_G0] = self.g0
        out[_J:_J + 9] = J.ravel()
        out[_JINV:_JINV + 9] = np.linalg.inv(J).ravel()
        out[_J1] = self.J1
        out[_J2] = self.J2
        out[_GAM1] = self.gamma1
        out[_GAM2] = self.gamma2
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "NominalParams":
        kw = dict(d)
        if "J" in kw:
            kw["J"] = tuple(np.asarray(kw["J"], dtype=float).ravel().tolist()) if np.ndim(kw["J"]) == 1 \
                else tuple(map(tuple, np.asarray(kw["J"], dtype=float).tolist()))
        return cls(**kw)


@dataclass
class SystemState:
    """Structured view of the 17-dim state vector."""

    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    w: np.ndarray = field(default_factory=lambda: np.zeros(3))
    qm: np.ndarray = field(default_factory=lambda: np.zeros(2))
    vm: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.p, self.v, self.q, self.w, self.qm, self.vm]).astype(float)

    @classmethod
    def from_vector(cls, x) -> "SystemState":
        x = np.asarray(x, dtype=float)
        if x.shape != (STATE_DIM,):
            raise ValueError(f"state must have shape ({STATE_DIM},), got {x.shape}")
        return cls(x[P_SL].copy(), x[V_SL].copy(), x[Q_SL].copy(), x[W_SL].copy(),
                   x[QM_SL].copy(), x[VM_SL].copy())


@dataclass
class ControlInput:
    f: float = 0.0
    M: np.ndarray = field(default_factory=lambda: np.zeros(3))
    um: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([[self.f], self.M, self.um]).astype(float)

    @classmethod
    def from_vector(cls, u) -> "ControlInput":
        u = np.asarray(u, dtype=float)
        if u.shape != (INPUT_DIM,):
            raise ValueError(f"input must have shape ({INPUT_DIM},), got {u.shape}")
        return cls(float(u[0]), u[1:4].copy(), u[4:6].copy())


def hover_state(qm=(-np.pi / 2, 0.0), p=(0.0, 0.0, 1.0)) -> np.ndarray:
    x = np.zeros(STATE_DIM)
    x[P_SL] = p
    x[6] = 1.0
    x[QM_SL] = qm
    return x


def hover_input(x: np.ndarray, params: NominalParams) -> np.ndarray:
    """Thrust balancing gravity plus joint gravity feedforward at x's arm angles."""
    u = np.zeros(INPUT_DIM)
    u[0] = params.hover_thrust
    u[4:6] = gravity_torque(x[QM_SL], params)
    return u


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


@nb.njit(cache=True)
def _gravity_torque(qm, pv):
    c12 = np.cos(qm[0] + qm[1])
    out = np.empty(2)
    out[0] = pv[_GAM1] * np.cos(qm[0]) + pv[_GAM2] * c12
    out[1] = pv[_GAM2] * c12
    return out


@nb.njit(cache=True)
def _deriv(x, u, pv):
    dx = np.empty(17)
    qw, qx, qy, qz = x[6], x[7], x[8], x[9]
    wx, wy, wz = x[10], x[11], x[12]
    m = pv[_M]
    f = u[0]
    # p' = v
    dx[0] = x[3]
    dx[1] = x[4]
    dx[2] = x[5]
    # v' = f/m z_B + g
    dx[3] = f / m * 2.0 * (qx * qz + qw * qy)
    dx[4] = f / m * 2.0 * (qy * qz - qw * qx)
    dx[5] = f / m * (1.0 - 2.0 * (qx * qx + qy * qy)) - pv[_G0]
    # q' = 1/2 q (x) [0, w]
    dx[6] = 0.5 * (-qx * wx - qy * wy - qz * wz)
    dx[7] = 0.5 * (qw * wx + qy * wz - qz * wy)
    dx[8] = 0.5 * (qw * wy + qz * wx - qx * wz)
    dx[9] = 0.5 * (qw * wz + qx * wy - qy * wx)
    # w' = J^-1 (M - w x Jw)
    Jw0 = pv[_J + 0] * wx + pv[_J + 1] * wy + pv[_J + 2] * wz
    Jw1 = pv[_J + 3] * wx + pv[_J + 4] * wy + pv[_J + 5] * wz
    Jw2 = pv[_J + 6] * wx + pv[_J + 7] * wy + pv[_J + 8] * wz
    r0 = u[1] - (wy * Jw2 - wz * Jw1)
    r1 = u[2] - (wz * Jw0 - wx * Jw2)
    r2 = u[3] - (wx * Jw1 - wy * Jw0)
    dx[10] = pv[_JINV + 0] * r0 + pv[_JINV + 1] * r1 + pv[_JINV + 2] * r2
    dx[11] = pv[_JINV + 3] * r0 + pv[_JINV + 4] * r1 + pv[_JINV + 5] * r2
    dx[12] = pv[_JINV + 6] * r0 + pv[_JINV + 7] * r1 + pv[_JINV + 8] * r2
    # arm
    gm = _gravity_torque(x[13:15], pv)
    dx[13] = x[15]
    dx[14] = x[16]
    dx[15] = (u[4] - gm[0]) / pv[_J1]
    dx[16] = (u[5] - gm[1]) / pv[_J2]
    return dx


@nb.njit(cache=True)
def _normalize_quat(x):
    n = np.sqrt(x[6] * x[6] + x[7] * x[7] + x[8] * x[8] + x[9] * x[9])
    for i in range(6, 10):
        x[i] = x[i] / n


@nb.njit(cache=True)
def _rk4(x, u, pv, dt):
    k1 = _deriv(x, u, pv)
    k2 = _deriv(x + 0.5 * dt * k1, u, pv)
    k3 = _deriv(x + 0.5 * dt * k2, u, pv)
    k4 = _deriv(x + dt * k3, u, pv)
    out = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    _normalize_quat(out)
    return out


@nb.njit(cache=True)
def _deriv_jac(x, u, pv):
    """Jacobians (A = d deriv/dx, B = d deriv/du) of the continuous dynamics."""
    A = np.zeros((17, 17))
    B = np.zeros((17, 6))
    qw, qx, qy, qz = x[6], x[7], x[8], x[9]
    wx, wy, wz = x[10], x[11], x[12]
    m = pv[_M]
    f = u[0]
    for i in range(3):
        A[i, 3 + i] = 1.0
    # translational
    c = f / m
    A[3, 6] = c * 2.0 * qy
    A[3, 7] = c * 2.0 * qz
    A[3, 8] = c * 2.0 * qw
    A[3, 9] = c * 2.0 * qx
    A[4, 6] = -c * 2.0 * qx
    A[4, 7] = -c * 2.0 * qw
    A[4, 8] = c * 2.0 * qz
    A[4, 9] = c * 2.0 * qy
    A[5, 7] = -c * 4.0 * qx
    A[5, 8] = -c * 4.0 * qy
    B[3, 0] = 2.0 * (qx * qz + qw * qy) / m
    B[4, 0] = 2.0 * (qy * qz - qw * qx) / m
    B[5, 0] = (1.0 - 2.0 * (qx * qx + qy * qy)) / m
    # quaternion kinematics
    A[6, 7] = -0.5 * wx
    A[6, 8] = -0.5 * wy
    A[6, 9] = -0.5 * wz
    A[6, 10] = -0.5 * qx
    A[6, 11] = -0.5 * qy
    A[6, 12] = -0.5 * qz
    A[7, 6] = 0.5 * wx
    A[7, 8] = 0.5 * wz
    A[7, 9] = -0.5 * wy
    A[7, 10] = 0.5 * qw
    A[7, 11] = -0.5 * qz
    A[7, 12] = 0.5 * qy
    A[8, 6] = 0.5 * wy
    A[8, 7] = -0.5 * wz
    A[8, 9] = 0.5 * wx
    A[8, 10] = 0.5 * qz
    A[8, 11] = 0.5 * qw
    A[8, 12] = -0.5 * qx
    A[9, 6] = 0.5 * wz
    A[9, 7] = 0.5 * wy
    A[9, 8] = -0.5 * wx
    A[9, 10] = -0.5 * qy
    A[9, 11] = 0.5 * qx
    A[9, 12] = 0.5 * qw
    # rotational: d/dw of -(w x Jw) = -[w]x J + [Jw]x
    w = x[10:13]
    Jw = np.empty(3)
    for i in range(3):
        Jw[i] = pv[_J + 3 * i] * w[0] + pv[_J + 3 * i + 1] * w[1] + pv[_J + 3 * i + 2] * w[2]
    Sw = np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])
    C = np.array([[0.0, -Jw[2], Jw[1]], [Jw[2], 0.0, -Jw[0]], [-Jw[1], Jw[0], 0.0]])
    for i in range(3):
        for j in range(3):
            acc = 0.0
            for k in range(3):
                acc += Sw[i, k] * pv[_J + 3 * k + j]
            C[i, j] -= acc
    for i in range(3):
        for j in range(3):
            acc = 0.0
            for k in range(3):
                acc += pv[_JINV + 3 * i + k] * C[k, j]
            A[10 + i, 10 + j] = acc
            B[10 + i, 1 + j] = pv[_JINV + 3 * i + j]
    # arm
    A[13, 15] = 1.0
    A[14, 16] = 1.0
    s1 = np.sin(x[13])
    s12 = np.sin(x[13] + x[14])
    g1, g2 = pv[_GAM1], pv[_GAM2]
    # d g_m / d qm
    d00 = -g1 * s1 - g2 * s12
    d01 = -g2 * s12
    A[15, 13] = -d00 / pv[_J1]
    A[15, 14] = -d01 / pv[_J1]
    A[16, 13] = -d01 / pv[_J2]
    A[16, 14] = -d01 / pv[_J2]
    B[15, 4] = 1.0 / pv[_J1]
    B[16, 5] = 1.0 / pv[_J2]
    return A, B


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------


def _as_vec(a, n, name):
    a = np.asarray(a, dtype=float)
    if a.shape != (n,):
        raise ValueError(f"{name} must have shape ({n},), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def _packed(params):
    return params.packed() if isinstance(params, NominalParams) else np.asarray(params, dtype=float)


def gravity_torque(qm, params: NominalParams) -> np.ndarray:
    """Joint gravity torques ``[g1 cos q1 + g2 cos(q1+q2), g2 cos(q1+q2)]``."""
    return _gravity_torque(_as_vec(qm, 2, "qm"), _packed(params))


def continuous_derivative(x, u, params: NominalParams) -> np.ndarray:
    x = _as_vec(x, STATE_DIM, "x")
    u = _as_vec(u, INPUT_DIM, "u")
    qn = np.linalg.norm(x[Q_SL])
    if abs(qn - 1.0) > 1e-6:
        raise ValueError(f"quaternion must be unit norm within 1e-6, got |q|={qn}")
    return _deriv(x, u, _packed(params))


def rk4_step(x, u, params: NominalParams, dt: float) -> np.ndarray:
    """One classical RK4 step with u held constant, quaternion renormalized.

    This is the discrete nominal model ``f_nom(x, u)``.
    """
    if not (dt > 0):
        raise ValueError(f"dt must be > 0, got {dt}")
    x = _as_vec(x, STATE_DIM, "x")
    u = _as_vec(u, INPUT_DIM, "u")
    return _rk4(x, u, _packed(params), float(dt))


def derivative_jacobians(x, u, params: NominalParams):
    """Analytic ``(d f/d x, d f/d u)`` of the continuous dynamics."""
    x = _as_vec(x, STATE_DIM, "x")
    u = _as_vec(u, INPUT_DIM, "u")
    return _deriv_jac(x, u, _packed(params))


def manipulator_energy(x, params: NominalParams) -> float:
    """Kinetic plus gravity potential of the arm subsystem; conserved when um = 0."""
    qm, vm = x[QM_SL], x[VM_SL]
    kin = 0.5 * (params.J1 * vm[0] ** 2 + params.J2 * vm[1] ** 2)
    pot = params.gamma1 * np.sin(qm[0]) + params.gamma2 * np.sin(qm[0] + qm[1])
    return float(kin + pot)


def quat_to_rotmat(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_rotmat(R) -> np.ndarray:
    """Scalar-first unit quaternion with non-negative scalar part."""
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q
