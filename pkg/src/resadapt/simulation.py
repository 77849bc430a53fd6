"""
Ground-truth world, residual targets, history windows and dataset generation.

The world is the discrete system

    x_{k+1} = f_nom(x_k, u_k) + f_res(history) + eps_k

where ``f_res`` is an injected, regime-dependent residual acting on the
velocity and body-rate channels only. It is built from a payload/thrust
efficiency term and an arm-platform coupling term, passed through a first-order
lag so that it depends on past states and inputs.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dynamics import (
    INPUT_DIM,
    STATE_DIM,
    NominalParams,
    _normalize_quat,
    _rk4,
    gravity_torque,
    quat_from_rotmat,
    quat_to_rotmat,
)

N_CHANNELS = STATE_DIM + INPUT_DIM
# arm base in the body frame, below the platform centre
ARM_MOUNT = np.array([0.0, 0.0, -0.08])
LAG_DIM = 6


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class ResidualRegime:
    payload_mass: float = 0.0
    coupling_gain: float = 0.0
    lag_tau: float = 0.15
    active_from: float = 0.0
    active_until: float = math.inf
    thrust_efficiency: float = 1.0

    def __post_init__(self):
        if self.payload_mass < 0:
            raise ValueError("payload_mass must be >= 0")
        if not self.lag_tau > 0:
            raise ValueError("lag_tau must be > 0")
        if not self.thrust_efficiency > 0:
            raise ValueError("thrust_efficiency must be > 0")
        if self.active_until < self.active_from:
            raise ValueError("active_until must be >= active_from")


OFF_REGIME = ResidualRegime()


@dataclass
class TrajectoryConfig:
    """Reference family.

    ``family`` is ``"figure8"`` or ``"random"``. For figure-eights, ``plane`` is
    one of ``xz``, ``yz`` (vertical figure-eights) or ``x``, ``y`` (horizontal
    figure-eight with that major axis). ``plane_after`` switches the plane at
    ``switch_time``.
    """

    family: str = "figure8"
    amplitude: float = 0.8
    period: float = 10.0
    plane: str = "xz"
    plane_after: str | None = None
    switch_time: float | None = None
    height: float = 1.0
    joint_amplitude: tuple = (0.6, 0.5)
    joint_period: tuple = (7.0, 5.0)
    n_harmonics: int = 3

    def __post_init__(self):
        if self.family not in ("figure8", "random", "hover"):
            raise ValueError(f"unknown trajectory family {self.family!r}")
        for pl in (self.plane, self.plane_after):
            if pl is not None and pl not in ("xz", "yz", "x", "y"):
                raise ValueError(f"unknown plane {pl!r}")


@dataclass
class ScenarioConfig:
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    regimes: list = field(default_factory=list)
    duration: float = 10.0
    dt: float = 0.01
    noise_std: Sequence[float] | None = None
    rng_seed: int = 0
    history: int = 15
    divergence_bound: float = 1e3

    def __post_init__(self):
        if not self.dt > 0 or not self.duration > 0:
            raise ValueError("dt and duration must be > 0")
        regs = sorted(self.regimes, key=lambda r: r.active_from)
        for r in regs:
            if r.active_from < 0 or (math.isfinite(r.active_until) and r.active_until > self.duration + 1e-9):
                raise ValueError("regime interval outside [0, duration]")
        for a, b in zip(regs, regs[1:]):
            if b.active_from < a.active_until - 1e-12:
                raise ValueError("regime intervals overlap")
        self.regimes = regs
        if self.noise_std is not None:
            ns = np.asarray(self.noise_std, dtype=float)
            if ns.shape != (STATE_DIM,) or np.any(ns < 0):
                raise ValueError("noise_std must be 17 non-negative values")

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt))

    def noise_vector(self) -> np.ndarray:
        if self.noise_std is None:
            return default_noise_std(self.dt)
        return np.asarray(self.noise_std, dtype=float)

    def regime_at(self, t: float) -> tuple[int, ResidualRegime]:
        for i, r in enumerate(self.regimes):
            if r.active_from <= t < r.active_until:
                return i, r
        return -1, OFF_REGIME


def default_noise_std(dt: float) -> np.ndarray:
    """Process noise on velocity and body-rate channels, scaled with the step.

    Kinematic channels (position, attitude, joints) are noise free: disturbances
    enter as forces and torques. Per-axis levels sit at a few percent of the
    residual spread on that axis, so every dynamic channel stays learnable.
    """
    s = np.zeros(STATE_DIM)
    s[3:5] = 0.0008 * dt
    s[5] = 0.01 * dt
    s[10] = 0.006 * dt
    s[11] = 0.06 * dt
    s[12] = 0.0015 * dt
    return s


# ---------------------------------------------------------------------------
# injected residual
# ---------------------------------------------------------------------------


def _e(theta):
    return np.array([math.cos(theta), 0.0, math.sin(theta)])


def _de(theta):
    return np.array([-math.sin(theta), 0.0, math.cos(theta)])


def raw_residual(x, u, regime: ResidualRegime, params: NominalParams) -> np.ndarray:
    """Instantaneous residual accelerations ``[a_v (inertial, 3), a_w (body, 3)]``."""
    out = np.zeros(LAG_DIM)
    mp, k = regime.payload_mass, regime.coupling_gain
    eff = regime.thrust_efficiency
    if mp == 0.0 and k == 0.0 and eff == 1.0:
        return out
    R = quat_to_rotmat(x[6:10])
    zB = R[:, 2]
    m = params.m
    f = u[0]
    out[:3] = f * zB * (eff / (m + mp) - 1.0 / m)
    if k != 0.0:
        q1, q2 = x[13], x[14]
        w1, w2 = x[15], x[16]
        um = u[4:6]
        gm = gravity_torque(x[13:15], params)
        acc = np.array([(um[0] - gm[0]) / params.J1, (um[1] - gm[1]) / params.J2])
        q12, w12, a12 = q1 + q2, w1 + w2, acc[0] + acc[1]
        e1, e12, de1, de12 = _e(q1), _e(q12), _de(q1), _de(q12)
        r1 = ARM_MOUNT + params.lc1 * e1
        r2 = ARM_MOUNT + params.l1 * e1 + params.lc2 * e12
        ree = ARM_MOUNT + params.l1 * e1 + params.l2 * e12
        a_link1 = acc[0] * de1 - w1 * w1 * e1
        a_link12 = a12 * de12 - w12 * w12 * e12
        acc1 = params.lc1 * a_link1
        acc2 = params.l1 * a_link1 + params.lc2 * a_link12
        accee = params.l1 * a_link1 + params.l2 * a_link12
        gB = R.T @ np.array([0.0, 0.0, -params.g0])
        # arm weight, payload weight and inertial reaction forces about the CoM
        tau = (params.m1 * np.cross(r1, gB) + params.m2 * np.cross(r2, gB) + mp * np.cross(ree, gB)
               - params.m1 * np.cross(r1, acc1) - params.m2 * np.cross(r2, acc2) - mp * np.cross(ree, accee))
        tau[1] += um[0] - gm[0]
        F_B = -(params.m1 * acc1 + params.m2 * acc2 + mp * accee)
        out[:3] += k * (R @ F_B) / (m + mp)
        out[3:] = k * np.linalg.solve(params.inertia, tau)
    return out


def injected_residual(x, u, lag_state, regime: ResidualRegime, dt: float,
                      params: NominalParams | None = None):
    """Lagged residual for one step.

    Returns ``(residual (17,), next lag_state (6,))``. The raw acceleration
    residual drives a first-order lag with time constant ``regime.lag_tau``
    (exact zero-order-hold discretization); the lag output times ``dt`` lands on
    the velocity and body-rate channels. All other channels are zero.
    """
    if not dt > 0:
        raise ValueError("dt must be > 0")
    params = params or NominalParams()
    raw = raw_residual(x, u, regime, params)
    a = -math.expm1(-dt / regime.lag_tau)
    lag_next = lag_state + a * (raw - lag_state)
    res = np.zeros(STATE_DIM)
    res[3:6] = lag_next[:3] * dt
    res[10:13] = lag_next[3:] * dt
    return res, lag_next


def true_step(x, u, lag_state, regime: ResidualRegime, params: NominalParams,
              noise_rng: np.random.Generator | None, dt: float, noise_std=None):
    """Advance the ground-truth world one step. Returns ``(x_next, lag_next)``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
        raise ValueError("non-finite state or input")
    xn = _rk4(x, u, params.packed(), float(dt))
    res, lag_next = injected_residual(x, u, lag_state, regime, dt, params)
    xn = xn + res
    if noise_rng is not None and noise_std is not None:
        ns = np.asarray(noise_std, dtype=float)
        xn = xn + ns * noise_rng.standard_normal(STATE_DIM)
        # the residual never touches q, so only noise can denormalize it
        _normalize_quat(xn)
    return xn, lag_next


def residual_target(x_next, x, u, params: NominalParams, dt: float) -> np.ndarray:
    """One-step residual ``x_next - f_nom(x, u)`` as a plain 17-vector difference."""
    return np.asarray(x_next, dtype=float) - _rk4(np.asarray(x, float), np.asarray(u, float),
                                                  params.packed(), float(dt))


# ---------------------------------------------------------------------------
# history
# ---------------------------------------------------------------------------


class HistoryBuffer:
    """Ring of the last h+1 ``[x, u]`` rows."""

    def __init__(self, h: int):
        if h < 0:
            raise ValueError("h must be >= 0")
        self.h = h
        self.rows: deque = deque(maxlen=h + 1)

    def __len__(self):
        return len(self.rows)

    def push(self, x, u) -> np.ndarray:
        self.rows.append(np.concatenate([np.asarray(x, float), np.asarray(u, float)]))
        return self.matrix()

    def replace_last_input(self, u) -> None:
        """Overwrite the input part of the newest row (used once the applied input is known)."""
        if not self.rows:
            raise ValueError("empty history")
        self.rows[-1] = np.concatenate([self.rows[-1][:STATE_DIM], np.asarray(u, float)])

    def matrix(self) -> np.ndarray:
        if not self.rows:
            raise ValueError("empty history")
        rows = list(self.rows)
        if len(rows) < self.h + 1:
            rows = [rows[0]] * (self.h + 1 - len(rows)) + rows
        return np.stack(rows)


def push_history(buffer: HistoryBuffer, x, u, h: int) -> np.ndarray:
    """Append ``(x, u)`` and return the oldest-first ``(h+1, 23)`` window.

    During warm-up the oldest available row is repeated to fill the window.
    """
    if buffer.h != h:
        raise ValueError(f"buffer holds h={buffer.h}, requested h={h}")
    return buffer.push(x, u)


# ---------------------------------------------------------------------------
# references and the data-collection controller
# ---------------------------------------------------------------------------


_PLANE_AXES = {"xz": (0, 2), "yz": (1, 2), "x": (0, 1), "y": (1, 0)}
_JOINT_LIMIT = 0.78


def _figure8(plane: str, A: float, w: float, t, height: float):
    """Gerono lemniscate in ``plane``; vectorized over ``t``."""
    t = np.asarray(t, dtype=float)
    s, c = np.sin(w * t), np.cos(w * t)
    s2, c2 = np.sin(2 * w * t), np.cos(2 * w * t)
    a = (A * s, 0.5 * A * s2)
    da = (A * w * c, A * w * c2)
    dda = (-A * w * w * s, -2.0 * A * w * w * s2)
    p, v, acc = (np.zeros(t.shape + (3,)) for _ in range(3))
    for k, ax in enumerate(_PLANE_AXES[plane]):
        p[..., ax], v[..., ax], acc[..., ax] = a[k], da[k], dda[k]
    p[..., 2] += height
    return p, v, acc


@dataclass
class ReferenceSample:
    p: np.ndarray    # (n, 3)
    v: np.ndarray
    a: np.ndarray
    q: np.ndarray    # (n, 2) joint angles
    dq: np.ndarray
    ddq: np.ndarray


class Reference:
    """Time-parametrized position/velocity/acceleration and joint reference."""

    def __init__(self, cfg: TrajectoryConfig, seed: int = 0):
        self.cfg = cfg
        if cfg.family == "random":
            rng = np.random.default_rng(seed)
            n = cfg.n_harmonics
            self._amp = rng.uniform(0.15, 0.45, size=(3, n)) * np.array([[1.0], [1.0], [0.5]])
            self._om = rng.uniform(0.25, 1.4, size=(3, n))
            self._ph = rng.uniform(0, 2 * np.pi, size=(3, n))
            self._jamp = rng.uniform(0.2, 0.45, size=(2, n))
            self._jom = rng.uniform(0.5, 2.0, size=(2, n))
            self._jph = rng.uniform(0, 2 * np.pi, size=(2, n))

    def sample(self, ts) -> ReferenceSample:
        """Vectorized reference at times ``ts``."""
        cfg = self.cfg
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        n = len(ts)
        if cfg.family == "hover":
            p, v, a = np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 3))
            p[:, 2] = cfg.height
        elif cfg.family == "figure8":
            w = 2 * np.pi / cfg.period
            p, v, a = _figure8(cfg.plane, cfg.amplitude, w, ts, cfg.height)
            if cfg.plane_after is not None and cfg.switch_time is not None:
                after = ts >= cfg.switch_time
                if np.any(after):
                    p2, v2, a2 = _figure8(cfg.plane_after, cfg.amplitude, w, ts[after], cfg.height)
                    p[after], v[after], a[after] = p2, v2, a2
        else:
            arg = self._om[None] * ts[:, None, None] + self._ph[None]
            p = (self._amp * (np.sin(arg) - np.sin(self._ph))).sum(axis=2)
            v = (self._amp * self._om * np.cos(arg)).sum(axis=2)
            a = -(self._amp * self._om ** 2 * np.sin(arg)).sum(axis=2)
            p[:, 2] += cfg.height
        if cfg.family == "random":
            arg = self._jom[None] * ts[:, None, None] + self._jph[None]
            r = (self._jamp * np.sin(arg)).sum(axis=2)
            dr = (self._jamp * self._jom * np.cos(arg)).sum(axis=2)
            ddr = -(self._jamp * self._jom ** 2 * np.sin(arg)).sum(axis=2)
            # smooth saturation keeps the joints inside +-_JOINT_LIMIT
            th = np.tanh(r / _JOINT_LIMIT)
            sech2 = 1.0 - th * th
            q = _JOINT_LIMIT * th
            dq = sech2 * dr
            ddq = sech2 * ddr - 2.0 * th * sech2 * dr * dr / _JOINT_LIMIT
        else:
            om = 2 * np.pi / np.asarray(cfg.joint_period, dtype=float)
            amp = np.asarray(cfg.joint_amplitude, dtype=float)
            q = amp * np.sin(om * ts[:, None])
            dq = amp * om * np.cos(om * ts[:, None])
            ddq = -amp * om * om * np.sin(om * ts[:, None])
        q = q + np.array([-np.pi / 2, 0.0])
        return ReferenceSample(p, v, a, q, dq, ddq)

    def position(self, t: float):
        s = self.sample(t)
        return s.p[0], s.v[0], s.a[0]

    def joints(self, t: float):
        s = self.sample(t)
        return s.q[0], s.dq[0]

    def states(self, ts) -> np.ndarray:
        s = self.sample(ts)
        X = np.zeros((len(s.p), STATE_DIM))
        X[:, 0:3], X[:, 3:6], X[:, 6] = s.p, s.v, 1.0
        X[:, 13:15], X[:, 15:17] = s.q, s.dq
        return X

    def state(self, t: float) -> np.ndarray:
        return self.states(t)[0]

    def input(self, t: float, params: NominalParams) -> np.ndarray:
        qm, _ = self.joints(t)
        u = np.zeros(INPUT_DIM)
        u[0] = params.hover_thrust
        u[4:6] = gravity_torque(qm, params)
        return u


@dataclass
class PDGains:
    kp_pos: float = 6.0
    kd_pos: float = 4.0
    kp_att: float = 60.0
    kd_att: float = 12.0
    kp_joint: float = 2.0
    kd_joint: float = 0.08
    max_tilt: float = 0.5


class PDController:
    """Cascaded PD tracking controller with gravity feedforward on the arm.

    Attitude gains are expressed as angular-acceleration gains and scaled by the
    platform inertia.
    """

    def __init__(self, params: NominalParams, ref: Reference, gains: PDGains | None = None):
        self.params = params
        self.ref = ref
        self.gains = gains or PDGains()
        self._J = params.inertia

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        g, P = self.gains, self.params
        p_r, v_r, a_r = self.ref.position(t)
        qm_r, vm_r = self.ref.joints(t)
        acc = a_r + g.kp_pos * (p_r - x[0:3]) + g.kd_pos * (v_r - x[3:6])
        F = P.m * (acc + np.array([0.0, 0.0, P.g0]))
        # limit tilt of the commanded thrust direction
        horiz = np.linalg.norm(F[:2])
        max_h = math.tan(g.max_tilt) * max(F[2], 0.1)
        if horiz > max_h:
            F[:2] *= max_h / horiz
        F[2] = max(F[2], 0.1)
        R = quat_to_rotmat(x[6:10])
        f = float(F @ R[:, 2])
        zd = F / np.linalg.norm(F)
        xc = np.array([1.0, 0.0, 0.0])
        yd = np.cross(zd, xc)
        yd /= np.linalg.norm(yd)
        xd = np.cross(yd, zd)
        Rd = np.column_stack([xd, yd, zd])
        Re = Rd.T @ R
        e_R = 0.5 * np.array([Re[2, 1] - Re[1, 2], Re[0, 2] - Re[2, 0], Re[1, 0] - Re[0, 1]])
        w = x[10:13]
        M = self._J @ (-g.kp_att * e_R - g.kd_att * w) + np.cross(w, self._J @ w)
        um = gravity_torque(x[13:15], P) + g.kp_joint * (qm_r - x[13:15]) + g.kd_joint * (vm_r - x[15:17])
        u = np.empty(INPUT_DIM)
        u[0], u[1:4], u[4:6] = max(f, 0.0), M, um
        return u


def pd_gains_for(dt: float) -> PDGains:
    """Gains that keep the sampled loop well damped at the given step."""
    if dt <= 0.02:
        return PDGains()
    return PDGains(kp_pos=3.0, kd_pos=2.6, kp_att=30.0, kd_att=7.0, kp_joint=0.8, kd_joint=0.025)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class SampleRecord:
    H: np.ndarray
    delta: np.ndarray
    t: float
    regime_id: int


@dataclass
class Dataset:
    """Columnar store of ``(H_k, delta_{k+1})`` samples.

    Behaves as a sequence of :class:`SampleRecord`.
    """

    H: np.ndarray          # (N, h+1, 23)
    delta: np.ndarray      # (N, 17)
    t: np.ndarray          # (N,)
    regime_id: np.ndarray  # (N,) int
    x: np.ndarray | None = None  # (N, 17) state at t (for logs)
    u: np.ndarray | None = None  # (N, 6)

    def __len__(self):
        return len(self.t)

    def __getitem__(self, i):
        if isinstance(i, slice) or isinstance(i, np.ndarray):
            return self.subset(np.arange(len(self))[i] if isinstance(i, slice) else i)
        return SampleRecord(self.H[i], self.delta[i], float(self.t[i]), int(self.regime_id[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def h(self) -> int:
        return self.H.shape[1] - 1

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.H[idx], self.delta[idx], self.t[idx], self.regime_id[idx],
                       None if self.x is None else self.x[idx], None if self.u is None else self.u[idx])

    @staticmethod
    def concatenate(parts: Sequence["Dataset"]) -> "Dataset":
        has_xu = all(p.x is not None for p in parts)
        return Dataset(
            np.concatenate([p.H for p in parts]),
            np.concatenate([p.delta for p in parts]),
            np.concatenate([p.t for p in parts]),
            np.concatenate([p.regime_id for p in parts]),
            np.concatenate([p.x for p in parts]) if has_xu else None,
            np.concatenate([p.u for p in parts]) if has_xu else None,
        )

    @classmethod
    def from_records(cls, records: Sequence[SampleRecord]) -> "Dataset":
        return cls(np.stack([r.H for r in records]), np.stack([r.delta for r in records]),
                   np.array([r.t for r in records], dtype=float),
                   np.array([r.regime_id for r in records], dtype=np.int64))


@dataclass
class Trajectory:
    """Full per-step log of one world run."""

    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    delta: np.ndarray
    injected: np.ndarray
    regime_id: np.ndarray


def simulate(cfg: ScenarioConfig, controller: Callable[[float, np.ndarray], np.ndarray] | None = None,
             params: NominalParams | None = None, x0: np.ndarray | None = None) -> tuple[Dataset, Trajectory]:
    """Run the world under ``controller`` and record every step."""
    params = params or NominalParams()
    ref = Reference(cfg.trajectory, seed=cfg.rng_seed)
    if controller is None:
        controller = PDController(params, ref, pd_gains_for(cfg.dt))
    noise_rng = np.random.default_rng(np.random.SeedSequence(cfg.rng_seed).spawn(1)[0])
    noise_std = cfg.noise_vector()
    pv = params.packed()
    dt = cfg.dt
    x = ref.state(0.0) if x0 is None else np.asarray(x0, dtype=float).copy()
    lag = np.zeros(LAG_DIM)
    buf = HistoryBuffer(cfg.history)
    n = cfg.n_steps
    h = cfg.history
    Hs, ds, ts, rids = [], [], [], []
    log_t, log_x, log_u, log_d, log_res, log_r = [], [], [], [], [], []
    for k in range(n):
        t = k * dt
        u = np.asarray(controller(t, x), dtype=float)
        rid, regime = cfg.regime_at(t)
        H = buf.push(x, u)
        xn, lag = true_step(x, u, lag, regime, params, noise_rng, dt, noise_std)
        if not np.all(np.isfinite(xn)) or np.max(np.abs(xn)) > cfg.divergence_bound:
            raise DivergenceError(f"trajectory diverged at t={t:.3f}s (|x|max={np.max(np.abs(xn)):.3g})")
        nominal = _rk4(x, u, pv, dt)
        delta = xn - nominal
        log_t.append(t)
        log_x.append(x)
        log_u.append(u)
        log_d.append(delta)
        log_res.append(np.concatenate([lag[:3] * dt, lag[3:] * dt]))
        log_r.append(rid)
        if k >= h:
            Hs.append(H)
            ds.append(delta)
            ts.append(t)
            rids.append(rid)
        x = xn
    N = len(ts)
    data = Dataset(
        np.stack(Hs) if N else np.zeros((0, h + 1, N_CHANNELS)),
        np.stack(ds) if N else np.zeros((0, STATE_DIM)),
        np.asarray(ts, dtype=float),
        np.asarray(rids, dtype=np.int64),
        np.stack(log_x)[h:] if N else None,
        np.stack(log_u)[h:] if N else None,
    )
    traj = Trajectory(np.asarray(log_t), np.stack(log_x), np.stack(log_u), np.stack(log_d),
                      np.stack(log_res), np.asarray(log_r, dtype=np.int64))
    return data, traj


def generate_dataset(cfg: ScenarioConfig, controller=None, params: NominalParams | None = None) -> Dataset:
    """Closed-loop data collection: one ``(H_k, delta_{k+1})`` sample per step.

    The first ``h`` steps are warm-up (history not yet full) and are dropped.
    """
    data, _ = simulate(cfg, controller, params)
    return data


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def write_dataset_jsonl(data: Dataset, path) -> None:
    with open(path, "w") as fh:
        for i in range(len(data)):
            rec = {"t": float(data.t[i]), "regime_id": int(data.regime_id[i]),
                   "H": data.H[i].tolist(), "delta": data.delta[i].tolist()}
            fh.write(json.dumps(rec) + "\n")


def read_dataset_jsonl(path) -> Dataset:
    recs = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                recs.append(SampleRecord(np.asarray(d["H"], dtype=float), np.asarray(d["delta"], dtype=float),
                                         float(d["t"]), int(d["regime_id"])))
    return Dataset.from_records(recs)


def write_dataset_binary(data: Dataset, path) -> Path:
    """Packed little-endian float64 records ``[t, regime_id, H..., delta...]`` plus a JSON sidecar."""
    path = Path(path)
    N, rows, n_c = data.H.shape
    packed = np.concatenate([data.t[:, None], data.regime_id[:, None].astype(float),
                             data.H.reshape(N, -1), data.delta], axis=1)
    packed.astype("<f8").tofile(path)
    header = {"h": rows - 1, "n_c": n_c, "d": data.delta.shape[1], "count": N, "dtype": "f64-le"}
    side = path.with_suffix(path.suffix + ".json")
    side.write_text(json.dumps(header, indent=2))
    return side


def read_dataset_binary(path) -> Dataset:
    path = Path(path)
    header = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    if header.get("dtype") != "f64-le":
        raise ValueError(f"unsupported dtype {header.get('dtype')!r}")
    h, n_c, d, N = header["h"], header["n_c"], header["d"], header["count"]
    width = 2 + (h + 1) * n_c + d
    raw = np.fromfile(path, dtype="<f8")
    if raw.size != N * width:
        raise ValueError(f"binary size mismatch: expected {N * width} values, got {raw.size}")
    raw = raw.reshape(N, width).astype(float)
    return Dataset(raw[:, 2:2 + (h + 1) * n_c].reshape(N, h + 1, n_c).copy(), raw[:, 2 + (h + 1) * n_c:].copy(),
                   raw[:, 0].copy(), raw[:, 1].astype(np.int64))


def write_run_log(traj: Trajectory, path) -> None:
    header = (["t"] + [f"x{i}" for i in range(STATE_DIM)] + [f"u{i}" for i in range(INPUT_DIM)]
              + [f"delta{i}" for i in range(STATE_DIM)] + ["regime_id"])
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for k in range(len(traj.t)):
            vals = [traj.t[k], *traj.x[k], *traj.u[k], *traj.delta[k]]
            fh.write(",".join(repr(float(v)) for v in vals) + f",{int(traj.regime_id[k])}\n")


def scenario_to_dict(cfg: ScenarioConfig) -> dict:
    d = asdict(cfg)
    d["regimes"] = [asdict(r) for r in cfg.regimes]
    if cfg.noise_std is not None:
        d["noise_std"] = [float(v) for v in cfg.noise_std]
    return d


def level_quaternion(yaw: float = 0.0) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return quat_from_rotmat(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]))
