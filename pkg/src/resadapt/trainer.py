"""
Offline training of the encoder and the initial decoder.

Loss per mini-batch:

    mean_b || delta_b - Theta phi(H_b) ||^2  +  weight_decay * sum ||w||^2

over every encoder tensor and Theta. Gradients come from reverse-mode
autodiff; :func:`finite_difference_check` is the independent central-difference
oracle for them.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .encoder import (
    DTYPE,
    EncoderConfig,
    FeatureMap,
    check_shapes,
    encode_tensor,
    init_params,
    tensors_from_json,
    tensors_to_json,
)
from .simulation import Dataset

log = logging.getLogger(__name__)

THETA = "Theta"


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 100
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rng_seed: int = 0
    standardize: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class TrainReport:
    loss_curve: list = field(default_factory=list)
    final_rmse: float = float("nan")
    wall_clock: float = 0.0
    seed: int = 0


# ---------------------------------------------------------------------------
# standardization
# ---------------------------------------------------------------------------

_STD_FLOOR = 1e-12


@dataclass
class Standardizer:
    """Per-column affine maps for history columns and residual channels."""

    h_mean: np.ndarray
    h_std: np.ndarray
    d_mean: np.ndarray
    d_std: np.ndarray

    @staticmethod
    def _stats(a):
        mean = a.mean(axis=0)
        std = a.std(axis=0)
        # (near-)constant columns: unit scale so they map to zero
        std = np.where(std <= _STD_FLOOR * np.maximum(1.0, np.abs(mean)), 1.0, std)
        return mean, std

    @classmethod
    def fit(cls, data: Dataset) -> "Standardizer":
        hm, hs = cls._stats(data.H.reshape(-1, data.H.shape[-1]))
        dm, ds = cls._stats(data.delta)
        return cls(hm, hs, dm, ds)

    @classmethod
    def identity(cls, n_c: int, d: int) -> "Standardizer":
        return cls(np.zeros(n_c), np.ones(n_c), np.zeros(d), np.ones(d))

    def apply(self, data: Dataset) -> Dataset:
        return Dataset(self.scale_history(data.H), self.scale_delta(data.delta), data.t.copy(),
                       data.regime_id.copy(), data.x, data.u)

    def invert(self, data: Dataset) -> Dataset:
        return Dataset(data.H * self.h_std + self.h_mean, self.unscale_delta(data.delta), data.t.copy(),
                       data.regime_id.copy(), data.x, data.u)

    def scale_history(self, H):
        return (np.asarray(H, dtype=float) - self.h_mean) / self.h_std

    def scale_delta(self, d):
        return (np.asarray(d, dtype=float) - self.d_mean) / self.d_std

    def unscale_delta(self, d):
        return np.asarray(d, dtype=float) * self.d_std + self.d_mean

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("h_mean", "h_std", "d_mean", "d_std")}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(*(np.asarray(d[k], dtype=float) for k in ("h_mean", "h_std", "d_mean", "d_std")))


def standardize(data: Dataset) -> tuple[Dataset, Standardizer]:
    st = Standardizer.fit(data)
    return st.apply(data), st


# ---------------------------------------------------------------------------
# loss, gradient, optimizer
# ---------------------------------------------------------------------------


def _batch_arrays(batch):
    if isinstance(batch, Dataset):
        H, D = batch.H, batch.delta
    else:
        batch = list(batch)
        if not batch:
            raise ValueError("empty batch")
        H = np.stack([r.H for r in batch])
        D = np.stack([r.delta for r in batch])
    if len(H) == 0:
        raise ValueError("empty batch")
    return torch.as_tensor(np.asarray(H, dtype=float)), torch.as_tensor(np.asarray(D, dtype=float))


def _loss_terms(params, Theta, H, D, cfg, weight_decay, encoder=None):
    z = encoder(H) if encoder is not None else encode_tensor(H, params, cfg)
    err = D - z @ Theta.T
    data = (err ** 2).sum(dim=-1).mean()
    reg = sum((p ** 2).sum() for p in params.values()) + (Theta ** 2).sum()
    return data, data + weight_decay * reg


def batch_loss(params: dict, Theta, batch, cfg: EncoderConfig, weight_decay: float = 0.0,
               data_only: bool = False, encoder=None) -> float:
    """Mean squared residual error over the batch plus the weight-decay penalty.

    ``encoder`` optionally replaces the encoder forward pass (a frozen stub).
    """
    H, D = _batch_arrays(batch)
    with torch.no_grad():
        data, total = _loss_terms(params, torch.as_tensor(np.asarray(Theta, dtype=float)), H, D, cfg,
                                  weight_decay, encoder)
    return float(data if data_only else total)


def gradient(params: dict, Theta, batch, cfg: EncoderConfig, weight_decay: float = 0.0, encoder=None):
    """Exact reverse-mode gradients ``(grad_params, grad_Theta)`` of :func:`batch_loss`."""
    H, D = _batch_arrays(batch)
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    th = torch.as_tensor(np.asarray(Theta, dtype=float)).clone().requires_grad_(True)
    _, loss = _loss_terms(leaves, th, H, D, cfg, weight_decay, encoder)
    names = list(leaves)
    grads = torch.autograd.grad(loss, [leaves[n] for n in names] + [th], allow_unused=True)
    gp = {n: (g if g is not None else torch.zeros_like(leaves[n])).detach() for n, g in zip(names, grads[:-1])}
    return gp, grads[-1].detach().numpy()


@dataclass
class AdamState:
    step: int
    m: dict
    v: dict

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls(0, {k: torch.zeros_like(torch.as_tensor(v)) for k, v in params.items()},
                   {k: torch.zeros_like(torch.as_tensor(v)) for k, v in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update; returns new ``(params, state)``."""
    t = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = torch.as_tensor(grads[k], dtype=DTYPE)
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        new_p[k] = torch.as_tensor(p, dtype=DTYPE) - cfg.learning_rate * (m / c1) / (torch.sqrt(v / c2) + cfg.eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(t, new_m, new_v)


def init_theta(cfg: EncoderConfig, d: int = 17, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed + 7919)
    return rng.standard_normal((d, cfg.ell)) / math.sqrt(cfg.ell)


def train(dataset: Dataset, enc_cfg: EncoderConfig, train_cfg: TrainConfig,
          params: dict | None = None, Theta=None, progress: bool = False):
    """Mini-batch Adam on the (already standardized) dataset.

    Returns ``(params, Theta0, TrainReport)``. Deterministic for a given seed.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    t0 = time.perf_counter()
    params = init_params(enc_cfg, train_cfg.rng_seed) if params is None else dict(params)
    check_shapes(params, enc_cfg)
    Theta = init_theta(enc_cfg, dataset.delta.shape[1], train_cfg.rng_seed) if Theta is None else np.asarray(Theta)
    report = TrainReport(seed=train_cfg.rng_seed)
    if train_cfg.epochs == 0:
        report.wall_clock = time.perf_counter() - t0
        return params, np.array(Theta, dtype=float), report

    state_p = {k: v.clone() for k, v in params.items()}
    state_p[THETA] = torch.as_tensor(np.array(Theta, dtype=float))
    opt = AdamState.zeros_like(state_p)
    H_all = torch.as_tensor(dataset.H)
    D_all = torch.as_tensor(dataset.delta)
    rng = np.random.default_rng(train_cfg.rng_seed)
    N = len(dataset)
    bs = train_cfg.batch_size
    step = 0
    for epoch in range(train_cfg.epochs):
        perm = rng.permutation(N)
        total, count = 0.0, 0
        for s in range(0, N, bs):
            idx = torch.as_tensor(perm[s:s + bs])
            leaves = {k: v.requires_grad_(True) for k, v in state_p.items()}
            th = leaves.pop(THETA)
            data, loss = _loss_terms(leaves, th, H_all[idx], D_all[idx], enc_cfg, train_cfg.weight_decay)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}")
            names = list(leaves) + [THETA]
            grads = torch.autograd.grad(loss, list(leaves.values()) + [th])
            with torch.no_grad():
                state_p, opt = adam_step({k: (leaves[k] if k != THETA else th).detach() for k in names},
                                         dict(zip(names, grads)), opt, train_cfg)
            total += float(data.detach()) * len(idx)
            count += len(idx)
            step += 1
        report.loss_curve.append(total / count)
        if progress:
            log.info("epoch %d  loss %.6g", epoch, report.loss_curve[-1])
    Theta = state_p.pop(THETA).numpy()
    params = {k: v.detach() for k, v in state_p.items()}
    with torch.no_grad():
        sq = 0.0
        for s in range(0, N, 2048):
            z = encode_tensor(H_all[s:s + 2048], params, enc_cfg)
            sq += float(((D_all[s:s + 2048] - z @ torch.as_tensor(Theta).T) ** 2).sum())
    report.final_rmse = math.sqrt(sq / (N * D_all.shape[1]))
    report.wall_clock = time.perf_counter() - t0
    return params, Theta, report


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


@dataclass
class GradCheckResult:
    max_rel_error: float
    passed: bool
    tolerance: float
    per_tensor: dict  # name -> (worst rel error, flat index, analytic, numeric)
    n_coords: int

    def format(self) -> str:
        lines = [f"{'tensor':32s} {'worst_rel':>12s} {'index':>7s} {'analytic':>14s} {'numeric':>14s}"]
        for name, (err, idx, a, n) in sorted(self.per_tensor.items()):
            lines.append(f"{name:32s} {err:12.3e} {idx:7d} {a:14.6e} {n:14.6e}")
        lines.append(f"max relative error {self.max_rel_error:.3e} over {self.n_coords} coordinates "
                     f"(tol {self.tolerance:g}): {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def _allocate(sizes: dict, n: int) -> dict:
    names = list(sizes)
    alloc = {k: 1 for k in names}
    rest = max(n - len(names), 0)
    total = sum(sizes.values())
    for k in names:
        alloc[k] += int(rest * sizes[k] / total)
    k = 0
    while sum(alloc.values()) < n:
        alloc[names[k % len(names)]] += 1
        k += 1
    return {k: min(v, sizes[k]) for k, v in alloc.items()}


def finite_difference_check(params: dict, Theta, batch, cfg: EncoderConfig, weight_decay: float = 1e-5,
                            n_coords: int = 200, step: float = 1e-6, tol: float = 1e-5, seed: int = 0,
                            grad_scale: dict | None = None, floor: float = 1e-3) -> GradCheckResult:
    """Compare reverse-mode gradients to central differences on sampled coordinates.

    Coordinates are stratified so every tensor contributes at least one. The
    relative error is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    gradients that are zero by symmetry (e.g. the attention key bias) from
    turning round-off into a spurious failure. ``grad_scale`` multiplies the
    analytic gradient of named tensors (a hook to confirm the check can fail).
    """
    gp, gT = gradient(params, Theta, batch, cfg, weight_decay)
    analytic = {k: v.numpy().ravel() for k, v in gp.items()}
    analytic[THETA] = np.asarray(gT).ravel()
    for k, s in (grad_scale or {}).items():
        analytic[k] = analytic[k] * s
    values = {k: v.detach().numpy().copy() for k, v in params.items()}
    values[THETA] = np.array(Theta, dtype=float)
    H, D = _batch_arrays(batch)

    def loss_at(name, flat_idx, delta):
        arr = values[name].copy()
        arr.reshape(-1)[flat_idx] += delta
        p = {k: torch.as_tensor(values[k] if k != name else arr) for k in params}
        th = torch.as_tensor(values[THETA] if name != THETA else arr)
        with torch.no_grad():
            return float(_loss_terms(p, th, H, D, cfg, weight_decay)[1])

    rng = np.random.default_rng(seed)
    sizes = {k: max(v.size, 1) for k, v in values.items()}
    alloc = _allocate(sizes, n_coords)
    per_tensor, worst, count = {}, 0.0, 0
    for name, k in alloc.items():
        idxs = rng.choice(sizes[name], size=k, replace=False)
        best = (-1.0, 0, 0.0, 0.0)
        for i in idxs:
            num = (loss_at(name, i, step) - loss_at(name, i, -step)) / (2 * step)
            a = analytic[name][i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            if err > best[0]:
                best = (err, int(i), float(a), float(num))
            count += 1
        per_tensor[name] = best
        worst = max(worst, best[0])
    return GradCheckResult(worst, worst < tol, tol, per_tensor, count)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class ResidualModel:
    """Trained encoder, initial decoder and the standardization they were fit under."""

    params: dict
    cfg: EncoderConfig
    Theta0: np.ndarray
    stats: Standardizer
    train_cfg: TrainConfig | None = None
    report: TrainReport | None = None
    meta: dict = field(default_factory=dict)

    @property
    def feature_map(self) -> FeatureMap:
        return FeatureMap(self.params, self.cfg, self.stats.h_mean, self.stats.h_std)

    def features(self, H) -> np.ndarray:
        H = np.asarray(H, dtype=float)
        return self.feature_map.batch(H) if H.ndim == 3 else self.feature_map(H)

    def predict(self, H, Theta=None) -> np.ndarray:
        """Raw-unit residual prediction for history window(s)."""
        Th = self.Theta0 if Theta is None else Theta
        return self.stats.unscale_delta(self.features(H) @ np.asarray(Th).T)

    def save(self, path) -> None:
        doc = {
            "config": self.cfg.to_dict(),
            "tensors": tensors_to_json(self.params),
            "Theta0": {"shape": list(self.Theta0.shape), "data": self.Theta0.ravel().tolist()},
            "standardization": self.stats.to_dict(),
            "train": asdict(self.train_cfg) if self.train_cfg else None,
            "seed": self.train_cfg.rng_seed if self.train_cfg else None,
            "meta": self.meta,
        }
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path) -> "ResidualModel":
        doc = json.loads(Path(path).read_text())
        cfg = EncoderConfig.from_dict(doc["config"])
        params = {k: torch.as_tensor(v) for k, v in tensors_from_json(doc["tensors"]).items()}
        check_shapes(params, cfg)
        th = doc["Theta0"]
        Theta0 = np.asarray(th["data"], dtype=float).reshape(th["shape"])
        if Theta0.shape[1] != cfg.ell:
            raise ValueError(f"Theta0 has {Theta0.shape[1]} columns, latent dimension is {cfg.ell}")
        tc = TrainConfig(**doc["train"]) if doc.get("train") else None
        return cls(params, cfg, Theta0, Standardizer.from_dict(doc["standardization"]), tc, None,
                   doc.get("meta", {}))


def fit_residual_model(raw: Dataset, enc_cfg: EncoderConfig, train_cfg: TrainConfig,
                       progress: bool = False) -> ResidualModel:
    """Standardize (if configured), train, and bundle the result."""
    if train_cfg.standardize:
        data, st = standardize(raw)
    else:
        data, st = raw, Standardizer.identity(raw.H.shape[-1], raw.delta.shape[1])
    params, Theta0, report = train(data, enc_cfg, train_cfg, progress=progress)
    return ResidualModel(params, enc_cfg, Theta0, st, train_cfg, report)


def write_loss_curve(report: TrainReport, path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,mean_loss\n")
        for i, v in enumerate(report.loss_curve):
            fh.write(f"{i},{v!r}\n")
