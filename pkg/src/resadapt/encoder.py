"""
Structured history encoder and the linear residual readout.

The encoder maps a history window ``H`` of shape ``(h+1, n_c)`` to a latent
feature ``z`` of length ``ell``:

1. each channel's column is zero-padded at the oldest end, cut into ``L``
   segments of ``L_seg`` samples and embedded with a shared linear map plus a
   learned (segment, channel) embedding;
2. ``n_layers`` x (temporal self-attention per channel, then cross-variable
   self-attention per segment), each followed by a feed-forward block, with
   post-residual layer normalization;
3. attention pooling over all (segment, channel) tokens and an ELU MLP head.

Everything is written functionally over a flat ``dict[str, Tensor]`` of
parameters so the trainer can differentiate and step them directly. All
tensors are float64.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float64
VARIANTS = ("full", "temporal", "current")


@dataclass(frozen=True)
class EncoderConfig:
    h: int = 15
    L_seg: int = 5
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 3
    d_ff: int = 64
    proj_dims: tuple = (32,)
    ell: int = 16
    n_c: int = 23
    variant: str = "full"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.ell < 1 or self.h < 0 or self.L_seg < 1 or self.n_layers < 0:
            raise ValueError("invalid encoder dimensions")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        object.__setattr__(self, "proj_dims", tuple(int(d) for d in self.proj_dims))

    @property
    def n_segments(self) -> int:
        return math.ceil((self.h + 1) / self.L_seg)

    @property
    def n_pad(self) -> int:
        return self.n_segments * self.L_seg - (self.h + 1)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        d = asdict(self)
        d["proj_dims"] = list(self.proj_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def param_shapes(cfg: EncoderConfig) -> dict[str, tuple]:
    """Name -> shape for every trainable tensor."""
    d, ff = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple] = {}
    if cfg.variant == "current":
        dims = [cfg.n_c, d, *cfg.proj_dims, cfg.ell]
        for i in range(len(dims) - 1):
            shapes[f"mlp.{i}.W"] = (dims[i + 1], dims[i])
            shapes[f"mlp.{i}.b"] = (dims[i + 1],)
        return shapes
    shapes["W_emb"] = (d, cfg.L_seg)
    shapes["emb"] = (cfg.n_segments * cfg.n_c, d)
    blocks = ("t", "c") if cfg.variant == "full" else ("t",)
    for layer in range(cfg.n_layers):
        for b in blocks:
            pre = f"layers.{layer}.{b}."
            for w in ("Wq", "Wk", "Wv", "Wo"):
                shapes[pre + w] = (d, d)
                shapes[pre + "b" + w[1]] = (d,)
            shapes[pre + "ln1_g"] = (d,)
            shapes[pre + "ln1_b"] = (d,)
            shapes[pre + "W1"] = (ff, d)
            shapes[pre + "b1"] = (ff,)
            shapes[pre + "W2"] = (d, ff)
            shapes[pre + "b2"] = (d,)
            shapes[pre + "ln2_g"] = (d,)
            shapes[pre + "ln2_b"] = (d,)
    shapes["pool_w"] = (d,)
    dims = [d, *cfg.proj_dims, cfg.ell]
    for i in range(len(dims) - 1):
        shapes[f"proj.{i}.W"] = (dims[i + 1], dims[i])
        shapes[f"proj.{i}.b"] = (dims[i + 1],)
    return shapes


def init_params(cfg: EncoderConfig, seed: int = 0) -> dict[str, torch.Tensor]:
    """Random initial parameters: N(0, 1/fan_in) weights, zero biases, unit LN gains."""
    gen = torch.Generator().manual_seed(int(seed))
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "emb":
            t = 0.02 * torch.randn(shape, generator=gen, dtype=DTYPE)
        elif leaf.endswith("_g"):
            t = torch.ones(shape, dtype=DTYPE)
        elif len(shape) == 2 or name == "pool_w":
            fan_in = shape[-1]
            t = torch.randn(shape, generator=gen, dtype=DTYPE) / math.sqrt(fan_in)
        else:
            t = torch.zeros(shape, dtype=DTYPE)
        params[name] = t
    return params


def check_shapes(params: dict, cfg: EncoderConfig) -> None:
    expected = param_shapes(cfg)
    missing = set(expected) - set(params)
    extra = set(params) - set(expected)
    if missing or extra:
        raise ValueError(f"parameter set mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for name, shape in expected.items():
        if tuple(params[name].shape) != tuple(shape):
            raise ValueError(f"{name}: expected shape {shape}, got {tuple(params[name].shape)}")
        if not torch.all(torch.isfinite(params[name])):
            raise ValueError(f"{name}: non-finite values")


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def _as_tensor(a) -> torch.Tensor:
    if isinstance(a, torch.Tensor):
        return a.to(DTYPE)
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def multihead_attention(X: torch.Tensor, p: dict, pre: str, n_heads: int):
    """Self-attention over the second-to-last axis of ``X (..., T, d)``.

    Returns ``(output, weights)`` with weights of shape ``(..., heads, T, T)``.
    """
    *lead, T, d = X.shape
    dh = d // n_heads

    def proj(w):
        Y = X @ p[pre + "W" + w].T + p[pre + "b" + w]
        return Y.reshape(*lead, T, n_heads, dh).transpose(-3, -2)

    Q, K, V = proj("q"), proj("k"), proj("v")
    scores = Q @ K.transpose(-1, -2) / math.sqrt(dh)
    A = torch.softmax(scores, dim=-1)
    out = (A @ V).transpose(-3, -2).reshape(*lead, T, d)
    return out @ p[pre + "Wo"].T + p[pre + "bo"], A


def _layer_norm(X, g, b, eps=1e-5):
    return F.layer_norm(X, (X.shape[-1],), g, b, eps)


def _attention_block(X, p, pre, n_heads):
    att, A = multihead_attention(X, p, pre, n_heads)
    Y = _layer_norm(X + att, p[pre + "ln1_g"], p[pre + "ln1_b"])
    ff = F.elu(Y @ p[pre + "W1"].T + p[pre + "b1"]) @ p[pre + "W2"].T + p[pre + "b2"]
    return _layer_norm(Y + ff, p[pre + "ln2_g"], p[pre + "ln2_b"]), A


def pad_history(H, cfg: EncoderConfig, fill: float = 0.0) -> torch.Tensor:
    """Prepend ``n_pad`` rows of ``fill`` so the window splits into whole segments."""
    H = _as_tensor(H)
    pad = torch.full((*H.shape[:-2], cfg.n_pad, H.shape[-1]), float(fill), dtype=DTYPE)
    return torch.cat([pad, H], dim=-2)


def segment_embed(H, params: dict, cfg: EncoderConfig) -> torch.Tensor:
    """Tokens ``Z`` of shape ``(..., L, n_c, d_model)``.

    ``H`` may be the raw ``(h+1)``-row window or an already padded
    ``L * L_seg``-row window; padded slots are masked to zero either way, so
    their content never reaches the encoder.
    """
    H = _as_tensor(H)
    rows = H.shape[-2]
    L, Ls = cfg.n_segments, cfg.L_seg
    if H.shape[-1] != cfg.n_c:
        raise ValueError(f"history has {H.shape[-1]} channels, config expects {cfg.n_c}")
    if rows == cfg.h + 1 and cfg.n_pad:
        H = pad_history(H, cfg)
    elif rows == L * Ls and cfg.n_pad:
        mask = torch.ones(rows, 1, dtype=DTYPE)
        mask[: cfg.n_pad] = 0.0
        H = H * mask
    elif rows != cfg.h + 1:
        raise ValueError(f"history has {rows} rows, expected {cfg.h + 1} (or {L * Ls} padded)")
    S = H.reshape(*H.shape[:-2], L, Ls, cfg.n_c)
    Z = torch.einsum("...isc,ds->...icd", S, params["W_emb"])
    return Z + params["emb"].reshape(L, cfg.n_c, cfg.d_model)


def temporal_attention(Z: torch.Tensor, params: dict, layer: int, cfg: EncoderConfig, return_weights=False):
    """Per-channel self-attention across the ``L`` segments of ``Z (..., L, n_c, d)``."""
    X = Z.transpose(-3, -2)  # (..., n_c, L, d)
    Y, A = _attention_block(X, params, f"layers.{layer}.t.", cfg.n_heads)
    out = Y.transpose(-3, -2)
    return (out, A) if return_weights else out


def cross_variable_attention(Z: torch.Tensor, params: dict, layer: int, cfg: EncoderConfig, return_weights=False):
    """Per-segment self-attention across the ``n_c`` channels of ``Z (..., L, n_c, d)``."""
    out, A = _attention_block(Z, params, f"layers.{layer}.c.", cfg.n_heads)
    return (out, A) if return_weights else out


def _mlp(x, params, prefix, n_layers):
    for i in range(n_layers):
        x = x @ params[f"{prefix}.{i}.W"].T + params[f"{prefix}.{i}.b"]
        if i < n_layers - 1:
            x = F.elu(x)
    return x


def pool_and_project(Zc: torch.Tensor, params: dict, cfg: EncoderConfig, return_weights=False):
    """Joint softmax pooling over all (segment, channel) tokens, then the ELU projection head."""
    scores = Zc @ params["pool_w"]  # (..., L, n_c); a scalar bias would cancel in the softmax
    flat = scores.reshape(*scores.shape[:-2], -1)
    alpha = torch.softmax(flat, dim=-1).reshape(scores.shape)
    pooled = torch.einsum("...ic,...icd->...d", alpha, Zc)
    z = _mlp(pooled, params, "proj", len(cfg.proj_dims) + 1)
    return (z, alpha, pooled) if return_weights else z


def encode_tensor(H: torch.Tensor, params: dict, cfg: EncoderConfig) -> torch.Tensor:
    """Differentiable forward pass, ``(..., h+1, n_c) -> (..., ell)``."""
    if cfg.variant == "current":
        if H.shape[-2] != cfg.h + 1:
            raise ValueError(f"history has {H.shape[-2]} rows, expected {cfg.h + 1}")
        return _mlp(H[..., -1, :], params, "mlp", len(cfg.proj_dims) + 2)
    Z = segment_embed(H, params, cfg)
    for layer in range(cfg.n_layers):
        Z = temporal_attention(Z, params, layer, cfg)
        if cfg.variant == "full":
            Z = cross_variable_attention(Z, params, layer, cfg)
    return pool_and_project(Z, params, cfg)


def encode(H, params: dict, cfg: EncoderConfig):
    """Latent feature(s) for one window or a batch of windows.

    NumPy in, NumPy out; tensors pass through as tensors.
    """
    if isinstance(H, torch.Tensor):
        return encode_tensor(H.to(DTYPE), params, cfg)
    with torch.no_grad():
        return encode_tensor(_as_tensor(H), params, cfg).numpy()


def predict_residual(z, Theta) -> np.ndarray:
    """Linear readout ``Theta @ z``."""
    Theta = np.asarray(Theta, dtype=float)
    z = np.asarray(z, dtype=float)
    if Theta.ndim != 2 or z.shape[-1] != Theta.shape[1]:
        raise ValueError(f"shape mismatch: Theta {Theta.shape}, z {z.shape}")
    return z @ Theta.T


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def tensors_to_json(tensors: dict) -> dict:
    out = {}
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t, dtype=float)
        out[name] = {"shape": list(arr.shape), "data": arr.ravel().tolist()}
    return out


def tensors_from_json(d: dict) -> dict[str, np.ndarray]:
    out = {}
    for name, rec in d.items():
        arr = np.asarray(rec["data"], dtype=float)
        shape = tuple(rec["shape"])
        if arr.size != int(np.prod(shape, dtype=int)):
            raise ValueError(f"{name}: {arr.size} values do not fill shape {shape}")
        out[name] = arr.reshape(shape)
    return out


def save_encoder(path, params: dict, cfg: EncoderConfig) -> None:
    Path(path).write_text(json.dumps({"config": cfg.to_dict(), "tensors": tensors_to_json(params)}))


def load_encoder(path) -> tuple[dict, EncoderConfig]:
    doc = json.loads(Path(path).read_text())
    cfg = EncoderConfig.from_dict(doc["config"])
    params = {k: torch.as_tensor(v) for k, v in tensors_from_json(doc["tensors"]).items()}
    check_shapes(params, cfg)
    return params, cfg


@dataclass
class FeatureMap:
    """Frozen encoder plus input standardization, usable on raw history windows."""

    params: dict
    cfg: EncoderConfig
    h_mean: np.ndarray = field(default=None)
    h_std: np.ndarray = field(default=None)

    def __call__(self, H) -> np.ndarray:
        H = np.asarray(H, dtype=float)
        if self.h_mean is not None:
            H = (H - self.h_mean) / self.h_std
        return encode(H, self.params, self.cfg)

    def batch(self, H, chunk: int = 2048) -> np.ndarray:
        H = np.asarray(H, dtype=float)
        return np.concatenate([self(H[i:i + chunk]) for i in range(0, len(H), chunk)]) if len(H) else \
            np.zeros((0, self.cfg.ell))
