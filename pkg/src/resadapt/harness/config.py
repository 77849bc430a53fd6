"""
Experiment configuration: a TOML tree mapped onto dataclasses.

Every key in a section is required and unknown keys are rejected, so a
config file is a complete record of a run. :class:`ConfigError` carries the
dotted path of the offending field.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import sys
import typing
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..adapter import MODES
from ..encoder import VARIANTS, EncoderConfig
from ..mpc import MpcConfig
from ..simulation import ResidualRegime, ScenarioConfig, TrajectoryConfig
from ..trainer import TrainConfig

DECODER_VARIANTS = MODES
TRACKING_VARIANTS = ("nominal", "frozen", "adaptive", "oracle")


class ConfigError(ValueError):
    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}" if path else msg)
        self.path = path


@dataclass(frozen=True)
class RunSection:
    seed: int
    n_seeds: int


@dataclass(frozen=True)
class DataSection:
    """Offline data collection with the PD controller.

    Each entry of ``trajectories`` is ``"figure8:<plane>"``, ``"random"`` or
    ``"hover"``; one run per entry. Within a run the payload steps through
    ``payloads`` in equal segments (rotated per run).
    """

    dt: float
    duration: float
    trajectories: tuple
    payloads: tuple
    coupling_gain: float
    lag_tau: float
    thrust_efficiency: float
    noise_scale: float
    subsample: int


@dataclass(frozen=True)
class AdapterSection:
    prior_precision: float
    sigma2: float
    alpha: float
    eta: float
    beta: float
    lambda_bar: float
    trace_cap: float


@dataclass(frozen=True)
class PredictionSection:
    """Open-loop payload-drop scenario for the decoder ablation."""

    dt: float
    duration: float
    shift_time: float
    trajectory: str
    payload_before: float
    payload_after: float
    variants: tuple
    window: int
    pre_window: float
    warmup: float


@dataclass(frozen=True)
class EncoderAblationSection:
    variants: tuple
    eval_duration: float
    eval_trajectory: str
    eval_payload: float
    null_lag_tau: float


@dataclass(frozen=True)
class TrackingSection:
    """Closed-loop runs. Scenario A switches a vertical figure-eight from the
    xz to the yz plane at ``switch_time``; scenario B turns a horizontal one
    from the x to the y axis. The payload drops to zero at ``shift_time``."""

    dt: float
    duration: float
    switch_time: float
    shift_time: float
    payloads: tuple
    scenarios: tuple
    variants: tuple
    data_dt: float


@dataclass(frozen=True)
class ExperimentConfig:
    run: RunSection
    data: DataSection
    encoder: EncoderConfig
    train: TrainConfig
    adapter: AdapterSection
    mpc: MpcConfig
    prediction: PredictionSection
    encoder_ablation: EncoderAblationSection
    tracking: TrackingSection

    def to_dict(self) -> dict:
        return _to_plain(dataclasses.asdict(self))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, run=dataclasses.replace(self.run, seed=int(seed)))


def _to_plain(x):
    if isinstance(x, dict):
        return {k: _to_plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_to_plain(v) for v in x]
    return x


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


def _coerce(value, tp, path):
    origin = typing.get_origin(tp)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if tp is tuple or origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(path, f"expected an array, got {value!r}")
        return tuple(value)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    return value


def _field_type(cls, f):
    hints = typing.get_type_hints(cls)
    tp = hints[f.name]
    # Optional[...] / X | None collapse to X
    args = [a for a in typing.get_args(tp) if a is not type(None)]
    if typing.get_origin(tp) in (typing.Union, getattr(__import__("types"), "UnionType", None)) and len(args) == 1:
        return args[0]
    return tp


def _build(cls, table, path):
    if not isinstance(table, dict):
        raise ConfigError(path, "expected a table")
    fields = {f.name: f for f in dataclasses.fields(cls) if f.init}
    for key in table:
        if key not in fields:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown key")
    kwargs = {}
    for name, f in fields.items():
        sub = f"{path}.{name}" if path else name
        if name not in table:
            raise ConfigError(sub, "missing required field")
        kwargs[name] = _coerce(table[name], _field_type(cls, f), sub)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(path, str(exc)) from None


def _validate(cfg: ExperimentConfig) -> None:
    for v in cfg.prediction.variants:
        if v not in DECODER_VARIANTS:
            raise ConfigError("prediction.variants", f"unknown decoder variant {v!r}")
    for v in cfg.encoder_ablation.variants:
        if v not in VARIANTS:
            raise ConfigError("encoder_ablation.variants", f"unknown encoder variant {v!r}")
    for v in cfg.tracking.variants:
        if v not in TRACKING_VARIANTS:
            raise ConfigError("tracking.variants", f"unknown tracking variant {v!r}")
    for s in cfg.tracking.scenarios:
        if s not in ("A", "B"):
            raise ConfigError("tracking.scenarios", f"unknown scenario {s!r}")
    for name in ("data.trajectories",):
        for spec in cfg.data.trajectories:
            parse_trajectory(spec, name)
    parse_trajectory(cfg.prediction.trajectory, "prediction.trajectory")
    parse_trajectory(cfg.encoder_ablation.eval_trajectory, "encoder_ablation.eval_trajectory")
    if cfg.run.n_seeds < 1:
        raise ConfigError("run.n_seeds", "must be >= 1")
    if not 0 < cfg.prediction.shift_time < cfg.prediction.duration:
        raise ConfigError("prediction.shift_time", "must lie inside the run")
    if not 0 < cfg.tracking.shift_time < cfg.tracking.duration:
        raise ConfigError("tracking.shift_time", "must lie inside the run")
    if cfg.data.subsample < 1:
        raise ConfigError("data.subsample", "must be >= 1")
    if not cfg.adapter.prior_precision > 0 or not cfg.adapter.sigma2 > 0:
        raise ConfigError("adapter", "prior_precision and sigma2 must be > 0")
    if not math.isclose(cfg.mpc.dt, cfg.tracking.dt):
        raise ConfigError("mpc.dt", "must equal tracking.dt (the controller runs at the simulation step)")


def parse_trajectory(spec: str, path: str = "trajectory", **extra) -> TrajectoryConfig:
    fam, _, plane = spec.partition(":")
    try:
        if fam == "figure8":
            return TrajectoryConfig(family="figure8", plane=plane or "xz", **extra)
        if fam in ("random", "hover") and not plane:
            return TrajectoryConfig(family=fam, **extra)
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from None
    raise ConfigError(path, f"bad trajectory spec {spec!r}")


def from_dict(doc: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, doc, "")
    _validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("", f"cannot read config {path}: {exc}") from None
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("", f"invalid TOML in {path}: {exc}") from None
    return from_dict(doc)


def packaged_config(name: str = "desk") -> Path:
    return Path(str(resources.files("resadapt.harness").joinpath(f"configs/{name}.toml")))


def default_config(name: str = "desk") -> ExperimentConfig:
    return load_config(packaged_config(name))


def to_toml(cfg: ExperimentConfig) -> str:
    """Serialize back to TOML (sections in declaration order)."""
    lines = []
    for sec, table in cfg.to_dict().items():
        lines.append(f"[{sec}]")
        for k, v in table.items():
            lines.append(f"{k} = {_toml_value(v)}")
        lines.append("")
    return "\n".join(lines)


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return str(v)


# ---------------------------------------------------------------------------
# scenario builders
# ---------------------------------------------------------------------------


def _regimes(payloads, dur, coupling, tau, eff):
    seg = dur / len(payloads)
    out = []
    for i, m in enumerate(payloads):
        out.append(ResidualRegime(payload_mass=float(m), coupling_gain=coupling, lag_tau=tau,
                                  thrust_efficiency=eff, active_from=i * seg,
                                  active_until=(i + 1) * seg if i < len(payloads) - 1 else math.inf))
    return out


def training_scenarios(data: DataSection, seed: int, dt: float | None = None, coupling: float | None = None,
                       lag_tau: float | None = None) -> list[ScenarioConfig]:
    """One scenario per trajectory entry; payload order rotates across runs."""
    from ..simulation import default_noise_std

    dt = data.dt if dt is None else dt
    k = data.coupling_gain if coupling is None else coupling
    tau = data.lag_tau if lag_tau is None else lag_tau
    out = []
    pay = list(data.payloads)
    for i, spec in enumerate(data.trajectories):
        rot = pay[i % len(pay):] + pay[:i % len(pay)]
        out.append(ScenarioConfig(
            trajectory=parse_trajectory(spec, "data.trajectories"),
            regimes=_regimes(rot, data.duration, k, tau, data.thrust_efficiency),
            duration=data.duration, dt=dt,
            noise_std=tuple(data.noise_scale * default_noise_std(dt)),
            rng_seed=seed * 1000 + i, history=0,
        ))
    return out


def shift_scenario(trajectory: TrajectoryConfig, dt: float, duration: float, shift: float, before: float,
                   after: float, data: DataSection, seed: int, coupling: float | None = None,
                   lag_tau: float | None = None) -> ScenarioConfig:
    """Payload ``before`` until ``shift``, then ``after``; coupling and efficiency from the data section."""
    from ..simulation import default_noise_std

    k = data.coupling_gain if coupling is None else coupling
    tau = data.lag_tau if lag_tau is None else lag_tau
    regs = [
        ResidualRegime(payload_mass=before, coupling_gain=k, lag_tau=tau, thrust_efficiency=data.thrust_efficiency,
                       active_from=0.0, active_until=shift),
        ResidualRegime(payload_mass=after, coupling_gain=k, lag_tau=tau, thrust_efficiency=data.thrust_efficiency,
                       active_from=shift),
    ]
    return ScenarioConfig(trajectory=trajectory, regimes=regs, duration=duration, dt=dt,
                          noise_std=tuple(data.noise_scale * default_noise_std(dt)), rng_seed=seed, history=0)
