"""
Experiment runners behind the CLI.

Every runner writes into a run directory: the resolved config, the seeds it
used, a log without wall-clock content, ``metrics.json`` (one record per
variant and seed) and ``summary.json`` (per-variant means and the direction
checks). Arms of one comparison share seeds, datasets and references.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .. import adapter as ad
from ..dynamics import NominalParams
from ..mpc import NonFiniteRollout, ResidualMpc, write_tick_log
from ..simulation import (Dataset, DivergenceError, Reference, ScenarioConfig, TrajectoryConfig, generate_dataset,
                          raw_residual, simulate, write_dataset_binary, write_run_log)
from ..trainer import ResidualModel, fit_residual_model, write_loss_curve
from . import properties
from .config import (ExperimentConfig, parse_trajectory, shift_scenario, to_toml, training_scenarios)

log = logging.getLogger("resadapt.harness")

LOG_NAME = "run.log"


# ---------------------------------------------------------------------------
# run directories
# ---------------------------------------------------------------------------


def _json_scalar(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def set_determinism() -> None:
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


class RunDir:
    """Output directory with a file log attached for the duration of a run."""

    def __init__(self, root, cfg: ExperimentConfig, command: str, seeds):
        self.path = Path(root)
        self.path.mkdir(parents=True, exist_ok=True)
        (self.path / "config.toml").write_text(to_toml(cfg))
        self._write_json("seeds.json", {"command": command, "seeds": [int(s) for s in seeds],
                                        "config_digest": cfg.digest()})
        self._handler = logging.FileHandler(self.path / LOG_NAME, mode="w")
        self._handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
        log.addHandler(self._handler)
        log.setLevel(logging.INFO)
        log.info("command %s, config %s", command, cfg.digest())

    def _write_json(self, name, obj):
        (self.path / name).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_scalar) + "\n")

    def write_metrics(self, records: list) -> None:
        self._write_json("metrics.json", [asdict(r) for r in records])

    def write_summary(self, summary: dict) -> None:
        self._write_json("summary.json", summary)

    def file(self, name) -> Path:
        return self.path / name

    def close(self):
        log.removeHandler(self._handler)
        self._handler.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class MetricRecord:
    variant: str
    seed: int
    rmse_pred: float | None = None
    rmse_track: float | None = None
    recovery_steps: int | None = None
    diverged: bool = False


@dataclass
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


@dataclass
class ExperimentResult:
    records: list
    summary: dict
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


def _finish(run: RunDir, res: ExperimentResult) -> ExperimentResult:
    res.summary["checks"] = [asdict(c) for c in res.checks]
    run.write_metrics(res.records)
    run.write_summary(res.summary)
    for c in res.checks:
        log.info("%s", c.line())
    return res


def seeds_for(cfg: ExperimentConfig) -> list[int]:
    return [cfg.run.seed + i for i in range(cfg.run.n_seeds)]


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def rmse_pred(err) -> float:
    """Root-mean-square of ``||delta - delta_hat||`` over the rows of ``err``."""
    err = np.asarray(err, dtype=float)
    return float(np.sqrt(np.mean(np.sum(err ** 2, axis=1))))


def windowed_rmse(err, window: int) -> np.ndarray:
    """Trailing-window RMSE of ``||e_k||``; the first windows use what is available."""
    sq = np.sum(np.asarray(err, dtype=float) ** 2, axis=1)
    c = np.concatenate([[0.0], np.cumsum(sq)])
    k = np.arange(1, len(sq) + 1)
    lo = np.maximum(k - window, 0)
    return np.sqrt((c[k] - c[lo]) / (k - lo))


def recovery_steps(err, k_shift: int, window: int, pre_steps: int, factor: float = 1.2) -> int:
    """Steps after the shift until the windowed RMSE first comes back within ``factor`` of the pre-shift level.

    The pre-shift level is the RMSE over the ``pre_steps`` steps before the
    shift. The return is counted after the first post-shift excursion above
    the band, since the trailing window still holds pre-shift samples right
    after the shift. No excursion gives 0; no return gives the full
    post-shift length.
    """
    err = np.asarray(err, dtype=float)
    level = rmse_pred(err[max(k_shift - pre_steps, 0):k_shift])
    w = windowed_rmse(err, window)[k_shift:]
    band = factor * level
    out = np.nonzero(w > band)[0]
    if len(out) == 0:
        return 0
    back = np.nonzero(w[out[0]:] <= band)[0]
    return int(out[0] + back[0]) if len(back) else len(w)


def rmse_track(p, p_ref) -> float:
    d = np.asarray(p, dtype=float) - np.asarray(p_ref, dtype=float)
    return float(np.sqrt(np.mean(np.sum(d ** 2, axis=1))))


def _means(records, key) -> dict:
    out = {}
    for r in records:
        v = getattr(r, key)
        if v is not None:
            out.setdefault(r.variant, []).append(v)
    return {k: float(np.mean(v)) for k, v in out.items()}


# ---------------------------------------------------------------------------
# training with a checkpoint cache
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    """What a checkpoint depends on: data recipe, encoder, optimizer and seed."""

    variant: str
    dt: float
    coupling_gain: float
    lag_tau: float

    @classmethod
    def default(cls, cfg: ExperimentConfig) -> "ModelSpec":
        return cls(cfg.encoder.variant, cfg.data.dt, cfg.data.coupling_gain, cfg.data.lag_tau)

    def key(self, cfg: ExperimentConfig) -> str:
        doc = {"spec": asdict(self), "data": asdict(cfg.data), "encoder": cfg.encoder.to_dict(),
               "train": asdict(cfg.train), "seed": cfg.run.seed}
        doc["data"]["trajectories"] = list(cfg.data.trajectories)
        doc["data"]["payloads"] = list(cfg.data.payloads)
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def collect_training_data(cfg: ExperimentConfig, spec: ModelSpec, with_logs: bool = False):
    """Closed-loop PD data over every configured trajectory, thinned by ``data.subsample``."""
    parts, trajs = [], []
    for sc in training_scenarios(cfg.data, cfg.run.seed, dt=spec.dt, coupling=spec.coupling_gain,
                                 lag_tau=spec.lag_tau):
        sc.history = cfg.encoder.h
        data, traj = simulate(sc)
        parts.append(data)
        trajs.append(traj)
    raw = Dataset.concatenate(parts)
    raw = raw.subset(np.arange(0, len(raw), cfg.data.subsample))
    return (raw, trajs) if with_logs else raw


def train_model(cfg: ExperimentConfig, spec: ModelSpec | None = None, cache_dir=None) -> ResidualModel:
    """Train (or load from ``cache_dir``) the checkpoint for ``spec``."""
    spec = spec or ModelSpec.default(cfg)
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"model-{spec.key(cfg)}.json"
        if path.exists():
            return ResidualModel.load(path)
    raw = collect_training_data(cfg, spec)
    enc = replace(cfg.encoder, variant=spec.variant)
    model = fit_residual_model(raw, enc, replace(cfg.train, rng_seed=cfg.run.seed))
    model.meta = {"spec": asdict(spec), "samples": len(raw)}
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        model.save(path)
        model = ResidualModel.load(path)
    return model


def _model_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# train / dataset
# ---------------------------------------------------------------------------


def run_train(cfg: ExperimentConfig, out, cache_dir=None) -> ExperimentResult:
    set_determinism()
    spec = ModelSpec.default(cfg)
    with RunDir(out, cfg, "train", [cfg.run.seed]) as run:
        raw = collect_training_data(cfg, spec)
        log.info("dataset: %d samples, h=%d", len(raw), raw.h)
        enc = replace(cfg.encoder, variant=spec.variant)
        model = fit_residual_model(raw, enc, replace(cfg.train, rng_seed=cfg.run.seed))
        model.meta = {"spec": asdict(spec), "samples": len(raw)}
        ckpt = run.file("checkpoint.json")
        model.save(ckpt)
        write_loss_curve(model.report, run.file("loss_curve.csv"))
        if cache_dir is not None:
            dst = Path(cache_dir) / f"model-{spec.key(cfg)}.json"
            dst.parent.mkdir(parents=True, exist_ok=True)
            dst.write_bytes(ckpt.read_bytes())
        curve = model.report.loss_curve
        log.info("epochs %d, first loss %.6g, final loss %.6g, final rmse %.6g",
                 len(curve), curve[0] if curve else float("nan"), curve[-1] if curve else float("nan"),
                 model.report.final_rmse)
        digest = _model_digest(ckpt)
        log.info("checkpoint sha256 %s", digest)
        res = ExperimentResult([MetricRecord(spec.variant, cfg.run.seed)],
                               {"checkpoint": str(ckpt.name), "sha256": digest, "samples": len(raw),
                                "final_loss": curve[-1] if curve else None,
                                "final_rmse": model.report.final_rmse})
        return _finish(run, res)


def run_dataset(cfg: ExperimentConfig, out) -> ExperimentResult:
    set_determinism()
    spec = ModelSpec.default(cfg)
    with RunDir(out, cfg, "dataset", [cfg.run.seed]) as run:
        raw, trajs = collect_training_data(cfg, spec, with_logs=True)
        write_dataset_binary(raw, run.file("dataset.bin"))
        for i, tr in enumerate(trajs):
            write_run_log(tr, run.file(f"run_{i:02d}.csv"))
        std = raw.delta.std(axis=0)
        log.info("dataset: %d samples from %d runs", len(raw), len(trajs))
        log.info("residual std per channel: %s", " ".join(f"{v:.4e}" for v in std))
        res = ExperimentResult([MetricRecord("dataset", cfg.run.seed)],
                               {"samples": len(raw), "runs": len(trajs),
                                "delta_std": [float(v) for v in std]})
        return _finish(run, res)


# ---------------------------------------------------------------------------
# decoder ablation
# ---------------------------------------------------------------------------


def adapter_state(cfg: ExperimentConfig, model: ResidualModel, mode: str) -> ad.AdapterState:
    a = cfg.adapter
    hyper = ad.AdapterHyper(alpha=a.alpha, eta=a.eta, beta=a.beta, mode=mode, lambda_bar=a.lambda_bar,
                            trace_cap=a.trace_cap)
    return ad.init(model.Theta0, a.prior_precision, a.sigma2, hyper)


def prediction_run(cfg: ExperimentConfig, seed: int):
    """Payload-drop run under the PD controller; returns the dataset and its scenario."""
    p = cfg.prediction
    sc = shift_scenario(parse_trajectory(p.trajectory, "prediction.trajectory"), p.dt, p.duration, p.shift_time,
                        p.payload_before, p.payload_after, cfg.data, seed)
    sc.history = cfg.encoder.h
    return generate_dataset(sc), sc


def lambda_shape(lam, t, shift_time: float, warmup: float, react: float = 0.5, tail: float = 1.0) -> dict:
    """Shift-response measurements of ``1/lambda`` around the shift."""
    inv = 1.0 / np.asarray(lam, dtype=float)
    t = np.asarray(t, dtype=float)
    pre = (t >= warmup) & (t < shift_time)
    near = (t >= shift_time) & (t < shift_time + react)
    end = t >= t[-1] - tail + 1e-9
    return {
        "pre_max_dev": float(np.max(np.abs(inv[pre] - 1.0))) if pre.any() else 0.0,
        "post_peak": float(np.max(inv[near])) if near.any() else float("nan"),
        "tail_max": float(np.max(inv[end])),
    }


def run_decoder_ablation(cfg: ExperimentConfig, out, cache_dir=None, model: ResidualModel | None = None
                         ) -> ExperimentResult:
    set_determinism()
    p = cfg.prediction
    seeds = seeds_for(cfg)
    with RunDir(out, cfg, "ablate-decoder", seeds) as run:
        model = model or train_model(cfg, cache_dir=cache_dir)
        records, shapes = [], []
        for seed in seeds:
            data, _ = prediction_run(cfg, seed)
            Z = model.features(data.H)
            D = model.stats.scale_delta(data.delta)
            k_shift = int(np.searchsorted(data.t, p.shift_time - 1e-9))
            pre_steps = int(round(p.pre_window / p.dt))
            series = {}
            for mode in p.variants:
                st = adapter_state(cfg, model, mode)
                r = ad.run_adapter(st, Z, D)
                err = r.delta_hat - D
                rec = MetricRecord(mode, seed, rmse_pred(err), None,
                                   recovery_steps(err, k_shift, p.window, pre_steps))
                records.append(rec)
                series[mode] = windowed_rmse(err, p.window)
                log.info("seed %d %-10s rmse_pred %.6f recovery_steps %d", seed, mode, rec.rmse_pred,
                         rec.recovery_steps)
                if mode == "adaptive":
                    shapes.append(lambda_shape(r.lam, data.t, p.shift_time, p.warmup))
                    if seed == seeds[0]:
                        ad.write_diagnostics_csv(r, data.t, run.file(f"adaptive_diagnostics_seed{seed}.csv"))
            _write_series(run.file(f"windowed_rmse_seed{seed}.csv"), data.t, series)
        summary = {"rmse_pred": _means(records, "rmse_pred"), "recovery_steps": _means(records, "recovery_steps")}
        checks = decoder_checks(summary, p.variants)
        if shapes:
            summary["lambda_shape"] = shapes
            checks.append(lambda_check(shapes))
        return _finish(run, ExperimentResult(records, summary, checks))


def _write_series(path, t, series: dict) -> None:
    names = list(series)
    with open(path, "w") as fh:
        fh.write("step,t," + ",".join(names) + "\n")
        for k in range(len(t)):
            fh.write(f"{k},{float(t[k])!r}," + ",".join(repr(float(series[n][k])) for n in names) + "\n")


def decoder_checks(summary: dict, variants) -> list[Check]:
    if not {"fixed", "bayes", "forgetting", "adaptive"} <= set(variants):
        return []
    r, rec = summary["rmse_pred"], summary["recovery_steps"]
    order = r["fixed"] > r["bayes"] > r["forgetting"] >= r["adaptive"]
    lowest = all(r["adaptive"] < r[v] for v in r if v != "adaptive")
    fastest = all(rec["adaptive"] < rec[v] for v in rec if v != "adaptive")
    fmt = ", ".join(f"{k}={r[k]:.4f}" for k in ("fixed", "bayes", "forgetting", "adaptive"))
    fmt_rec = ", ".join(f"{k}={rec[k]:.1f}" for k in ("fixed", "bayes", "forgetting", "adaptive"))
    return [
        Check("prediction RMSE ordering fixed > bayes > forgetting >= adaptive, adaptive lowest",
              order and lowest, fmt),
        Check("adaptive recovery strictly shortest", fastest, fmt_rec),
    ]


def lambda_check(shapes: list[dict]) -> Check:
    pre = max(s["pre_max_dev"] for s in shapes)
    peak = min(s["post_peak"] for s in shapes)
    tail = max(s["tail_max"] for s in shapes)
    ok = pre <= 1e-12 and peak > 1.5 and tail < 1.05
    return Check("1/lambda shape (flat pre-shift, >1.5 within 0.5 s, <1.05 at the end)", ok,
                 f"pre |1/lam-1| max {pre:.3e}, post-shift peak min {peak:.3f}, final-second max {tail:.3f}")


# ---------------------------------------------------------------------------
# encoder ablation
# ---------------------------------------------------------------------------

ENCODER_SETTINGS = ("coupled", "null")


def encoder_eval_run(cfg: ExperimentConfig, spec: ModelSpec, seed: int) -> Dataset:
    e = cfg.encoder_ablation
    sc = shift_scenario(parse_trajectory(e.eval_trajectory, "encoder_ablation.eval_trajectory"), spec.dt,
                        e.eval_duration, e.eval_duration / 2, e.eval_payload, e.eval_payload, cfg.data, seed,
                        coupling=spec.coupling_gain, lag_tau=spec.lag_tau)
    sc.history = cfg.encoder.h
    return generate_dataset(sc)


def encoder_specs(cfg: ExperimentConfig) -> dict:
    e = cfg.encoder_ablation
    out = {}
    for setting in ENCODER_SETTINGS:
        for v in e.variants:
            if setting == "coupled":
                out[(setting, v)] = ModelSpec(v, cfg.data.dt, cfg.data.coupling_gain, cfg.data.lag_tau)
            else:
                out[(setting, v)] = ModelSpec(v, cfg.data.dt, 0.0, e.null_lag_tau)
    return out


def run_encoder_ablation(cfg: ExperimentConfig, out, cache_dir=None, models: dict | None = None
                         ) -> ExperimentResult:
    set_determinism()
    seed = cfg.run.seed
    eval_seed = seed + 10_000
    with RunDir(out, cfg, "ablate-encoder", [seed, eval_seed]) as run:
        records = []
        rm = {}
        evals = {}
        for (setting, v), spec in encoder_specs(cfg).items():
            model = (models or {}).get((setting, v)) or train_model(cfg, spec, cache_dir)
            if setting not in evals:
                evals[setting] = encoder_eval_run(cfg, spec, eval_seed)
            data = evals[setting]
            err = model.predict(data.H) - data.delta
            err = err / model.stats.d_std
            r = rmse_pred(err)
            rm[(setting, v)] = r
            records.append(MetricRecord(f"{v}/{setting}", seed, r))
            log.info("%-8s %-8s rmse_pred %.6f", setting, v, r)
        summary = {"rmse_pred": {f"{v}/{s}": val for (s, v), val in rm.items()}}
        return _finish(run, ExperimentResult(records, summary, encoder_checks(rm, cfg.encoder_ablation.variants)))


def encoder_checks(rm: dict, variants) -> list[Check]:
    if not {"full", "temporal", "current"} <= set(variants):
        return []
    c = {v: rm[("coupled", v)] for v in ("full", "temporal", "current")}
    n = [rm[("null", v)] for v in ("full", "temporal", "current")]
    spread = max(n) / min(n) - 1.0
    return [
        Check("coupled data: full < temporal < current", c["full"] < c["temporal"] < c["current"],
              ", ".join(f"{k}={v:.4f}" for k, v in c.items())),
        Check("null data: variants within 20%", spread <= 0.2,
              f"spread {100 * spread:.1f}% ({', '.join(f'{x:.4f}' for x in n)})"),
    ]


# ---------------------------------------------------------------------------
# closed-loop tracking
# ---------------------------------------------------------------------------


def tracking_trajectory(cfg: ExperimentConfig, scenario: str) -> TrajectoryConfig:
    tr = cfg.tracking
    if scenario == "A":
        return TrajectoryConfig(family="figure8", plane="xz", plane_after="yz", switch_time=tr.switch_time)
    return TrajectoryConfig(family="figure8", plane="x", plane_after="y", switch_time=tr.switch_time)


def tracking_scenario(cfg: ExperimentConfig, scenario: str, payload: float, seed: int,
                      clean: bool = False) -> ScenarioConfig:
    tr = cfg.tracking
    sc = shift_scenario(tracking_trajectory(cfg, scenario), tr.dt, tr.duration, tr.shift_time, payload, 0.0,
                        cfg.data, seed)
    sc.history = 0
    if clean:
        sc.regimes = []
        sc.noise_std = tuple(0.0 for _ in range(17))
    return sc


def _oracle(sc: ScenarioConfig, params: NominalParams):
    def f(t, x, u):
        _, regime = sc.regime_at(t)
        out = np.zeros(17)
        raw = raw_residual(x, u, regime, params)
        out[3:6] = raw[:3] * sc.dt
        out[10:13] = raw[3:] * sc.dt
        return out
    return f


def closed_loop(cfg: ExperimentConfig, sc: ScenarioConfig, variant: str, model: ResidualModel | None,
                params: NominalParams | None = None):
    """One MPC run in the simulated world; returns ``(rmse_track, Trajectory, per-tick info)``.

    The adapter update for tick ``k`` runs when the world hands back the state
    of tick ``k + 1``; the final tick's observation is never consumed.
    """
    params = params or NominalParams()
    ref = Reference(sc.trajectory, seed=sc.rng_seed)
    if variant == "nominal":
        ctrl = ResidualMpc(params, cfg.mpc, ref, source="nominal")
    elif variant == "oracle":
        ctrl = ResidualMpc(params, cfg.mpc, ref, source="oracle", oracle=_oracle(sc, params))
    else:
        mode = "fixed" if variant == "frozen" else "adaptive"
        ctrl = ResidualMpc(params, cfg.mpc, ref, source="learned", model=model,
                           adapter_state=adapter_state(cfg, model, mode))
    ticks = []

    def controller(t, x):
        if ticks:
            ctrl.observe(x, ticks[-1])
        u, info = ctrl.plan(t, x)
        ticks.append(info)
        return u

    _, traj = simulate(sc, controller, params)
    p_ref = ref.sample(traj.t).p
    return rmse_track(traj.x[:, :3], p_ref), traj, ticks


def tracking_model_spec(cfg: ExperimentConfig) -> ModelSpec:
    return ModelSpec(cfg.encoder.variant, cfg.tracking.data_dt, cfg.data.coupling_gain, cfg.data.lag_tau)


def run_tracking(cfg: ExperimentConfig, out, cache_dir=None, model: ResidualModel | None = None,
                 clean: bool = False) -> ExperimentResult:
    set_determinism()
    tr = cfg.tracking
    seeds = seeds_for(cfg)
    with RunDir(out, cfg, "track", seeds) as run:
        needs_model = any(v in ("frozen", "adaptive") for v in tr.variants)
        if needs_model and model is None:
            model = train_model(cfg, tracking_model_spec(cfg), cache_dir)
        records = []
        for scen in tr.scenarios:
            for payload in tr.payloads:
                for variant in tr.variants:
                    for seed in seeds:
                        sc = tracking_scenario(cfg, scen, payload, seed, clean)
                        tag = f"{scen}/{payload:g}/{variant}"
                        try:
                            r, traj, ticks = closed_loop(cfg, sc, variant, model)
                        except (DivergenceError, NonFiniteRollout) as e:
                            records.append(MetricRecord(tag, seed, diverged=True))
                            log.info("%-16s seed %d diverged: %s", tag, seed, e)
                            continue
                        records.append(MetricRecord(tag, seed, None, r))
                        log.info("%-16s seed %d rmse_track %.6f", tag, seed, r)
                        if seed == seeds[0]:
                            write_tick_log(ticks, traj.x, run.file(f"ticks_{scen}_{payload:g}_{variant}_seed{seed}.csv"))
        means = _means(records, "rmse_track")
        diverged = {}
        for rec in records:
            diverged[rec.variant] = diverged.get(rec.variant, 0) + int(rec.diverged)
        summary = {"rmse_track": means, "diverged": diverged}
        checks = [] if clean else tracking_checks(means, tr, diverged)
        return _finish(run, ExperimentResult(records, summary, checks))


def tracking_checks(means: dict, tr, diverged: dict | None = None) -> list[Check]:
    """Direction checks on mean tracking RMSE.

    A variant that diverged on any seed counts as infinite RMSE; ``means``
    holds the mean over the runs that finished.
    """
    diverged = diverged or {}
    means = {k: (np.inf if diverged.get(k) else v) for k, v in means.items()}
    means.update({k: np.inf for k, n in diverged.items() if n})
    checks = []
    if {"nominal", "frozen", "adaptive"} <= set(tr.variants):
        for scen in tr.scenarios:
            for payload in tr.payloads:
                m = {v: means[f"{scen}/{payload:g}/{v}"] for v in ("nominal", "frozen", "adaptive")}
                checks.append(Check(f"scenario {scen}, payload {payload:g}: nominal > frozen > adaptive",
                                    m["nominal"] > m["frozen"] > m["adaptive"],
                                    ", ".join(f"{k}={v:.4f}" for k, v in m.items())))
    if len(tr.payloads) >= 2:
        lo, hi = min(tr.payloads), max(tr.payloads)
        for scen in tr.scenarios:
            for v in tr.variants:
                a, b = means[f"{scen}/{lo:g}/{v}"], means[f"{scen}/{hi:g}/{v}"]
                checks.append(Check(f"scenario {scen}, {v}: payload {hi:g} RMSE >= payload {lo:g}",
                                    bool(np.isfinite(a) and np.isfinite(b) and b >= a),
                                    f"{hi:g}: {b:.4f}, {lo:g}: {a:.4f}"))
    return checks


# ---------------------------------------------------------------------------
# gradient check and invariant suites
# ---------------------------------------------------------------------------


def run_gradcheck(cfg: ExperimentConfig, out, grad_scale: dict | None = None) -> ExperimentResult:
    set_determinism()
    with RunDir(out, cfg, "gradcheck", [cfg.run.seed]) as run:
        prop, res = properties.gradient_check(seed=cfg.run.seed, grad_scale=grad_scale)
        for line in res.format().splitlines():
            log.info("%s", line)
        (run.file("gradcheck.txt")).write_text(res.format() + "\n")
        summary = {"max_rel_error": res.max_rel_error, "tolerance": res.tolerance,
                   "per_tensor": {k: list(v) for k, v in sorted(res.per_tensor.items())}}
        check = Check("encoder gradient check", res.passed, f"max rel error {res.max_rel_error:.3e}")
        return _finish(run, ExperimentResult([MetricRecord("gradcheck", cfg.run.seed)], summary, [check]))


def run_properties(cfg: ExperimentConfig, out) -> ExperimentResult:
    set_determinism()
    with RunDir(out, cfg, "properties", [cfg.run.seed]) as run:
        results = properties.run_all(seed=cfg.run.seed)
        checks = [Check(r.name, r.passed, f"{r.value:.3e} vs bound {r.bound:.3e}") for r in results]
        summary = {r.name: {"value": r.value, "bound": r.bound, "passed": r.passed} for r in results}
        return _finish(run, ExperimentResult([MetricRecord("properties", cfg.run.seed)], summary, checks))
