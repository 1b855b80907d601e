"""Experiment driver: flat key=value configs, multi-seed runs, CSV/JSON results."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import io
import json
import logging
import math
import os
import typing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import accountant, pate
from .data import find_mnist, load_mnist_idx, synthesize_blobs, take_subset
from .dpsgd import DpSgdConfig, RunRecord, train
from .landscape import (
    ToyConfig,
    c_eps_sharpness,
    filter_normalized_slice,
    mlp_loss_fns,
    run_toy_experiment,
)
from .nn import Batch, MlpSpec, ParamVector, evaluate
from .rng import Purpose, stream

log = logging.getLogger(__name__)

TASKS = ("mnist_mlp", "synthetic_blobs", "toy", "pate", "accountant", "sharpness", "slice")
WORKERS_ENV = "DPLIS_WORKERS"


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "synthetic_blobs"
    seed: int = 0
    n_seeds: int = 1
    # data
    dataset: str = "synthetic_blobs"  # training data for sharpness/slice: mnist_mlp or synthetic_blobs
    data_dir: str = "data/mnist"
    subset_size: int = 10000  # 0 = full training set
    test_subset: int = 2000
    blob_n: int = 5000
    blob_classes: int = 10
    blob_dim: int = 20
    blob_spread: float = 0.65
    # model
    hidden: tuple[int, ...] = (512, 128)
    activation: str = "tanh"
    # DP-SGD
    lr: float = 0.1536  # eta; eta / L = 6e-4 at L = 256
    expected_batch: int = 256
    noise_multiplier: float = 1.1
    clip: float = 1.0
    steps: int = 0
    epsilon_target: float = 0.0  # > 0: steps derived from the accountant
    delta: float = accountant.DEFAULT_DELTA
    smoothing_radius: float = 0.0
    smoothing_samples: int = 1
    perturbation: str = "implicit"
    eval_every: int = 0
    audit_clipping: bool = False
    track_grad: bool = False
    # sharpness
    sharpness_epsilon: float = 0.0045
    sharpness_restarts: int = 10
    sharpness_iters: int = 100
    sharpness_subset: int = 1000
    # slice
    slice_points: int = 17
    # toy
    toy_runs: int = 1000
    toy_smoothing: bool = False
    toy_lr: float = ToyConfig.lr
    toy_noise_multiplier: float = ToyConfig.noise_multiplier
    toy_clip: float = ToyConfig.clip
    toy_steps: int = ToyConfig.steps
    toy_smoothing_radius: float = ToyConfig.smoothing_radius
    toy_smoothing_samples: int = ToyConfig.smoothing_samples
    # PATE
    pate_teachers: int = 50
    pate_private: int = 10000
    pate_public: int = 2000
    pate_test: int = 2000
    pate_hidden: tuple[int, ...] = (64,)
    pate_threshold: float = 35.0
    pate_sigma1: float = 10.0
    pate_sigma2: float = 5.0
    pate_max_queries: int = 1000
    pate_lr: float = 0.1
    pate_batch: int = 32
    pate_teacher_epochs: int = 10
    pate_student_epochs: int = 30
    pate_sigma_smooth: float = 0.0
    pate_samples: int = 10
    pate_flip_rate: float = 0.0
    # accountant
    sampling_rate: float = 0.0  # 0: expected_batch / training set size

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {', '.join(TASKS)}")
        if self.n_seeds < 1:
            raise ConfigError("n_seeds must be >= 1")
        if self.dataset not in ("mnist_mlp", "synthetic_blobs"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.activation not in ("tanh", "relu"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.steps < 0 or self.epsilon_target < 0:
            raise ConfigError("steps and epsilon_target must be >= 0")
        if not 0 <= self.pate_flip_rate <= 1:
            raise ConfigError("pate_flip_rate must be in [0, 1]")

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def toy_config(self) -> ToyConfig:
        return dataclasses.replace(
            ToyConfig(),
            lr=self.toy_lr,
            noise_multiplier=self.toy_noise_multiplier,
            clip=self.toy_clip,
            steps=self.toy_steps,
            smoothing_radius=self.toy_smoothing_radius,
            smoothing_samples=self.toy_smoothing_samples,
        )

    def as_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v) for f in dataclasses.fields(self)}


def _convert(name: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        # tuple of ints, comma separated; empty means no hidden layers
        return tuple(int(p) for p in raw.replace(" ", "").split(",") if p)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def parse_config(text: str, **overrides) -> ExperimentConfig:
    """Parse a flat UTF-8 ``key = value`` file; lines starting with '#' are comments."""
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",), inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string("[experiment]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    hints = typing.get_type_hints(ExperimentConfig)
    kinds = {name: (tuple if typing.get_origin(t) is tuple else t) for name, t in hints.items()}
    values = {}
    for key, raw in parser["experiment"].items():
        if key not in kinds:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _convert(key, raw, kinds[key])
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**values)


def load_config(path, **overrides) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, **overrides)


# --- statistics ---------------------------------------------------------------


@dataclass(frozen=True)
class StabilitySummary:
    """Spread of a per-seed metric; std uses the population denominator n."""

    values: tuple[float, ...]
    mean: float
    std: float
    range: tuple[float, float]

    @classmethod
    def of(cls, values) -> "StabilitySummary":
        vals = tuple(float(v) for v in values)
        if not vals:
            raise ValueError("no values to summarize")
        arr = np.array(vals)
        return cls(vals, float(arr.mean()), float(arr.std(ddof=0)), (min(vals), max(vals)))


def generalization_gap(record: RunRecord, spec: MlpSpec, train_data: Batch, test_data: Batch) -> float:
    """Mean test loss minus mean training loss of the final model."""
    return evaluate(record.params, spec, test_data)[1] - evaluate(record.params, spec, train_data)[1]


# --- data and model -----------------------------------------------------------


def load_datasets(cfg: ExperimentConfig, which: str | None = None) -> tuple[Batch, Batch]:
    which = which or cfg.dataset
    if which == "synthetic_blobs":
        return synthesize_blobs(cfg.blob_n, cfg.blob_classes, cfg.blob_dim, cfg.blob_spread, seed=cfg.seed)
    found = find_mnist(cfg.data_dir)
    if set(found) != {"train", "test"}:
        raise ConfigError(
            f"MNIST IDX files not found under {cfg.data_dir}; "
            "write them with scripts/make_mnist_subset.py or point data_dir at the canonical files"
        )
    tr = take_subset(load_mnist_idx(*found["train"]), cfg.subset_size, seed=0)
    te = take_subset(load_mnist_idx(*found["test"]), cfg.test_subset, seed=1)
    return tr, te


def model_spec(cfg: ExperimentConfig, data: Batch, classes: int = 10) -> MlpSpec:
    return MlpSpec(data.inputs.shape[1], tuple(cfg.hidden), classes, cfg.activation)


def dp_config(cfg: ExperimentConfig, n_train: int, seed: int) -> DpSgdConfig:
    steps = cfg.steps
    if cfg.epsilon_target > 0:
        steps = accountant.steps_for_budget(
            cfg.epsilon_target, cfg.delta, cfg.expected_batch / n_train, cfg.noise_multiplier
        )
    return DpSgdConfig(
        lr=cfg.lr,
        expected_batch=cfg.expected_batch,
        noise_multiplier=cfg.noise_multiplier,
        clip=cfg.clip,
        steps=steps,
        dataset_size=n_train,
        smoothing_radius=cfg.smoothing_radius,
        smoothing_samples=cfg.smoothing_samples,
        seed=seed,
        delta=cfg.delta,
        perturbation=cfg.perturbation,
    )


# --- per-seed work (module level so worker processes can pickle it) -----------


def _train_seed(cfg: ExperimentConfig, seed: int, tr: Batch, te: Batch, sharpness: bool) -> dict:
    spec = model_spec(cfg, tr)
    dcfg = dp_config(cfg, len(tr), seed)
    rec = train(spec, tr, te, dcfg, eval_every=cfg.eval_every, audit=cfg.audit_clipping, track_grad=cfg.track_grad)
    train_acc, train_loss = evaluate(rec.params, spec, tr)
    row = {
        "seed": seed,
        "epsilon": rec.epsilon,
        "delta": rec.delta,
        "sampling_rate": dcfg.sampling_rate,
        "noise_multiplier": dcfg.noise_multiplier,
        "steps": dcfg.steps,
        "smoothing_radius": dcfg.smoothing_radius,
        "smoothing_samples": dcfg.smoothing_samples,
        "test_accuracy": rec.test_accuracy,
        "test_loss": rec.test_loss,
        "best_test_accuracy": rec.best_test_accuracy,
        "train_accuracy": train_acc,
        "train_loss": train_loss,
        "generalization_gap": rec.test_loss - train_loss,
        "clip_violations": rec.clip_violations,
        "max_clipped_norm": rec.max_clipped_norm,
        "mean_sq_grad_norm": rec.mean_sq_grad_norm,
    }
    if sharpness:
        sub = tr.subset(np.arange(min(cfg.sharpness_subset, len(tr))))
        f, vg = mlp_loss_fns(spec, sub, rec.params.shape_map)
        rep = c_eps_sharpness(
            f,
            rec.params.values,
            epsilon=cfg.sharpness_epsilon,
            restarts=cfg.sharpness_restarts,
            iters=cfg.sharpness_iters,
            rng=stream(seed, Purpose.SHARPNESS),
            value_and_grad=vg,
        )
        row["sharpness"] = rep.c_eps_sharpness
    return {"row": row, "params": rec.params, "eval_trace": rec.eval_trace}


def _pate_seed(cfg: ExperimentConfig, seed: int) -> dict:
    n_total = cfg.pate_private + cfg.pate_public + cfg.pate_test
    # blobs split 80/20; regroup into private / public / test pools
    tr, te = synthesize_blobs(n_total, cfg.blob_classes, cfg.blob_dim, cfg.blob_spread, seed=seed)
    x = np.concatenate([tr.inputs, te.inputs])
    y = np.concatenate([tr.labels, te.labels])
    a, b = cfg.pate_private, cfg.pate_private + cfg.pate_public
    private, public_x, public_y = Batch(x[:a], y[:a]), x[a:b], y[a:b]
    test = Batch(x[b:], y[b:])
    spec = MlpSpec(x.shape[1], tuple(cfg.pate_hidden), cfg.blob_classes, cfg.activation)
    sgd_t = pate.TeacherSgd(cfg.pate_lr, cfg.pate_batch, cfg.pate_teacher_epochs)
    teachers = pate.partition_and_train_teachers(private, cfg.pate_teachers, spec, sgd_t, seed=seed)
    gcfg = pate.GnMaxConfig(cfg.pate_threshold, cfg.pate_sigma1, cfg.pate_sigma2, cfg.pate_max_queries)
    lab = pate.label_public_data(teachers, spec, public_x, gcfg, seed, true_labels=public_y, delta=cfg.delta)
    labels = lab.data.labels
    if cfg.pate_flip_rate > 0 and len(labels):
        labels = pate.flip_labels(labels, cfg.pate_flip_rate, cfg.blob_classes, seed)
    student_data = Batch(lab.data.inputs, labels)
    p_student = float(np.mean(labels == public_y[lab.indices])) if len(labels) else None
    best = [0.0]

    def track(epoch, params):
        best[0] = max(best[0], evaluate(params, spec, test)[0])

    sgd_s = pate.TeacherSgd(cfg.pate_lr, cfg.pate_batch, cfg.pate_student_epochs)
    K = cfg.pate_samples if cfg.pate_sigma_smooth > 0 else 1
    student = pate.train_student_smoothed(student_data, spec, cfg.pate_sigma_smooth, K, sgd_s, seed=seed, callback=track)
    acc, loss = evaluate(student, spec, test)
    teacher_acc = float(np.mean([evaluate(t, spec, test)[0] for t in teachers]))
    row = {
        "seed": seed,
        "epsilon": lab.spend.epsilon,
        "delta": lab.spend.delta,
        "n_queries": lab.n_queries,
        "n_labeled": len(labels),
        "p_correct": lab.p_correct,
        "student_label_accuracy": p_student,
        "sigma_smooth": cfg.pate_sigma_smooth,
        "student_accuracy": acc,
        "student_loss": loss,
        "best_student_accuracy": best[0],
        "mean_teacher_accuracy": teacher_acc,
    }
    return {"row": row}


# --- persistence --------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, rows: list[dict], columns: list[str] | None = None) -> None:
    columns = columns or list(rows[0].keys()) if rows else (columns or [])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


def write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_runs(path) -> dict:
    """Read runs.json and recompute every DP-SGD epsilon from (q, sigma, T, delta)."""
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    for run in payload.get("runs", []):
        if {"sampling_rate", "noise_multiplier", "steps", "epsilon"} <= set(run):
            cfg_q, sigma, T, delta = run["sampling_rate"], run["noise_multiplier"], run["steps"], run["delta"]
            if T == 0:
                eps = 0.0
            elif sigma == 0:
                eps = float("inf")
            else:
                eps = accountant.epsilon_for(cfg_q, sigma, T, delta).epsilon
            stored = float(run["epsilon"])
            if stored != eps:
                raise ValueError(f"seed {run.get('seed')}: stored epsilon {stored!r} != recomputed {eps!r}")
    return payload


# --- driver -------------------------------------------------------------------


@dataclass
class ExperimentResult:
    rows: list[dict]
    summary: dict
    extra_files: dict = field(default_factory=dict)


def n_workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}")
    return max(1, n)


def _map_seeds(fn, args_list: list[tuple]) -> list:
    """Apply ``fn`` per seed, in worker processes when more than one is allowed.

    Results come back in seed order, so outputs do not depend on the worker count.
    """
    workers = min(n_workers(), len(args_list))
    if workers <= 1:
        return [fn(*a) for a in args_list]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        futures = [ex.submit(fn, *a) for a in args_list]
        return [f.result() for f in futures]


def _seeds(cfg: ExperimentConfig) -> list[int]:
    return [cfg.seed + i for i in range(cfg.n_seeds)]


def _stability(rows: list[dict], keys: list[str]) -> dict:
    out = {}
    for k in keys:
        vals = [r[k] for r in rows if r.get(k) is not None]
        if vals:
            out[k] = dataclasses.asdict(StabilitySummary.of(vals))
    return out


def _run_train(cfg: ExperimentConfig, sharpness: bool) -> ExperimentResult:
    which = "mnist_mlp" if cfg.task == "mnist_mlp" else ("synthetic_blobs" if cfg.task == "synthetic_blobs" else cfg.dataset)
    tr, te = load_datasets(cfg, which)
    outs = _map_seeds(_train_seed, [(cfg, s, tr, te, sharpness) for s in _seeds(cfg)])
    rows = [o["row"] for o in outs]
    keys = ["test_accuracy", "test_loss", "generalization_gap", "mean_sq_grad_norm"] + (["sharpness"] if sharpness else [])
    summary = {"stability": _stability(rows, keys), "n_train": len(tr), "n_test": len(te)}
    return ExperimentResult(rows, summary, {"_outs": outs, "_data": (tr, te)})


def _run_slice(cfg: ExperimentConfig) -> ExperimentResult:
    res = _run_train(cfg.replace(n_seeds=1), sharpness=False)
    tr, te = res.extra_files.pop("_data")
    params: ParamVector = res.extra_files.pop("_outs")[0]["params"]
    spec = model_spec(cfg, tr)
    alphas = np.round(np.linspace(-0.8, 0.8, cfg.slice_points), 12)
    sub = tr.subset(np.arange(min(cfg.sharpness_subset, len(tr))))
    rows = filter_normalized_slice(params, spec, sub, alphas, stream(cfg.seed, Purpose.SLICE))
    res.extra_files["slice.csv"] = [dataclasses.asdict(r) for r in rows]
    return res


def _run_toy(cfg: ExperimentConfig) -> ExperimentResult:
    tcfg = cfg.toy_config()
    rec: dict = {}
    results = run_toy_experiment(cfg.toy_runs, tcfg, smoothing=cfg.toy_smoothing, seed=cfg.seed, record=rec)
    rows = [
        {"run": i, "theta_x": float(th[0]), "theta_y": float(th[1]), "loss": loss}
        for i, (th, loss) in enumerate(results)
    ]
    summary = toy_statistics(results)
    summary["mean_sq_grad_norm"] = float(rec["mean_sq_grad_norm"].mean())
    summary["config"] = dataclasses.asdict(tcfg)
    summary["smoothing"] = cfg.toy_smoothing
    summary["smoothing_std"] = tcfg.smoothing_std if cfg.toy_smoothing else 0.0
    return ExperimentResult(rows, summary)


def toy_statistics(results, u=(0.0, 0.0), capture_radius: float = 7.5) -> dict:
    theta = np.array([t for t, _ in results])
    losses = np.array([l for _, l in results])
    return {
        "runs": len(results),
        "flat_capture": float(np.mean(np.linalg.norm(theta - np.asarray(u), axis=1) < capture_radius)),
        "median_loss": float(np.median(losses)),
        "p99_loss": float(np.percentile(losses, 99)),
        "mean_loss": float(losses.mean()),
        "std_loss": float(losses.std()),
    }


def _run_pate(cfg: ExperimentConfig) -> ExperimentResult:
    outs = _map_seeds(_pate_seed, [(cfg, s) for s in _seeds(cfg)])
    rows = [o["row"] for o in outs]
    summary = {"stability": _stability(rows, ["student_accuracy", "best_student_accuracy", "p_correct"])}
    return ExperimentResult(rows, summary)


def _run_accountant(cfg: ExperimentConfig) -> ExperimentResult:
    if cfg.sampling_rate > 0:
        q = cfg.sampling_rate
    else:
        tr, _ = load_datasets(cfg)
        q = cfg.expected_batch / len(tr)
    steps = cfg.steps
    if cfg.epsilon_target > 0:
        steps = accountant.steps_for_budget(cfg.epsilon_target, cfg.delta, q, cfg.noise_multiplier)
    spend = accountant.epsilon_for(q, cfg.noise_multiplier, steps, cfg.delta)
    row = {
        "sampling_rate": q,
        "noise_multiplier": cfg.noise_multiplier,
        "steps": steps,
        "delta": cfg.delta,
        "epsilon": spend.epsilon,
        "order": spend.order,
    }
    return ExperimentResult([row], {})


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> ExperimentResult:
    """Run every seed of ``cfg`` and, when ``out_dir`` is given, persist the results.

    A failure still writes runs.json with ``status = "failed"`` and the error
    before re-raising.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    try:
        if cfg.task in ("mnist_mlp", "synthetic_blobs"):
            res = _run_train(cfg, sharpness=False)
        elif cfg.task == "sharpness":
            res = _run_train(cfg, sharpness=True)
        elif cfg.task == "slice":
            res = _run_slice(cfg)
        elif cfg.task == "toy":
            res = _run_toy(cfg)
        elif cfg.task == "pate":
            res = _run_pate(cfg)
        else:
            res = _run_accountant(cfg)
    except Exception as exc:
        if out is not None:
            write_json(out / "runs.json", {"status": "failed", "error": f"{type(exc).__name__}: {exc}",
                                           "task": cfg.task, "config": cfg.as_dict(), "runs": []})
        raise
    res.extra_files.pop("_outs", None)
    res.extra_files.pop("_data", None)
    if out is not None:
        write_csv(out / "summary.csv", res.rows)
        for name, rows in res.extra_files.items():
            write_csv(out / name, rows)
        write_json(out / "runs.json", {"status": "ok", "task": cfg.task, "config": cfg.as_dict(),
                                       "seeds": _seeds(cfg), "runs": res.rows, "summary": res.summary})
    return res
