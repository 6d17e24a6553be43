"""Training loop, evaluation, ablation runner, and per-scale probes.

One training run is single-threaded and fully determined by (seed,
config, dataset).  The ablation and probe harnesses orchestrate many such
runs and aggregate their reports; repeats can fan out across processes.
"""

from __future__ import annotations

import concurrent.futures
import csv
import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import VARIANTS, ExperimentConfig, TrainConfig
from .data import Scaler, TimeSeriesDataset, chronological_split, fit_scaler, \
    make_windows, stack_windows
from .errors import ConfigurationError, TrainingAbortedError
from .graph_learner import export_graphs
from .metrics import MetricReport, horizon_report, rmse, rse
from .model import Model, make_variant, save_checkpoint
from .nn import Linear, ParamStore
from .optim import Adam, clip_gradients
from .rng import RngSource
from .tensor import Tape, Tensor

Array = np.ndarray

SPLIT_NAMES = ("train", "val", "test")


# ---------------------------------------------------------------------------
# Data preparation

class PreparedData:
    """Normalized, windowed splits with access auditing.

    Every read of a split's arrays goes through :meth:`arrays`, which
    counts accesses per split; a run that never evaluated on test must
    show ``counters["test"] == 0``.
    """

    def __init__(self, dataset: TimeSeriesDataset, scaler: Scaler,
                 ranges: dict[str, range], normalized: Array,
                 splits: dict[str, tuple[Array, Array, Array]]):
        self.dataset = dataset
        self.scaler = scaler
        self.ranges = ranges
        self.normalized = normalized  # (N, T, C)
        self._splits = splits
        self.counters = {name: 0 for name in SPLIT_NAMES}

    @property
    def reference(self) -> Array:
        """Normalized training slice (N, T_train, C) for the static extractor."""
        r = self.ranges["train"]
        return self.normalized[:, r.start:r.stop, :]

    def arrays(self, split: str) -> tuple[Array, Array, Array]:
        """(inputs, targets, anchors) of one split, counting the access."""
        if split not in self._splits:
            raise ConfigurationError(
                f"unknown split {split!r}; expected one of {SPLIT_NAMES}"
            )
        self.counters[split] += 1
        return self._splits[split]

    def n_windows(self, split: str) -> int:
        if split not in self._splits:
            raise ConfigurationError(
                f"unknown split {split!r}; expected one of {SPLIT_NAMES}"
            )
        return self._splits[split][0].shape[0]


def prepare_data(dataset: TimeSeriesDataset, config: ExperimentConfig,
                 scaler: Scaler | dict | None = None) -> PreparedData:
    """Split chronologically, fit the scaler on train only, window each split.

    An already-fit scaler (e.g. the one stored in a checkpoint) can be
    supplied to normalize exactly as the original training run did.
    """
    mc = config.model
    if dataset.n_nodes != mc.n_nodes or dataset.n_channels != mc.n_channels:
        raise ConfigurationError(
            f"dataset is N={dataset.n_nodes}, C={dataset.n_channels} but the "
            f"model expects N={mc.n_nodes}, C={mc.n_channels}"
        )
    train_r, val_r, test_r = chronological_split(dataset, config.split_spec())
    ranges = {"train": train_r, "val": val_r, "test": test_r}
    if isinstance(scaler, dict):
        scaler = Scaler.from_dict(scaler)
    if scaler is None:
        scaler = fit_scaler(dataset, train_r, config.scaler_mode)
    normalized = scaler.transform_dataset(dataset.values)
    norm_ds = TimeSeriesDataset(normalized, list(dataset.node_ids),
                                granularity=dataset.granularity,
                                name=dataset.name)
    splits = {}
    for name, seg in ranges.items():
        samples = make_windows(norm_ds, mc.window, mc.horizon, mc.task, seg)
        if not samples:
            raise ConfigurationError(
                f"{name} split ({len(seg)} steps) yields no windows for "
                f"P={mc.window}, Q={mc.horizon}"
            )
        splits[name] = stack_windows(samples)
    return PreparedData(dataset, scaler, ranges, normalized, splits)


# ---------------------------------------------------------------------------
# Losses and batched prediction

def loss_tensor(pred: Tensor, target: Array, kind: str) -> Tensor:
    """Scalar training loss on the normalized scale."""
    diff = T.sub(pred, Tensor(np.asarray(target, dtype=np.float64)))
    if kind == "mae":
        return T.reduce_mean(T.absolute(diff))
    if kind == "mse":
        return T.reduce_mean(T.mul(diff, diff))
    raise ConfigurationError(f"unknown loss {kind!r}")


def predict_batched(model: Model, inputs: Array, batch_size: int = 64) -> Array:
    outs = []
    for start in range(0, inputs.shape[0], batch_size):
        outs.append(model.predict(inputs[start:start + batch_size]))
    return np.concatenate(outs, axis=0)


def headline_value(task: str, y_true: Array, y_pred: Array) -> float:
    """Model-selection metric: RSE for single-step, pooled RMSE for multi."""
    if task == "single":
        return rse(y_true, y_pred)
    pooled_t = y_true.reshape(-1, *y_true.shape[2:])
    pooled_p = y_pred.reshape(-1, *y_pred.shape[2:])
    return rmse(pooled_t, pooled_p)


# ---------------------------------------------------------------------------
# Training

@dataclass
class TrainResult:
    history: list[dict]          # {"epoch", "train_loss", "val_metric"}
    best_epoch: int
    best_val: float
    optimizer_state: dict
    wall_clock: float


def _zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def _grad_list(params: dict[str, Tensor]) -> list[Array]:
    grads = []
    for p in params.values():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        grads.append(p.grad)
    return grads


def _abort(loss_value: float, epoch: int, batch: int,
           params: dict[str, Tensor]) -> TrainingAbortedError:
    norms = {name: float(np.linalg.norm(p.data)) for name, p in params.items()}
    total = math.sqrt(sum(v * v for v in norms.values()))
    err = TrainingAbortedError(
        f"non-finite loss {loss_value!r} at epoch {epoch}, batch {batch}; "
        f"global parameter norm {total:.6g}"
    )
    err.diagnostic = {"epoch": epoch, "batch": batch,
                      "global_param_norm": total, "param_norms": norms}
    return err


def _run_epoch(forward, params: dict[str, Tensor], opt: Adam, xs: Array,
               ys: Array, order: Array, cfg: TrainConfig, epoch: int) -> float:
    """One pass over the training windows; returns the mean sample loss."""
    total, seen = 0.0, 0
    for bi, start in enumerate(range(0, order.size, cfg.batch_size)):
        idx = order[start:start + cfg.batch_size]
        _zero_grads(params)
        with Tape() as tape:
            pred = forward(xs[idx])
            loss = loss_tensor(pred, ys[idx], cfg.loss)
        value = float(loss.data)
        if not math.isfinite(value):
            raise _abort(value, epoch, bi, params)
        tape.backward(loss)
        clip_gradients(_grad_list(params), cfg.clip_norm)
        opt.step()
        total += value * idx.size
        seen += idx.size
    return total / seen


def _fit(forward, validate, params: dict[str, Tensor], cfg: TrainConfig,
         xs: Array, ys: Array, shuffle: RngSource) -> TrainResult:
    """Generic loop shared by full-model training and head-only probes."""
    t0 = time.perf_counter()
    opt = Adam(params, lr=cfg.lr)
    history: list[dict] = []
    best_val = math.inf
    best_epoch = 0
    best_params: dict[str, Array] = {}
    best_opt: dict = opt.state_dict()
    stall = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle.next_stream("shuffle").permutation(xs.shape[0])
        train_loss = _run_epoch(forward, params, opt, xs, ys, order, cfg, epoch)
        val_metric = validate()
        history.append({"epoch": epoch, "train_loss": train_loss,
                        "val_metric": val_metric})
        if val_metric < best_val:
            best_val = val_metric
            best_epoch = epoch
            best_params = {k: p.data.copy() for k, p in params.items()}
            best_opt = opt.state_dict()
            stall = 0
        else:
            stall += 1
            if cfg.patience and stall >= cfg.patience:
                break
    if best_params:
        for k, p in params.items():
            p.data = best_params[k]
    return TrainResult(history, best_epoch, best_val, best_opt,
                       time.perf_counter() - t0)


def train(model: Model, data: PreparedData, cfg: TrainConfig,
          batch_size_eval: int = 64) -> TrainResult:
    """Fit the model on the train split, selecting by validation metric.

    The model is left holding the best-validation parameters; the history
    records every epoch's mean training loss and validation metric.
    """
    model.set_reference_series(data.reference)
    xs, ys, _ = data.arrays("train")
    src = model.store.rng
    dropout_rng = src.stream("dropout")

    def forward(batch: Array) -> Tensor:
        out, _ = model.forward(batch, training=True, rng=dropout_rng)
        return out

    def validate() -> float:
        vx, vy, _ = data.arrays("val")
        pred = predict_batched(model, vx, batch_size_eval)
        return headline_value(model.config.task, data.scaler.inverse(vy),
                              data.scaler.inverse(pred))

    return _fit(forward, validate, model.parameters(), cfg, xs, ys, src)


# ---------------------------------------------------------------------------
# Evaluation

def evaluate(model: Model, inputs: Array, targets: Array,
             scaler: Scaler | None, batch_size: int = 64) -> MetricReport:
    """De-normalize predictions and targets, then report per-horizon metrics."""
    if scaler is None:
        raise ConfigurationError(
            "evaluation requires the training scaler; refusing to report "
            "raw-scale metrics"
        )
    preds = predict_batched(model, inputs, batch_size)
    return horizon_report(scaler.inverse(targets), scaler.inverse(preds),
                          task=model.config.task, horizon=model.config.horizon)


def evaluate_split(model: Model, data: PreparedData, split: str = "test",
                   batch_size: int = 64) -> MetricReport:
    x, y, _ = data.arrays(split)
    return evaluate(model, x, y, data.scaler, batch_size)


def persistence_forecast(inputs: Array, task: str, horizon: int) -> Array:
    """Ŷ = last observed value, repeated across the horizon for multi-step."""
    last = inputs[:, -1]  # (B, N, C)
    if task == "single":
        return last.copy()
    return np.repeat(last[:, None], horizon, axis=1)


def persistence_report(data: PreparedData, task: str, horizon: int,
                       split: str = "test") -> MetricReport:
    x, y, _ = data.arrays(split)
    preds = persistence_forecast(x, task, horizon)
    return horizon_report(data.scaler.inverse(y), data.scaler.inverse(preds),
                          task=task, horizon=horizon)


# ---------------------------------------------------------------------------
# Run directory

def write_history(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_metric"])
        for row in history:
            writer.writerow([row["epoch"], repr(row["train_loss"]),
                             repr(row["val_metric"])])


def load_history(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append({"epoch": int(rec["epoch"]),
                         "train_loss": float(rec["train_loss"]),
                         "val_metric": float(rec["val_metric"])})
    return rows


def export_run_graphs(model: Model, data: PreparedData, out_dir) -> list[Path]:
    """Export the learned adjacencies for the final look-back window."""
    t_total = data.normalized.shape[1]
    p = model.config.window
    window = data.normalized[:, t_total - p:, :].transpose(1, 0, 2)
    written = []
    for layer, (seq, offset) in enumerate(model.graph_inspection(window), 1):
        written.extend(export_graphs(seq, out_dir, layer=layer,
                                     time_offset=offset + t_total - p))
    return written


def write_run_dir(out_dir, config: ExperimentConfig, model: Model,
                  data: PreparedData, result: TrainResult,
                  report: MetricReport, force: bool = False) -> dict[str, Path]:
    """Persist one run: config, history, checkpoint, metrics, graphs."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigurationError(
            f"run directory {out} is not empty; pass force to overwrite"
        )
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "config": out / "config.json",
        "history": out / "history.csv",
        "checkpoint": out / "checkpoint.bin",
        "metrics_json": out / "metrics.json",
        "metrics_csv": out / "metrics.csv",
        "graphs": out / "graphs",
    }
    paths["config"].write_text(config.to_json())
    write_history(paths["history"], result.history)
    save_checkpoint(model, paths["checkpoint"],
                    optimizer_state=result.optimizer_state,
                    epoch=result.best_epoch,
                    rng_counter=model.store.rng.counter,
                    scaler=data.scaler.to_dict())
    paths["metrics_json"].write_text(report.to_json())
    report.write_csv(paths["metrics_csv"])
    export_run_graphs(model, data, paths["graphs"])
    return paths


def run_experiment(dataset: TimeSeriesDataset, config: ExperimentConfig,
                   out_dir=None, force: bool = False,
                   ) -> tuple[Model, PreparedData, TrainResult, MetricReport]:
    """Prepare → train → evaluate on test → optionally persist the run."""
    data = prepare_data(dataset, config)
    model = Model(config.model)
    result = train(model, data, config.train)
    report = evaluate_split(model, data, "test")
    if out_dir is not None:
        write_run_dir(out_dir, config, model, data, result, report, force)
    return model, data, result, report


# ---------------------------------------------------------------------------
# Ablation harness

HEADLINE_METRICS = ("rmse", "mae", "corr")


def dataset_hash(dataset: TimeSeriesDataset) -> str:
    digest = hashlib.sha256()
    digest.update(repr(dataset.values.shape).encode())
    digest.update(np.ascontiguousarray(dataset.values).tobytes())
    return f"sha256:{digest.hexdigest()}"


def config_fingerprint(config: ExperimentConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return f"sha256:{hashlib.sha256(blob).hexdigest()}"


def headline_row(report: MetricReport) -> dict[str, float]:
    """The 'All' row of a multi-step report, or the single row otherwise."""
    if "All" in report.rows:
        return dict(report.rows["All"])
    (label,) = list(report.rows) if len(report.rows) == 1 else (None,)
    if label is None:
        raise ConfigurationError(
            f"cannot pick a headline row from labels {list(report.rows)}"
        )
    return dict(report.rows[label])


@dataclass
class ExperimentReport:
    """Per-run metrics plus aggregates for a variant-comparison experiment."""

    runs: list[dict]
    aggregates: dict[str, dict[str, dict[str, float]]]
    config_fingerprint: str
    dataset_hash: str
    wall_clock: float

    @staticmethod
    def aggregate(runs: list[dict]) -> dict[str, dict[str, dict[str, float]]]:
        by_variant: dict[str, list[dict]] = {}
        for run in runs:
            by_variant.setdefault(run["variant"], []).append(run["metrics"])
        out: dict[str, dict[str, dict[str, float]]] = {}
        for variant, entries in by_variant.items():
            out[variant] = {}
            for metric in HEADLINE_METRICS:
                values = np.asarray([e[metric] for e in entries])
                out[variant][metric] = {
                    "mean": float(values.mean()),
                    "std": float(values.std()),
                }
        return out

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentReport":
        return cls(**json.loads(text))

    def write_csv(self, path) -> None:
        """Variant-per-row table with mean ± std columns per metric."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            header = ["variant"]
            for metric in HEADLINE_METRICS:
                header += [f"{metric}_mean", f"{metric}_std"]
            writer.writerow(header)
            for variant, stats in self.aggregates.items():
                row = [variant]
                for metric in HEADLINE_METRICS:
                    row += [repr(stats[metric]["mean"]),
                            repr(stats[metric]["std"])]
                writer.writerow(row)


def _single_run(dataset: TimeSeriesDataset, config: ExperimentConfig,
                variant: str, seed: int,
                data: PreparedData | None = None) -> dict:
    t0 = time.perf_counter()
    if data is None:
        data = prepare_data(dataset, config)
    model = make_variant(replace(config.model, seed=seed), variant)
    result = train(model, data, config.train)
    report = evaluate_split(model, data, "test")
    metrics = headline_row(report)
    return {
        "variant": variant,
        "seed": seed,
        "metrics": metrics,
        "best_epoch": result.best_epoch,
        "best_val": result.best_val,
        "history": [[r["epoch"], r["train_loss"], r["val_metric"]]
                    for r in result.history],
        "wall_clock": time.perf_counter() - t0,
    }


def _run_task(args: tuple) -> dict:
    values, node_ids, config_dict, variant, seed = args
    dataset = TimeSeriesDataset(values, node_ids)
    config = ExperimentConfig.from_dict(config_dict)
    return _single_run(dataset, config, variant, seed)


def ablation_seeds(config: ExperimentConfig, repeats: int) -> tuple[int, ...]:
    if config.train.seeds:
        return tuple(config.train.seeds)
    return tuple(config.model.seed + i for i in range(repeats))


def run_ablation(dataset: TimeSeriesDataset, config: ExperimentConfig,
                 repeats: int = 10, variants: tuple[str, ...] = VARIANTS,
                 jobs: int = 1) -> ExperimentReport:
    """Train every variant under identical per-repeat seeds and compare."""
    for v in variants:
        if v not in VARIANTS:
            raise ConfigurationError(f"unknown variant {v!r}")
    seeds = ablation_seeds(config, repeats)
    tasks = [(variant, seed) for variant in variants for seed in seeds]
    t0 = time.perf_counter()
    if jobs > 1:
        payload = [(dataset.values, list(dataset.node_ids), config.to_dict(),
                    variant, seed) for variant, seed in tasks]
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_run_task, payload))
    else:
        data = prepare_data(dataset, config)
        runs = [_single_run(dataset, config, variant, seed, data)
                for variant, seed in tasks]
    return ExperimentReport(
        runs=runs,
        aggregates=ExperimentReport.aggregate(runs),
        config_fingerprint=config_fingerprint(config),
        dataset_hash=dataset_hash(dataset),
        wall_clock=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# Scale probes

class ProbeHead:
    """Skip projection plus the two-layer output head, trained in isolation."""

    def __init__(self, model: Model, branch_dim: int, seed: int):
        c = model.config
        self.config = c
        self.store = ParamStore(RngSource(seed))
        self.skip = Linear(self.store, "probe.skip", branch_dim, c.c_skip)
        self.out1 = Linear(self.store, "probe.out1", c.c_skip, c.c_out1)
        head = c.n_channels if c.task == "single" else c.horizon * c.n_channels
        self.out2 = Linear(self.store, "probe.out2", c.c_out1, head)

    def __call__(self, feats: Tensor) -> Tensor:
        c = self.config
        out = self.out2(T.relu(self.out1(self.skip(feats))))
        if c.task == "multi":
            b = out.shape[0]
            out = T.reshape(out, (b, c.n_nodes, c.horizon, c.n_channels))
            out = T.transpose(out, (0, 2, 1, 3))
        return out

    def predict(self, feats: Array) -> Array:
        with T.no_grad():
            return self(Tensor(feats)).data


@dataclass
class ProbeResult:
    scale: int
    report: MetricReport
    history: list[dict]
    best_epoch: int
    best_val: float


def _cache_features(model: Model, inputs: Array, scale: int,
                    batch_size: int) -> Array:
    outs = []
    for start in range(0, inputs.shape[0], batch_size):
        outs.append(model.branch_features(inputs[start:start + batch_size],
                                          scale))
    return np.concatenate(outs, axis=0)


def scale_probe(model: Model, data: PreparedData, scale: int,
                cfg: TrainConfig, batch_size_eval: int = 256) -> ProbeResult:
    """Re-train the output head on one skip branch of the frozen backbone.

    Scale 0 feeds the raw window, 1..L the layer features, L+1 the final
    state; every other branch is absent entirely, so no backbone
    parameter sees a gradient.
    """
    c = model.config
    if not 0 <= scale <= c.n_layers + 1:
        raise ConfigurationError(
            f"scale index {scale} out of range 0..{c.n_layers + 1}"
        )
    if model.reference_series is None:
        model.set_reference_series(data.reference)
    xs, ys, _ = data.arrays("train")
    vx, vy, _ = data.arrays("val")
    feats_train = _cache_features(model, xs, scale, batch_size_eval)
    feats_val = _cache_features(model, vx, scale, batch_size_eval)

    head = ProbeHead(model, feats_train.shape[-1], seed=c.seed)

    def forward(batch: Array) -> Tensor:
        return head(Tensor(batch))

    def validate() -> float:
        pred = head.predict(feats_val)
        return headline_value(c.task, data.scaler.inverse(vy),
                              data.scaler.inverse(pred))

    result = _fit(forward, validate, head.store.params, cfg, feats_train, ys,
                  RngSource(c.seed))

    tx, ty, _ = data.arrays("test")
    feats_test = _cache_features(model, tx, scale, batch_size_eval)
    preds = head.predict(feats_test)
    report = horizon_report(data.scaler.inverse(ty),
                            data.scaler.inverse(preds),
                            task=c.task, horizon=c.horizon)
    return ProbeResult(scale, report, result.history, result.best_epoch,
                       result.best_val)


def scale_probe_all(model: Model, data: PreparedData, cfg: TrainConfig,
                    ) -> list[ProbeResult]:
    """One probe per scale: 0 (raw input) through L+1 (final state)."""
    return [scale_probe(model, data, scale, cfg)
            for scale in range(model.config.n_layers + 2)]
