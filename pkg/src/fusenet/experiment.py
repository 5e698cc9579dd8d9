"""Multi-seed training of every requested fusion method, plus report output."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autograd as ag
from .config import ExperimentConfig, dump_config
from .data import (
    MultimodalBatch,
    MultimodalDataset,
    SyntheticTaskSpec,
    balanced_batch_indices,
    gen_synthetic,
    load_features,
    shuffled_batch_indices,
)
from .errors import DegenerateComparisonError, EvaluationError, FusenetError, TrainingDivergence
from .layers import write_params
from .metrics import accuracy, aggregate_runs, macro_accuracy, micro_f1, predict_classes, two_sample_z
from .models import FusionModel, LossBreakdown, ModelSpec, build_model, moddrop_apply, write_alpha_trajectory
from .optim import Adam, EarlyStopper, lr_schedule

log = logging.getLogger(__name__)

# rng stream ids; a stream is SeedSequence([seed, id])
STREAMS = {"init": 1, "batches": 2, "dropout": 3, "moddrop": 4}


class OutputError(FusenetError):
    exit_code = 5


def stream(seed: int, purpose: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, STREAMS[purpose]]))


@dataclass
class RunResult:
    method: str
    seed: int
    status: str = "ok"
    test_score: float = math.nan
    best_epoch: int = -1
    best_val_score: float = math.nan
    curve: list[tuple[int, float, float, float]] = field(default_factory=list)
    alphas: list[tuple[int, list[list[float]]]] = field(default_factory=list)
    error: str = ""
    params: dict | None = None


@dataclass
class TableRow:
    method: str
    metric: str
    mean: float
    std: float | None
    n_runs: int


@dataclass
class RunReport:
    config: ExperimentConfig
    metric: str
    runs: list[RunResult]
    table: list[TableRow]
    z: dict[tuple[str, str], float | None]


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------


def build_dataset(config: ExperimentConfig) -> MultimodalDataset:
    d = config.dataset
    if d.source == "files":
        return load_features(config.resolve(d.manifest))
    return gen_synthetic(SyntheticTaskSpec(d.kind, d.n_train, d.n_val, d.n_test, tuple(d.widths),
                                           d.noise_sd, d.n_classes, d.seed))


def resolve_loss(config: ExperimentConfig, dataset: MultimodalDataset) -> str:
    if config.model.loss != "auto":
        return config.model.loss
    return "softmax_ce" if dataset.label_mode == "multiclass" else "weighted_bce"


def resolve_metric(config: ExperimentConfig, dataset: MultimodalDataset) -> str:
    if config.training.metric != "auto":
        return config.training.metric
    return "macro_accuracy" if dataset.label_mode == "multiclass" else "micro_f1"


def model_spec(config: ExperimentConfig, dataset: MultimodalDataset, dropout: float | None = None) -> ModelSpec:
    m, t = config.model, config.training
    return ModelSpec(
        widths=dataset.widths,
        hidden=list(m.hidden),
        n_classes=dataset.n_classes,
        loss_kind=resolve_loss(config, dataset),
        batch_norm=m.batch_norm,
        dropout=t.dropout if dropout is None else dropout,
        alignment=m.alignment,
        target_width=m.target_width,
        pos_weight=m.pos_weight,
        bn_momentum=m.bn_momentum,
        bn_epsilon=m.bn_epsilon,
    )


def evaluate(model: FusionModel, data: MultimodalDataset, metric: str, threshold: float = 0.5) -> float:
    scores = model.predict(data.features)
    if metric == "micro_f1":
        return micro_f1(scores, data.labels, threshold)
    pred = predict_classes(scores)
    if metric == "accuracy":
        return accuracy(pred, data.class_index)
    return macro_accuracy(pred, data.class_index, data.n_classes)


def epoch_batches(config: ExperimentConfig, train: MultimodalDataset, rng: np.random.Generator) -> list[np.ndarray]:
    t = config.training
    policy = t.batch_policy
    if policy == "auto":
        policy = "balanced" if train.label_mode == "multiclass" else "shuffle"
    if policy == "balanced":
        return balanced_batch_indices(train.class_index, t.per_class, rng, train.n_classes)
    return shuffled_batch_indices(train.n_samples, t.batch_size, rng)


StepHook = Callable[[int, int, LossBreakdown], None]


def train_run(config: ExperimentConfig, dataset: MultimodalDataset, method: str, seed: int,
              on_step: StepHook | None = None, keep_params: bool = False) -> RunResult:
    """Train one (method, seed) pair with early stopping and score its best snapshot on test.

    Divergence (a non-finite loss) marks the run failed instead of raising.
    """
    t = config.training
    metric = resolve_metric(config, dataset)
    result = RunResult(method, seed)
    train, val, test = (dataset.subset(s) for s in ("train", "val", "test"))
    model = build_model(method, model_spec(config, dataset), stream(seed, "init"), stream(seed, "dropout"))
    batch_rng = stream(seed, "batches")
    moddrop_rng = stream(seed, "moddrop")
    opt = Adam(model.parameters(), t.beta1, t.beta2, t.adam_epsilon)
    stopper = EarlyStopper(t.patience)
    best_state = model.state_dict()
    alphas = getattr(model, "alphas", None)
    try:
        for epoch in range(t.epochs):
            lr = lr_schedule(t.learning_rate, epoch, t.lr_decay)
            model.train()
            losses = []
            for step, idx in enumerate(epoch_batches(config, train, batch_rng)):
                batch = train.batch(idx)
                if method == "moddrop":
                    batch = moddrop_apply(batch, t.moddrop_prob, moddrop_rng)
                loss, breakdown = model.loss(batch)
                if not math.isfinite(breakdown.total):
                    raise TrainingDivergence(f"{method} seed {seed}: non-finite loss at epoch {epoch}, step {step}")
                opt.zero_grad()
                ag.backward(loss)
                opt.step(lr)
                losses.append(breakdown.total)
                if on_step is not None:
                    on_step(epoch, step, breakdown)
            if not all(np.isfinite(p.values).all() for p in model.parameters()):
                raise TrainingDivergence(f"{method} seed {seed}: non-finite parameters after epoch {epoch}")
            val_score = evaluate(model, val, metric, t.threshold)
            result.curve.append((epoch, lr, float(np.mean(losses)) if losses else math.nan, val_score))
            if alphas is not None:
                result.alphas.append((epoch, alphas.snapshot()))
            decision = stopper.update(epoch, val_score)
            if stopper.improved:
                best_state = model.state_dict()
            if decision == "stop":
                break
        model.load_state_dict(best_state)
        result.best_epoch = stopper.best_epoch
        result.best_val_score = stopper.best_score
        result.test_score = evaluate(model, test, metric, t.threshold)
        if keep_params:
            result.params = best_state
    except (TrainingDivergence, EvaluationError, FloatingPointError) as exc:
        result.status = "failed"
        result.error = str(exc)
        log.warning("run failed: %s", exc)
    return result


def _job(args):
    config, dataset, method, seed = args
    return train_run(config, dataset, method, seed, keep_params=config.experiment.save_models)


def summarize(config: ExperimentConfig, metric: str, runs: list[RunResult]) -> tuple[list[TableRow], dict]:
    stats = {}
    table = []
    for method in config.experiment.methods:
        scores = [r.test_score for r in runs if r.method == method and r.status == "ok"]
        if scores:
            mean, std = aggregate_runs(scores)
        else:
            mean, std = math.nan, None
        stats[method] = (mean, std, len(scores))
        table.append(TableRow(method, metric, mean, std, len(scores)))
    z = {}
    for a in config.experiment.methods:
        for b in config.experiment.methods:
            ma, sa, na = stats[a]
            mb, sb, nb = stats[b]
            try:
                z[(a, b)] = two_sample_z(ma, sa, na, mb, sb, nb) if sa is not None and sb is not None else None
            except (DegenerateComparisonError, ValueError):
                z[(a, b)] = None
    return table, z


def run_experiment(config: ExperimentConfig, workers: int | None = None,
                   dataset: MultimodalDataset | None = None) -> RunReport:
    """Train every (method, seed) pair in the config and aggregate the test scores."""
    dataset = build_dataset(config) if dataset is None else dataset
    metric = resolve_metric(config, dataset)
    jobs = [(config, dataset, m, s) for m in config.experiment.methods for s in config.experiment.seeds]
    workers = config.experiment.workers if workers is None else workers
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_job, jobs))
    else:
        runs = [_job(j) for j in jobs]
    table, z = summarize(config, metric, runs)
    return RunReport(config, metric, runs, table, z)


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------


def _num(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return repr(float(x))


def emit_outputs(report: RunReport, out_dir) -> list[Path]:
    """Write tables, curves, fusion-weight trajectories and ``summary.json``; return the files written."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "curves").mkdir(exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OutputError(f"cannot write to output directory {out}: {exc}") from None
    written: list[Path] = []
    methods = report.config.experiment.methods

    def _csv(path: Path, header, rows):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        written.append(path)

    _csv(out / "results.csv", ["method", "metric", "mean", "std", "n_runs"],
         [[r.method, r.metric, _num(r.mean), _num(r.std), r.n_runs] for r in report.table])
    _csv(out / "zmatrix.csv", ["method", *methods],
         [[a, *(_num(report.z[(a, b)]) for b in methods)] for a in methods])
    _csv(out / "runs.csv", ["method", "seed", "status", "test_score", "best_epoch", "best_val_score", "error"],
         [[r.method, r.seed, r.status, _num(r.test_score), r.best_epoch, _num(r.best_val_score), r.error]
          for r in report.runs])
    for r in report.runs:
        _csv(out / "curves" / f"{r.method}_seed{r.seed}.csv", ["epoch", "lr", "train_loss", "val_score"],
             [[e, _num(lr), _num(tl), _num(vs)] for e, lr, tl, vs in r.curve])
        if r.alphas:
            (out / "alphas").mkdir(exist_ok=True)
            path = out / "alphas" / f"{r.method}_seed{r.seed}.csv"
            write_alpha_trajectory(r.alphas, path)
            written.append(path)
        if r.params is not None:
            (out / "models").mkdir(exist_ok=True)
            path = out / "models" / f"{r.method}_seed{r.seed}.fuse"
            with open(path, "wb") as fh:
                write_params(r.params, fh)
            written.append(path)

    summary_path = out / "summary.json"
    files = sorted(str(p.relative_to(out)) for p in written) + ["summary.json"]
    summary = {
        "config": dump_config(report.config),
        "metric": report.metric,
        "methods": methods,
        "seeds": report.config.experiment.seeds,
        "environment": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "platform": platform.platform(),
            "cpu_count": os.cpu_count(),
        },
        "failed_runs": [[r.method, r.seed, r.error] for r in report.runs if r.status != "ok"],
        "files": files,
    }
    summary_path.write_text(json.dumps(summary, indent=2) + "\n")
    written.append(summary_path)
    return written


# ---------------------------------------------------------------------------
# gradient suite
# ---------------------------------------------------------------------------


def config_widths(config: ExperimentConfig) -> tuple[list[int], int, str]:
    """Modality widths, class count and label mode implied by the dataset section."""
    d = config.dataset
    if d.source == "synthetic":
        return list(d.widths), d.n_classes, "multiclass"
    ds = load_features(config.resolve(d.manifest))
    return ds.widths, ds.n_classes, ds.label_mode


def centralnet_gradcheck(config: ExperimentConfig, step: float = 1e-5, rows: int = 6) -> float:
    """Max relative gradient error of a fresh CentralNet, alpha weights included.

    Dropout is off. Batch norm first sees one train-mode batch so its running
    statistics are not the trivial (0, 1), then runs in eval mode.
    """
    widths, n_classes, label_mode = config_widths(config)
    seed = config.experiment.seeds[0]
    loss = config.model.loss
    if loss == "auto":
        loss = "softmax_ce" if label_mode == "multiclass" else "weighted_bce"
    m = config.model
    spec = ModelSpec(widths, list(m.hidden), n_classes, loss, m.batch_norm, 0.0, m.alignment,
                     m.target_width, m.pos_weight, m.bn_momentum, m.bn_epsilon)
    model = build_model("centralnet", spec, stream(seed, "init"), stream(seed, "dropout"))
    rng = stream(seed, "batches")
    feats = [rng.standard_normal((rows, w)) for w in widths]
    if label_mode == "multiclass":
        labels = np.eye(n_classes)[rng.integers(0, n_classes, rows)]
    else:
        labels = (rng.random((rows, n_classes)) < 0.5).astype(float)
    model.train()
    model([rng.standard_normal((rows, w)) for w in widths])
    model.eval()
    batch = MultimodalBatch(feats, labels)
    return ag.grad_check(lambda: model.loss(batch)[0], model.parameters(), step)
