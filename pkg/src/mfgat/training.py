"""Adam, early stopping, cross-validation and the view-count ablation."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .autodiff import RngStream
from .datasets import Dataset, GraphRecord, SplitSpec, kfold, split_dataset
from .model import ModelConfig, ModelParams, build_model, loss_and_grads, predict_logits

log = logging.getLogger(__name__)

RESULTS_HEADER = ["model", "dataset", "views", "seed", "test_accuracy", "stopped_epoch", "wall_time_s"]


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient.

    ``params`` holds the parameters at the end of the last completed epoch.
    """

    def __init__(self, message: str, params: ModelParams | None = None, epoch: int = 0):
        super().__init__(message)
        self.params = params
        self.epoch = epoch


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ModelParams, **kw) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()}, **kw)


def adam_step(params: ModelParams, grads: Mapping[str, np.ndarray], state: AdamState
              ) -> tuple[ModelParams, AdamState]:
    """Bias-corrected Adam update, applied in place to ``params`` and ``state``."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {k}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, g in grads.items():
        if params[k].shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[k].shape} for {k}")
        m = state.m.setdefault(k, np.zeros_like(g))
        v = state.v.setdefault(k, np.zeros_like(g))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[k] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 200
    lr: float = 0.01
    batch_size: int = 32
    patience: int = 20
    split: SplitSpec = SplitSpec()
    seed: int = 0
    cv_folds: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # False: train accuracy is the running accuracy of the epoch's training passes
    eval_train: bool = False

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    def with_seed(self, seed: int) -> "TrainConfig":
        """Same config with the run seed and the split seed both set to ``seed``."""
        return replace(self, seed=seed, split=replace(self.split, seed=seed))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("split"), Mapping):
            d["split"] = SplitSpec(**d["split"])
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float


@dataclass
class RunReport:
    model: str
    dataset: str
    seed: int
    model_config: dict
    train_config: dict
    epochs: list[EpochRecord] = field(default_factory=list)
    stopped_epoch: int = 0
    best_val_epoch: int = 0
    best_val_acc: float = 0.0
    test_accuracy: float | None = None
    rng_algorithm: str = RngStream.ALGORITHM
    wall_time_s: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("wall_time_s")
        return d

    def to_json(self, include_timing: bool = False) -> str:
        """JSON text; wall time is left out by default so reruns are byte-identical."""
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        d = json.loads(text)
        d["epochs"] = [EpochRecord(**e) for e in d["epochs"]]
        return cls(**d)


class EarlyStopping:
    """Track the best validation score; ties keep the earlier epoch."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_score = -math.inf
        self.best_epoch = 0
        self.last_epoch = 0

    def update(self, epoch: int, score: float) -> bool:
        """Record ``score`` for ``epoch``; True when it is a new best."""
        self.last_epoch = epoch
        if score > self.best_score:
            self.best_score = score
            self.best_epoch = epoch
            return True
        return False

    @property
    def should_stop(self) -> bool:
        return self.last_epoch - self.best_epoch >= self.patience


def evaluate_accuracy(params: ModelParams, config: ModelConfig, graphs: Sequence[GraphRecord]) -> float:
    """Fraction of graphs whose argmax logit (lowest index on ties) equals the label."""
    if not graphs:
        raise ValueError("cannot evaluate accuracy on an empty graph list")
    correct = sum(int(np.argmax(predict_logits(g, params, config)[0]) == g.label) for g in graphs)
    return correct / len(graphs)


def fit(train: Sequence[GraphRecord], val: Sequence[GraphRecord], model_config: ModelConfig,
        train_config: TrainConfig, test: Sequence[GraphRecord] | None = None,
        dataset_name: str = "", params: ModelParams | None = None,
        on_epoch: Callable[[EpochRecord], None] | None = None) -> tuple[ModelParams, RunReport]:
    """Train with Adam and early stopping on validation accuracy.

    Gradients are averaged over ``batch_size`` graphs per step.  The returned
    parameters are those of the best validation epoch.
    """
    if not train or not val:
        raise ValueError("fit needs non-empty train and validation sets")
    tc = train_config
    root = RngStream(tc.seed)
    if params is None:
        params = build_model(model_config, root.child("init"))
    shuffle_rng, dropout_rng = root.child("shuffle"), root.child("dropout")
    state = AdamState.for_params(params, lr=tc.lr, beta1=tc.beta1, beta2=tc.beta2, eps=tc.adam_eps)
    report = RunReport(model_config.kind, dataset_name, tc.seed, model_config.to_dict(), tc.to_dict())
    stopper = EarlyStopping(tc.patience)
    best = {k: v.copy() for k, v in params.items()}
    start = time.perf_counter()

    for epoch in range(1, tc.max_epochs + 1):
        order = shuffle_rng.permutation(len(train))
        losses, hits = [], 0
        for lo in range(0, len(order), tc.batch_size):
            batch = order[lo:lo + tc.batch_size]
            acc: dict[str, np.ndarray] = {}
            for i in batch:
                g = train[i]
                loss, logits, grads = loss_and_grads(g, params, model_config, True, dropout_rng)
                if not math.isfinite(loss):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}", best, epoch)
                losses.append(loss)
                hits += int(np.argmax(logits[0]) == g.label)
                for k, v in grads.items():
                    if k in acc:
                        acc[k] += v
                    else:
                        acc[k] = v.copy()
            for v in acc.values():
                v /= len(batch)
            try:
                adam_step(params, acc, state)
            except DivergenceError as exc:
                raise DivergenceError(str(exc), best, epoch) from None

        train_acc = evaluate_accuracy(params, model_config, train) if tc.eval_train else hits / len(train)
        val_acc = evaluate_accuracy(params, model_config, val)
        rec = EpochRecord(epoch, float(np.mean(losses)), train_acc, val_acc)
        report.epochs.append(rec)
        if on_epoch:
            on_epoch(rec)
        log.debug("epoch %d loss %.4f train %.4f val %.4f", epoch, rec.train_loss, train_acc, val_acc)
        if stopper.update(epoch, val_acc):
            best = {k: v.copy() for k, v in params.items()}
        if stopper.should_stop:
            break

    report.stopped_epoch = stopper.last_epoch
    report.best_val_epoch = stopper.best_epoch
    report.best_val_acc = stopper.best_score
    if test:
        report.test_accuracy = evaluate_accuracy(best, model_config, test)
    report.wall_time_s = time.perf_counter() - start
    return best, report


def run_seed(dataset: Dataset, model_config: ModelConfig, train_config: TrainConfig,
             seed: int) -> tuple[ModelParams, RunReport]:
    """Split ``dataset`` with ``seed``, train with ``seed`` and score the test part."""
    tc = train_config.with_seed(seed)
    tr, va, te = split_dataset(dataset, tc.split)
    return fit(dataset.subset(tr), dataset.subset(va), model_config, tc,
               test=dataset.subset(te), dataset_name=dataset.name)


def _run_seed_job(args):
    return run_seed(*args)


def map_jobs(fn, items: Iterable, jobs: int = 1) -> list:
    """``[fn(x) for x in items]``, fanned out over processes when ``jobs > 1``; order kept."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


@dataclass
class CVResult:
    best_index: int
    best_config: ModelConfig
    mean_scores: list[float]
    fold_reports: list[list[RunReport]]
    params: ModelParams
    report: RunReport


def cross_validate(dataset: Dataset, grid: Sequence[ModelConfig], train_config: TrainConfig) -> CVResult:
    """k-fold selection over the train+val part; the winner is retrained on the train split.

    Fold scores are the best validation accuracy reached with early stopping
    on the held-out fold.  Ties go to the earliest config in ``grid``.
    """
    if not grid:
        raise ValueError("empty config grid")
    tc = train_config
    tr, va, te = split_dataset(dataset, tc.split)
    folds = kfold(tr + va, tc.cv_folds, tc.seed)
    means, reports = [], []
    for cfg in grid:
        fold_reports = []
        for fit_idx, hold_idx in folds:
            _, rep = fit(dataset.subset(fit_idx), dataset.subset(hold_idx), cfg, tc,
                         dataset_name=dataset.name)
            fold_reports.append(rep)
        reports.append(fold_reports)
        means.append(float(np.mean([r.best_val_acc for r in fold_reports])))
    best = int(np.argmax(means))
    params, report = fit(dataset.subset(tr), dataset.subset(va), grid[best], tc,
                         test=dataset.subset(te), dataset_name=dataset.name)
    return CVResult(best, grid[best], means, reports, params, report)


@dataclass
class AblationRow:
    views: int
    accuracies: dict[int, float]

    @property
    def median(self) -> float:
        return statistics.median(self.accuracies.values())


def ablate_views(dataset: Dataset, base_config: ModelConfig, view_counts: Sequence[int],
                 seeds: Sequence[int], train_config: TrainConfig, jobs: int = 1
                 ) -> tuple[list[AblationRow], list[RunReport]]:
    """Train once per (view count, seed); rows come back sorted by view count."""
    if not view_counts:
        raise ValueError("no view counts to ablate")
    if not seeds:
        raise ValueError("no seeds")
    counts = sorted(set(int(m) for m in view_counts))
    cells = [(dataset, replace(base_config, num_views=m), train_config, s) for m in counts for s in seeds]
    results = map_jobs(_run_seed_job, cells, jobs)
    rows, reports = [], []
    it = iter(results)
    for m in counts:
        accs = {}
        for s in seeds:
            _, rep = next(it)
            accs[s] = rep.test_accuracy
            reports.append(rep)
        rows.append(AblationRow(m, accs))
    return rows, reports


def results_csv(reports: Sequence[RunReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULTS_HEADER)
    for r in reports:
        w.writerow([r.model, r.dataset, r.model_config["num_views"], r.seed,
                    f"{r.test_accuracy:.4f}" if r.test_accuracy is not None else "",
                    r.stopped_epoch, f"{r.wall_time_s:.3f}"])
    return buf.getvalue()
