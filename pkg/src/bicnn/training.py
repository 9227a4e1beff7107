"""Mini-batch Adam training, evaluation and repeated cross-validation."""

from __future__ import annotations

import logging
import math
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .text import Report

logger = logging.getLogger(__name__)


class TooFewReports(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


class TrainingDiverged(ad.NonFiniteLoss):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 64
    dropout_p: float = 0.5
    learning_rate: float = 0.001
    lr_decay_rate: float = 0.96
    lr_decay_interval: int = 1
    epochs: int = 50
    l2_eta: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 10
    split: tuple[float, float, float] = (0.70, 0.15, 0.15)
    num_runs: int = 30
    seed: int = 0
    loss_mode: str = "categorical"
    penalty_mode: str = "squared"

    def __post_init__(self) -> None:
        self.split = tuple(float(f) for f in self.split)
        self.validate()

    def validate(self) -> None:
        if len(self.split) != 3 or any(f < 0 for f in self.split) or abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be three non-negative values summing to 1, got {self.split}")
        # zero is allowed so a frozen run can exercise early stopping
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.epochs < 1 or self.lr_decay_interval < 1:
            raise ValueError("batch_size, epochs and lr_decay_interval must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.l2_eta < 0:
            raise ValueError("l2_eta must be >= 0")
        if self.loss_mode not in ("categorical", "binary"):
            raise ValueError(f"unknown loss_mode {self.loss_mode!r}")
        if self.penalty_mode not in ("squared", "norm"):
            raise ValueError(f"unknown penalty_mode {self.penalty_mode!r}")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["split"] = list(self.split)
        return d


class Classifier(Protocol):
    output_weight: Tensor

    def parameters(self) -> list[Tensor]: ...

    def predict(self, inputs, train: bool = False, rng: np.random.Generator | None = None) -> Tensor: ...

    def copy_state(self) -> list[np.ndarray]: ...

    def load_state(self, state: list[np.ndarray]) -> None: ...


@dataclass
class Dataset:
    """Model inputs (a tuple of arrays sharing a leading axis) plus labels."""

    inputs: tuple[np.ndarray, ...]
    labels: np.ndarray
    ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        ids = [self.ids[i] for i in idx] if self.ids else []
        return Dataset(tuple(a[idx] for a in self.inputs), self.labels[idx], ids)

    def batch_inputs(self, idx):
        parts = tuple(a[idx] for a in self.inputs)
        return parts if len(parts) > 1 else parts[0]


# ----------------------------------------------------------------- splitting


def split_sizes(n: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    n_valid = int(math.floor(fractions[1] * n + 1e-9))
    n_test = int(math.floor(fractions[2] * n + 1e-9))
    return n - n_valid - n_test, n_valid, n_test


def split_data(reports: Sequence[Report], fractions=(0.70, 0.15, 0.15), seed: int = 0):
    """Shuffle then cut into (train, valid, test).

    Validation and test sizes are ``floor(fraction * n)``; the remainder goes
    to training.
    """
    if len(reports) < 10:
        raise TooFewReports(f"need at least 10 reports, got {len(reports)}")
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must be three values summing to 1")
    order = np.random.default_rng(seed).permutation(len(reports))
    n_train, n_valid, _ = split_sizes(len(reports), fractions)
    pick = lambda idx: [reports[i] for i in idx]  # noqa: E731
    return (
        pick(order[:n_train]),
        pick(order[n_train : n_train + n_valid]),
        pick(order[n_train + n_valid :]),
    )


# ----------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.values) for p in params], [np.zeros_like(p.values) for p in params])


def adam_step(
    params: Sequence[Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update using each parameter's ``grad``, in place."""
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradient(f"non-finite gradient in {p.name or p.shape}")
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.values -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def decayed_lr(lr0: float, epoch: int, decay_rate: float, interval: int) -> float:
    """Staircase exponential decay: ``lr0 * decay_rate ** (epoch // interval)``."""
    return lr0 * decay_rate ** (epoch // interval)


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalResult:
    accuracy: float
    loss: float
    confusion: np.ndarray
    precision: list[float]
    recall: list[float]
    predictions: np.ndarray

    def to_dict(self) -> dict[str, Any]:
        return {
            "accuracy": self.accuracy,
            "loss": self.loss,
            "precision": self.precision,
            "recall": self.recall,
            "confusion": self.confusion.tolist(),
        }


def predict_proba(model: Classifier, data: Dataset, batch_size: int = 256) -> np.ndarray:
    out = []
    for lo in range(0, len(data), batch_size):
        idx = np.arange(lo, min(lo + batch_size, len(data)))
        out.append(model.predict(data.batch_inputs(idx), train=False).values)
    return np.concatenate(out) if out else np.zeros((0, 0))


def confusion_metrics(labels: np.ndarray, preds: np.ndarray, num_classes: int):
    """Confusion matrix (rows = true class) with per-class precision and recall."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    col, row = cm.sum(axis=0), cm.sum(axis=1)
    diag = np.diag(cm)
    precision = [float(diag[c] / col[c]) if col[c] else 0.0 for c in range(num_classes)]
    recall = [float(diag[c] / row[c]) if row[c] else 0.0 for c in range(num_classes)]
    return cm, precision, recall


def evaluate(model: Classifier, data: Dataset, num_classes: int, loss_mode: str = "categorical") -> EvalResult:
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    probs = predict_proba(model, data)
    preds = probs.argmax(axis=1)
    labels = data.labels.astype(np.int64)
    onehot = np.eye(num_classes)[labels]
    loss = ad.cross_entropy_loss(Tensor(probs), onehot, mode=loss_mode).item()
    cm, precision, recall = confusion_metrics(labels, preds, num_classes)
    return EvalResult(
        accuracy=float((preds == labels).mean()),
        loss=loss,
        confusion=cm,
        precision=precision,
        recall=recall,
        predictions=preds,
    )


# ------------------------------------------------------------------ training


@dataclass
class EpochMetrics:
    epoch: int
    steps: int
    learning_rate: float
    train_loss: float
    train_accuracy: float
    valid_loss: float
    valid_accuracy: float


@dataclass
class RunResult:
    history: list[EpochMetrics]
    test: EvalResult
    best_epoch: int
    convergence_epoch: int
    epochs_run: int
    total_steps: int
    seed: int
    wall_time: float = 0.0

    @property
    def test_accuracy(self) -> float:
        return self.test.accuracy

    @property
    def best_valid_loss(self) -> float:
        return min(h.valid_loss for h in self.history)

    def summary(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "test_accuracy": self.test_accuracy,
            "test_loss": self.test.loss,
            "best_epoch": self.best_epoch,
            "convergence_epoch": self.convergence_epoch,
            "epochs_run": self.epochs_run,
            "total_steps": self.total_steps,
        }


def batch_loss(model: Classifier, inputs, targets: np.ndarray, config: TrainConfig, rng) -> tuple[Tensor, Tensor]:
    """Forward in training mode; returns (probs, loss) recorded on the active graph."""
    probs = model.predict(inputs, train=True, rng=rng)
    ce = ad.cross_entropy_loss(probs, targets, mode=config.loss_mode)
    if config.l2_eta > 0:
        ce = ad.add(ce, ad.l2_penalty(model.output_weight, config.l2_eta, mode=config.penalty_mode))
    return probs, ce


def train(
    model: Classifier,
    train_data: Dataset,
    valid_data: Dataset,
    test_data: Dataset,
    config: TrainConfig,
    num_classes: int,
    seed: int = 0,
    on_epoch=None,
    restore_best: bool = True,
) -> RunResult:
    """Fit ``model`` in place and return metrics of its best-validation state.

    Early stopping watches validation loss; after training the parameters are
    restored to the epoch with the lowest validation loss and the test split
    is evaluated on that state.
    """
    if len(train_data) == 0 or len(valid_data) == 0:
        raise ValueError("training and validation splits must be non-empty")
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    params = model.parameters()
    state = AdamState.zeros_like(params)
    eye = np.eye(num_classes)

    history: list[EpochMetrics] = []
    best_loss = math.inf
    best_state = model.copy_state()
    best_epoch = 0
    stale = 0
    steps = 0
    for epoch in range(config.epochs):
        lr = decayed_lr(config.learning_rate, epoch, config.lr_decay_rate, config.lr_decay_interval)
        order = rng.permutation(len(train_data))
        loss_sum, correct = 0.0, 0
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo : lo + config.batch_size]
            targets = eye[train_data.labels[idx]]
            for p in params:
                p.zero_grad()
            try:
                with Graph() as g:
                    probs, loss = batch_loss(model, train_data.batch_inputs(idx), targets, config, rng)
                ad.backward(g, loss)
                adam_step(params, state, lr, config.beta1, config.beta2, config.adam_eps)
            except (ad.NonFiniteLoss, NonFiniteGradient) as exc:
                raise TrainingDiverged(f"epoch {epoch + 1}, step {steps + 1}, lr {lr:g}: {exc}") from exc
            steps += 1
            loss_sum += loss.item() * len(idx)
            correct += int((probs.values.argmax(axis=1) == train_data.labels[idx]).sum())

        val = evaluate(model, valid_data, num_classes, config.loss_mode)
        metrics = EpochMetrics(
            epoch=epoch + 1,
            steps=steps,
            learning_rate=lr,
            train_loss=loss_sum / len(train_data),
            train_accuracy=correct / len(train_data),
            valid_loss=val.loss,
            valid_accuracy=val.accuracy,
        )
        history.append(metrics)
        if on_epoch is not None:
            on_epoch(metrics)
        logger.debug("epoch %d: %s", epoch + 1, metrics)

        if val.loss < best_loss:
            best_loss, best_epoch, stale = val.loss, epoch + 1, 0
            best_state = model.copy_state()
        else:
            stale += 1
            if stale >= config.patience:
                break

    if restore_best:
        model.load_state(best_state)
    test = evaluate(model, test_data, num_classes, config.loss_mode)
    accs = [h.valid_accuracy for h in history]
    return RunResult(
        history=history,
        test=test,
        best_epoch=best_epoch,
        convergence_epoch=int(np.argmax(accs)) + 1,
        epochs_run=len(history),
        total_steps=steps,
        seed=seed,
        wall_time=time.perf_counter() - start,
    )


# ---------------------------------------------------------- cross-validation


def derive_seed(*entropy: int) -> int:
    return int(np.random.SeedSequence(list(entropy)).generate_state(1)[0])


@dataclass
class RunOutput:
    """A finished run together with everything needed to persist or re-evaluate it."""

    result: RunResult
    model: Any
    encoder: Any
    test_reports: list[Report]
    run_index: int


def run_once(reports: Sequence[Report], model_config, train_config: TrainConfig, seed: int, run_index: int = 0, on_epoch=None) -> RunOutput:
    """Split, encode, initialise and train one model from scratch."""
    from .pipeline import build_encoder, build_model

    train_r, valid_r, test_r = split_data(reports, train_config.split, derive_seed(seed, 0))
    encoder = build_encoder(model_config, train_r)
    model = build_model(model_config, encoder, derive_seed(seed, 1), train_config)
    datasets = [encoder.dataset(r) for r in (train_r, valid_r, test_r)]
    result = train(model, *datasets, train_config, encoder.num_classes, seed=derive_seed(seed, 2), on_epoch=on_epoch)
    return RunOutput(result, model, encoder, list(test_r), run_index)


def _run_worker(args) -> RunOutput:
    reports, model_config, train_config, seed, i = args
    try:
        return run_once(reports, model_config, train_config, seed, i)
    except Exception as exc:
        raise RuntimeError(f"run {i} (seed {seed}) failed: {exc}") from exc


def describe(values: Sequence[float]) -> dict[str, float]:
    vals = [float(v) for v in values]
    return {
        "mean": statistics.fmean(vals),
        "median": statistics.median(vals),
        "std": statistics.stdev(vals) if len(vals) > 1 else 0.0,
        "min": min(vals),
        "max": max(vals),
    }


@dataclass
class CrossValidation:
    runs: list[RunOutput]

    @property
    def results(self) -> list[RunResult]:
        return [r.result for r in self.runs]

    @property
    def accuracies(self) -> list[float]:
        return [r.test_accuracy for r in self.results]

    def summary(self) -> dict[str, Any]:
        res = self.results
        return {
            "num_runs": len(res),
            "test_accuracy": describe([r.test_accuracy for r in res]),
            "convergence_epoch": describe([r.convergence_epoch for r in res]),
            "best_epoch": describe([r.best_epoch for r in res]),
            "runs": [r.summary() for r in res],
        }

    def best(self) -> RunOutput:
        """Run with the lowest best-validation loss (ties: earliest run)."""
        return min(self.runs, key=lambda r: (r.result.best_valid_loss, r.run_index))


def run_seeds(train_config: TrainConfig) -> list[int]:
    return [derive_seed(train_config.seed, 1000 + i) for i in range(train_config.num_runs)]


def cross_validate(
    reports: Sequence[Report],
    model_config,
    train_config: TrainConfig,
    workers: int = 1,
    seeds: Sequence[int] | None = None,
    on_epoch=None,
) -> CrossValidation:
    """Repeat :func:`run_once` with independent seeds (fresh split/init/order each).

    With ``workers > 1`` runs execute in separate processes; each run owns its
    own RNG streams so the per-run results match a serial execution.
    """
    seeds = list(seeds) if seeds is not None else run_seeds(train_config)
    if len(seeds) < 2:
        raise ValueError("cross-validation needs at least 2 runs")
    jobs = [(list(reports), model_config, train_config, s, i) for i, s in enumerate(seeds)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_run_worker, jobs))
    else:
        runs = []
        for reports_, mc, tc, s, i in jobs:
            try:
                cb = (lambda m, i=i: on_epoch(i, m)) if on_epoch else None
                runs.append(run_once(reports_, mc, tc, s, i, on_epoch=cb))
            except Exception as exc:
                raise RuntimeError(f"run {i} (seed {s}) failed: {exc}") from exc
    return CrossValidation(runs)


def sign_test(a: Sequence[float], b: Sequence[float]) -> dict[str, float]:
    """Two-sided exact sign test on paired samples; ties are discarded."""
    if len(a) != len(b):
        raise ValueError("paired samples must have equal length")
    pos = sum(x > y for x, y in zip(a, b))
    neg = sum(x < y for x, y in zip(a, b))
    n = pos + neg
    if n == 0:
        return {"positive": 0, "negative": 0, "p_value": 1.0}
    k = min(pos, neg)
    tail = sum(math.comb(n, i) for i in range(k + 1)) / 2**n
    return {"positive": pos, "negative": neg, "p_value": min(1.0, 2 * tail)}
