"""Minibatch maximum-likelihood training of UMNN-MAF models."""
from __future__ import annotations

import contextlib
import dataclasses
import logging
import os
import time
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError, NumericError, UMNNError
from .flow import FlowModel, build_flow, log_density, nll_loss_and_grads
from .monotonic import EVAL_STEPS, TRAIN_STEPS_RANGE
from .nn import AdamState, adam_step
from .serialize import save_model
from .toy import GENERATORS, Dataset, read_csv, sample_toy, standardize

log = logging.getLogger(__name__)

METRICS_HEADER = "epoch,train_nll,valid_nll,wall_ms"
MODEL_FILE = "model.umnn"
METRICS_FILE = "metrics.csv"


class TrainingAborted(UMNNError):
    """Training hit a non-finite loss or gradient; the best checkpoint so far is kept."""


def parse_shape(text) -> tuple[int, ...]:
    """``"4x50"`` or ``"50,50,50,50"`` (or a sequence) to a tuple of widths."""
    if isinstance(text, (tuple, list)):
        widths = tuple(int(w) for w in text)
    else:
        s = str(text).strip().lower()
        try:
            if "x" in s:
                layers, width = s.split("x")
                widths = (int(width),) * int(layers)
            else:
                widths = tuple(int(w) for w in s.split(",") if w.strip())
        except ValueError:
            raise ConfigurationError(f"cannot parse network shape {text!r}; use e.g. 4x50 or 50,50") from None
    if not widths or any(w < 1 for w in widths):
        raise ConfigurationError(f"network shape needs at least one positive width, got {text!r}")
    return widths


def parse_steps(text) -> int | tuple[int, int]:
    """Integration-step policy: an integer, or ``rand`` for a uniform draw per batch."""
    if isinstance(text, tuple):
        return text
    s = str(text).strip().lower()
    if s == "rand":
        return TRAIN_STEPS_RANGE
    try:
        n = int(s)
    except ValueError:
        raise ConfigurationError(f"integration steps must be an integer or 'rand', got {text!r}") from None
    if n < 2:
        raise ConfigurationError(f"need at least 2 integration steps, got {n}")
    return n


@dataclass
class RunConfig:
    """Training run settings; defaults are the 2D-toy configuration."""
    dataset: str = "eight_gaussians"
    n_points: int = 22222
    flows: int = 1
    embedding: tuple[int, ...] = (50, 50, 50, 50)
    integrand: tuple[int, ...] = (50, 50, 50, 50)
    q: int = 10
    steps: int | tuple[int, int] = 50
    eval_steps: int = EVAL_STEPS
    lr: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 100
    epochs: int = 150
    seed: int = 0
    out: str = "runs/default"
    deterministic: bool = False

    def __post_init__(self):
        self.embedding = parse_shape(self.embedding)
        self.integrand = parse_shape(self.integrand)
        self.steps = parse_steps(self.steps)

    def validate(self) -> "RunConfig":
        checks = [
            (self.dataset in GENERATORS or os.path.isfile(self.dataset),
             f"dataset must be one of {sorted(GENERATORS)} or an existing CSV file, got {self.dataset!r}"),
            (self.n_points >= 2, f"n_points must be >= 2, got {self.n_points}"),
            (self.flows >= 1, f"flows must be >= 1, got {self.flows}"),
            (self.q >= 1, f"q must be >= 1, got {self.q}"),
            (self.eval_steps >= 2, f"eval_steps must be >= 2, got {self.eval_steps}"),
            (self.lr > 0 and np.isfinite(self.lr), f"lr must be positive, got {self.lr}"),
            (self.weight_decay >= 0, f"weight_decay must be >= 0, got {self.weight_decay}"),
            (self.batch_size >= 1, f"batch_size must be >= 1, got {self.batch_size}"),
            (self.epochs >= 0, f"epochs must be >= 0, got {self.epochs}"),
            (self.seed >= 0, f"seed must be >= 0, got {self.seed}"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigurationError(message)
        return self

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]


def load_points(dataset: str, n_points: int, seed: int) -> np.ndarray:
    if dataset in GENERATORS:
        return sample_toy(dataset, n_points, seed)
    return read_csv(dataset)


def _seeds(seed: int) -> dict[str, int]:
    names = ["data", "split", "model", "shuffle"]
    states = np.random.SeedSequence(seed).generate_state(len(names))
    return dict(zip(names, (int(s) for s in states)))


@contextlib.contextmanager
def deterministic_threads(enabled: bool):
    """Pin BLAS to one thread so reductions happen in a fixed order."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=1):
        yield


def raw_nll(model: FlowModel, x_std: np.ndarray, N: int | None = None) -> float:
    """Mean NLL in raw data units for points already standardized with the model's stats."""
    return float(-np.mean(log_density(model, x_std, N)) + np.sum(np.log(model.std)))


@dataclass
class TrainResult:
    """``model`` is the state after the last epoch; the best one is on disk."""
    model: FlowModel
    best_valid_nll: float
    best_epoch: int
    metrics: list[tuple[int, float, float, int]]


def train(config: RunConfig) -> TrainResult:
    """Shuffled minibatch Adam on the NLL; writes ``metrics.csv`` and the best model to ``config.out``.

    Epoch 0 is the evaluation of the initial model, which is also the first
    checkpoint, so a model file exists even when ``epochs == 0`` or training
    aborts.
    """
    config.validate()
    seeds = _seeds(config.seed)
    points = load_points(config.dataset, config.n_points, seeds["data"])
    data = Dataset.split(points, seeds["split"])
    train_x, stats = standardize(data.train, data.stats)
    valid_x, _ = standardize(data.valid, stats)
    if train_x.shape[1] < 1:
        raise DimensionError("data has no columns")

    model = build_flow(train_x.shape[1], config.flows, config.embedding, config.integrand, config.q,
                       seeds["model"], config.steps, config.eval_steps)
    model.mean, model.std = stats.mean.copy(), stats.std.copy()
    stores = model.param_stores()
    optims = [AdamState.for_params(p, lr=config.lr, weight_decay=config.weight_decay) for p in stores]
    rng = np.random.default_rng(seeds["shuffle"])
    log_sigma = float(np.sum(np.log(stats.std)))

    os.makedirs(config.out, exist_ok=True)
    model_path = os.path.join(config.out, MODEL_FILE)
    metrics: list[tuple[int, float, float, int]] = []

    with deterministic_threads(config.deterministic), \
            open(os.path.join(config.out, METRICS_FILE), "w") as metrics_fh:
        metrics_fh.write(METRICS_HEADER + "\n")

        def record(epoch, train_nll, valid_nll, start):
            wall = 0 if config.deterministic else int(round(1000 * (time.perf_counter() - start)))
            metrics.append((epoch, train_nll, valid_nll, wall))
            metrics_fh.write(f"{epoch},{train_nll!r},{valid_nll!r},{wall}\n")
            metrics_fh.flush()
            log.info("epoch %d train %.4f valid %.4f", epoch, train_nll, valid_nll)

        start = time.perf_counter()
        best = raw_nll(model, valid_x)
        best_epoch = 0
        save_model(model, model_path)
        record(0, raw_nll(model, train_x), best, start)

        n = train_x.shape[0]
        for epoch in range(1, config.epochs + 1):
            start = time.perf_counter()
            order = rng.permutation(n)
            total = 0.0
            for lo in range(0, n, config.batch_size):
                batch = train_x[order[lo:lo + config.batch_size]]
                N = model.steps[0].block.sample_steps(rng)
                try:
                    loss = nll_loss_and_grads(model, batch, N)
                    for p, opt in zip(stores, optims):
                        adam_step(p, opt)
                except NumericError as err:
                    raise TrainingAborted(f"epoch {epoch}, batch starting at {lo}: {err}; "
                                          f"best model (epoch {best_epoch}) kept at {model_path}") from err
                total += loss * batch.shape[0]
            valid_nll = raw_nll(model, valid_x)
            if not np.isfinite(valid_nll):
                raise TrainingAborted(f"epoch {epoch}: non-finite validation NLL; "
                                      f"best model (epoch {best_epoch}) kept at {model_path}")
            if valid_nll < best:
                best, best_epoch = valid_nll, epoch
                save_model(model, model_path)
            record(epoch, total / n + log_sigma, valid_nll, start)
    return TrainResult(model, best, best_epoch, metrics)
