"""Loss, gradients, Adam, learning-rate schedule, training loop and gradient checking."""

from __future__ import annotations

import contextlib
import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NumericsError, ShapeError
from .graphs import GraphTriple, build_physical, row_normalize, select_topk
from .ingest import DatasetSplit, NormStats, WindowSample, stack_windows, zscore_apply
from .model import ModelConfig, Params, forward, init_params, prepare

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr0: float = 1e-3
    lr_decay: float = 0.1
    decay_epochs: tuple[int, ...] = (100, 150)
    grad_clip_norm: float = 5.0
    seed: int = 0
    loss: str = "mae"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # stop as soon as the epoch's running train MAE falls below this value
    target_train_mae: float | None = None
    # probability of feeding the ground truth to a decoder step (0 disables)
    scheduled_sampling: float = 0.0

    def __post_init__(self) -> None:
        if not self.lr0 > 0:
            raise ConfigError("lr0 must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must lie in (0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.loss not in ("mae", "mse"):
            raise ConfigError("loss must be 'mae' or 'mse'")
        if not self.grad_clip_norm > 0:
            raise ConfigError("grad_clip_norm must be positive")
        if not 0.0 <= self.scheduled_sampling <= 1.0:
            raise ConfigError("scheduled_sampling must lie in [0, 1]")


def mae_loss(pred, target):
    """Mean absolute error over all entries (tape-aware)."""
    return ad.mean_abs_error(pred, target)


def mse_loss(pred, target):
    return ad.mean_squared_error(pred, target)


LOSSES: dict[str, Callable] = {"mae": mae_loss, "mse": mse_loss}


def backward(loss: ad.Node, leaves: dict[str, ad.Node]) -> dict[str, np.ndarray]:
    """Reverse sweep over ``loss``'s tape -> gradient for every named leaf."""
    loss.tape.backward(loss)
    return loss.tape.gradients(leaves)


def loss_and_grads(
    params: Params,
    graphs,
    cfg: ModelConfig,
    inputs: np.ndarray,
    targets: np.ndarray,
    loss: str = "mae",
) -> tuple[float, dict[str, np.ndarray]]:
    tape = ad.Tape()
    leaves = {name: tape.leaf(v, name) for name, v in params.items()}
    pred = forward(inputs, graphs, leaves, cfg, m=targets.shape[-3])
    value = LOSSES[loss](pred, targets)
    grads = backward(value, leaves)
    return float(value.value), grads


def global_norm(grads: dict[str, np.ndarray]) -> float:
    # sorted names: the norm must not depend on dict insertion order
    return float(np.sqrt(sum(float(np.sum(grads[k] * grads[k])) for k in sorted(grads))))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Rescale so the global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Params, grads: dict[str, np.ndarray], state: AdamState) -> Params:
    """One bias-corrected Adam update; returns the new parameter dict."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Step decay: multiply by ``lr_decay`` at every milestone already reached."""
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    passed = sum(1 for e in config.decay_epochs if e <= epoch)
    return config.lr0 * config.lr_decay**passed


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_mae: float
    val_mae: float
    wall_seconds: float
    grad_norm: float


@dataclass
class TrainResult:
    params: Params
    log: list[EpochRecord]
    best_epoch: int
    final_params: Params

    def write_log(self, path: str | Path) -> None:
        write_train_log(path, self.log)


LOG_COLUMNS = ("epoch", "lr", "train_mae", "val_mae", "wall_seconds", "grad_norm")


def write_train_log(path: str | Path, records: Sequence[EpochRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in records:
            w.writerow([r.epoch, repr(r.lr), repr(r.train_mae), repr(r.val_mae), f"{r.wall_seconds:.3f}", repr(r.grad_norm)])


def normalized_arrays(
    samples: Sequence[WindowSample], stats: NormStats, target_stats: NormStats | None = None
) -> tuple[np.ndarray, np.ndarray]:
    x, y, _ = stack_windows(samples)
    return zscore_apply(x, stats), zscore_apply(y, target_stats or stats)


def predict_normalized(params: Params, graphs, cfg: ModelConfig, inputs: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Batched inference ``[S, n, N, C] -> [S, m, N, C]`` (normalized space)."""
    prep = prepare(params, graphs, cfg)
    out = [forward(inputs[i : i + batch_size], graphs, params, cfg, prep=prep) for i in range(0, len(inputs), batch_size)]
    return np.concatenate(out, axis=0)


def train(
    dataset: DatasetSplit,
    graphs: GraphTriple,
    model_cfg: ModelConfig,
    config: TrainConfig,
    stats: NormStats,
    target_stats: NormStats | None = None,
    init: Params | None = None,
    progress: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Mini-batch Adam on the normalized MAE; keeps the best-validation parameters.

    Samples are shuffled each epoch from a generator seeded by ``config.seed``
    and the model is initialized from the same seed, so a run is fully
    determined by (seed, configs, data).
    """
    if not dataset.train:
        raise ConfigError("training split is empty")
    x_tr, y_tr = normalized_arrays(dataset.train, stats, target_stats)
    val_samples = dataset.val or dataset.train
    x_va, y_va = normalized_arrays(val_samples, stats, target_stats)
    params = init_params(model_cfg, config.seed) if init is None else {k: np.array(v) for k, v in init.items()}
    rng = np.random.default_rng(config.seed)
    adam = AdamState(lr=config.lr0, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    m = y_tr.shape[1]
    records: list[EpochRecord] = []
    best, best_val, best_epoch = params, np.inf, -1
    for epoch in range(config.epochs):
        start = time.perf_counter()
        adam.lr = lr_schedule(epoch, config)
        order = rng.permutation(len(x_tr))
        total, count, norms = 0.0, 0, []
        for b in range(0, len(order), config.batch_size):
            idx = order[b : b + config.batch_size]
            teacher_steps: tuple[int, ...] = ()
            if config.scheduled_sampling > 0:
                teacher_steps = tuple(i for i in range(1, m) if rng.random() < config.scheduled_sampling)
            loss, grads = _batch_grads(params, graphs, model_cfg, x_tr[idx], y_tr[idx], config.loss, teacher_steps)
            if not np.isfinite(loss):
                raise NumericsError(f"training diverged: loss={loss} at epoch {epoch}, batch {b // config.batch_size}")
            grads, norm = clip_gradients(grads, config.grad_clip_norm)
            params = adam_step(params, grads, adam)
            total += loss * len(idx)
            count += len(idx)
            norms.append(norm)
        train_mae = total / count
        if config.loss != "mae":
            train_mae = float(np.mean(np.abs(predict_normalized(params, graphs, model_cfg, x_tr) - y_tr)))
        val_mae = float(np.mean(np.abs(predict_normalized(params, graphs, model_cfg, x_va) - y_va)))
        rec = EpochRecord(epoch, adam.lr, train_mae, val_mae, time.perf_counter() - start, float(np.mean(norms)))
        records.append(rec)
        if progress is not None:
            progress(rec)
        log.info("epoch %d lr=%.2e train_mae=%.4f val_mae=%.4f", epoch, adam.lr, train_mae, val_mae)
        if val_mae < best_val:
            best, best_val, best_epoch = params, val_mae, epoch
        if config.target_train_mae is not None and train_mae < config.target_train_mae:
            break
    return TrainResult(best, records, best_epoch, params)


def _batch_grads(params, graphs, cfg, x, y, loss, teacher_steps):
    if not teacher_steps:
        return loss_and_grads(params, graphs, cfg, x, y, loss)
    # scheduled sampling: ground-truth feed for the chosen decoder steps
    from .model import decode, encode

    tape = ad.Tape()
    leaves = {name: tape.leaf(v, name) for name, v in params.items()}
    prep = prepare(leaves, graphs, cfg)
    xs = np.moveaxis(x, 0, 2)
    teacher = np.moveaxis(y, 0, 2)
    preds = decode(encode(xs, prep, cfg), prep, cfg, y.shape[1], teacher=teacher, teacher_steps=teacher_steps)
    out = ad.moveaxis(ad.stack(preds, axis=0), 2, 0)
    value = LOSSES[loss](out, y)
    return float(value.value), backward(value, leaves)


@contextlib.contextmanager
def blas_threads(n: int | None):
    """Limit BLAS worker threads for the duration of the block."""
    if n is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


@dataclass
class GradCheckReport:
    max_rel_err: float
    n_coords: int
    tol: float
    worst: str
    loss: str

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} grad-check loss={self.loss} coords={self.n_coords} "
            f"max_rel_err={self.max_rel_err:.3e} tol={self.tol:.1e} worst={self.worst}"
        )


def random_graphs(n: int, rng: np.random.Generator, k: int | None = None) -> GraphTriple:
    """Connected random topology plus random positive similarity/correlation scores."""
    k = max(1, min(n - 1, 3 if k is None else k))
    pairs = [(int(rng.integers(0, i)), i) for i in range(1, n)]
    S = rng.random((n, n)) + 0.05
    S = (S + S.T) / 2
    np.fill_diagonal(S, 0.0)
    C = rng.random((n, n)) + 0.05
    C /= C.sum(axis=1, keepdims=True)
    return GraphTriple(
        physical=build_physical(pairs, n),
        similarity=row_normalize(S, select_topk(S, k), "similarity"),
        correlation=row_normalize(C, select_topk(C, k, include_diagonal=True), "correlation"),
    )


def relative_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    model_cfg: ModelConfig,
    seed: int = 0,
    h: float = 1e-5,
    tol: float = 1e-6,
    loss: str = "mse",
    n_coords: int = 200,
    n: int = 2,
    batch: int = 2,
    floor: float = 1e-4,
) -> GradCheckReport:
    """Central finite differences against the tape gradient on random coordinates.

    Parameters start from Xavier initialization with small random biases.
    For ``loss="mae"`` the targets are pushed at least 0.1 away from the
    predictions so no ``|x|`` kink lies within the finite-difference step.
    Relative error is ``|a - f| / max(|a|, |f|, floor)``.
    """
    rng = np.random.default_rng(seed)
    graphs = random_graphs(model_cfg.n_stations, rng)
    params = init_params(model_cfg, seed)
    for name, p in params.items():
        if p.ndim == 1:
            params[name] = 0.1 * rng.standard_normal(p.shape)
    m = model_cfg.horizon
    x = rng.standard_normal((batch, n, model_cfg.n_stations, model_cfg.channels))
    pred = forward(x, graphs, params, model_cfg)
    if loss == "mae":
        y = pred + rng.choice([-1.0, 1.0], size=pred.shape) * rng.uniform(0.1, 1.0, size=pred.shape)
    else:
        y = rng.standard_normal(pred.shape)
    fn = LOSSES[loss]

    def f(p: Params) -> float:
        return float(fn(forward(x, graphs, p, model_cfg, m=m), y))

    _, grads = loss_and_grads(params, graphs, model_cfg, x, y, loss)
    coords = _pick_coords(params, n_coords, rng)
    worst, worst_name = 0.0, ""
    for name, flat in coords:
        p = params[name]
        orig = p.flat[flat]
        p.flat[flat] = orig + h
        up = f(params)
        p.flat[flat] = orig - h
        down = f(params)
        p.flat[flat] = orig
        numeric = (up - down) / (2 * h)
        err = relative_error(float(grads[name].flat[flat]), numeric, floor)
        if err > worst:
            worst, worst_name = err, f"{name}[{flat}]"
    return GradCheckReport(worst, len(coords), tol, worst_name, loss)


def _pick_coords(params: Params, n_coords: int, rng: np.random.Generator) -> list[tuple[str, int]]:
    # one coordinate from every tensor, the rest uniformly over all entries
    names = list(params)
    coords = [(name, int(rng.integers(params[name].size))) for name in names]
    sizes = np.array([params[name].size for name in names])
    owners = rng.choice(len(names), size=max(0, n_coords - len(coords)), p=sizes / sizes.sum())
    coords += [(names[i], int(rng.integers(sizes[i]))) for i in owners]
    return coords
