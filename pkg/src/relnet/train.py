"""Loss, Adam with global-norm clipping, and the per-task training protocol."""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from typing import IO, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tape, Tensor
from .babi import Example, TaskData, Vocabulary, batchify, truncate
from .model import HyperParams, forward, init_params, leaves, predict

log = logging.getLogger(__name__)


def load_defaults() -> dict:
    return json.loads(resources.files("relnet").joinpath("defaults.json").read_text())


@dataclass
class TrainConfig:
    lr: float = 0.005
    lr_grid: Tuple[float, ...] = (0.01, 0.005, 0.001)
    clip_norm: float = 2.0
    max_epochs: int = 250
    batch_size: int = 32
    truncation: int = 70
    seeds: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dim: int = 100
    slots: int = 20
    normalize_relations: bool = False
    early_stop: bool = True
    dtype: str = "float32"
    eval_batch_size: int = 100
    track_train_error: bool = False

    def __post_init__(self):
        self.lr_grid = tuple(self.lr_grid)
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.clip_norm <= 0:
            raise ValueError("clip norm must be positive")
        if self.batch_size < 1 or self.truncation < 1 or self.max_epochs < 0:
            raise ValueError("batch_size and truncation must be >= 1, max_epochs >= 0")

    @classmethod
    def for_task(cls, task: int, **overrides) -> "TrainConfig":
        """Shipped defaults, then the task's own overrides, then ``overrides``."""
        shipped = load_defaults()
        values = dict(shipped["train"])
        values.update(shipped.get("tasks", {}).get(str(task), {}))
        values.update({k: v for k, v in overrides.items() if v is not None})
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**values)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_grid"] = list(self.lr_grid)
        return d


@dataclass
class RunRecord:
    task: int
    seed: int
    lr: float
    train_loss: List[float] = field(default_factory=list)
    valid_err: List[float] = field(default_factory=list)
    train_err: List[float] = field(default_factory=list)
    best_epoch: int = 0
    best_valid_err: float = 100.0
    test_err: Optional[float] = None
    wall_time: float = 0.0
    failed: bool = False
    error: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


class NonFiniteGradient(FloatingPointError):
    pass


def loss(tape: Tape, logits: Tensor, answers: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of the gold answers."""
    answers = np.asarray(answers, dtype=np.int64)
    if logits.value.ndim == 1:
        logits = tape.reshape(logits, (1,) + logits.shape)
        answers = answers.reshape(1)
    per_item = tape.cross_entropy(logits, answers)
    return tape.scale(tape.sum(per_item), 1.0 / len(answers))


def global_norm(grads: Dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_global_norm(grads: Dict[str, np.ndarray], max_norm: float = 2.0):
    """Scale all gradients jointly so their combined L2 norm is at most ``max_norm``.

    Returns ``(clipped, norm_before)``.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads), norm
    factor = max_norm / norm
    return {k: (g * factor).astype(g.dtype, copy=False) for k, g in grads.items()}, norm


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update, applied in place; returns ``(params, state)``."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for k, g in grads.items():
        m, v = state.m[k], state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        params[k] -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(params[k].dtype, copy=False)
    return params, state


def error_rate(predicted: np.ndarray, answers: np.ndarray) -> float:
    predicted = np.asarray(predicted)
    if predicted.size == 0:
        raise ValueError("cannot score an empty split")
    return 100.0 * float(np.mean(predicted != np.asarray(answers)))


def evaluate(params: Dict[str, np.ndarray], hyper: HyperParams, examples: Sequence[Example],
             vocab: Vocabulary, batch_size: int = 100) -> float:
    """Percentage of questions whose argmax answer is wrong (ties go to the lowest id)."""
    if not examples:
        raise ValueError("cannot evaluate an empty split")
    wrong = 0
    for batch in batchify(examples, vocab, batch_size, hyper.sentence_len):
        pred = np.argmax(predict(params, hyper, batch), axis=-1)
        wrong += int(np.sum(pred != batch.answers))
    return 100.0 * wrong / len(examples)


def hyper_for(data: TaskData, config: TrainConfig) -> HyperParams:
    return HyperParams(vocab_size=len(data.vocab), sentence_len=data.sentence_len,
                       dim=config.dim, slots=config.slots,
                       normalize_relations=config.normalize_relations)


def train_task(data: TaskData, config: TrainConfig, seed: int,
               metrics: Optional[IO[str]] = None, lr: Optional[float] = None):
    """Train one seeded run and keep the parameters with the lowest validation error.

    Writes one JSON line per epoch to ``metrics`` when given.  Returns
    ``(record, best_params, hyper)``; a run that hits a non-finite loss or
    gradient stops early with ``record.failed`` set.
    """
    lr = config.lr if lr is None else lr
    started = time.perf_counter()
    cut = lambda xs: [truncate(x, config.truncation) for x in xs]
    train, valid, test = cut(data.train), cut(data.valid), cut(data.test)
    if not valid:
        valid = train
    hyper = hyper_for(data, config)
    dtype = np.dtype(config.dtype)
    params = init_params(hyper, seed=seed, dtype=dtype)
    adam = AdamState.zeros_like(params)
    record = RunRecord(task=data.task, seed=seed, lr=lr)
    best = copy.deepcopy(params)

    for epoch in range(1, config.max_epochs + 1):
        total, count = 0.0, 0
        order_seed = seed * 1_000_003 + epoch
        for batch in batchify(train, data.vocab, config.batch_size, hyper.sentence_len, seed=order_seed):
            tape = Tape()
            lv = leaves(params)
            logits, _ = forward(tape, batch, lv, hyper)
            value = loss(tape, logits, batch.answers)
            batch_loss = float(value.value)
            if not math.isfinite(batch_loss):
                record.failed, record.error = True, f"non-finite loss at epoch {epoch}"
                break
            g = tape.backward(value, lv.values())
            grads = {k: g[lv[k]] for k in lv}
            try:
                grads, _ = clip_global_norm(grads, config.clip_norm)
            except NonFiniteGradient as exc:
                record.failed, record.error = True, f"{exc} at epoch {epoch}"
                break
            adam_step(params, grads, adam, lr, config.beta1, config.beta2, config.eps)
            total += batch_loss * len(batch)
            count += len(batch)
        if record.failed:
            log.warning("task %d seed %d: %s", data.task, seed, record.error)
            break

        train_loss = total / max(count, 1)
        valid_err = evaluate(params, hyper, valid, data.vocab, config.eval_batch_size)
        record.train_loss.append(train_loss)
        record.valid_err.append(valid_err)
        line = {"epoch": epoch, "train_loss": train_loss, "valid_err": valid_err,
                "lr": lr, "seed": seed, "task": data.task}
        if config.track_train_error:
            train_err = evaluate(params, hyper, train, data.vocab, config.eval_batch_size)
            record.train_err.append(train_err)
            line["train_err"] = train_err
        if metrics is not None:
            metrics.write(json.dumps(line) + "\n")
            metrics.flush()
        log.info("task %d seed %d epoch %d loss %.4f valid %.2f%%",
                 data.task, seed, epoch, train_loss, valid_err)
        if valid_err < record.best_valid_err or record.best_epoch == 0:
            record.best_valid_err, record.best_epoch = valid_err, epoch
            best = copy.deepcopy(params)
        if config.early_stop and valid_err == 0.0:
            break

    if not record.failed and test:
        record.test_err = evaluate(best, hyper, test, data.vocab, config.eval_batch_size)
    record.wall_time = time.perf_counter() - started
    return record, best, hyper


def select_best(records: Sequence[RunRecord]) -> Tuple[int, RunRecord]:
    """Lowest validation error among successful runs; earlier runs win ties.

    Returns ``(index, record)``.
    """
    ok = [(i, r) for i, r in enumerate(records) if not r.failed]
    if not ok:
        raise RuntimeError("all runs failed")
    return min(ok, key=lambda ir: (ir[1].best_valid_err, ir[0]))


def lr_grid_search(data: TaskData, config: TrainConfig, grid: Optional[Sequence[float]] = None,
                   seed: int = 0):
    """Train one run per learning rate; returns ``(chosen_lr, records)``."""
    grid = list(config.lr_grid if grid is None else grid)
    if not grid:
        raise ValueError("empty learning-rate grid")
    records = [train_task(data, config, seed, lr=rate)[0] for rate in grid]
    idx, _ = select_best(records)
    return grid[idx], records
