"""Mini-batch MIL training with Adagrad, checkpoint/resume and gradient checking."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import rng as rngmod
from .core import Tape, backward
from .errors import ContractError, NumericError, ValidationError
from .loss import LossConfig, batch_loss_op
from .network import ModelParams, NetworkConfig, forward, init_params, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "loss", "mean_abnormal", "mean_normal", "timestamp")


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    iterations: int = 20000
    batch_abnormal: int = 30
    batch_normal: int = 30
    seed: int = 0
    checkpoint_every: int = 0
    eval_every: int = 0
    adagrad_epsilon: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_abnormal < 1 or self.batch_normal < 1:
            raise ValidationError("batch sizes must be >= 1")
        if self.iterations < 0 or self.checkpoint_every < 0 or self.eval_every < 0:
            raise ValidationError("iterations, checkpoint_every and eval_every must be >= 0")
        if self.adagrad_epsilon <= 0:
            raise ValidationError("adagrad_epsilon must be > 0")


@dataclass
class TrainLogRecord:
    iteration: int
    loss: float
    mean_abnormal: float
    mean_normal: float
    timestamp: float


def adagrad_step(params: ModelParams, lr: float, eps: float = 1e-8):
    """In-place Adagrad update of every parameter; clears gradients afterwards."""
    named = params.named_tensors()
    missing = [name for name, t in named if t.grad is None]
    if missing:
        raise ContractError(f"no gradient for {', '.join(missing)}")
    for name, t in named:
        acc = params.accumulators[name]
        acc += t.grad * t.grad
        t.value -= lr * t.grad / (np.sqrt(acc) + eps)
        t.grad = None


@dataclass
class TrainingSet:
    """Training bags stacked per label as (N, T, d) arrays."""

    abnormal: np.ndarray
    normal: np.ndarray

    @classmethod
    def from_bags(cls, bags) -> "TrainingSet":
        ab = [b.instances for b in bags if b.label == "abnormal"]
        no = [b.instances for b in bags if b.label == "normal"]
        if not ab or not no:
            raise ContractError("training needs at least one abnormal and one normal bag")
        return cls(np.stack(ab), np.stack(no))


@dataclass
class TrainState:
    params: ModelParams
    iteration: int
    batch_rng: np.random.Generator
    dropout_rng: np.random.Generator

    @classmethod
    def fresh(cls, params: ModelParams, seed: int) -> "TrainState":
        return cls(params, 0, rngmod.stream(seed, "batching"), rngmod.stream(seed, "dropout"))


def save_state(path, state: TrainState):
    extra = {
        "iteration": state.iteration,
        "batch_rng": rngmod.get_state(state.batch_rng),
        "dropout_rng": rngmod.get_state(state.dropout_rng),
    }
    save_checkpoint(path, state.params, extra)


def load_state(path) -> TrainState:
    params, extra = load_checkpoint(path)
    if "iteration" not in extra:
        return TrainState.fresh(params, params.config.seed)
    return TrainState(params, int(extra["iteration"]), rngmod.from_state(extra["batch_rng"]),
                      rngmod.from_state(extra["dropout_rng"]))


@dataclass
class TrainResult:
    params: ModelParams
    log: list = field(default_factory=list)
    state: Optional[TrainState] = None


def _append_log(path: Path, records):
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(LOG_COLUMNS)
        for r in records:
            w.writerow([r.iteration, repr(r.loss), repr(r.mean_abnormal), repr(r.mean_normal), f"{r.timestamp:.3f}"])


def train(params: ModelParams, data: TrainingSet, config: TrainConfig, loss_config: LossConfig, *,
          state: Optional[TrainState] = None, checkpoint_path=None, log_path=None,
          eval_fn: Optional[Callable[[int, ModelParams], None]] = None) -> TrainResult:
    """Run until ``config.iterations`` total iterations have been taken.

    Each iteration draws ``batch_abnormal`` and ``batch_normal`` distinct bags
    (independently of earlier iterations) and pairs them index-wise. Passing a
    ``state`` restored by :func:`load_state` resumes bit-exactly. ``params`` is
    updated in place.
    """
    if len(data.abnormal) < config.batch_abnormal or len(data.normal) < config.batch_normal:
        raise ContractError(
            f"need {config.batch_abnormal} abnormal and {config.batch_normal} normal bags, "
            f"have {len(data.abnormal)} and {len(data.normal)}"
        )
    if state is None:
        state = TrainState.fresh(params, config.seed)
    params = state.params
    log_path = Path(log_path) if log_path else None
    records, pending = [], []
    n_pairs = max(config.batch_abnormal, config.batch_normal)

    while state.iteration < config.iterations:
        ia = state.batch_rng.choice(len(data.abnormal), config.batch_abnormal, replace=False)
        ino = state.batch_rng.choice(len(data.normal), config.batch_normal, replace=False)
        ia = np.resize(ia, n_pairs)
        ino = np.resize(ino, n_pairs)

        with Tape() as tape:
            sa = forward(params, data.abnormal[ia], training=True, rng=state.dropout_rng)
            sn = forward(params, data.normal[ino], training=True, rng=state.dropout_rng)
            loss = batch_loss_op(sa, sn, loss_config, params)
        value = float(loss.value)
        if not np.isfinite(value):
            raise NumericError(f"non-finite batch loss {value} at iteration {state.iteration}")
        backward(tape, loss)
        adagrad_step(params, config.learning_rate, config.adagrad_epsilon)
        state.iteration += 1

        rec = TrainLogRecord(state.iteration, value, float(sa.value.mean()), float(sn.value.mean()), time.time())
        records.append(rec)
        pending.append(rec)
        if config.checkpoint_every and state.iteration % config.checkpoint_every == 0:
            if log_path:
                _append_log(log_path, pending)
                pending = []
            if checkpoint_path:
                save_state(checkpoint_path, state)
        if eval_fn and config.eval_every and state.iteration % config.eval_every == 0:
            eval_fn(state.iteration, params)
        if state.iteration % 100 == 0:
            log.info("iter %d loss %.5f abnormal %.3f normal %.3f", rec.iteration, rec.loss,
                     rec.mean_abnormal, rec.mean_normal)

    if log_path and pending:
        _append_log(log_path, pending)
    if checkpoint_path:
        save_state(checkpoint_path, state)
    return TrainResult(params, records, state)


# ---------------------------------------------------------------------------
# gradient check


@dataclass
class GradcheckReport:
    max_rel_error: dict
    checked: dict
    excluded: dict
    tolerance: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values())

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


def _branches(trace, sa, sn, variant):
    """Discrete choices made by a forward pass (relu signs, argmaxes, hinge sides)."""
    out = []
    for stage in ("enc1", "enc2", "dec1", "dec2"):
        z = trace[f"{stage}.conv"].value
        out += [z >= 0, np.argmax(np.abs(np.where(z >= 0, z, 0.01 * z)), axis=-1)]
    for stage in ("enc1", "enc2"):
        h = trace[f"{stage}.norm"].value
        d = np.concatenate([h[..., :1, :], h[..., :-1, :]], axis=-2)
        out.append(d[..., 0::2, :] >= d[..., 1::2, :])
    a, n = sa.value[..., 0], sn.value[..., 0]
    if variant == "mean_distance":
        out.append(a.mean(axis=1) - n.mean(axis=1) > 0)
    elif variant == "max_hinge":
        out += [a.argmax(axis=1), n.argmax(axis=1), 1 - a.max(axis=1) + n.max(axis=1) > 0]
    else:
        out.append(1 - a.mean(axis=1) + n.mean(axis=1) > 0)
    return out


def _central(evaluate, flat, i, h) -> float:
    orig = flat[i]
    flat[i] = orig + h
    lp = float(evaluate()[1].value)
    flat[i] = orig - h
    lm = float(evaluate()[1].value)
    flat[i] = orig
    return (lp - lm) / (2 * h)


def _flips(base, evaluate, flat, i, value) -> bool:
    orig = flat[i]
    flat[i] = value
    branches = evaluate()[2]
    flat[i] = orig
    return not all(np.array_equal(x, y) for x, y in zip(base, branches))


def gradcheck(net_config: NetworkConfig, loss_config: LossConfig, seed: int = 0, n_pairs: int = 2,
              step: float = 1e-4, tolerance: float = 1e-5, floor: float = 1e-6,
              kink_margin: float = 10.0, richardson: bool = True) -> GradcheckReport:
    """Compare analytic gradients of the full batch loss with central differences.

    Every scalar parameter is perturbed by ``step * max(1, |w|)``. The error
    of one coordinate is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    With ``richardson`` the central differences at ``h`` and ``h/2`` are
    combined as ``(4 D(h/2) - D(h)) / 3``, cancelling the O(h^2) truncation
    term that dominates where channel normalization divides by a small maximum.
    Coordinates where a perturbation of ``kink_margin * step`` already flips a
    discrete branch (relu side, argmax, hinge side) sit next to a kink, where
    central differences are not accurate; they are excluded and counted.
    Dropout is disabled so the loss is a deterministic function of the parameters.
    """
    cfg = NetworkConfig(**{**net_config.to_dict(), "dropout_rate": 0.0})
    rng = rngmod.stream(seed, "init")
    params = init_params(cfg, rng)
    for _, t in params.named_tensors():
        if t.name.endswith(".bias"):
            t.value[:] = rng.normal(scale=0.1, size=t.value.shape)
    shape = (n_pairs, cfg.bag_size, cfg.input_dim)
    A = rng.normal(size=shape) + 0.5
    Nb = rng.normal(size=shape) - 0.5

    def evaluate():
        ta, tn = {}, {}
        with Tape() as tape:
            sa = forward(params, A, trace=ta)
            sn = forward(params, Nb, trace=tn)
            loss = batch_loss_op(sa, sn, loss_config, params)
        return tape, loss, _branches(ta, sa, sn, loss_config.variant) + _branches(tn, sa, sn, loss_config.variant)

    params.zero_grad()
    tape, loss, base = evaluate()
    backward(tape, loss)

    errors, checked, excluded = {}, {}, {}
    for name, t in params.named_tensors():
        analytic = t.grad.copy()
        worst, n_ok, n_skip = 0.0, 0, 0
        flat = t.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = step * max(1.0, abs(orig))
            if any(_flips(base, evaluate, flat, i, orig + s * kink_margin * h) for s in (1, -1)):
                n_skip += 1
                continue
            numeric = _central(evaluate, flat, i, h)
            if richardson:
                numeric = (4.0 * _central(evaluate, flat, i, h / 2) - numeric) / 3.0
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
            n_ok += 1
        errors[name], checked[name], excluded[name] = worst, n_ok, n_skip
    params.zero_grad()
    return GradcheckReport(errors, checked, excluded, tolerance)
