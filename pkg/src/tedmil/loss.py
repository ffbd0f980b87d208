"""MIL ranking losses over paired abnormal/normal bags.

Three per-pair variants share one signature ``(abnormal, normal) -> float``:

* ``mean_distance``: 1 - max(0, mean(a) - mean(n)) + lam * sum(a)
* ``max_hinge``: max(0, 1 - max(a) + max(n)) + lam1 * smoothness(a) + lam2 * sum(a)
* ``max_hinge_avg_mapping``: as ``max_hinge`` with both maxima replaced by means

:func:`batch_loss_op` puts the batch mean plus L2 weight decay on the tape
for training. The plain functions are for inspection and tests.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import core
from .core import Tensor
from .errors import ContractError, ShapeError, ValidationError

VARIANTS = ("mean_distance", "max_hinge", "max_hinge_avg_mapping")
ALIASES = {"max_hinge_avg": "max_hinge_avg_mapping"}


@dataclass
class LossConfig:
    variant: str = "mean_distance"
    lambda_sparsity: float = 8e-5
    lambda1_smooth: float = 8e-5
    lambda2_sparse: float = 8e-5
    l2_weight_decay: float = 1e-3

    def __post_init__(self):
        self.variant = ALIASES.get(self.variant, self.variant)
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown loss variant {self.variant!r}; choose from {VARIANTS}")
        for name in ("lambda_sparsity", "lambda1_smooth", "lambda2_sparse", "l2_weight_decay"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0, got {getattr(self, name)}")


@dataclass
class BagScores:
    scores: np.ndarray
    label: str

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float).reshape(-1)
        if self.label not in ("normal", "abnormal"):
            raise ContractError(f"bag label must be 'normal' or 'abnormal', got {self.label!r}")
        if self.scores.size == 0 or np.any((self.scores < 0) | (self.scores > 1)):
            raise ContractError("bag scores must be a non-empty vector in [0, 1]")


def _check_pair(abnormal: BagScores, normal: BagScores):
    if abnormal.label != "abnormal" or normal.label != "normal":
        raise ContractError(
            f"expected (abnormal, normal) bags, got ({abnormal.label}, {normal.label})"
        )


# Each _grad_* returns (loss, d loss / d abnormal, d loss / d normal) for 1-D score arrays.

def _grad_mean_distance(a, n, lam):
    d = a.mean() - n.mean()
    loss = 1.0 - max(0.0, d) + lam * a.sum()
    ga = np.full_like(a, lam)
    gn = np.zeros_like(n)
    if d > 0:
        ga -= 1.0 / a.size
        gn += 1.0 / n.size
    return loss, ga, gn


def _smoothness(a, lam1):
    diff = a[:-1] - a[1:]
    g = np.zeros_like(a)
    g[:-1] += 2 * lam1 * diff
    g[1:] -= 2 * lam1 * diff
    return lam1 * np.sum(diff**2), g


def _grad_max_hinge(a, n, lam1, lam2):
    ia, iN = int(np.argmax(a)), int(np.argmax(n))
    z = 1.0 - a[ia] + n[iN]
    smooth, ga = _smoothness(a, lam1)
    loss = max(0.0, z) + smooth + lam2 * a.sum()
    ga += lam2
    gn = np.zeros_like(n)
    if z > 0:
        ga[ia] -= 1.0
        gn[iN] += 1.0
    return loss, ga, gn


def _grad_max_hinge_avg(a, n, lam1, lam2):
    z = 1.0 - a.mean() + n.mean()
    smooth, ga = _smoothness(a, lam1)
    loss = max(0.0, z) + smooth + lam2 * a.sum()
    ga += lam2
    gn = np.zeros_like(n)
    if z > 0:
        ga -= 1.0 / a.size
        gn += 1.0 / n.size
    return loss, ga, gn


def mean_distance_loss(abnormal: BagScores, normal: BagScores, lam: float = 8e-5) -> float:
    _check_pair(abnormal, normal)
    return _grad_mean_distance(abnormal.scores, normal.scores, lam)[0]


def max_hinge_loss(abnormal: BagScores, normal: BagScores, lam1: float = 8e-5, lam2: float = 8e-5) -> float:
    _check_pair(abnormal, normal)
    return _grad_max_hinge(abnormal.scores, normal.scores, lam1, lam2)[0]


def max_hinge_avg_mapping_loss(abnormal: BagScores, normal: BagScores, lam1: float = 8e-5, lam2: float = 8e-5) -> float:
    _check_pair(abnormal, normal)
    return _grad_max_hinge_avg(abnormal.scores, normal.scores, lam1, lam2)[0]


def pair_loss_and_grads(a: np.ndarray, n: np.ndarray, config: LossConfig):
    if config.variant == "mean_distance":
        return _grad_mean_distance(a, n, config.lambda_sparsity)
    if config.variant == "max_hinge":
        return _grad_max_hinge(a, n, config.lambda1_smooth, config.lambda2_sparse)
    return _grad_max_hinge_avg(a, n, config.lambda1_smooth, config.lambda2_sparse)


def weight_decay(params) -> float:
    return float(sum(np.sum(t.value**2) for t in params.kernel_tensors()))


def batch_loss(pairs, config: LossConfig, params=None) -> float:
    """Mean per-pair loss plus ``l2_weight_decay * sum ||W||^2`` over kernels."""
    if len(pairs) == 0:
        raise ContractError("batch_loss needs at least one (abnormal, normal) pair")
    total = 0.0
    for abnormal, normal in pairs:
        _check_pair(abnormal, normal)
        total += pair_loss_and_grads(abnormal.scores, normal.scores, config)[0]
    loss = total / len(pairs)
    if params is not None and config.l2_weight_decay:
        loss += config.l2_weight_decay * weight_decay(params)
    return loss


def batch_loss_op(abnormal: Tensor, normal: Tensor, config: LossConfig, params=None) -> Tensor:
    """Differentiable batch loss.

    ``abnormal`` and ``normal`` are network outputs of shape (P, T, 1) or
    (P, T); row i of one is paired with row i of the other.
    """
    if abnormal.shape[0] == 0 or normal.shape[0] == 0:
        raise ContractError("batch_loss needs at least one (abnormal, normal) pair")
    a = abnormal.value.reshape(abnormal.shape[0], -1)
    n = normal.value.reshape(normal.shape[0], -1)
    if a.shape != n.shape:
        raise ShapeError(f"abnormal scores {a.shape} and normal scores {n.shape} must pair up")
    P = a.shape[0]

    ga, gn = np.empty_like(a), np.empty_like(n)
    total = 0.0
    for i in range(P):
        li, ga[i], gn[i] = pair_loss_and_grads(a[i], n[i], config)
        total += li
    kernels = params.kernel_tensors() if params is not None and config.l2_weight_decay else []
    wd = config.l2_weight_decay
    value = total / P + wd * sum(float(np.sum(t.value**2)) for t in kernels)

    def grad_fn(g):
        g = float(g)
        grads = [(g / P) * ga.reshape(abnormal.shape), (g / P) * gn.reshape(normal.shape)]
        grads += [g * 2 * wd * t.value for t in kernels]
        return grads

    return core._emit("batch_loss", (abnormal, normal, *kernels), np.array(value), grad_fn)
