"""Natural-gradient fine-tuning of the classifier head on clean validation data.

The procedure owns three pieces:

* the empirical Fisher of the head over the validation set,
  F = (1/n) sum_j g_j g_j^T with g_j the per-sample log-likelihood gradient,
* a clean-distribution-aware regularizer weighting squared head deviation
  from its starting point by the *anchor* Fisher diagonal (computed once at
  the initial head and never updated),
* the fine-tuning loop: every epoch evaluates the regularized loss and its
  gradient full-batch, recomputes the Fisher at the current head, and takes
  one damped natural-gradient step. The backbone never changes.

First-order baselines (sgd/adagrad/rmsprop/adam/sam) share the same loop
shape for like-for-like comparisons, with no Fisher and no regularizer.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset
from .model import (
    FeatureCache,
    Network,
    backbone_features,
    loss_and_grad,
    per_sample_head_grads,
)
from .numerics import DimensionError
from .optim import (
    FIRST_ORDER_KINDS,
    LrSchedule,
    OptimizerError,
    first_order_step,
    make_optimizer,
    ngd_step,
    sam_step,
)


class EstimationError(ValueError):
    """Fisher estimation was asked for an empty validation set."""


class PurifyError(RuntimeError):
    """Purification aborted; carries the failing epoch and the partial trace."""

    def __init__(self, epoch: int, trace: list, cause: Exception):
        self.epoch = epoch
        self.trace = trace
        super().__init__(f"purification failed at epoch {epoch}: {cause}")


@dataclass
class FisherMatrix:
    """Empirical Fisher of the head: PSD by construction (mean of outer products)."""

    matrix: np.ndarray  # (|head|, |head|)
    n: int
    diag: np.ndarray

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


def empirical_fisher(net: Network, cache: FeatureCache, val: Dataset) -> FisherMatrix:
    """F = (1/n) sum_j g_j g_j^T over the validation samples' true labels."""
    if val.n == 0:
        raise EstimationError("cannot estimate a Fisher from an empty validation set")
    g = per_sample_head_grads(net, cache, val.labels)
    f = g.T @ g / val.n
    f = 0.5 * (f + f.T)
    return FisherMatrix(matrix=f, n=val.n, diag=np.diag(f).copy())


@dataclass
class PurifyConfig:
    """Knobs of the head fine-tuning loop.

    ``anchor`` is the head snapshot the regularizer pulls toward; purify
    fills it from the incoming network, so leave it None unless replaying.
    """

    eta: float = 0.1
    schedule: LrSchedule = field(default_factory=LrSchedule)
    epochs: int = 100
    damping: float | None = None
    anchor: np.ndarray | None = None

    def validate(self) -> None:
        if self.eta < 0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")


def _regularized_parts(net: Network, cache: FeatureCache, val: Dataset,
                       config: PurifyConfig, anchor_diag: np.ndarray):
    head = net.head_params
    if config.anchor is None or config.anchor.size != head.size:
        raise DimensionError("config.anchor missing or wrong length for the head")
    if anchor_diag.size != head.size:
        raise DimensionError(
            f"anchor diag has {anchor_diag.size} entries, head has {head.size}")
    ce, grad = loss_and_grad(net, None, val.labels, scope="head_only", cache=cache)
    dev = head - config.anchor
    reg = 0.5 * config.eta * float(np.sum(anchor_diag * dev * dev))
    grad = grad + config.eta * anchor_diag * dev
    return ce + reg, grad, ce, reg


def regularized_loss_grad(net: Network, cache: FeatureCache, val: Dataset,
                          config: PurifyConfig, anchor_diag: np.ndarray):
    """Cross-entropy on the validation set plus the anchored quadratic penalty.

    L_p = CE + (eta/2) * sum_i diag_i * (head_i - anchor_i)^2, with gradient
    dCE + eta * diag * (head - anchor), both over the head block only.
    """
    loss_p, grad, _, _ = _regularized_parts(net, cache, val, config, anchor_diag)
    return loss_p, grad


@dataclass
class TraceRow:
    epoch: int
    lr: float
    loss_p: float
    ce_loss: float
    reg_loss: float
    grad_norm: float
    damping: float
    asr_val: float | None = None
    acc_val: float | None = None


TRACE_COLUMNS = ("epoch", "lr", "loss_p", "ce_loss", "reg_loss",
                 "grad_norm", "damping", "asr_val", "acc_val")


def write_trace_csv(rows: list[TraceRow], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(TRACE_COLUMNS)
        for r in rows:
            writer.writerow([
                r.epoch, f"{r.lr:.10g}", f"{r.loss_p:.12g}", f"{r.ce_loss:.12g}",
                f"{r.reg_loss:.12g}", f"{r.grad_norm:.12g}", f"{r.damping:.10g}",
                "" if r.asr_val is None else f"{r.asr_val:.6g}",
                "" if r.acc_val is None else f"{r.acc_val:.6g}",
            ])


def purify(net: Network, val: Dataset, config: PurifyConfig,
           metrics_hook=None) -> tuple[Network, list[TraceRow]]:
    """Fine-tune the head by damped natural gradient on clean validation data.

    The anchor Fisher diagonal is computed exactly once, at the incoming
    head; the preconditioning Fisher is recomputed full-batch every epoch at
    the current head. Backbone parameters are bit-identical before and after.
    """
    config.validate()
    out = net.copy()
    cache = backbone_features(out, val.images)

    anchor = out.head_params.copy()
    config = replace(config, anchor=anchor)
    anchor_diag = empirical_fisher(out, cache, val).diag

    state = make_optimizer("ngd", lr=config.schedule.initial, damping=config.damping)
    trace: list[TraceRow] = []
    for epoch in range(config.epochs):
        state.lr = config.schedule.lr(epoch)
        loss_p, grad, ce, reg = _regularized_parts(out, cache, val, config, anchor_diag)
        fisher = empirical_fisher(out, cache, val)
        try:
            new_head = ngd_step(state, out.head_params.copy(), grad, fisher.matrix)
        except OptimizerError as exc:
            raise PurifyError(epoch, trace, exc) from exc
        out.params[out.head_slice] = new_head
        row = TraceRow(epoch, state.lr, loss_p, ce, reg,
                       float(np.linalg.norm(grad)), state.last_damping)
        if metrics_hook is not None:
            row.asr_val, row.acc_val = metrics_hook(out)
        trace.append(row)
    return out, trace


def finetune_baseline(net: Network, val: Dataset, kind: str, scope: str,
                      epochs: int, schedule: LrSchedule,
                      metrics_hook=None, **optimizer_kwargs) -> tuple[Network, list[TraceRow]]:
    """Full-batch first-order (or SAM) fine-tuning with the purify loop shape.

    ``scope`` is head_only or full; epochs 0 returns the network unchanged.
    """
    if scope not in ("head_only", "full"):
        raise ValueError(f"unknown scope {scope!r}")
    out = net.copy()
    cache = backbone_features(out, val.images) if scope == "head_only" else None

    state = make_optimizer(kind, lr=schedule.initial, **optimizer_kwargs)
    trace: list[TraceRow] = []
    for epoch in range(epochs):
        state.lr = schedule.lr(epoch)
        if scope == "head_only":
            ce, grad = loss_and_grad(out, None, val.labels, scope="head_only", cache=cache)
            params = out.head_params.copy()
        else:
            ce, grad = loss_and_grad(out, val.images, val.labels, scope="full")
            params = out.params.copy()

        if kind == "sam":
            def grad_fn(p, _scope=scope):
                trial = out.copy()
                if _scope == "head_only":
                    trial.params[trial.head_slice] = p
                    return loss_and_grad(trial, None, val.labels,
                                         scope="head_only", cache=cache)[1]
                trial.params[:] = p
                return loss_and_grad(trial, val.images, val.labels, scope="full")[1]

            new_params = sam_step(state, params, grad_fn)
        elif kind in FIRST_ORDER_KINDS:
            new_params = first_order_step(state, params, grad)
        else:
            raise ValueError(f"finetune_baseline cannot run optimizer {kind!r}")

        if scope == "head_only":
            out.params[out.head_slice] = new_params
        else:
            out.params[:] = new_params
        row = TraceRow(epoch, state.lr, ce, ce, 0.0, float(np.linalg.norm(grad)), 0.0)
        if metrics_hook is not None:
            row.asr_val, row.acc_val = metrics_hook(out)
        trace.append(row)
    return out, trace
