"""First-order optimizer baselines, SAM, and the damped natural-gradient step.

All steps are deterministic pure functions of (state, params, grad); the
state owns any accumulator buffers and a step counter. The natural-gradient
step keeps no accumulators at all: it is one damped SPD solve against the
supplied Fisher matrix per call.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import DimensionError, FactorizationError, cholesky_solve


class OptimizerError(RuntimeError):
    """A step could not be completed (e.g. Fisher solve failed after escalation)."""


FIRST_ORDER_KINDS = ("sgd", "adagrad", "rmsprop", "adam")
ALL_KINDS = FIRST_ORDER_KINDS + ("sam", "ngd")


@dataclass(frozen=True)
class LrSchedule:
    """Stepwise-decayed learning rate: lr(e) = initial * factor^(e // interval)."""

    initial: float = 0.01
    factor: float = 0.1
    interval: int = 40

    def lr(self, epoch: int) -> float:
        if self.initial <= 0 or self.factor <= 0 or self.interval < 1:
            raise ValueError(f"invalid schedule {self}")
        return self.initial * self.factor ** (epoch // self.interval)


@dataclass
class OptimizerState:
    kind: str
    lr: float
    momentum: float = 0.0       # sgd
    decay: float = 0.99         # rmsprop
    beta1: float = 0.9          # adam
    beta2: float = 0.999        # adam
    eps: float = 1e-8
    rho: float = 0.05           # sam perturbation radius
    damping: float | None = None  # ngd; None -> 1e-4 * tr(F)/dim per step
    step_count: int = 0
    buffers: dict = field(default_factory=dict)
    last_damping: float = 0.0   # damping actually used by the latest ngd solve


def make_optimizer(kind: str, lr: float, **kwargs) -> OptimizerState:
    if kind not in ALL_KINDS:
        raise ValueError(f"unknown optimizer kind {kind!r}")
    state = OptimizerState(kind=kind, lr=lr, **kwargs)
    if state.lr <= 0:
        raise ValueError(f"lr must be > 0, got {state.lr}")
    if kind == "adam" and not (0 < state.beta1 < 1 and 0 < state.beta2 < 1):
        raise ValueError(f"adam betas must lie in (0,1), got {state.beta1}, {state.beta2}")
    if kind == "sam" and state.rho <= 0:
        raise ValueError(f"sam rho must be > 0, got {state.rho}")
    if kind == "ngd" and state.damping is not None and state.damping < 0:
        raise ValueError(f"ngd damping must be >= 0, got {state.damping}")
    return state


def _buffer(state: OptimizerState, name: str, n: int) -> np.ndarray:
    buf = state.buffers.get(name)
    if buf is None:
        buf = np.zeros(n, dtype=np.float64)
        state.buffers[name] = buf
    elif buf.size != n:
        raise DimensionError(f"accumulator {name} has size {buf.size}, expected {n}")
    return buf


def first_order_step(state: OptimizerState, params: np.ndarray,
                     grad: np.ndarray) -> np.ndarray:
    """One sgd/adagrad/rmsprop/adam update; returns the new parameter vector."""
    if state.kind not in FIRST_ORDER_KINDS:
        raise ValueError(f"{state.kind!r} is not a first-order kind")
    if params.shape != grad.shape:
        raise DimensionError(f"params {params.shape} vs grad {grad.shape}")
    state.step_count += 1
    if state.kind == "sgd":
        if state.momentum:
            buf = _buffer(state, "momentum", params.size)
            buf *= state.momentum
            buf += grad
            step = buf
        else:
            step = grad
        return params - state.lr * step
    if state.kind == "adagrad":
        acc = _buffer(state, "sq_sum", params.size)
        acc += grad * grad
        return params - state.lr * grad / (np.sqrt(acc) + state.eps)
    if state.kind == "rmsprop":
        acc = _buffer(state, "sq_avg", params.size)
        acc *= state.decay
        acc += (1.0 - state.decay) * grad * grad
        return params - state.lr * grad / (np.sqrt(acc) + state.eps)
    # adam with bias correction
    m = _buffer(state, "m", params.size)
    v = _buffer(state, "v", params.size)
    t = state.step_count
    m *= state.beta1
    m += (1.0 - state.beta1) * grad
    v *= state.beta2
    v += (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def sam_step(state: OptimizerState, params: np.ndarray, grad_fn) -> np.ndarray:
    """Sharpness-aware step: ascend to the worst point in an l2 ball of radius
    rho, then apply the inner sgd rule with the gradient taken there.

    Exactly two gradient evaluations per step; a zero gradient falls back to
    a plain sgd step (which then moves nothing).
    """
    if state.kind != "sam":
        raise ValueError(f"sam_step needs a sam state, got {state.kind!r}")
    g = grad_fn(params)
    norm = float(np.linalg.norm(g))
    state.step_count += 1
    if norm == 0.0:
        return params - state.lr * g
    g_adv = grad_fn(params + state.rho * g / norm)
    return params - state.lr * g_adv


def ngd_step(state: OptimizerState, params_head: np.ndarray, grad_head: np.ndarray,
             fisher: np.ndarray) -> np.ndarray:
    """Natural-gradient update: params - lr * (F + damping*I)^-1 grad.

    With damping None, each call uses the scale-invariant default
    1e-4 * tr(F)/dim. A failed factorization escalates damping tenfold up to
    three retries before raising OptimizerError.
    """
    if state.kind != "ngd":
        raise ValueError(f"ngd_step needs an ngd state, got {state.kind!r}")
    fisher = np.asarray(fisher, dtype=np.float64)
    p = params_head.size
    if fisher.shape != (p, p) or grad_head.size != p:
        raise DimensionError(
            f"fisher {fisher.shape} incompatible with head of {p} parameters")

    scale = float(np.trace(fisher)) / p
    base = state.damping if state.damping is not None else 1e-4 * scale
    damping = base
    for attempt in range(4):
        try:
            direction = cholesky_solve(fisher, damping, grad_head)
            state.last_damping = damping
            state.step_count += 1
            return params_head - state.lr * direction
        except FactorizationError:
            if attempt == 3:
                break
            floor = 1e-4 * scale if scale > 0 else 1e-8
            damping = max(damping, floor, 1e-12) * 10.0
    raise OptimizerError(
        f"fisher solve failed after damping escalation to {damping:g}")
