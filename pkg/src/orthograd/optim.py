"""Gradient transforms and first-order optimisers.

A transform maps each layer's component matrix (P parameters x N components) to
a replacement gradient of the same shape; any optimiser step can then consume it.
The orthogonalise transform swaps the gradient for its nearest orthonormal matrix.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .linalg import frobenius_norm, nearest_orthonormal, normalise_columns

__all__ = [
    "TRANSFORM_KINDS",
    "OPTIMISERS",
    "AdamState",
    "GradTransform",
    "HyperParams",
    "NonFiniteUpdateError",
    "Optimiser",
    "SgdmState",
    "SvdTimer",
    "adam_step",
    "apply_transform",
    "lars_step",
    "sgdm_step",
    "step_all",
]

TRANSFORM_KINDS = ("identity", "orthogonalise", "normalise_layer", "normalise_columns")


class NonFiniteUpdateError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite update for parameter {name!r}")
        self.name = name


@dataclass(frozen=True)
class HyperParams:
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.99)
    eps: float = 1e-8
    lars_trust: float = 1e-3
    lars_eps: float = 1e-9

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if not self.weight_decay >= 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ValueError(f"betas must be two values in [0, 1), got {self.betas}")
        if not self.eps > 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        if not self.lars_trust > 0:
            raise ValueError(f"lars_trust must be > 0, got {self.lars_trust}")
        if not self.lars_eps >= 0:
            raise ValueError(f"lars_eps must be >= 0, got {self.lars_eps}")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))


@dataclass(frozen=True)
class GradTransform:
    kind: str = "identity"
    skip_dense: bool = False

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise ValueError(f"unknown transform {self.kind!r}; expected one of {TRANSFORM_KINDS}")


@dataclass
class SgdmState:
    velocity: np.ndarray

    @classmethod
    def zeros_like(cls, theta: np.ndarray) -> "SgdmState":
        return cls(np.zeros_like(theta))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, theta: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(theta), np.zeros_like(theta), 0)


@dataclass
class SvdTimer:
    """Accumulates monotonic-clock seconds spent inside orthonormalisation calls."""

    seconds: float = 0.0
    calls: int = 0

    def timed(self, fn: Callable, *args):
        start = time.perf_counter()
        try:
            return fn(*args)
        finally:
            self.seconds += time.perf_counter() - start
            self.calls += 1


def apply_transform(
    t: GradTransform,
    g: np.ndarray,
    is_dense_layer: bool = False,
    timer: Optional[SvdTimer] = None,
) -> np.ndarray:
    """Apply `t` to a component matrix. All-zero matrices pass through untouched."""
    if t.kind == "identity" or not np.any(g):
        return g
    if t.kind == "orthogonalise":
        if t.skip_dense and is_dense_layer:
            return g
        if timer is not None:
            return timer.timed(nearest_orthonormal, g)
        return nearest_orthonormal(g)
    if t.kind == "normalise_layer":
        return g / g.dtype.type(frobenius_norm(g))
    return normalise_columns(g)


def _check_finite(arr: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteUpdateError(name)


def sgdm_step(theta, grad, state: SgdmState, hp: HyperParams, name: str = "param", lr=None):
    """v <- momentum * v + lr * (grad + weight_decay * theta);  theta <- theta - v."""
    if theta.shape != grad.shape or theta.shape != state.velocity.shape:
        raise ValueError(f"shape mismatch for {name!r}: {theta.shape}, {grad.shape}")
    lr = hp.lr if lr is None else lr
    g = grad + hp.weight_decay * theta if hp.weight_decay else grad
    v = hp.momentum * state.velocity + lr * g
    new = theta - v
    _check_finite(new, name)
    return new, SgdmState(v)


def adam_step(theta, grad, state: AdamState, hp: HyperParams, name: str = "param"):
    """Bias-corrected Adam with weight decay coupled into the gradient."""
    if theta.shape != grad.shape or theta.shape != state.m.shape:
        raise ValueError(f"shape mismatch for {name!r}: {theta.shape}, {grad.shape}")
    b1, b2 = hp.betas
    g = grad + hp.weight_decay * theta if hp.weight_decay else grad
    t = state.t + 1
    m = b1 * state.m + (1 - b1) * g
    v = b2 * state.v + (1 - b2) * (g * g)
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    new = theta - hp.lr * m_hat / (np.sqrt(v_hat) + hp.eps)
    _check_finite(new, name)
    return new, AdamState(m, v, t)


def lars_rate(theta, grad, hp: HyperParams) -> float:
    w_norm = frobenius_norm(theta)
    denom = frobenius_norm(grad) + hp.weight_decay * w_norm + hp.lars_eps
    if w_norm > 0 and denom > 0:
        return hp.lars_trust * w_norm / denom
    return 1.0


def lars_step(theta, grad, state: SgdmState, hp: HyperParams, name: str = "param"):
    """SGDM step with the learning rate scaled by the layer's trust ratio."""
    return sgdm_step(theta, grad, state, hp, name=name, lr=hp.lr * lars_rate(theta, grad, hp))


OPTIMISERS = {
    "sgdm": (sgdm_step, SgdmState.zeros_like),
    "adam": (adam_step, AdamState.zeros_like),
    "lars": (lars_step, SgdmState.zeros_like),
}


def transformed_grad(
    param,
    transform: GradTransform,
    timer: Optional[SvdTimer] = None,
    grad: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Reshape to the component matrix, transform in place of the raw gradient, reshape back."""
    grad = param.grad if grad is None else grad
    if not param.eligible:
        return grad
    mat = param.to_components(grad)
    out = apply_transform(transform, mat, param.is_dense, timer)
    if out is mat:
        return grad
    return param.from_components(out)


def step_all(
    params: Sequence,
    states: list,
    transform: Optional[GradTransform],
    optimiser: str,
    hp: HyperParams,
    *,
    decay_before_transform: bool = False,
    timer: Optional[SvdTimer] = None,
) -> None:
    """Step every parameter in declaration order, updating `param.data` and `states`.

    With `transform=None` raw gradients go straight to the optimiser (no reshaping).
    """
    step_fn, _ = OPTIMISERS[optimiser]
    step_hp = hp
    if transform is not None and decay_before_transform and hp.weight_decay:
        step_hp = replace(hp, weight_decay=0.0)
    for i, p in enumerate(params):
        if p.grad is None or p.grad.shape != p.data.shape:
            got = None if p.grad is None else p.grad.shape
            raise ValueError(f"gradient shape {got} does not match parameter {p.name!r} {p.data.shape}")
        grad = p.grad
        if transform is not None:
            if decay_before_transform and hp.weight_decay:
                grad = grad + hp.weight_decay * p.data
            grad = transformed_grad(p, transform, timer, grad)
        p.data, states[i] = step_fn(p.data, grad, states[i], step_hp, name=p.name)


@dataclass
class Optimiser:
    """Per-run optimiser: owns per-parameter state and the SVD timer."""

    params: list
    kind: str = "sgdm"
    hp: HyperParams = field(default_factory=HyperParams)
    transform: Optional[GradTransform] = None
    decay_before_transform: bool = False
    timer: SvdTimer = field(default_factory=SvdTimer)

    def __post_init__(self):
        if self.kind not in OPTIMISERS:
            raise ValueError(f"unknown optimiser {self.kind!r}; expected one of {sorted(OPTIMISERS)}")
        init = OPTIMISERS[self.kind][1]
        self.states = [init(p.data) for p in self.params]

    def step(self) -> None:
        step_all(
            self.params,
            self.states,
            self.transform,
            self.kind,
            self.hp,
            decay_before_transform=self.decay_before_transform,
            timer=self.timer,
        )
