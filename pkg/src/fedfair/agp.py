"""Alternating gradient projection steps for the constrained min-max problems.

One iteration takes a primal gradient step on the regularized Lagrangian
using the current multipliers, then a projected ascent step on the
multipliers. Two dual layouts exist: a single pair shared by all clients
(federated constraint) and one pair per client (local constraints).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import ParameterError, ShapeError

FEDFAIR = "fedfair"
LCO = "lco"


@dataclass(frozen=True)
class AgpHyper:
    alpha: float = 0.05
    beta: float = 0.05
    gamma: float = 0.001
    decay_every: int = 20_000
    decay_factor: float = 0.1
    max_steps: int = 60_000

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ParameterError("alpha and beta must be positive")
        if self.gamma < 0:
            raise ParameterError("gamma must be >= 0")
        if not 0 < self.decay_factor <= 1:
            raise ParameterError("decay_factor must lie in (0, 1]")
        if self.decay_every < 1 or self.max_steps < 0:
            raise ParameterError("decay_every must be >= 1 and max_steps >= 0")


@dataclass(frozen=True, eq=False)
class DualState:
    """Multipliers for the upper (``lam_a``) and lower (``lam_b``) constraint sides.

    FedFair mode holds arrays of length 1, LCO mode one entry per client.
    """

    mode: str
    lam_a: np.ndarray
    lam_b: np.ndarray

    @classmethod
    def zeros(cls, mode: str, n_clients: int = 1) -> "DualState":
        size = 1 if mode == FEDFAIR else n_clients
        if mode not in (FEDFAIR, LCO):
            raise ParameterError(f"unknown dual mode {mode!r}")
        return cls(mode, np.zeros(size), np.zeros(size))

    def copy(self) -> "DualState":
        return replace(self, lam_a=self.lam_a.copy(), lam_b=self.lam_b.copy())


def alpha_schedule(k: int, hyper: AgpHyper) -> float:
    """Primal step size at 1-based step ``k``."""
    if k < 1:
        raise ParameterError("steps are counted from 1")
    return hyper.alpha * hyper.decay_factor ** ((k - 1) // hyper.decay_every)


def client_gradient_fedfair(weight: float, grad_L, grad_D, lam_a: float, lam_b: float, n: int) -> np.ndarray:
    grad_L = np.asarray(grad_L, dtype=np.float64)
    grad_D = np.asarray(grad_D, dtype=np.float64)
    if grad_L.shape != grad_D.shape:
        raise ShapeError("grad_L and grad_D must share a shape")
    return weight * grad_L + ((lam_a - lam_b) / n) * grad_D


def client_gradient_lco(weight: float, grad_L, grad_D, lam_a_i: float, lam_b_i: float) -> np.ndarray:
    grad_L = np.asarray(grad_L, dtype=np.float64)
    grad_D = np.asarray(grad_D, dtype=np.float64)
    if grad_L.shape != grad_D.shape:
        raise ShapeError("grad_L and grad_D must share a shape")
    return weight * grad_L + (lam_a_i - lam_b_i) * grad_D


def primal_step(theta: np.ndarray, client_grads: Sequence[np.ndarray], alpha: float) -> np.ndarray:
    """``theta - alpha * sum(client_grads)``, summed in the order given."""
    total = np.zeros_like(theta)
    for g in client_grads:
        if g.shape != theta.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameters {theta.shape}")
        total += g
    return theta - alpha * total


def dual_step_fedfair(lam_a, lam_b, d_bar: float, eps: float, hyper: AgpHyper):
    keep = 1.0 - hyper.gamma * hyper.beta
    new_a = np.maximum(keep * lam_a + hyper.beta * d_bar - hyper.beta * eps, 0.0)
    new_b = np.maximum(keep * lam_b - hyper.beta * d_bar - hyper.beta * eps, 0.0)
    return new_a, new_b


def dual_step_lco(lam_a, lam_b, d_hat, eps: float, hyper: AgpHyper):
    """Per-client update; arrays of multipliers and local estimations broadcast elementwise."""
    return dual_step_fedfair(lam_a, lam_b, d_hat, eps, hyper)
