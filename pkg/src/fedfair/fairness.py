"""Loss-based fairness estimators and the DEO fairness score."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import GROUP_A, GROUP_B, POSITIVE, ClientShard, Dataset
from .errors import EmptyCellError, NoValidClientsError, ParameterError, SizeError
from .model import ModelParams, hard_error, loss

SMOOTH = "smooth"
HARD = "hard"


@dataclass(frozen=True)
class FairnessSpec:
    epsilon: float = 0.0
    protected_class: float = POSITIVE
    group_a: int = GROUP_A
    group_b: int = GROUP_B

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ParameterError("epsilon must be >= 0")


@dataclass(frozen=True)
class LocalStats:
    client_id: int
    L_hat: float
    D_hat: float | None
    valid: bool


def _data(obj) -> Dataset:
    return obj.data if isinstance(obj, ClientShard) else obj


def _instance_losses(p: ModelParams, ds: Dataset, kind: str) -> np.ndarray:
    if kind == SMOOTH:
        return loss(p, ds.X, ds.y)
    if kind == HARD:
        return hard_error(p, ds.X, ds.y).astype(np.float64)
    raise ParameterError(f"unknown loss kind {kind!r}")


def empirical_loss(p: ModelParams, shard) -> float:
    ds = _data(shard)
    if len(ds) == 0:
        raise SizeError("empirical loss of an empty dataset")
    return float(np.mean(loss(p, ds.X, ds.y)))


def conditional_loss(p: ModelParams, shard, group: int, cls: float, kind: str = SMOOTH) -> float:
    ds = _data(shard)
    sel = (ds.group == group) & (ds.y == cls)
    if not sel.any():
        raise EmptyCellError(f"no instances with group={group}, class={cls:+g}")
    return float(np.mean(_instance_losses(p, ds.subset(sel), kind)))


def local_estimation(p: ModelParams, shard: ClientShard, spec: FairnessSpec) -> LocalStats:
    L_hat = empirical_loss(p, shard)
    try:
        la = conditional_loss(p, shard, spec.group_a, spec.protected_class)
        lb = conditional_loss(p, shard, spec.group_b, spec.protected_class)
    except EmptyCellError:
        return LocalStats(shard.client_id, L_hat, None, False)
    return LocalStats(shard.client_id, L_hat, la - lb, True)


def federated_estimation(stats: Sequence[LocalStats]) -> float:
    """Unweighted mean of the valid local estimations."""
    values = [s.D_hat for s in sorted(stats, key=lambda s: s.client_id) if s.valid]
    if not values:
        raise NoValidClientsError("no client has a valid local estimation")
    return math.fsum(values) / len(values)


def afe(stats: Sequence[LocalStats]) -> float:
    return abs(federated_estimation(stats))


def dgeo(p: ModelParams, ds, spec: FairnessSpec, kind: str = SMOOTH) -> float:
    la = conditional_loss(p, ds, spec.group_a, spec.protected_class, kind)
    lb = conditional_loss(p, ds, spec.group_b, spec.protected_class, kind)
    return abs(la - lb)


def deo_fairness(p: ModelParams, ds, spec: FairnessSpec) -> tuple[float, float]:
    """Hard-loss DGEO (gap in protected-class error rates) and ``1 - DEO``."""
    deo = dgeo(p, ds, spec, HARD)
    return deo, 1.0 - deo


def estimator_coefficients(ds: Dataset, spec: FairnessSpec) -> tuple[np.ndarray, np.ndarray, bool]:
    """Per-instance weights turning sums of losses into ``L_hat`` and ``D_hat``.

    ``L_hat = coef_L @ losses`` and ``D_hat = coef_D @ losses``. When either
    protected cell is empty ``coef_D`` is all zeros and ``valid`` is False.
    """
    m = len(ds)
    coef_L = np.full(m, 1.0 / m)
    in_a = (ds.group == spec.group_a) & (ds.y == spec.protected_class)
    in_b = (ds.group == spec.group_b) & (ds.y == spec.protected_class)
    na, nb = int(in_a.sum()), int(in_b.sum())
    coef_D = np.zeros(m)
    if na == 0 or nb == 0:
        return coef_L, coef_D, False
    coef_D[in_a] = 1.0 / na
    coef_D[in_b] = -1.0 / nb
    return coef_L, coef_D, True
