"""End-to-end training for FedFair, LCO, FedAvg and separate training (ST)."""

from __future__ import annotations

import csv
import functools
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .agp import FEDFAIR, LCO, AgpHyper
from .dataset import (
    ClientShard,
    Dataset,
    SplitSpec,
    load_benchmark,
    partition_uniform,
    split_train_test,
    standardize,
)
from .errors import ConfigError
from .fairness import FairnessSpec
from .federation import FEDAVG, RoundLog, make_federation
from .model import KINDS, ModelParams, init_params

log = logging.getLogger(__name__)

ST = "st"
METHODS = (FEDFAIR, LCO, FEDAVG, ST)

# (n_train, n_clients) per benchmark
DATASET_DEFAULTS = {"adult": (40_000, 50), "compas": (4_800, 20), "drug": (1_600, 10)}
EPS_GRIDS = {
    "drug": (1e-4, 1e-3, 0.01, 0.07, 0.13, 0.19),
    "compas": (1e-4, 1e-3, 0.01, 0.1, 0.2, 0.4),
    "adult": (1e-4, 1e-3, 0.01, 0.1, 0.2, 0.4),
}
DEFAULT_DATA_DIR = "data/raw"


@dataclass(frozen=True)
class Seeds:
    data: int = 0
    init: int = 0
    drop: int = 0


@dataclass(frozen=True)
class RunConfig:
    dataset: str = "adult"
    model: str = "logreg"
    method: str = FEDFAIR
    epsilon: float | None = None
    hyper: AgpHyper = field(default_factory=AgpHyper)
    drop_rate: float = 0.0
    seeds: Seeds = field(default_factory=Seeds)
    n_train: int | None = None
    n_clients: int | None = None
    include_group: bool = True
    engine: str = "vectorized"
    data_dir: str = DEFAULT_DATA_DIR
    log_every: int = 100
    early_stop_tol: float | None = None

    def validate(self) -> "RunConfig":
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {', '.join(METHODS)}")
        if self.model not in KINDS:
            raise ConfigError(f"unknown model {self.model!r}; expected one of {', '.join(KINDS)}")
        if self.method != FEDAVG:
            if self.epsilon is None:
                raise ConfigError(f"method {self.method} needs epsilon")
            if not self.epsilon >= 0:
                raise ConfigError("epsilon must be >= 0")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ConfigError("drop_rate must lie in [0, 1)")
        if self.engine not in ("vectorized", "protocol"):
            raise ConfigError(f"unknown engine {self.engine!r}")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")
        return self

    @property
    def fairness(self) -> FairnessSpec:
        eps = self.epsilon if self.epsilon is not None else math.inf
        return FairnessSpec(epsilon=eps)

    def with_(self, **changes) -> "RunConfig":
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class Experiment:
    """One random construction: standardized train/test splits plus client shards."""

    train: Dataset
    test: Dataset
    shards: list[ClientShard]


@functools.lru_cache(maxsize=8)
def _benchmark(name: str, data_dir: str, include_group: bool) -> Dataset:
    return load_benchmark(name, data_dir, include_group=include_group)


def build_experiment(ds: Dataset, n_train: int, n_clients: int, seed: int) -> Experiment:
    split_seed, part_seed = np.random.SeedSequence(seed).generate_state(2)
    train, test = split_train_test(ds, SplitSpec(n_train, n_clients, int(split_seed)))
    train, test = standardize(train, test)
    return Experiment(train, test, partition_uniform(train, n_clients, int(part_seed)))


def prepare_experiment(cfg: RunConfig) -> Experiment:
    if cfg.dataset not in DATASET_DEFAULTS:
        raise ConfigError(f"unknown dataset {cfg.dataset!r}")
    n_train, n_clients = DATASET_DEFAULTS[cfg.dataset]
    ds = _benchmark(cfg.dataset, str(cfg.data_dir), cfg.include_group)
    return build_experiment(ds, cfg.n_train or n_train, cfg.n_clients or n_clients, cfg.seeds.data)


@dataclass
class Trajectory:
    rounds: list[RoundLog] = field(default_factory=list)
    final_fed_est: float = math.nan
    final_fed_loss: float = math.nan
    steps: int = 0

    @property
    def final_afe(self) -> float:
        """|federated estimation| at the returned parameters, over all clients."""
        return abs(self.final_fed_est)

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RoundLog.FIELDS)
            for r in self.rounds:
                w.writerow([_fmt(getattr(r, f)) for f in RoundLog.FIELDS])


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def _run_federated(cfg: RunConfig, shards: Sequence[ClientShard], mode: str,
                   params: ModelParams, spec: FairnessSpec) -> tuple[ModelParams, Trajectory]:
    fed = make_federation(cfg.engine, shards, spec, params, mode=mode, hyper=cfg.hyper,
                          drop_rate=cfg.drop_rate, drop_seed=cfg.seeds.drop)
    traj = Trajectory()
    K = cfg.hyper.max_steps
    for k in range(1, K + 1):
        prev = fed.state.theta
        entry = fed.run_round()
        if k % cfg.log_every == 0 or k == K:
            traj.rounds.append(entry)
        traj.steps = k
        if cfg.early_stop_tol is not None and np.max(np.abs(fed.state.theta - prev)) < cfg.early_stop_tol:
            traj.rounds.append(entry)
            break
    final = fed.evaluate()
    traj.final_fed_est = final.fed_est
    traj.final_fed_loss = final.fed_loss
    return fed.params, traj


def _initial(cfg: RunConfig, d: int) -> ModelParams:
    return init_params(cfg.model, d, cfg.seeds.init)


def _shards(cfg: RunConfig, data) -> list[ClientShard]:
    if data is None:
        data = prepare_experiment(cfg)
    return data.shards if isinstance(data, Experiment) else list(data)


def train_fedfair(cfg: RunConfig, data=None) -> tuple[ModelParams, Trajectory]:
    """Solve the problem with one federated constraint; ``data`` is an Experiment or shard list."""
    cfg = cfg.with_(method=FEDFAIR).validate()
    shards = _shards(cfg, data)
    return _run_federated(cfg, shards, FEDFAIR, _initial(cfg, shards[0].data.dim), cfg.fairness)


def train_lco(cfg: RunConfig, data=None) -> tuple[ModelParams, Trajectory]:
    cfg = cfg.with_(method=LCO).validate()
    shards = _shards(cfg, data)
    return _run_federated(cfg, shards, LCO, _initial(cfg, shards[0].data.dim), cfg.fairness)


def train_fedavg(cfg: RunConfig, data=None) -> tuple[ModelParams, Trajectory]:
    """Full-batch federated gradient descent: the FedFair loop with multipliers held at zero."""
    cfg = cfg.with_(method=FEDAVG).validate()
    shards = _shards(cfg, data)
    return _run_federated(cfg, shards, FEDAVG, _initial(cfg, shards[0].data.dim), cfg.fairness)


class StModels(list):
    """``(client_id, params)`` pairs; ``unconstrained`` lists clients trained without the constraint."""

    def __init__(self, items=(), unconstrained=()):
        super().__init__(items)
        self.unconstrained = list(unconstrained)


def train_st(cfg: RunConfig, data=None) -> StModels:
    """Each client solves its own constrained problem on its shard alone.

    Clients whose shard lacks a protected cell train unconstrained and are
    flagged in the result.
    """
    cfg = cfg.with_(method=ST).validate()
    shards = _shards(cfg, data)
    models, unconstrained = [], []
    for shard in sorted(shards, key=lambda s: s.client_id):
        own = ClientShard(1, shard.data)
        counts = shard.m_sc
        c = cfg.fairness.protected_class
        mode = FEDFAIR
        if counts[(cfg.fairness.group_a, c)] == 0 or counts[(cfg.fairness.group_b, c)] == 0:
            mode = FEDAVG
            unconstrained.append(shard.client_id)
        params, _ = _run_federated(cfg.with_(drop_rate=0.0), [own], mode,
                                   _initial(cfg, shard.data.dim), cfg.fairness)
        models.append((shard.client_id, params))
    if unconstrained:
        log.warning("ST: clients %s have an empty protected cell and were trained unconstrained", unconstrained)
    return StModels(models, unconstrained)

TRAINERS = {FEDFAIR: train_fedfair, LCO: train_lco, FEDAVG: train_fedavg, ST: train_st}


@dataclass
class RunResult:
    cfg: RunConfig
    params: ModelParams | list[tuple[int, ModelParams]]
    trajectory: Trajectory | None


def run(cfg: RunConfig, data: Experiment | None = None) -> RunResult:
    cfg.validate()
    if cfg.method == ST:
        return RunResult(cfg, train_st(cfg, data), None)
    params, traj = TRAINERS[cfg.method](cfg, data)
    return RunResult(cfg, params, traj)
