"""Round-based client/server simulation.

Each round the server broadcasts the model and multipliers, every online
client answers with a :class:`ClientReport`, and the server applies one
primal step followed by one projected dual step.

Two engines run the same round:

* :class:`ProtocolFederation` passes typed messages through a
  :class:`Channel`; clients only expose ``compute_report``. This is the
  reference path and the one the privacy audit inspects.
* :class:`VectorizedFederation` folds every client's contribution into
  per-instance coefficients and does a single forward/backward pass over
  the stacked shards. It is a simulation shortcut that reproduces the
  protocol's arithmetic up to floating-point summation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import sparse

from . import agp
from .agp import FEDFAIR, LCO, AgpHyper, DualState
from .dataset import ClientShard
from .errors import FedFairError, NoValidClientsError, ParameterError, ShapeError
from .fairness import FairnessSpec, estimator_coefficients
from .model import ModelParams, forward, loss_and_slope, weighted_grad

FEDAVG = "fedavg"
MODES = (FEDFAIR, LCO, FEDAVG)


class ProtocolError(FedFairError, RuntimeError):
    pass


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Broadcast:
    round: int
    theta: np.ndarray
    lam_a: np.ndarray
    lam_b: np.ndarray


@dataclass(frozen=True, eq=False)
class ClientReport:
    """The only message a client ever sends to the server.

    Carries aggregates over the whole shard: the shard size, the empirical
    loss, the local estimation and the two gradients. ``D_hat`` is None and
    ``grad_D`` is zero when a protected cell of the shard is empty.
    """

    client_id: int
    round: int
    m_i: int
    L_hat: float
    D_hat: float | None
    grad_L: np.ndarray
    grad_D: np.ndarray

    @property
    def valid(self) -> bool:
        return self.D_hat is not None


class Client:
    """A data holder. Its shard is private; ``compute_report`` is the whole API."""

    def __init__(self, shard: ClientShard, spec: FairnessSpec, template: ModelParams):
        self.__shard = shard
        self.__template = template
        coef_L, coef_D, valid = estimator_coefficients(shard.data, spec)
        self.__coef = np.column_stack([coef_L, coef_D])
        self.__valid = valid
        self.__last_round = 0

    @property
    def client_id(self) -> int:
        return self.__shard.client_id

    def compute_report(self, msg: Broadcast) -> ClientReport:
        if not isinstance(msg, Broadcast):
            raise ProtocolError(f"clients only accept Broadcast messages, got {type(msg).__name__}")
        if msg.round <= self.__last_round:
            raise ProtocolError(f"client {self.client_id} already served round {msg.round}")
        if msg.theta.shape != self.__template.theta.shape:
            raise ShapeError("broadcast parameters do not match the client's model shape")
        self.__last_round = msg.round
        p = self.__template.with_theta(msg.theta)
        data = self.__shard.data
        fwd = forward(p, data.X)
        losses, slope = loss_and_slope(fwd[0], data.y)
        L_hat, D_hat = self.__coef.T @ losses
        grads = weighted_grad(p, data.X, data.y, self.__coef, forward=fwd, slope=slope)
        return ClientReport(
            client_id=self.client_id,
            round=msg.round,
            m_i=data.X.shape[0],
            L_hat=float(L_hat),
            D_hat=float(D_hat) if self.__valid else None,
            grad_L=_frozen(grads[0]),
            grad_D=_frozen(grads[1]),
        )


class Channel:
    """In-process transport; optionally records every message that crosses it."""

    def __init__(self, record: bool = False):
        self.record = record
        self.log: list[tuple[str, int, object]] = []

    def exchange(self, client: Client, msg: Broadcast) -> ClientReport:
        if self.record:
            self.log.append(("down", client.client_id, msg))
        report = client.compute_report(msg)
        if not isinstance(report, ClientReport):
            raise ProtocolError("client answered with something other than a ClientReport")
        if self.record:
            self.log.append(("up", client.client_id, report))
        return report


@dataclass(frozen=True)
class Aggregate:
    sum_gradient: np.ndarray
    fed_est: float
    fed_loss: float
    n_reporting: int
    n_valid: int
    weights: dict


def aggregate(reports: Sequence[ClientReport], mode: str, duals: DualState) -> Aggregate:
    """Combine client reports into the summed primal gradient and the federated estimation.

    Weights ``m_i / m`` are renormalized over the reporting clients, and the
    ``1/N`` factor uses the number of reporting clients with a valid
    estimation. Reports are consumed in client-id order.
    """
    if not reports:
        raise NoValidClientsError("no client reported this round")
    reports = sorted(reports, key=lambda r: r.client_id)
    m_rep = sum(r.m_i for r in reports)
    valid = [r for r in reports if r.valid]
    n_valid = len(valid)
    if n_valid == 0 and mode != FEDAVG:
        raise NoValidClientsError("no reporting client has a valid local estimation")
    fed_est = math.fsum(r.D_hat for r in valid) / n_valid if n_valid else math.nan
    weights = {r.client_id: r.m_i / m_rep for r in reports}
    grads = []
    for r in reports:
        w = weights[r.client_id]
        if mode == LCO:
            i = r.client_id - 1
            g = agp.client_gradient_lco(w, r.grad_L, r.grad_D, duals.lam_a[i], duals.lam_b[i])
        else:
            g = agp.client_gradient_fedfair(w, r.grad_L, r.grad_D, duals.lam_a[0], duals.lam_b[0], max(n_valid, 1))
        grads.append(g)
    total = np.zeros_like(reports[0].grad_L)
    for g in grads:
        total += g
    fed_loss = math.fsum(weights[r.client_id] * r.L_hat for r in reports)
    return Aggregate(total, fed_est, fed_loss, len(reports), n_valid, weights)


@dataclass(eq=False)
class ServerState:
    theta: np.ndarray
    duals: DualState
    k: int = 1  # next round, 1-based


@dataclass(frozen=True)
class RoundLog:
    round: int
    online_count: int
    valid_count: int
    fed_est: float
    afe: float
    fed_loss: float
    alpha: float
    lam_a: float
    lam_b: float
    lam_max: float

    FIELDS = ("round", "online_count", "valid_count", "fed_est", "afe", "fed_loss",
              "alpha", "lam_a", "lam_b", "lam_max")


def select_online(rng: np.random.Generator | None, n: int, rate: float) -> np.ndarray:
    """Independent Bernoulli drops; redraw until at least one client is online."""
    if rate <= 0.0 or rng is None:
        return np.ones(n, dtype=bool)
    while True:
        online = rng.random(n) >= rate
        if online.any():
            return online


@dataclass
class _RoundInputs:
    sum_gradient: np.ndarray
    d_hat: np.ndarray  # per client; nan where offline or invalid
    fed_est: float
    fed_loss: float
    n_valid: int


class _FederationBase:
    def __init__(self, shards: Sequence[ClientShard], spec: FairnessSpec, params: ModelParams,
                 mode: str = FEDFAIR, hyper: AgpHyper | None = None, drop_rate: float = 0.0,
                 drop_seed=0):
        if mode not in MODES:
            raise ParameterError(f"unknown mode {mode!r}")
        if not 0.0 <= drop_rate < 1.0:
            raise ParameterError("drop rate must lie in [0, 1)")
        ids = [s.client_id for s in shards]
        if sorted(ids) != list(range(1, len(shards) + 1)):
            raise ParameterError("client ids must be 1..N")
        self.shards = sorted(shards, key=lambda s: s.client_id)
        self.n_clients = len(shards)
        self.spec = spec
        self.template = params
        self.mode = mode
        self.hyper = hyper or AgpHyper()
        self.drop_rate = drop_rate
        self._drop_rng = np.random.default_rng(drop_seed) if drop_rate > 0 else None
        dual_mode = LCO if mode == LCO else FEDFAIR
        self.state = ServerState(theta=params.theta.copy(), duals=DualState.zeros(dual_mode, self.n_clients))

    @property
    def params(self) -> ModelParams:
        return self.template.with_theta(self.state.theta)

    def _collect(self, theta, duals, online, update=True) -> _RoundInputs:
        raise NotImplementedError

    def evaluate(self) -> _RoundInputs:
        """Client statistics at the current parameters without updating anything."""
        online = np.ones(self.n_clients, dtype=bool)
        return self._collect(self.state.theta, self.state.duals, online, update=False)

    def run_round(self) -> RoundLog:
        st = self.state
        online = select_online(self._drop_rng, self.n_clients, self.drop_rate)
        inputs = self._collect(st.theta, st.duals, online)
        alpha = agp.alpha_schedule(st.k, self.hyper)
        theta = st.theta - alpha * inputs.sum_gradient
        duals = st.duals
        eps = self.spec.epsilon
        if self.mode == FEDFAIR:
            lam_a, lam_b = agp.dual_step_fedfair(duals.lam_a, duals.lam_b, inputs.fed_est, eps, self.hyper)
            duals = DualState(FEDFAIR, lam_a, lam_b)
        elif self.mode == LCO:
            lam_a, lam_b = duals.lam_a.copy(), duals.lam_b.copy()
            upd = ~np.isnan(inputs.d_hat)  # offline and invalid clients keep their multipliers
            new_a, new_b = agp.dual_step_lco(lam_a[upd], lam_b[upd], inputs.d_hat[upd], eps, self.hyper)
            lam_a[upd], lam_b[upd] = new_a, new_b
            duals = DualState(LCO, lam_a, lam_b)
        self.state = ServerState(theta=theta, duals=duals, k=st.k + 1)
        lam = np.concatenate([duals.lam_a, duals.lam_b])
        return RoundLog(
            round=st.k,
            online_count=int(online.sum()),
            valid_count=inputs.n_valid,
            fed_est=inputs.fed_est,
            afe=abs(inputs.fed_est),
            fed_loss=inputs.fed_loss,
            alpha=alpha,
            lam_a=float(np.mean(duals.lam_a)),
            lam_b=float(np.mean(duals.lam_b)),
            lam_max=float(lam.max()),
        )


class ProtocolFederation(_FederationBase):
    def __init__(self, *args, record: bool = False, **kwargs):
        super().__init__(*args, **kwargs)
        self.clients = [Client(s, self.spec, self.template) for s in self.shards]
        self.channel = Channel(record=record)
        self._eval_round = 10**12  # evaluation rounds never collide with training rounds

    def _collect(self, theta, duals, online, update=True) -> _RoundInputs:
        if update:
            rnd = self.state.k
        else:
            self._eval_round += 1
            rnd = self._eval_round
        msg = Broadcast(round=rnd, theta=_frozen(theta), lam_a=_frozen(duals.lam_a), lam_b=_frozen(duals.lam_b))
        reports = [self.channel.exchange(c, msg) for c, on in zip(self.clients, online) if on]
        agg = aggregate(reports, self.mode, duals)
        d_hat = np.full(self.n_clients, np.nan)
        for r in reports:
            if r.valid:
                d_hat[r.client_id - 1] = r.D_hat
        return _RoundInputs(agg.sum_gradient, d_hat, agg.fed_est, agg.fed_loss, agg.n_valid)


class VectorizedFederation(_FederationBase):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        blocks = [s.data for s in self.shards]
        X = np.vstack([b.X for b in blocks])
        # one-hot blocks make benchmark matrices mostly zeros
        self.X = sparse.csr_matrix(X) if np.count_nonzero(X) < 0.3 * X.size else np.ascontiguousarray(X)
        self.y = np.concatenate([b.y for b in blocks])
        self.cid = np.concatenate([np.full(len(b), i) for i, b in enumerate(blocks)])
        self.m = np.array([len(b) for b in blocks], dtype=np.float64)
        coef_L, coef_D, valid = zip(*(estimator_coefficients(b, self.spec) for b in blocks))
        self.coef_L = np.concatenate(coef_L)
        self.coef_D = np.concatenate(coef_D)
        self.valid = np.array(valid)

    def _collect(self, theta, duals, online, update=True) -> _RoundInputs:
        N = self.n_clients
        p = self.template.with_theta(theta)
        fwd = forward(p, self.X)
        losses, slope = loss_and_slope(fwd[0], self.y)
        L_hat = np.bincount(self.cid, weights=self.coef_L * losses, minlength=N)
        D_hat = np.bincount(self.cid, weights=self.coef_D * losses, minlength=N)
        usable = online & self.valid
        n_valid = int(usable.sum())
        if n_valid == 0 and self.mode != FEDAVG:
            raise NoValidClientsError("no reporting client has a valid local estimation")
        fed_est = math.fsum(D_hat[usable]) / n_valid if n_valid else math.nan
        m_rep = self.m[online].sum()
        w = np.where(online, self.m / m_rep, 0.0)
        if self.mode == LCO:
            dual_coef = duals.lam_a - duals.lam_b
        else:
            dual_coef = np.full(N, (duals.lam_a[0] - duals.lam_b[0]) / max(n_valid, 1))
        dual_coef = np.where(usable, dual_coef, 0.0)
        row = (w / self.m)[self.cid] + dual_coef[self.cid] * self.coef_D
        grad = weighted_grad(p, self.X, self.y, row, forward=fwd, slope=slope)
        fed_loss = math.fsum(w[online] * L_hat[online])
        d_hat = np.where(usable, D_hat, np.nan)
        return _RoundInputs(grad, d_hat, fed_est, fed_loss, n_valid)


ENGINES = {"protocol": ProtocolFederation, "vectorized": VectorizedFederation}


def make_federation(engine: str, *args, **kwargs) -> _FederationBase:
    try:
        cls = ENGINES[engine]
    except KeyError:
        raise ParameterError(f"unknown engine {engine!r}") from None
    return cls(*args, **kwargs)
