import math

import numpy as np
import pytest

from fedfair.agp import AgpHyper
from fedfair.dataset import ClientShard, SyntheticSpec, make_synthetic, partition_uniform
from fedfair.errors import ConfigError
from fedfair.fairness import FairnessSpec, dgeo
from fedfair.model import LOGREG, MLP
from fedfair.trainers import (
    RunConfig,
    build_experiment,
    prepare_experiment,
    run,
    train_fedavg,
    train_fedfair,
    train_lco,
    train_st,
)

from conftest import RAW_DIR, needs_compas


def cfg(**kw):
    base = dict(dataset="toy", epsilon=0.01, hyper=AgpHyper(max_steps=1000), log_every=50)
    base.update(kw)
    return RunConfig(**base)


def test_config_validation():
    with pytest.raises(ConfigError):
        cfg(method="sgd").validate()
    with pytest.raises(ConfigError):
        cfg(model="svm").validate()
    with pytest.raises(ConfigError):
        cfg(epsilon=None).validate()
    with pytest.raises(ConfigError):
        cfg(drop_rate=1.0).validate()
    cfg(method="fedavg", epsilon=None).validate()


@pytest.mark.parametrize("kind", [LOGREG, MLP])
def test_fedavg_equals_fedfair_with_dormant_multipliers(toy_shards, kind):
    c = cfg(model=kind, epsilon=math.inf, hyper=AgpHyper(max_steps=1000))
    pa, ta = train_fedavg(c, toy_shards)
    pf, tf = train_fedfair(c, toy_shards)
    assert pa.theta.tobytes() == pf.theta.tobytes()
    assert all(r.lam_max == 0.0 for r in tf.rounds)


@pytest.mark.parametrize("engine", ["vectorized", "protocol"])
def test_single_client_lattice(toy_data, engine):
    one = partition_uniform(toy_data, 1, 0)
    c = cfg(engine=engine, hyper=AgpHyper(max_steps=300, beta=0.5))
    pf, tf = train_fedfair(c, one)
    pl, tl = train_lco(c, one)
    st = train_st(c, one)
    assert pf.theta.tobytes() == pl.theta.tobytes()
    assert pf.theta.tobytes() == st[0][1].theta.tobytes()
    assert [r.lam_a for r in tf.rounds] == [r.lam_a for r in tl.rounds]
    assert max(r.lam_max for r in tf.rounds) > 0  # the constraint was active


def test_lco_with_slack_equals_fedavg(toy_shards):
    c = cfg(epsilon=1e9, hyper=AgpHyper(max_steps=200))
    assert train_lco(c, toy_shards)[0].theta.tobytes() == train_fedavg(c, toy_shards)[0].theta.tobytes()


def test_reproducible(toy_shards):
    c = cfg(drop_rate=0.3, hyper=AgpHyper(max_steps=200))
    a, ta = train_fedfair(c, toy_shards)
    b, tb = train_fedfair(c, toy_shards)
    assert a.theta.tobytes() == b.theta.tobytes()
    assert ta.rounds == tb.rounds


def test_constraint_lowers_training_dgeo():
    ds = make_synthetic(SyntheticSpec.shifted(d=2, shift=1.0), 2000, seed=4)
    shards = partition_uniform(ds, 4, 0)
    c = cfg(epsilon=0.01, hyper=AgpHyper(max_steps=3000))
    pf, tf = train_fedfair(c, shards)
    pa, _ = train_fedavg(c, shards)
    spec = FairnessSpec()
    assert dgeo(pf, ds, spec) < dgeo(pa, ds, spec)
    assert tf.final_afe <= 0.01 + 1e-3


def test_trajectory_logging(toy_shards, tmp_path):
    c = cfg(hyper=AgpHyper(max_steps=120), log_every=50)
    _, traj = train_fedfair(c, toy_shards)
    assert [r.round for r in traj.rounds] == [50, 100, 120]
    assert traj.steps == 120
    traj.to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0].startswith("round,online_count")
    assert len(lines) == 4


def test_st_flags_clients_with_empty_cells(toy_data):
    shards = partition_uniform(toy_data, 3, 0)
    keep = ~((toy_data.group == 1) & (toy_data.y == 1))
    shards[2] = ClientShard(3, toy_data.subset(np.flatnonzero(keep)[:100]))
    models = train_st(cfg(hyper=AgpHyper(max_steps=50)), shards)
    assert [cid for cid, _ in models] == [1, 2, 3]
    assert models.unconstrained == [3]


def test_st_without_constraint_is_per_client_fedavg(toy_shards):
    c = cfg(epsilon=math.inf, hyper=AgpHyper(max_steps=100))
    models = train_st(c, toy_shards)
    for (cid, p), shard in zip(models, toy_shards):
        solo, _ = train_fedavg(c, [ClientShard(1, shard.data)])
        assert p.theta.tobytes() == solo.theta.tobytes()


def test_run_dispatch(toy_shards):
    exp = build_experiment(make_synthetic(SyntheticSpec.shifted(d=2), 500, 1), 400, 4, 0)
    res = run(cfg(method="lco", hyper=AgpHyper(max_steps=20)), exp)
    assert res.trajectory.steps == 20
    res = run(cfg(method="st", hyper=AgpHyper(max_steps=20)), exp)
    assert res.trajectory is None and len(res.params) == 4


@needs_compas
def test_compas_fedfair_respects_epsilon():
    c = RunConfig(dataset="compas", epsilon=0.05, hyper=AgpHyper(max_steps=2000), data_dir=str(RAW_DIR))
    exp = prepare_experiment(c)
    _, traj = train_fedfair(c, exp)
    assert traj.final_afe <= 0.05 + 1e-3
    _, avg = train_fedavg(c, exp)
    assert avg.final_afe > traj.final_afe
