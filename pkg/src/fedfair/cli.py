"""Command-line front end: prepare, train, grid, verify and report.

Configs are INI files. Sections and keys (all optional, defaults shown by
``fedfair <command> --help`` and in the README)::

    [run]     dataset model method epsilon drop_rate engine n_train n_clients
              include_group data_dir log_every
    [agp]     alpha beta gamma decay_every decay_factor max_steps
    [seeds]   data init drop
    [grid]    epsilons repeats
    [verify]  n_clients m resamples n_probes r_grid seed oracle_m probe_scale
              eps dist d separation shift

Every command writes into its own ``--out`` directory, refuses to reuse a
directory that already holds a manifest, and finishes by writing
``manifest.json`` with a SHA-256 hash per output file.

Exit codes: 0 success, 1 a verification check failed, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .agp import AgpHyper
from .dataset import GROUP_A, GROUP_B, NEGATIVE, POSITIVE, SyntheticSpec, save_dataset
from .errors import ConfigError, FedFairError
from .evaluation import (
    MetricsRecord,
    grid_search,
    read_records,
    run_many,
    score_run,
    seed_configs,
    summary_table,
    top_k,
    write_records,
)
from .model import save_checkpoint
from .trainers import EPS_GRIDS, ST, RunConfig, Seeds, prepare_experiment, run
from .verify import McSpec, check_chebyshev, check_variance, check_unbiased, simulate

log = logging.getLogger("fedfair")

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2

SHARD_FIELDS = ("client_id", "m_i", "a_pos", "a_neg", "b_pos", "b_neg")


class UsageError(Exception):
    pass


# Config ---------------------------------------------------------------------

def read_config(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    if path is None:
        return cp
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise UsageError(f"{path}: {exc}") from None
    return cp


def _get(cp, section, key, conv, default):
    if not cp.has_option(section, key):
        return default
    raw = cp.get(section, key).strip()
    if raw == "" or raw.lower() == "none":
        return None
    try:
        return conv(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key} = {raw!r} is not a valid {conv.__name__}") from None


def _bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(raw)


def _floats(raw: str) -> tuple[float, ...]:
    return tuple(float(v) for v in raw.replace(",", " ").split())


def run_config(cp, args) -> RunConfig:
    base = RunConfig()
    hyper = AgpHyper(**{k: _get(cp, "agp", k, type(getattr(base.hyper, k)), getattr(base.hyper, k))
                        for k in ("alpha", "beta", "gamma", "decay_every", "decay_factor", "max_steps")})
    seeds = Seeds(*(_get(cp, "seeds", k, int, 0) for k in ("data", "init", "drop")))
    if getattr(args, "seed", None) is not None:
        seeds = Seeds(args.seed, args.seed, args.seed)
    cfg = RunConfig(
        dataset=_get(cp, "run", "dataset", str, base.dataset),
        model=_get(cp, "run", "model", str, base.model),
        method=_get(cp, "run", "method", str, base.method),
        epsilon=_get(cp, "run", "epsilon", float, None),
        hyper=hyper,
        drop_rate=_get(cp, "run", "drop_rate", float, 0.0),
        seeds=seeds,
        n_train=_get(cp, "run", "n_train", int, None),
        n_clients=_get(cp, "run", "n_clients", int, None),
        include_group=_get(cp, "run", "include_group", _bool, base.include_group),
        engine=_get(cp, "run", "engine", str, base.engine),
        data_dir=_get(cp, "run", "data_dir", str, base.data_dir),
        log_every=_get(cp, "run", "log_every", int, base.log_every),
    )
    if getattr(args, "drop_rate", None) is not None:
        cfg = cfg.with_(drop_rate=args.drop_rate)
    if getattr(args, "dataset", None):
        cfg = cfg.with_(dataset=args.dataset)
    if getattr(args, "data_dir", None):
        cfg = cfg.with_(data_dir=args.data_dir)
    return cfg


def mc_config(cp, args) -> tuple[McSpec, float]:
    kind = _get(cp, "verify", "dist", str, "shifted")
    d = _get(cp, "verify", "d", int, 2)
    sep = _get(cp, "verify", "separation", float, 1.0)
    if kind == "shifted":
        dist = SyntheticSpec.shifted(d, sep, _get(cp, "verify", "shift", float, 0.7))
    elif kind == "symmetric":
        dist = SyntheticSpec.symmetric(d, sep)
    else:
        raise ConfigError(f"unknown synthetic distribution {kind!r}")
    base = McSpec()
    spec = McSpec(
        dist=dist,
        n_clients=_get(cp, "verify", "n_clients", int, base.n_clients),
        m=_get(cp, "verify", "m", int, base.m),
        resamples=_get(cp, "verify", "resamples", int, base.resamples),
        n_probes=_get(cp, "verify", "n_probes", int, base.n_probes),
        r_grid=_get(cp, "verify", "r_grid", _floats, base.r_grid),
        seed=args.seed if args.seed is not None else _get(cp, "verify", "seed", int, base.seed),
        oracle_m=_get(cp, "verify", "oracle_m", int, base.oracle_m),
        probe_scale=_get(cp, "verify", "probe_scale", float, base.probe_scale),
    )
    return spec.validate(), _get(cp, "verify", "eps", float, 0.05)


# Output ---------------------------------------------------------------------

class RunDir:
    """An output directory that is written once and sealed with a manifest."""

    def __init__(self, path, command: str, config_path):
        self.path = Path(path)
        if (self.path / "manifest.json").exists():
            raise UsageError(f"{self.path} already holds a finished run; choose a new --out")
        self.path.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.config_path = config_path
        self.started = _now()
        self.files: list[Path] = []

    def file(self, name: str) -> Path:
        p = self.path / name
        self.files.append(p)
        return p

    def seal(self, seeds: dict) -> Path:
        manifest = {
            "command": self.command,
            "version": __version__,
            "config": None if self.config_path is None else str(self.config_path),
            "output_dir": str(self.path),
            "started": self.started,
            "finished": _now(),
            "seeds": seeds,
            "artifacts": {p.name: sha256(p) for p in sorted(self.files)},
        }
        out = self.path / "manifest.json"
        out.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return out


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def sha256(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _seeds(cfg: RunConfig) -> dict:
    return {"data": cfg.seeds.data, "init": cfg.seeds.init, "drop": cfg.seeds.drop}


# Commands -------------------------------------------------------------------

def cmd_prepare(args) -> int:
    cp = read_config(args.config)
    cfg = run_config(cp, args)  # only the data fields matter here
    exp = prepare_experiment(cfg)
    out = RunDir(args.out, "prepare", args.config)
    save_dataset(out.file("train.npz"), exp.train)
    save_dataset(out.file("test.npz"), exp.test)
    with out.file("shards.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SHARD_FIELDS)
        for s in exp.shards:
            c = s.m_sc
            w.writerow([s.client_id, s.m_i, c[(GROUP_A, POSITIVE)], c[(GROUP_A, NEGATIVE)],
                        c[(GROUP_B, POSITIVE)], c[(GROUP_B, NEGATIVE)]])
        for s in exp.shards:
            save_dataset(out.file(f"shard_{s.client_id:03d}.npz"), s.data)
    out.seal(_seeds(cfg))
    sizes = sorted({s.m_i for s in exp.shards})
    print(f"{cfg.dataset}: train {len(exp.train)}, test {len(exp.test)}, "
          f"{len(exp.shards)} shards x {'/'.join(map(str, sizes))}")
    return EXIT_OK


def cmd_train(args) -> int:
    cp = read_config(args.config)
    cfg = run_config(cp, args).validate()
    exp = prepare_experiment(cfg)
    out = RunDir(args.out, "train", args.config)
    res = run(cfg, exp)
    if cfg.method == ST:
        for cid, p in res.params:
            save_checkpoint(out.file(f"checkpoint_client_{cid:03d}.txt"), p)
    else:
        save_checkpoint(out.file("checkpoint.txt"), res.params)
        res.trajectory.to_csv(out.file("trajectory.csv"))
    rec = score_run(res, exp)
    write_records(out.file("metrics.csv"), [rec])
    out.seal(_seeds(cfg))
    print(f"{cfg.method} {cfg.dataset}/{cfg.model}: accuracy {rec.accuracy:.4f}, fairness {rec.fairness:.4f}, "
          f"HM {rec.harmonic_mean:.4f}, train AFE {rec.afe_train:.4g}")
    return EXIT_OK


def cmd_grid(args) -> int:
    cp = read_config(args.config)
    cfg = run_config(cp, args)
    if args.eps is not None:
        eps = _floats(args.eps)
    else:
        eps = _get(cp, "grid", "epsilons", _floats, EPS_GRIDS.get(cfg.dataset))
    if not eps:
        raise ConfigError("epsilon grid is empty")
    repeats = args.repeats if args.repeats is not None else _get(cp, "grid", "repeats", int, 1)
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    for e in eps:
        cfg.with_(epsilon=e).validate()
    out = RunDir(args.out, "grid", args.config)
    if repeats == 1:
        res = grid_search(cfg, eps, jobs=args.jobs)
        records, top = res.records, res.top
    else:
        cfgs = [c for e in eps for c in seed_configs(cfg.with_(epsilon=e), repeats)]
        records = run_many(cfgs, args.jobs)
        top = top_k(records)
    write_records(out.file("results.csv"), records)
    write_records(out.file("top5.csv"), top)
    table = summary_table(records)
    out.file("summary.csv").write_text(table)
    out.seal(_seeds(cfg))
    print(table, end="")
    return EXIT_OK


def cmd_verify(args) -> int:
    cp = read_config(args.config)
    spec, eps = mc_config(cp, args)
    out = RunDir(args.out, "verify", args.config)
    mc = simulate(spec)
    report = check_unbiased(mc).extend(check_variance(mc)).extend(check_chebyshev(mc, eps))
    report.to_csv(out.file("report.csv"))
    out.seal({"mc": spec.seed})
    print(report.summary())
    return EXIT_OK if report.passed else EXIT_CHECK


def cmd_report(args) -> int:
    records: list[MetricsRecord] = []
    for path in args.inputs:
        if not Path(path).is_file():
            raise UsageError(f"no such results file: {path}")
        records.extend(read_records(path))
    if not records:
        raise UsageError("no records in the given files")
    table = summary_table(records)
    if args.out:
        out = RunDir(args.out, "report", None)
        out.file("summary.csv").write_text(table)
        out.seal({})
    print(table, end="")
    return EXIT_OK


# Entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedfair", description="Fairness-constrained federated training.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="INI config file")
        p.add_argument("--out", required=out_required, help="output directory for this run")
        p.add_argument("--seed", type=int, help="override every seed in the config")

    p = sub.add_parser("prepare", help="split, standardize and partition a benchmark")
    common(p)
    p.add_argument("--dataset", help="adult, compas or drug")
    p.add_argument("--data-dir", help="directory with the raw files")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train one configuration and score it")
    common(p)
    p.add_argument("--dataset")
    p.add_argument("--data-dir")
    p.add_argument("--drop-rate", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid", help="grid search over epsilon")
    common(p)
    p.add_argument("--dataset")
    p.add_argument("--data-dir")
    p.add_argument("--drop-rate", type=float)
    p.add_argument("--eps", help="comma-separated epsilon values (default: the dataset's grid)")
    p.add_argument("--repeats", type=int, help="random constructions per epsilon")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("verify", help="Monte-Carlo checks of the estimator theory")
    common(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("report", help="summarize one or more results CSV files")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, FedFairError, FileNotFoundError) as exc:
        msg = f"missing file: {exc.filename or exc}" if isinstance(exc, FileNotFoundError) else str(exc)
        print(f"fedfair {args.command}: error: {msg}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
