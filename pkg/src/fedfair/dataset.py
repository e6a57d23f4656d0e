"""Benchmark ingestion, train/test splitting and uniform client partitioning.

Datasets are held column-wise as numpy arrays: ``X`` (encoded features),
``group`` (0 for group A, 1 for group B) and ``y`` (+1 for the protected
class, -1 otherwise). The sensitive attribute is kept out of ``X`` unless
``include_group`` is set, in which case a single 0/1 indicator column is
appended.
"""

from __future__ import annotations

import configparser
import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from datetime import datetime
from importlib import resources
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .errors import EmptyDatasetError, ParameterError, RowError, SchemaError, SizeError

GROUP_A = 0
GROUP_B = 1
POSITIVE = 1.0
NEGATIVE = -1.0

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"


class Instance(NamedTuple):
    features: np.ndarray
    group: int
    label: float


@dataclass(frozen=True)
class Column:
    name: str
    kind: str
    role: str = "feature"


@dataclass(frozen=True)
class SchemaSpec:
    """Column roles for one CSV, read from an INI-style schema file."""

    name: str
    features: tuple[Column, ...]
    group_column: str
    group_a: tuple[str, ...]
    group_b: tuple[str, ...]
    label_column: str
    positive: tuple[str, ...]
    negative: tuple[str, ...] = ()
    missing: tuple[str, ...] = ("",)
    file: str = ""

    @classmethod
    def from_file(cls, path) -> "SchemaSpec":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str  # keep column-name case
        if not parser.read(path):
            raise SchemaError(f"cannot read schema file {path}")
        return cls._from_parser(parser, str(path))

    @classmethod
    def from_string(cls, text: str) -> "SchemaSpec":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        parser.read_string(text)
        return cls._from_parser(parser, "<string>")

    @classmethod
    def builtin(cls, name: str) -> "SchemaSpec":
        ref = resources.files("fedfair.schemas").joinpath(f"{name}.ini")
        if not ref.is_file():
            raise SchemaError(f"no built-in schema named {name!r}")
        return cls.from_string(ref.read_text())

    @classmethod
    def _from_parser(cls, parser: configparser.ConfigParser, origin: str) -> "SchemaSpec":
        for section in ("dataset", "features", "group", "label"):
            if not parser.has_section(section):
                raise SchemaError(f"{origin}: missing [{section}] section")
        columns = []
        for name, kind in parser.items("features"):
            if kind not in (CONTINUOUS, CATEGORICAL):
                raise SchemaError(f"{origin}: column {name!r} has unknown kind {kind!r}")
            columns.append(Column(name, kind))
        try:
            return cls(
                name=parser.get("dataset", "name"),
                file=parser.get("dataset", "file", fallback=""),
                missing=_split_list(parser.get("dataset", "missing", fallback=""), keep_empty=True),
                features=tuple(columns),
                group_column=parser.get("group", "column"),
                group_a=_split_list(parser.get("group", "a")),
                group_b=_split_list(parser.get("group", "b")),
                label_column=parser.get("label", "column"),
                positive=_split_list(parser.get("label", "positive")),
                negative=_split_list(parser.get("label", "negative", fallback="")),
            )
        except configparser.NoOptionError as exc:
            raise SchemaError(f"{origin}: {exc}") from None


def _split_list(value: str, keep_empty: bool = False) -> tuple[str, ...]:
    items = tuple(v.strip() for v in value.split(","))
    if keep_empty:
        return items
    return tuple(v for v in items if v)


@dataclass(frozen=True)
class EncodingStats:
    mean: np.ndarray
    std: np.ndarray
    scaled: np.ndarray  # bool mask over encoded columns that were z-scored


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray
    group: np.ndarray
    y: np.ndarray
    feature_names: tuple[str, ...]
    continuous: np.ndarray  # bool mask over encoded columns
    encoding_stats: EncodingStats | None = None
    dropped: dict = field(default_factory=dict)

    def __post_init__(self):
        m = self.X.shape[0]
        if self.X.ndim != 2 or self.group.shape != (m,) or self.y.shape != (m,):
            raise SchemaError("inconsistent dataset array shapes")
        for arr in (self.X, self.group, self.y, self.continuous):
            arr.flags.writeable = False

    def __len__(self) -> int:
        return self.X.shape[0]

    def __getitem__(self, i: int) -> Instance:
        return Instance(self.X[i], int(self.group[i]), float(self.y[i]))

    def __iter__(self) -> Iterator[Instance]:
        for i in range(len(self)):
            yield self[i]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return replace(self, X=self.X[index], group=self.group[index], y=self.y[index], dropped={})

    def cell_count(self, group: int, label: float) -> int:
        return int(np.count_nonzero((self.group == group) & (self.y == label)))

    def cell_counts(self) -> dict[tuple[int, float], int]:
        return {(s, c): self.cell_count(s, c) for s in (GROUP_A, GROUP_B) for c in (POSITIVE, NEGATIVE)}


@dataclass(frozen=True, eq=False)
class ClientShard:
    client_id: int
    data: Dataset

    def __post_init__(self):
        if len(self.data) == 0:
            raise SizeError(f"client {self.client_id} has an empty shard")

    @property
    def m_i(self) -> int:
        return len(self.data)

    @property
    def m_sc(self) -> dict[tuple[int, float], int]:
        return self.data.cell_counts()


@dataclass(frozen=True)
class SplitSpec:
    n_train: int
    n_clients: int
    seed: int

    def __post_init__(self):
        if self.n_clients < 1:
            raise SizeError("n_clients must be at least 1")
        if self.n_train < 1:
            raise SizeError("n_train must be positive")


def load_csv(path, schema: SchemaSpec, include_group: bool = False) -> Dataset:
    """Read a header-row CSV and encode it according to ``schema``.

    Rows with a missing value and rows whose group is neither A nor B are
    dropped; the counts are kept in ``Dataset.dropped``. Categorical columns
    are one-hot encoded over their sorted observed levels. With
    ``include_group`` the group membership is also appended to ``X`` as a 0/1
    column (1 for group A); ``group`` is filled either way.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        index = {}
        for pos, name in enumerate(header):
            index.setdefault(name, pos)
        needed = [c.name for c in schema.features] + [schema.group_column, schema.label_column]
        missing_cols = [n for n in needed if n not in index]
        if missing_cols:
            raise SchemaError(f"{path}: missing column(s) {', '.join(missing_cols)}")

        missing_tokens = set(schema.missing)
        raw_features: list[list[str]] = []
        groups: list[int] = []
        labels: list[float] = []
        dropped = {"missing": 0, "other_group": 0, "other_label": 0}
        for line, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(header):
                raise RowError(line, f"expected {len(header)} fields, got {len(row)}")
            values = [row[index[n]].strip() for n in needed]
            if any(v in missing_tokens for v in values):
                dropped["missing"] += 1
                continue
            g, lab = values[-2], values[-1]
            if g in schema.group_a:
                groups.append(GROUP_A)
            elif g in schema.group_b:
                groups.append(GROUP_B)
            else:
                dropped["other_group"] += 1
                continue
            if lab in schema.positive:
                labels.append(POSITIVE)
            elif not schema.negative or lab in schema.negative:
                labels.append(NEGATIVE)
            else:
                groups.pop()
                dropped["other_label"] += 1
                continue
            for col, v in zip(schema.features, values):
                if col.kind == CONTINUOUS:
                    try:
                        float(v)
                    except ValueError:
                        raise RowError(line, f"column {col.name!r}: cannot parse {v!r} as a number") from None
            raw_features.append(values[:-2])

    if not raw_features:
        raise EmptyDatasetError(f"{path}: no usable rows")
    blocks, names, cont = [], [], []
    for j, col in enumerate(schema.features):
        column = [r[j] for r in raw_features]
        if col.kind == CONTINUOUS:
            blocks.append(np.array(column, dtype=np.float64)[:, None])
            names.append(col.name)
            cont.append(True)
        else:
            levels = sorted(set(column))
            lookup = {lv: k for k, lv in enumerate(levels)}
            onehot = np.zeros((len(column), len(levels)))
            onehot[np.arange(len(column)), [lookup[v] for v in column]] = 1.0
            blocks.append(onehot)
            names.extend(f"{col.name}={lv}" for lv in levels)
            cont.extend([False] * len(levels))
    group = np.array(groups, dtype=np.int8)
    if include_group:
        blocks.append((group == GROUP_A).astype(np.float64)[:, None])
        names.append(f"{schema.group_column}=A")
        cont.append(False)
    return Dataset(
        X=np.ascontiguousarray(np.hstack(blocks)),
        group=group,
        y=np.array(labels, dtype=np.float64),
        feature_names=tuple(names),
        continuous=np.array(cont, dtype=bool),
        dropped=dropped,
    )


def split_train_test(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Uniformly sample ``spec.n_train`` instances for training; the rest is test."""
    if spec.n_train >= len(ds):
        raise SizeError(f"n_train={spec.n_train} must be smaller than the dataset size {len(ds)}")
    perm = np.random.default_rng(spec.seed).permutation(len(ds))
    return ds.subset(perm[: spec.n_train]), ds.subset(perm[spec.n_train:])


def partition_uniform(train: Dataset, n_clients: int, seed: int) -> list[ClientShard]:
    """Shuffle and cut ``train`` into ``n_clients`` disjoint shards (sizes differ by at most one)."""
    if n_clients < 1:
        raise SizeError("n_clients must be at least 1")
    if n_clients > len(train):
        raise SizeError(f"cannot split {len(train)} instances across {n_clients} clients")
    perm = np.random.default_rng(seed).permutation(len(train))
    return [
        ClientShard(client_id=i + 1, data=train.subset(part))
        for i, part in enumerate(np.array_split(perm, n_clients))
    ]


def standardize(train: Dataset, test: Dataset) -> tuple[Dataset, Dataset]:
    """Z-score continuous columns with training statistics, applied to both splits."""
    if train.encoding_stats is not None or test.encoding_stats is not None:
        raise ValueError("datasets are already standardized")
    mean = train.X.mean(axis=0)
    std = train.X.std(axis=0)
    scaled = train.continuous & (std > 0)
    constant = train.continuous & ~(std > 0)
    if constant.any():
        cols = [n for n, c in zip(train.feature_names, constant) if c]
        warnings.warn(f"zero-variance column(s) left unscaled: {', '.join(cols)}", stacklevel=2)
    mean = np.where(scaled, mean, 0.0)
    std = np.where(scaled, std, 1.0)
    stats = EncodingStats(mean=mean, std=std, scaled=scaled)
    for arr in (mean, std, scaled):
        arr.flags.writeable = False

    def apply(ds: Dataset) -> Dataset:
        X = ds.X.copy()
        X[:, scaled] = (X[:, scaled] - mean[scaled]) / std[scaled]
        return replace(ds, X=X, encoding_stats=stats)

    return apply(train), apply(test)


@dataclass(frozen=True)
class SyntheticSpec:
    """Class-conditional Gaussians per protected group.

    ``means`` and ``covs`` are indexed ``[group, cls]`` with ``cls`` 0 for the
    protected (+1) class and 1 for the other.
    """

    p_group_a: float
    p_positive: tuple[float, float]  # P(y=+1 | group A), P(y=+1 | group B)
    means: np.ndarray  # (2, 2, d)
    covs: np.ndarray  # (2, 2, d, d)

    @property
    def dim(self) -> int:
        return self.means.shape[-1]

    def validate(self) -> None:
        if not 0.0 < self.p_group_a < 1.0:
            raise ParameterError("p_group_a must lie in (0, 1)")
        if not all(0.0 < p < 1.0 for p in self.p_positive):
            raise ParameterError("class probabilities must lie in (0, 1)")
        d = self.dim
        if self.means.shape != (2, 2, d) or self.covs.shape != (2, 2, d, d):
            raise ParameterError("means must be (2, 2, d) and covs (2, 2, d, d)")
        for s in range(2):
            for c in range(2):
                cov = self.covs[s, c]
                if not np.allclose(cov, cov.T):
                    raise ParameterError(f"covariance for cell ({s}, {c}) is not symmetric")
                try:
                    np.linalg.cholesky(cov)
                except np.linalg.LinAlgError:
                    raise ParameterError(f"covariance for cell ({s}, {c}) is not positive definite") from None

    @classmethod
    def isotropic(cls, means, scale: float = 1.0, p_group_a: float = 0.5,
                  p_positive=(0.5, 0.5)) -> "SyntheticSpec":
        means = np.asarray(means, dtype=np.float64)
        d = means.shape[-1]
        covs = np.broadcast_to(np.eye(d) * scale**2, (2, 2, d, d)).copy()
        return cls(p_group_a, tuple(p_positive), means, covs)

    @classmethod
    def symmetric(cls, d: int = 2, separation: float = 1.0) -> "SyntheticSpec":
        """Both groups share one distribution, so every DGEO is zero."""
        mu = np.zeros(d)
        mu[0] = separation
        means = np.array([[mu, -mu], [mu, -mu]])
        return cls.isotropic(means)

    @classmethod
    def shifted(cls, d: int = 2, separation: float = 1.0, shift: float = 0.7) -> "SyntheticSpec":
        """Group A's positive class sits closer to the boundary than group B's."""
        mu = np.zeros(d)
        mu[0] = separation
        shifted = mu.copy()
        shifted[0] -= shift
        if d > 1:
            shifted[1] += shift
        means = np.array([[shifted, -mu], [mu, -mu]])
        return cls.isotropic(means)


def make_synthetic(dist: SyntheticSpec, m: int, seed) -> Dataset:
    """Draw ``m`` i.i.d. instances from ``dist``."""
    dist.validate()
    if m <= 0:
        raise EmptyDatasetError("synthetic dataset needs m > 0")
    rng = np.random.default_rng(seed)
    X, group, y = sample_arrays(dist, m, rng)
    d = dist.dim
    return Dataset(
        X=X, group=group, y=y,
        feature_names=tuple(f"x{j}" for j in range(d)),
        continuous=np.ones(d, dtype=bool),
    )


def sample_arrays(dist: SyntheticSpec, m: int, rng: np.random.Generator):
    """Raw ``(X, group, y)`` draws; used directly by the Monte-Carlo harness."""
    d = dist.dim
    group = np.where(rng.random(m) < dist.p_group_a, GROUP_A, GROUP_B).astype(np.int8)
    p_pos = np.asarray(dist.p_positive)[group]
    y = np.where(rng.random(m) < p_pos, POSITIVE, NEGATIVE)
    cls = (y == NEGATIVE).astype(np.intp)
    z = rng.standard_normal((m, d))
    chol = np.linalg.cholesky(dist.covs)  # (2, 2, d, d)
    X = np.empty((m, d))
    for s in range(2):
        for c in range(2):
            sel = (group == s) & (cls == c)
            X[sel] = dist.means[s, c] + z[sel] @ chol[s, c].T
    return X, group, y


# Raw benchmark conversion --------------------------------------------------

ADULT_COLUMNS = (
    "age", "workclass", "fnlwgt", "education", "education-num", "marital-status",
    "occupation", "relationship", "race", "sex", "capital-gain", "capital-loss",
    "hours-per-week", "native-country", "income",
)

COMPAS_COLUMNS = (
    "sex", "age", "age_cat", "race", "juv_fel_count", "juv_misd_count", "juv_other_count",
    "priors_count", "c_charge_degree", "decile_score", "score_text", "v_decile_score",
    "v_score_text", "days_b_screening_arrest", "c_days_from_compas", "length_of_stay",
    "two_year_recid",
)

DRUG_COLUMNS = (
    "id", "age", "gender", "education", "country", "ethnicity", "nscore", "escore", "oscore",
    "ascore", "cscore", "impulsive", "ss", "alcohol", "amphet", "amyl", "benzos", "caff",
    "cannabis", "choc", "coke", "crack", "ecstasy", "heroin", "ketamine", "legalh", "lsd",
    "meth", "mushrooms", "nicotine", "semer", "vsa",
)
DRUG_WHITE = -0.31685


def convert_adult(raw_dir, out_path) -> int:
    """Concatenate adult.data and adult.test into one header-row CSV."""
    raw_dir = Path(raw_dir)
    rows = []
    for name in ("adult.data", "adult.test"):
        with (raw_dir / name).open() as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("|"):
                    continue
                fields = [f.strip() for f in line.split(",")]
                fields[-1] = fields[-1].rstrip(".")
                rows.append(fields)
    return _write_rows(out_path, ADULT_COLUMNS, rows)


def convert_compas(raw_dir, out_path) -> int:
    """Apply the usual two-year screening filters and derive ``length_of_stay``."""
    src = Path(raw_dir) / "compas-scores-two-years.csv"
    rows = []
    with src.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        idx = {}
        for pos, name in enumerate(header):
            idx.setdefault(name, pos)
        for row in reader:
            get = lambda k: row[idx[k]]  # noqa: E731
            days = get("days_b_screening_arrest")
            if days == "" or not -30 <= float(days) <= 30:
                continue
            if get("is_recid") == "-1" or get("c_charge_degree") == "O" or get("score_text") == "N/A":
                continue
            try:
                stay = (_parse_ts(get("c_jail_out")) - _parse_ts(get("c_jail_in"))).days
            except ValueError:
                stay = ""
            values = {k: get(k) for k in COMPAS_COLUMNS if k != "length_of_stay"}
            values["length_of_stay"] = str(stay)
            rows.append([values[k] for k in COMPAS_COLUMNS])
    return _write_rows(out_path, COMPAS_COLUMNS, rows)


def convert_drug(raw_dir, out_path) -> int:
    """Add a header to drug_consumption.data and name the ethnicity groups."""
    src = Path(raw_dir) / "drug_consumption.data"
    rows = []
    with src.open(newline="") as fh:
        for fields in csv.reader(fh):
            if not fields:
                continue
            fields = [f.strip() for f in fields]
            eth = float(fields[5])
            fields[5] = "white" if math.isclose(eth, DRUG_WHITE, abs_tol=1e-4) else "non-white"
            rows.append(fields)
    return _write_rows(out_path, DRUG_COLUMNS, rows)


CONVERTERS = {"adult": convert_adult, "compas": convert_compas, "drug": convert_drug}
RAW_FILES = {
    "adult": ("adult.data", "adult.test"),
    "compas": ("compas-scores-two-years.csv",),
    "drug": ("drug_consumption.data",),
}


def _parse_ts(value: str) -> datetime:
    return datetime.strptime(value, "%Y-%m-%d %H:%M:%S")


def _write_rows(out_path, columns: Sequence[str], rows) -> int:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with out_path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        writer.writerows(rows)
    return len(rows)


def load_benchmark(name: str, raw_dir, cache_dir=None, include_group: bool = False) -> Dataset:
    """Convert (once) and load one of the three benchmarks by name."""
    if name not in CONVERTERS:
        raise SchemaError(f"unknown dataset {name!r}")
    raw_dir = Path(raw_dir)
    for fname in RAW_FILES[name]:
        if not (raw_dir / fname).is_file():
            raise FileNotFoundError(raw_dir / fname)
    schema = SchemaSpec.builtin(name)
    cache_dir = Path(cache_dir) if cache_dir is not None else raw_dir.parent / "processed"
    csv_path = cache_dir / schema.file
    if not csv_path.is_file():
        CONVERTERS[name](raw_dir, csv_path)
    return load_csv(csv_path, schema, include_group=include_group)


def save_dataset(path, ds: Dataset) -> None:
    extra = {}
    if ds.encoding_stats is not None:
        extra = dict(enc_mean=ds.encoding_stats.mean, enc_std=ds.encoding_stats.std,
                     enc_scaled=ds.encoding_stats.scaled)
    np.savez(path, X=ds.X, group=ds.group, y=ds.y, continuous=ds.continuous,
             feature_names=np.array(ds.feature_names, dtype=str), **extra)


def load_dataset(path) -> Dataset:
    with np.load(path) as z:
        stats = None
        if "enc_mean" in z:
            stats = EncodingStats(z["enc_mean"], z["enc_std"], z["enc_scaled"])
        return Dataset(X=z["X"], group=z["group"], y=z["y"], continuous=z["continuous"],
                       feature_names=tuple(str(n) for n in z["feature_names"]),
                       encoding_stats=stats)
