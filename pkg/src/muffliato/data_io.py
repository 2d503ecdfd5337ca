"""Dataset ingestion, preprocessing, partitioning and result persistence."""
from __future__ import annotations

import csv
import json
import os
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyInput, InvalidParameter, MalformedRow, NonNumericCell, SchemaVersionError
from .privacy import PairwiseLossMatrix, PrivacyParams

__all__ = [
    "Dataset",
    "ResultRecord",
    "SCHEMA_VERSION",
    "load_csv_dataset",
    "save_csv_dataset",
    "binarize_labels",
    "standardize_and_normalize",
    "train_test_split",
    "partition",
    "atomic_write",
    "write_results",
    "read_results",
    "write_ledger_csv",
    "read_ledger_csv",
    "write_ledger_json",
    "read_ledger_json",
]

SCHEMA_VERSION = 1


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    feature_names: list[str]
    label_name: str = "label"
    zero_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n_rows(self) -> int:
        return len(self.y)

    @property
    def n_features(self) -> int:
        return self.X.shape[1]


def load_csv_dataset(path: str | Path, label_column: str) -> Dataset:
    """Numeric CSV with a header row; ``label_column`` becomes ``y``, the rest ``X``.

    Line numbers in errors are 1-based file lines (the header is line 1).
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyInput(f"{path} is empty") from None
        if label_column not in header:
            raise InvalidParameter(
                f"label column {label_column!r} not found; available columns: {', '.join(header)}"
            )
        li = header.index(label_column)
        rows = []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise MalformedRow(line, f"expected {len(header)} fields, got {len(row)}")
            vals = []
            for name, cell in zip(header, row):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise NonNumericCell(line, f"column {name!r} holds non-numeric value {cell!r}") from None
            rows.append(vals)
    if not rows:
        raise EmptyInput(f"{path} has a header but no data rows")
    data = np.asarray(rows)
    keep = [i for i in range(len(header)) if i != li]
    return Dataset(data[:, keep], data[:, li], [header[i] for i in keep], label_column)


def save_csv_dataset(ds: Dataset, path: str | Path) -> None:
    def body(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ds.feature_names + [ds.label_name])
        for x, y in zip(ds.X, ds.y):
            w.writerow([repr(float(v)) for v in x] + [repr(float(y))])
    atomic_write(path, body)


def binarize_labels(y: np.ndarray, threshold: float | None = None) -> np.ndarray:
    """+1 above ``threshold`` (the median by default), -1 otherwise."""
    y = np.asarray(y, dtype=float)
    if threshold is None:
        threshold = float(np.median(y))
    return np.where(y > threshold, 1.0, -1.0)


def standardize_and_normalize(ds: Dataset) -> Dataset:
    """Zero-mean unit-variance columns (constant ones dropped), then unit-norm rows."""
    if ds.n_rows < 2:
        raise InvalidParameter("standardization needs at least 2 rows")
    X = np.asarray(ds.X, dtype=float)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    const = std == 0
    names = list(ds.feature_names)
    if const.any():
        dropped = [n for n, c in zip(names, const) if c]
        warnings.warn(f"dropping constant columns: {', '.join(dropped)}", stacklevel=2)
    Z = (X[:, ~const] - mean[~const]) / std[~const]
    norms = np.linalg.norm(Z, axis=1)
    zero = norms == 0
    Z[~zero] /= norms[~zero, None]
    return Dataset(Z, ds.y.copy(), [n for n, c in zip(names, const) if not c], ds.label_name,
                   np.flatnonzero(zero))


def train_test_split(ds: Dataset, train_fraction: float = 0.8, seed=0) -> tuple[Dataset, Dataset]:
    if not 0.0 < train_fraction < 1.0:
        raise InvalidParameter("train_fraction must lie in (0, 1)")
    perm = np.random.default_rng(seed).permutation(ds.n_rows)
    k = int(round(train_fraction * ds.n_rows))
    a, b = perm[:k], perm[k:]
    return (Dataset(ds.X[a], ds.y[a], ds.feature_names, ds.label_name),
            Dataset(ds.X[b], ds.y[b], ds.feature_names, ds.label_name))


def partition(ds: Dataset, n: int, mode: str = "shuffle", seed=0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split rows into ``n`` near-equal shards (sizes differ by at most 1)."""
    if n < 1:
        raise InvalidParameter("n must be >= 1")
    if n > ds.n_rows:
        raise InvalidParameter(f"cannot split {ds.n_rows} rows across {n} nodes")
    if mode == "shuffle":
        order = np.random.default_rng(seed).permutation(ds.n_rows)
    elif mode == "contiguous":
        order = np.arange(ds.n_rows)
    else:
        raise InvalidParameter(f"unknown partition mode {mode!r}")
    return [(ds.X[idx], ds.y[idx]) for idx in np.array_split(order, n)]


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------


def atomic_write(path: str | Path, write) -> None:
    """Call ``write(fh)`` on a temporary file next to ``path`` then rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            write(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_json(path, obj) -> None:
    atomic_write(path, lambda fh: (json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False), fh.write("\n")))


@dataclass
class ResultRecord:
    """Experiment output: the config that produced it plus named metric columns."""

    experiment_id: str
    config: dict
    metrics: dict
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "experiment_id": self.experiment_id,
            "config": self.config,
            "metrics": self.metrics,
        }


def write_results(record: ResultRecord, path: str | Path) -> None:
    _write_json(path, record.to_dict())


def read_results(path: str | Path) -> ResultRecord:
    with open(path) as fh:
        d = json.load(fh)
    version = d.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"{path} has schema version {version!r}; this version reads {SCHEMA_VERSION}"
        )
    return ResultRecord(d["experiment_id"], d["config"], d["metrics"], version)


def _fmt(x: float) -> str:
    return "%.17g" % x


def write_ledger_csv(plm: PairwiseLossMatrix, path: str | Path) -> None:
    """Rows ``u, v, eps``; the header records the privacy parameters and message counts."""
    def body(fh):
        p = plm.params
        fh.write(f"# schema_version={SCHEMA_VERSION} alpha={_fmt(p.alpha)} delta={_fmt(p.delta)} sigma2={_fmt(p.sigma2)}\n")
        fh.write("# msg_count=" + " ".join(str(int(c)) for c in plm.msg_count) + "\n")
        fh.write("# self_loss=" + " ".join(_fmt(s) for s in plm.self_loss) + "\n")
        fh.write("u,v,eps\n")
        for u in range(plm.n):
            for v in range(plm.n):
                if u != v:
                    fh.write(f"{u},{v},{_fmt(plm.eps[u, v])}\n")
    atomic_write(path, body)


def read_ledger_csv(path: str | Path) -> PairwiseLossMatrix:
    meta: dict[str, str] = {}
    counts = self_loss = None
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if line.startswith("# msg_count="):
                counts = np.array([int(c) for c in line.split("=", 1)[1].split()], dtype=np.int64)
            elif line.startswith("# self_loss="):
                self_loss = np.array([float(c) for c in line.split("=", 1)[1].split()])
            elif line.startswith("#"):
                for kv in line[1:].split():
                    k, _, v = kv.partition("=")
                    meta[k] = v
            elif line and line != "u,v,eps":
                parts = line.split(",")
                if len(parts) != 3:
                    raise MalformedRow(lineno, "expected u,v,eps")
                try:
                    entries.append((int(parts[0]), int(parts[1]), float(parts[2])))
                except ValueError:
                    raise NonNumericCell(lineno, f"non-numeric ledger entry {line!r}") from None
    if int(meta.get("schema_version", -1)) != SCHEMA_VERSION:
        raise SchemaVersionError(f"{path} has schema version {meta.get('schema_version')!r}")
    if counts is None:
        raise InvalidParameter(f"{path} lacks the msg_count header")
    n = len(counts)
    eps = np.zeros((n, n))
    for u, v, e in entries:
        eps[u, v] = e
    params = PrivacyParams(float(meta["alpha"]), float(meta["delta"]), float(meta["sigma2"]))
    return PairwiseLossMatrix(eps, counts, params, self_loss)


def write_ledger_json(plm: PairwiseLossMatrix, path: str | Path) -> None:
    d = plm.to_dict()
    d["schema_version"] = SCHEMA_VERSION
    _write_json(path, d)


def read_ledger_json(path: str | Path) -> PairwiseLossMatrix:
    with open(path) as fh:
        d = json.load(fh)
    if d.get("schema_version") != SCHEMA_VERSION:
        raise SchemaVersionError(f"{path} has schema version {d.get('schema_version')!r}")
    return PairwiseLossMatrix.from_dict(d)
