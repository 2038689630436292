"""MVTS instances, datasets and their on-disk format.

A dataset directory holds ``manifest.jsonl`` plus one CSV per instance. The
first manifest line is a header record::

    {"record": "header", "tau": 60, "n_features": 24, "feature_names": [...],
     "t_obs_hours": 12, "t_pred_hours": 24, "partition_id": "P1"}

and each following line describes one instance::

    {"record": "instance", "file": "instances/P1_000000.csv", "label": "FQ",
     "start_time": "2010-01-01T00:00:00Z", "source_id": "AR11158"}

Instance lines are written sorted by ``(start_time, source_id)``. An instance
CSV has a header row of feature names and ``tau`` data rows; an empty cell
marks a missing value (NaN in memory). Floats are written with ``repr`` so a
write/load round trip is bit-exact.
"""
import csv
import json
import os
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from ..errors import ContractError, ParseError, ValidationError

FIVE_CLASSES = ("FQ", "B", "C", "M", "X")
FLARE = frozenset({"M", "X"})
NON_FLARE = frozenset({"FQ", "B", "C"})
MANIFEST_NAME = "manifest.jsonl"


def parse_time(text):
    """Parse an ISO-8601 timestamp; naive values are taken as UTC."""
    ts = datetime.fromisoformat(text.replace("Z", "+00:00"))
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def format_time(ts):
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def binary_label(label):
    """1 for flare (M, X), 0 for non-flare (FQ, B, C)."""
    if label in FLARE:
        return 1
    if label in NON_FLARE:
        return 0
    raise ValidationError(f"unknown flare class {label!r}; expected one of {FIVE_CLASSES}")


@dataclass
class MvtsInstance:
    values: np.ndarray  # [tau, N], NaN = missing
    label: str
    start_time: datetime
    source_id: str = ""
    name: str = ""

    @property
    def binary(self):
        return binary_label(self.label)


@dataclass
class Dataset:
    instances: list = field(default_factory=list)
    tau: int = None
    n_features: int = None
    feature_names: list = None
    t_obs_hours: float = 12.0
    t_pred_hours: float = 24.0
    partition_id: str = None
    split: str = None  # "train", "val", "test" or None

    def __len__(self):
        return len(self.instances)

    def __post_init__(self):
        for inst in self.instances:
            if inst.label not in FIVE_CLASSES:
                raise ValidationError(f"{inst.name or 'instance'}: unknown label {inst.label!r}")
            if self.tau is not None and inst.values.shape != (self.tau, self.n_features):
                raise ValidationError(f"{inst.name or 'instance'}: shape {list(inst.values.shape)} "
                                      f"does not match [{self.tau}, {self.n_features}]")
        if self.feature_names is None and self.n_features is not None:
            self.feature_names = [f"f{j:02d}" for j in range(self.n_features)]

    def derive(self, instances=None, **changes):
        """Copy with new instances and/or header fields."""
        return replace(self, instances=list(self.instances if instances is None else instances),
                       **changes)

    def with_split(self, split):
        return self.derive(split=split)

    def counts(self):
        out = {c: 0 for c in FIVE_CLASSES}
        for inst in self.instances:
            out[inst.label] += 1
        return out

    def values(self):
        if not self.instances:
            return np.zeros((0, self.tau or 0, self.n_features or 0))
        return np.stack([inst.values for inst in self.instances])

    def binary_labels(self):
        return np.array([inst.binary for inst in self.instances], dtype=int)

    def start_times(self):
        return [inst.start_time for inst in self.instances]

    def time_range(self):
        if not self.instances:
            return None
        times = self.start_times()
        return min(times), max(times)

    def sorted(self):
        return self.derive(sorted(self.instances, key=lambda i: (i.start_time, i.source_id)))


@dataclass
class BinaryDataset:
    """Arrays ready for training: ``x [n, tau, N]`` and ``y`` in {0 = NF, 1 = F}."""

    x: np.ndarray
    y: np.ndarray
    start_times: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    mean: np.ndarray = None
    std: np.ndarray = None

    def __len__(self):
        return len(self.y)


def consolidate(dataset, mean=None, std=None):
    """Collapse the five flare classes to NF/F and stack values into arrays."""
    return BinaryDataset(x=dataset.values(), y=dataset.binary_labels(),
                         start_times=dataset.start_times(),
                         labels=[i.label for i in dataset.instances], mean=mean, std=std)


# ---------------------------------------------------------------------------
# reading and writing
# ---------------------------------------------------------------------------

def _format_cell(v):
    return "" if np.isnan(v) else repr(float(v))


def write_instance_csv(path, values, feature_names):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(feature_names)
        for row in values:
            w.writerow([_format_cell(v) for v in row])


def read_instance_csv(path, tau, feature_names):
    path = str(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValidationError(f"{path}: empty instance file")
    header, body = rows[0], rows[1:]
    if feature_names is not None and header != list(feature_names):
        raise ValidationError(f"{path}: header {header[:4]}... does not match manifest feature names")
    if tau is not None and len(body) != tau:
        raise ValidationError(f"{path}: has {len(body)} rows, expected tau={tau}")
    values = np.empty((len(body), len(header)))
    for r, row in enumerate(body):
        if len(row) != len(header):
            raise ValidationError(f"{path}: line {r + 2} has {len(row)} cells, expected {len(header)}")
        for c, cell in enumerate(row):
            cell = cell.strip()
            if cell == "":
                values[r, c] = np.nan
                continue
            try:
                values[r, c] = float(cell)
            except ValueError:
                raise ParseError(f"cannot parse {cell!r} as a number", path, r + 2, c + 1) from None
            if not np.isfinite(values[r, c]):
                raise ParseError(f"non-finite value {cell!r}", path, r + 2, c + 1)
    return values


def load_dataset(manifest_path, split=None):
    """Load a manifest and every instance it references.

    ``manifest_path`` may name the manifest file or its directory.
    """
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    root = manifest_path.parent
    with open(manifest_path) as fh:
        lines = [(n, line) for n, line in enumerate(fh, start=1) if line.strip()]
    if not lines:
        return Dataset(split=split)

    header, records = None, []
    for n, line in lines:
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", str(manifest_path), n, exc.colno) from None
        kind = rec.get("record", "instance")
        if kind == "header":
            if header is not None or records:
                raise ValidationError(f"{manifest_path}:{n}: header must be the first record")
            header = rec
        elif kind == "instance":
            records.append((n, rec))
        else:
            raise ParseError(f"unknown record kind {kind!r}", str(manifest_path), n)

    header = header or {}
    tau, n_features = header.get("tau"), header.get("n_features")
    names = header.get("feature_names")
    instances = []
    for n, rec in records:
        for key in ("file", "label", "start_time"):
            if key not in rec:
                raise ParseError(f"instance record lacks {key!r}", str(manifest_path), n)
        file = root / rec["file"]
        if not file.exists():
            raise ValidationError(f"{manifest_path}:{n}: referenced file {rec['file']} does not exist")
        values = read_instance_csv(file, tau, names)
        if names is None:
            with open(file, newline="") as fh:
                names = next(csv.reader(fh))
        if tau is None:
            tau = values.shape[0]
        if n_features is None:
            n_features = values.shape[1]
        if values.shape != (tau, n_features):
            raise ValidationError(f"{file}: shape {list(values.shape)} does not match "
                                  f"[{tau}, {n_features}]")
        if rec["label"] not in FIVE_CLASSES:
            raise ValidationError(f"{manifest_path}:{n}: unknown label {rec['label']!r}")
        try:
            start = parse_time(rec["start_time"])
        except ValueError:
            raise ParseError(f"bad timestamp {rec['start_time']!r}", str(manifest_path), n) from None
        instances.append(MvtsInstance(values=values, label=rec["label"], start_time=start,
                                      source_id=str(rec.get("source_id", "")), name=rec["file"]))
    return Dataset(instances=instances, tau=tau, n_features=n_features, feature_names=names,
                   t_obs_hours=header.get("t_obs_hours", 12.0),
                   t_pred_hours=header.get("t_pred_hours", 24.0),
                   partition_id=header.get("partition_id"), split=split)


def write_dataset(dataset, directory, prefix=None):
    """Write ``dataset`` as ``directory/manifest.jsonl`` + ``directory/instances/*.csv``."""
    directory = Path(directory)
    (directory / "instances").mkdir(parents=True, exist_ok=True)
    prefix = prefix or dataset.partition_id or "inst"
    ordered = sorted(dataset.instances, key=lambda i: (i.start_time, i.source_id))
    header = {"record": "header", "tau": dataset.tau, "n_features": dataset.n_features,
              "feature_names": list(dataset.feature_names or []),
              "t_obs_hours": dataset.t_obs_hours, "t_pred_hours": dataset.t_pred_hours,
              "partition_id": dataset.partition_id}
    lines = [json.dumps(header, sort_keys=True)]
    for k, inst in enumerate(ordered):
        rel = inst.name or f"instances/{prefix}_{k:06d}.csv"
        write_instance_csv(directory / rel, inst.values, dataset.feature_names)
        lines.append(json.dumps({"record": "instance", "file": rel, "label": inst.label,
                                 "start_time": format_time(inst.start_time),
                                 "source_id": inst.source_id}, sort_keys=True))
    tmp = directory / (MANIFEST_NAME + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, directory / MANIFEST_NAME)
    return directory / MANIFEST_NAME


def require_split(dataset, split, op):
    if dataset.split != split:
        raise ContractError(f"{op} applies to the {split!r} split only; dataset is tagged "
                            f"{dataset.split!r}")
