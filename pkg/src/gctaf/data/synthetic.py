"""Planted-pattern MVTS generator used as a stand-in for real flare data.

Non-flare windows are correlated AR(1) noise: every feature loads on one of a
few shared latent factors plus its own idiosyncratic component, then gets a
per-feature offset and scale. Flare windows additionally carry spikes at
``m`` time indices on a fixed subset of "signal" features. With
``pattern="dispersed"`` no two spike indices are adjacent; with
``"contiguous"`` they form a single run.

The per-feature offsets, scales, factor loadings and the signal feature set
are drawn from ``stream(seed, "world")`` and so are shared by every partition
generated with the same seed; instance-level draws use
``stream(seed, "partition", index)``.
"""
import json
from dataclasses import asdict, dataclass, fields
from datetime import timedelta
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from ..rng import stream
from .dataset import Dataset, MvtsInstance, parse_time, write_dataset

# relative class shares inside NF and F (percentages of the full corpus)
NF_SHARES = {"FQ": 82.8, "B": 5.5, "C": 9.8}
F_SHARES = {"M": 1.7, "X": 0.16}
TRUTH_NAME = "signal_truth.jsonl"


@dataclass(frozen=True)
class SynthSpec:
    n_instances: int = 1000
    tau: int = 60
    n_features: int = 24
    imbalance: float = 0.1
    pattern: str = "dispersed"
    m: int = 6
    noise: float = 1.0
    amplitude: float = 3.0
    signal_features: int = 4
    missing_fraction: float = 0.0
    ar_coef: float = 0.7
    n_factors: int = 4
    factor_loading: float = 0.8
    last_step_signal: bool = False
    start_time: str = "2010-01-01T00:00:00Z"
    cadence_hours: float = 1.0
    partition_index: int = 0

    def validate(self):
        if self.n_instances < 0 or self.tau < 1 or self.n_features < 1:
            raise ConfigError("n_instances must be >= 0 and tau, n_features >= 1")
        if not 0.0 <= self.imbalance <= 1.0:
            raise ConfigError(f"imbalance must lie in [0, 1], got {self.imbalance}")
        if self.pattern not in ("dispersed", "contiguous"):
            raise ConfigError(f"pattern must be 'dispersed' or 'contiguous', got {self.pattern!r}")
        if self.m < 1 or self.m > self.tau:
            raise ConfigError(f"m={self.m} signal indices do not fit tau={self.tau}")
        if self.pattern == "dispersed" and self.m > (self.tau + 1) // 2:
            raise ConfigError(f"{self.m} non-adjacent indices do not fit tau={self.tau}")
        if not 1 <= self.signal_features <= self.n_features:
            raise ConfigError(f"signal_features must lie in [1, {self.n_features}]")
        if self.noise < 0 or not 0.0 <= self.missing_fraction < 1.0:
            raise ConfigError("noise must be >= 0 and missing_fraction in [0, 1)")
        if not 0.0 <= self.ar_coef < 1.0 or not 0.0 <= self.factor_loading <= 1.0:
            raise ConfigError("ar_coef must lie in [0, 1) and factor_loading in [0, 1]")
        if self.n_factors < 1:
            raise ConfigError("n_factors must be >= 1")

    @property
    def partition_id(self):
        return f"P{self.partition_index + 1}"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synth keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class World:
    offsets: np.ndarray
    scales: np.ndarray
    factor_of: np.ndarray
    signal_features: np.ndarray


def make_world(spec, seed):
    rng = stream(seed, "world")
    n = spec.n_features
    return World(offsets=rng.normal(0.0, 2.0, n),
                 scales=np.exp(rng.uniform(-1.0, 1.0, n)),
                 factor_of=rng.integers(0, spec.n_factors, n),
                 signal_features=np.sort(rng.choice(n, spec.signal_features, replace=False)))


def _ar1(rng, tau, width, phi):
    """Unit-variance stationary AR(1) paths, ``[tau, width]``."""
    out = np.empty((tau, width))
    out[0] = rng.standard_normal(width)
    innov = np.sqrt(1.0 - phi * phi)
    for t in range(1, tau):
        out[t] = phi * out[t - 1] + innov * rng.standard_normal(width)
    return out


def signal_indices(rng, tau, m, pattern, last_step=False):
    """Spike positions; ``last_step`` pins one of them to ``tau - 1``."""
    if pattern == "contiguous":
        start = tau - m if last_step else int(rng.integers(0, tau - m + 1))
        return np.arange(start, start + m)
    if last_step:
        if m == 1:
            return np.array([tau - 1])
        return np.append(signal_indices(rng, tau - 2, m - 1, pattern), tau - 1)
    # m sorted picks from tau-m+1 slots, shifted by rank: gaps of at least one
    base = np.sort(rng.choice(tau - m + 1, m, replace=False))
    return base + np.arange(m)


def _labels(rng, n, imbalance):
    n_flare = int(round(imbalance * n))
    is_flare = np.zeros(n, dtype=bool)
    is_flare[rng.choice(n, n_flare, replace=False)] = True
    nf_names, nf_p = zip(*NF_SHARES.items())
    f_names, f_p = zip(*F_SHARES.items())
    nf_p = np.array(nf_p) / sum(nf_p)
    f_p = np.array(f_p) / sum(f_p)
    labels = []
    for flare in is_flare:
        names, p = (f_names, f_p) if flare else (nf_names, nf_p)
        labels.append(names[int(rng.choice(len(names), p=p))])
    return labels


def generate_synthetic(spec, seed=0):
    """Return ``(Dataset, truth)`` where ``truth`` lists the planted spikes of
    every flare instance as ``{"file", "indices", "features"}`` records."""
    spec.validate()
    world = make_world(spec, seed)
    rng = stream(seed, "partition", spec.partition_index)
    tau, n = spec.tau, spec.n_features
    labels = _labels(rng, spec.n_instances, spec.imbalance)
    t0 = parse_time(spec.start_time) + timedelta(
        hours=spec.cadence_hours * spec.n_instances * spec.partition_index)
    lam = spec.factor_loading
    instances, truth = [], []
    for i, label in enumerate(labels):
        factors = _ar1(rng, tau, spec.n_factors, spec.ar_coef)
        own = _ar1(rng, tau, n, spec.ar_coef)
        unit = lam * factors[:, world.factor_of] + np.sqrt(1.0 - lam * lam) * own
        values = spec.noise * unit
        name = f"instances/{spec.partition_id}_{i:06d}.csv"
        if label in F_SHARES:
            idx = signal_indices(rng, tau, spec.m, spec.pattern, spec.last_step_signal)
            gain = spec.amplitude * rng.uniform(0.75, 1.25)
            values[np.ix_(idx, world.signal_features)] += gain
            truth.append({"file": name, "indices": idx.tolist(),
                          "features": world.signal_features.tolist()})
        values = world.offsets + world.scales * values
        if spec.missing_fraction > 0:
            mask = rng.random((tau, n)) < spec.missing_fraction
            if mask.all():
                mask[int(rng.integers(tau)), int(rng.integers(n))] = False
            values[mask] = np.nan
        region = f"AR{11000 + int(rng.integers(0, 4000))}"
        start = t0 + timedelta(hours=spec.cadence_hours * i)
        instances.append(MvtsInstance(values=values, label=label, start_time=start,
                                      source_id=region, name=name))
    ds = Dataset(instances=instances, tau=tau, n_features=n,
                 feature_names=[f"f{j:02d}" for j in range(n)], partition_id=spec.partition_id)
    return ds, truth


def write_synthetic(spec, seed, directory):
    """Generate and write one partition plus its ground-truth sidecar."""
    ds, truth = generate_synthetic(spec, seed)
    directory = Path(directory)
    manifest = write_dataset(ds, directory)
    with open(directory / TRUTH_NAME, "w") as fh:
        for rec in truth:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(directory / "synth_spec.json", "w") as fh:
        json.dump({"seed": seed, **spec.to_dict()}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def generate_partitions(spec, seed, count):
    """``count`` consecutive partitions sharing one feature world."""
    return [generate_synthetic(_with_index(spec, k), seed)[0] for k in range(count)]


def _with_index(spec, k):
    d = spec.to_dict()
    d["partition_index"] = k
    return SynthSpec(**d)

