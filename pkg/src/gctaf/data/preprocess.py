"""Training-set filtering, missing-value imputation and z-score scaling."""
from dataclasses import replace

import numpy as np

from ..errors import ConfigError, ImputationError
from ..rng import stream
from .dataset import require_split

STD_FLOOR = 1e-8


def filter_training_nf_to_fq(dataset):
    """Keep every flare instance but only the FQ share of the non-flare class.

    B and C instances are dropped. Only valid on a dataset tagged ``"train"``.
    """
    require_split(dataset, "train", "filter_training_nf_to_fq")
    return dataset.derive([i for i in dataset.instances if i.label not in ("B", "C")])


def undersample(dataset, ratio, seed):
    """Randomly drop non-flare instances until NF <= ratio * F."""
    if ratio is None:
        return dataset
    if ratio <= 0:
        raise ConfigError(f"undersample ratio must be positive, got {ratio}")
    flare = [k for k, i in enumerate(dataset.instances) if i.binary == 1]
    other = [k for k, i in enumerate(dataset.instances) if i.binary == 0]
    keep_nf = int(round(ratio * len(flare)))
    if keep_nf >= len(other):
        return dataset
    chosen = stream(seed, "undersample").choice(len(other), size=keep_nf, replace=False)
    keep = sorted(flare + [other[c] for c in chosen])
    return dataset.derive([dataset.instances[k] for k in keep])


# ---------------------------------------------------------------------------
# FPCKNN imputation
# ---------------------------------------------------------------------------

def _neighbours(x, observed, j, k):
    """The ``k`` columns most |Pearson|-correlated with column ``j``.

    Correlation and the standardisation statistics of both columns use only
    the timestamps where both are observed. Returns tuples
    ``(|r|, column, sign(r), mean_j, std_j, mean_c, std_c)``.
    """
    found = []
    for c in range(x.shape[1]):
        if c == j:
            continue
        joint = observed[:, j] & observed[:, c]
        if joint.sum() < 2:
            continue
        xj, xc = x[joint, j], x[joint, c]
        mj, mc = xj.mean(), xc.mean()
        sj, sc = xj.std(), xc.std()
        if sj == 0.0 or sc == 0.0:
            continue
        r = np.mean((xj - mj) * (xc - mc)) / (sj * sc)
        if r == 0.0:
            continue
        found.append((abs(r), c, np.sign(r), mj, sj, mc, sc))
    found.sort(key=lambda f: (-f[0], f[1]))
    return found[:k]


def _fallback(x, observed, t, j, dataset_means):
    idx = np.flatnonzero(observed[:, j])
    if idx.size and idx[0] < t < idx[-1]:
        return float(np.interp(t, idx, x[idx, j]))
    if idx.size:
        return float(x[idx, j].mean())
    if np.isfinite(dataset_means[j]):
        return float(dataset_means[j])
    raise ImputationError(f"feature {j} is never observed anywhere in the dataset")


def impute_instance(values, k, dataset_means):
    """Fill the NaN cells of one ``[tau, N]`` window.

    Each missing cell of column ``j`` becomes the |r|-weighted average, over
    the ``k`` best-correlated columns observed at that timestamp, of the
    neighbour's z-score (sign-flipped for negative ``r``) mapped back onto
    column ``j``'s scale. With no usable neighbour the cell falls back to
    linear interpolation in time, then the column mean, then the dataset
    feature mean.
    """
    missing = np.isnan(values)
    if not missing.any():
        return values
    if missing.all():
        raise ImputationError("instance has no observed values")
    observed = ~missing
    out = values.copy()
    for j in np.flatnonzero(missing.any(axis=0)):
        neigh = _neighbours(values, observed, j, k)
        for t in np.flatnonzero(missing[:, j]):
            num = den = 0.0
            for w, c, sign, mj, sj, mc, sc in neigh:
                if observed[t, c]:
                    num += w * (mj + sj * sign * (values[t, c] - mc) / sc)
                    den += w
            out[t, j] = num / den if den > 0 else _fallback(values, observed, t, j, dataset_means)
    return out


def impute_fpcknn(dataset, k=3):
    """Impute every instance independently; observed cells are never changed."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if not dataset.instances:
        return dataset
    stacked = dataset.values()
    with np.errstate(invalid="ignore"):
        counts = np.sum(~np.isnan(stacked), axis=(0, 1))
        sums = np.nansum(stacked, axis=(0, 1))
        dataset_means = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    filled, failed = [], []
    for inst in dataset.instances:
        try:
            values = impute_instance(inst.values, k, dataset_means)
        except ImputationError:
            failed.append(inst.name or inst.source_id or str(inst.start_time))
            continue
        filled.append(inst if values is inst.values else _with_values(inst, values))
    if failed:
        raise ImputationError(f"cannot impute instances {failed[:10]}"
                              + (f" and {len(failed) - 10} more" if len(failed) > 10 else ""))
    return dataset.derive(filled)


def _with_values(inst, values):
    return replace(inst, values=values)


# ---------------------------------------------------------------------------
# z-score normalisation
# ---------------------------------------------------------------------------

def zscore_fit(dataset):
    """Per-feature mean and population std over all training timestamps."""
    stacked = dataset.values().reshape(-1, dataset.n_features)
    if stacked.shape[0] == 0:
        raise ConfigError("cannot fit normalisation on an empty dataset")
    mean = np.nanmean(stacked, axis=0)
    std = np.maximum(np.nanstd(stacked, axis=0), STD_FLOOR)
    lo, hi = np.nanmin(stacked, axis=0), np.nanmax(stacked, axis=0)
    # exact mean for constant columns so they map to exact zeros
    mean = np.where(lo == hi, lo, mean)
    return mean, std


def zscore_apply(dataset, mean, std):
    return dataset.derive([_with_values(i, (i.values - mean) / std) for i in dataset.instances])


def zscore_invert(dataset, mean, std):
    return dataset.derive([_with_values(i, i.values * std + mean) for i in dataset.instances])
