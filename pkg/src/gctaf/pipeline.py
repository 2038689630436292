"""Per-pair experiment plumbing: preprocess, train, evaluate."""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

from . import metrics
from .data import (chronological_pairs, consolidate, filter_training_nf_to_fq, impute_fpcknn,
                   undersample, zscore_apply, zscore_fit)
from .model import ABLATIONS, predict
from .training import TrainConfig, VltConfig, train, vlt_baseline


@dataclass
class PreparedPair:
    train: object
    val: object
    test: object
    mean: object
    std: object
    name: str = ""


def prepare(pair, impute_k=3, undersample_ratio=None, seed=0):
    """Filter (train only), impute, and normalise with training statistics.

    The validation tail keeps its B/C instances; only the retained training
    portion is reduced to FQ + flares.
    """
    tr = filter_training_nf_to_fq(pair.train)
    tr = undersample(tr, undersample_ratio, seed)
    tr, val, test = (impute_fpcknn(d, impute_k) for d in (tr, pair.val, pair.test))
    mean, std = zscore_fit(tr)
    tr, val, test = (consolidate(zscore_apply(d, mean, std), mean, std) for d in (tr, val, test))
    return PreparedPair(train=tr, val=val, test=test, mean=mean, std=std, name=pair.name)


def evaluate_arrays(params, cfg, x, y):
    cm = metrics.confusion(predict(params, cfg, x), y)
    return metrics.report(cm)


def run_gctaf(model_cfg, train_cfg, prepared):
    """Train on one prepared pair; returns ``(params, train_report, test_report)``."""
    params, rep = train(model_cfg, train_cfg, prepared.train, prepared.val)
    test_report = evaluate_arrays(params, model_cfg, prepared.test.x, prepared.test.y)
    return params, rep, test_report


def run_vlt(prepared, cfg=VltConfig()):
    return vlt_baseline(prepared.train, prepared.test, cfg)


# ---------------------------------------------------------------------------
# experiment drivers shared by the CLI and the acceptance suite
# ---------------------------------------------------------------------------

def prepare_pairs(partitions, impute_k=3, val_fraction=0.2, undersample_ratio=None, seed=0):
    """Chronological pairs of ``partitions``, each preprocessed."""
    return [prepare(pair, impute_k, undersample_ratio, seed)
            for pair in chronological_pairs(partitions, val_fraction)]


def _gctaf_job(job):
    model_cfg, train_cfg, prepared = job
    params, rep, test_report = run_gctaf(model_cfg, train_cfg, prepared)
    return params, rep, test_report


def map_jobs(fn, jobs, threads=1):
    """``[fn(j) for j in jobs]``, optionally over a process pool; order is kept."""
    jobs = list(jobs)
    if threads <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
        return list(pool.map(fn, jobs))


def train_pairs(model_cfg, train_cfg, prepared_pairs, threads=1):
    """``[(params, train_report, test_report), ...]`` in pair order."""
    return map_jobs(_gctaf_job, [(model_cfg, train_cfg, p) for p in prepared_pairs], threads)


def run_ablation(model_cfg, train_cfg, prepared_pairs, seeds, variants=ABLATIONS, threads=1):
    """Test reports for every (variant, seed, pair), seeds shared across variants.

    Returns ``{variant: [{"seed", "pair", "report"}, ...]}``.
    """
    keys, jobs = [], []
    for variant in variants:
        for seed in seeds:
            mc = model_cfg.replace(ablation=variant, seed=seed)
            tc = replace(train_cfg, seed=seed)
            for p in prepared_pairs:
                keys.append((variant, seed, p.name))
                jobs.append((mc, tc, p))
    results = map_jobs(_gctaf_job, jobs, threads)
    out = {v: [] for v in variants}
    for (variant, seed, name), (_, _, test_report) in zip(keys, results):
        out[variant].append({"seed": seed, "pair": name, "report": test_report})
    return out


def mean_tss(runs):
    """Mean and sample std of the defined test TSS values of ``runs``."""
    agg = metrics.aggregate([r["report"] for r in runs])
    return agg["tss"]


def run_sweep(model_cfg, train_cfg, prepared_pairs, grid_points, threads=1):
    """Train every grid point on every pair.

    ``grid_points`` is a list of dicts of model/train overrides (keys of
    :class:`ModelConfig` or :class:`TrainConfig`). Returns one dict per point
    with the mean validation TSS of the selected epochs and the mean test TSS.
    """
    train_keys = set(train_cfg.to_dict())
    jobs, configs = [], []
    for point in grid_points:
        m_over = {k: v for k, v in point.items() if k not in train_keys}
        t_over = {k: v for k, v in point.items() if k in train_keys}
        mc = model_cfg.replace(**m_over)
        tc = TrainConfig.from_dict({**train_cfg.to_dict(), **t_over})
        configs.append((mc, tc))
        jobs.extend((mc, tc, p) for p in prepared_pairs)
    results = map_jobs(_gctaf_job, jobs, threads)
    rows, n = [], len(prepared_pairs)
    for i, (point, (mc, tc)) in enumerate(zip(grid_points, configs)):
        chunk = results[i * n:(i + 1) * n]
        val = [rep.best().val_tss for _, rep, _ in chunk]
        test = [t["tss"] for _, _, t in chunk]
        rows.append({"point": point, "model": mc, "train": tc,
                     "val_tss": _mean_defined(val), "test_tss": _mean_defined(test)})
    return rows


def _mean_defined(values):
    values = [v for v in values if v is not None]
    return float(sum(values) / len(values)) if values else None


def run_vlt_pairs(prepared_pairs, cfg=VltConfig()):
    return [run_vlt(p, cfg) for p in prepared_pairs]
