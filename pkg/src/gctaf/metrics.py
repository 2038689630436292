"""Binary skill scores for rare-event forecasts.

The flare class (F) is the positive class. Every score takes a
:class:`ConfusionMatrix` and returns ``None`` when its denominator vanishes,
so callers can skip undefined values explicitly instead of averaging in a 0.

Formulas::

    TSS  = tp/(tp+fn) - fp/(fp+tn)
    HSS2 = 2(tp*tn - fn*fp) / ((tp+fn)(fn+tn) + (tp+fp)(fp+tn))
    GS   = (tp - ch) / (tp + fp + fn - ch),   ch = (tp+fp)(tp+fn)/total
    ACC  = (tp+tn)/total
"""
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

METRIC_NAMES = ("accuracy", "hss2", "gs", "tss")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be non-negative")

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other):
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    def as_dict(self):
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


def confusion(predictions, labels):
    """Count outcomes with class 1 (F) as positive."""
    predictions = np.asarray(predictions).astype(int).ravel()
    labels = np.asarray(labels).astype(int).ravel()
    if predictions.shape != labels.shape:
        raise ContractError(f"{len(predictions)} predictions for {len(labels)} labels")
    bad = set(np.unique(np.concatenate([predictions, labels])).tolist()) - {0, 1}
    if bad:
        raise ContractError(f"binary labels expected, found {sorted(bad)}")
    pos, hit = labels == 1, predictions == 1
    return ConfusionMatrix(tp=int(np.sum(pos & hit)), fp=int(np.sum(~pos & hit)),
                           fn=int(np.sum(pos & ~hit)), tn=int(np.sum(~pos & ~hit)))


def argmax_predictions(logits):
    """Class ids from ``[B, C]`` scores; exact ties go to class 0 (NF)."""
    return np.argmax(np.asarray(logits), axis=1)


def tss(cm):
    if cm.tp + cm.fn == 0 or cm.fp + cm.tn == 0:
        return None
    return cm.tp / (cm.tp + cm.fn) - cm.fp / (cm.fp + cm.tn)


def hss2(cm):
    den = (cm.tp + cm.fn) * (cm.fn + cm.tn) + (cm.tp + cm.fp) * (cm.fp + cm.tn)
    if den == 0:
        return None
    return 2.0 * (cm.tp * cm.tn - cm.fn * cm.fp) / den


def gs(cm):
    if cm.total == 0:
        return None
    chance = (cm.tp + cm.fp) * (cm.tp + cm.fn) / cm.total
    den = cm.tp + cm.fp + cm.fn - chance
    if den == 0:
        return None
    return (cm.tp - chance) / den


def accuracy(cm):
    if cm.total == 0:
        return None
    return (cm.tp + cm.tn) / cm.total


def report(cm):
    """Metrics report in its JSON form."""
    if cm.total == 0:
        raise ContractError("cannot score an empty confusion matrix")
    return {"accuracy": accuracy(cm), "hss2": hss2(cm), "gs": gs(cm), "tss": tss(cm),
            "counts": cm.as_dict()}


def aggregate(reports):
    """Per-metric sample mean and standard deviation (ddof=1) across reports.

    Undefined (``None``) entries are skipped and counted under ``n_undefined``.
    ``std`` is ``None`` when fewer than two defined values remain.
    """
    reports = list(reports)
    if not reports:
        raise ContractError("aggregate needs at least one report")
    out = {"n_pairs": len(reports), "pairs": reports}
    for name in METRIC_NAMES:
        values = [r[name] for r in reports if r[name] is not None]
        mean = float(np.mean(values)) if values else None
        std = float(np.std(values, ddof=1)) if len(values) > 1 else None
        out[name] = {"mean": mean, "std": std, "n_undefined": len(reports) - len(values)}
    return out


def format_score(value, digits=4):
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "undefined"
    return f"{value:.{digits}f}"
