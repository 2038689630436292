"""Loss, optimiser, training loop and the last-timestamp (VLT) baseline."""
import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import metrics
from . import tensor as T
from .errors import ConfigError, ContractError, NumericAbort
from .model import forward, init_params
from .rng import stream
from .tensor import Tensor

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("epoch", "train_loss", "val_loss", "val_tss", "val_hss2", "val_gs", "val_acc")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 20
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    selection_metric: str = "tss"
    seed: int = 0
    undersample_ratio: float = None

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.selection_metric not in ("tss", "loss"):
            raise ConfigError(f"selection_metric must be 'tss' or 'loss', got {self.selection_metric!r}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0 and self.adam_eps > 0):
            raise ConfigError("Adam needs beta1, beta2 in [0, 1) and eps > 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# loss and optimiser
# ---------------------------------------------------------------------------

def cross_entropy_loss(logits, labels):
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=int).ravel()
    b, c = logits.shape
    if len(labels) != b:
        raise ContractError(f"{len(labels)} labels for a batch of {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ContractError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    onehot = np.zeros((b, c))
    onehot[np.arange(b), labels] = 1.0
    return -(T.log_softmax(logits, axis=1) * onehot).sum() * (1.0 / b)


def adam_step(params, grads, state, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update on dicts of arrays.

    ``state`` maps each name to ``(m, v)``; missing entries start at zero.
    Returns ``(new_params, new_state)`` without touching the inputs.
    """
    if t < 1:
        raise ContractError("Adam step counter starts at 1")
    new_params, new_state = {}, {}
    bc1, bc2 = 1.0 - beta1 ** t, 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m, v = state.get(name, (np.zeros_like(p), np.zeros_like(p)))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        new_params[name] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_state[name] = (m, v)
    return new_params, new_state


class Adam:
    """Stateful wrapper applying :func:`adam_step` to named tensors in place."""

    def __init__(self, named_tensors, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.tensors = dict(named_tensors)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = {}
        self.t = 0

    def step(self):
        self.t += 1
        params = {n: t.data for n, t in self.tensors.items()}
        grads = {n: t.grad for n, t in self.tensors.items()}
        new, self.state = adam_step(params, grads, self.state, self.t, self.lr,
                                    self.beta1, self.beta2, self.eps)
        for name, t in self.tensors.items():
            t.data = new[name]

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float = None
    val_tss: float = None
    val_hss2: float = None
    val_gs: float = None
    val_acc: float = None
    seconds: float = field(default=0.0, compare=False)


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    selected_epoch: int = None
    selection_metric: str = "tss"

    def best(self):
        return self.epochs[self.selected_epoch - 1]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for rec in self.epochs:
            w.writerow(["" if getattr(rec, c) is None else repr(getattr(rec, c))
                        for c in REPORT_COLUMNS])
        return buf.getvalue()

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


def _selection_key(rec, metric):
    if metric == "loss":
        return -rec.val_loss if rec.val_loss is not None else -math.inf
    return rec.val_tss if rec.val_tss is not None else -math.inf


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def evaluate(params, cfg, x, y, batch_size=256):
    """Dropout-off ``(mean loss, metrics report)`` on arrays ``x``, ``y``."""
    total, logits = 0.0, []
    for i in range(0, len(y), batch_size):
        out = forward(params, cfg, x[i:i + batch_size], training=False)
        total += cross_entropy_loss(out, y[i:i + batch_size]).item() * len(out)
        logits.append(out.data)
    logits = np.concatenate(logits)
    cm = metrics.confusion(metrics.argmax_predictions(logits), y)
    return total / len(y), metrics.report(cm)


def train(model_cfg, train_cfg, train_set, val_set=None):
    """Mini-batch Adam training with per-epoch validation.

    ``train_set``/``val_set`` are :class:`~gctaf.data.BinaryDataset` objects
    (or anything with ``x`` and ``y`` arrays). Returns the parameters of the
    best epoch by validation TSS (or loss), ties resolved to the earliest
    epoch, together with the full :class:`TrainReport`. Without a validation
    set the last epoch is returned.
    """
    x, y = np.asarray(train_set.x, dtype=np.float64), np.asarray(train_set.y, dtype=int)
    if len(y) == 0:
        raise ContractError("training set is empty")
    has_val = val_set is not None and len(val_set.y) > 0
    params = init_params(model_cfg)
    opt = Adam(params.named_parameters(), train_cfg.learning_rate,
               train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps)
    report = TrainReport(selection_metric=train_cfg.selection_metric)
    best_key, best_state = -math.inf, None
    seed, bs = train_cfg.seed, train_cfg.batch_size

    for epoch in range(1, train_cfg.epochs + 1):
        started = time.perf_counter()
        order = stream(seed, "shuffle", epoch).permutation(len(y))
        drop_rng = stream(seed, "dropout", epoch)
        loss_sum = 0.0
        for batch, i in enumerate(range(0, len(y), bs), start=1):
            idx = order[i:i + bs]
            logits = forward(params, model_cfg, x[idx], training=True, rng=drop_rng)
            loss = cross_entropy_loss(logits, y[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise NumericAbort(f"non-finite loss at epoch {epoch}, batch {batch}", epoch, batch)
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            loss_sum += value * len(idx)

        rec = EpochRecord(epoch=epoch, train_loss=loss_sum / len(y))
        if has_val:
            rec.val_loss, rep = evaluate(params, model_cfg, val_set.x, val_set.y)
            rec.val_tss, rec.val_hss2, rec.val_gs, rec.val_acc = (
                rep["tss"], rep["hss2"], rep["gs"], rep["accuracy"])
        rec.seconds = time.perf_counter() - started
        report.epochs.append(rec)
        log.info("epoch %d train_loss=%.5f val_loss=%s val_tss=%s (%.1fs)", epoch, rec.train_loss,
                 metrics.format_score(rec.val_loss), metrics.format_score(rec.val_tss), rec.seconds)

        key = _selection_key(rec, train_cfg.selection_metric) if has_val else epoch
        if best_state is None or key > best_key:
            best_key, best_state, report.selected_epoch = key, params.state(), epoch

    params.load_state(best_state)
    return params, report


# ---------------------------------------------------------------------------
# VLT baseline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VltConfig:
    learning_rate: float = 0.05
    epochs: int = 300
    seed: int = 0


def last_timestamp(x):
    """The final time step of each window: ``[n, tau, N] -> [n, N]``."""
    return np.asarray(x)[:, -1, :]


def fit_logistic(features, labels, cfg=VltConfig(), num_classes=2):
    """Full-batch Adam on a softmax-regression model; returns ``(w, b)`` arrays."""
    n_in = features.shape[1]
    bound = np.sqrt(1.0 / n_in)
    w = Tensor(stream(cfg.seed, "vlt", "w").uniform(-bound, bound, (n_in, num_classes)),
               requires_grad=True)
    b = Tensor(np.zeros(num_classes), requires_grad=True)
    opt = Adam([("w", w), ("b", b)], cfg.learning_rate)
    for _ in range(cfg.epochs):
        loss = cross_entropy_loss(T.linear(features, w, b), labels)
        opt.zero_grad()
        T.backward(loss)
        opt.step()
    return w.data, b.data


def vlt_baseline(train_set, test_set, cfg=VltConfig()):
    """Logistic classifier on the last-timestamp vectors; returns a metrics report."""
    w, b = fit_logistic(last_timestamp(train_set.x), np.asarray(train_set.y, dtype=int), cfg)
    logits = last_timestamp(test_set.x) @ w + b
    cm = metrics.confusion(metrics.argmax_predictions(logits), test_set.y)
    return metrics.report(cm)
