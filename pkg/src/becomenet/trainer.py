"""ADAM with a triangular cyclical learning rate, multi-task steps, early
stopping, subject-independent cross-validation and per-AU metrics."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import diffcomp as dc
from .betagraph import bgc_from_batch, identity_table
from .datapipe.dataset import Dataset
from .datapipe.folds import FoldSplit, kfold_subject_split
from .losses import LabelWeights, LossBreakdown, compute_label_weights, total_loss, wcce, wmce
from .network import BeCoMENetParams, NetworkConfig, build, forward_au, forward_expr, forward_features
from .seeding import derive_rng

__all__ = [
    "TrainConfig",
    "AdamState",
    "Batch",
    "MetricsReport",
    "FitResult",
    "CrossvalResult",
    "lr_at",
    "adam_step",
    "train_step",
    "fit",
    "predict_au",
    "evaluate",
    "metrics_from_predictions",
    "crossval",
    "identity_correlation",
    "split_validation",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    lr_base: float = 1e-5
    lr_max: float = 1e-3
    clr_stepsize: int | None = None  # None: 4x batches per epoch
    m: float = 100.0
    alpha: float = 0.05
    max_epochs: int = 30
    patience: int = 10
    seed: int = 0
    enable_multitask: bool = True
    enable_bgc: bool = True
    threshold: float = 0.5
    val_fraction: float = 0.1
    weight_scheme: str = "inverse_frequency"
    eval_batch: int = 64

    def __post_init__(self):
        if not self.lr_base < self.lr_max:
            raise ValueError(f"lr_base ({self.lr_base}) must be below lr_max ({self.lr_max})")
        if self.batch_size < 3:
            raise ValueError(f"batch_size must be >= 3 for the beta null, got {self.batch_size}")
        if self.clr_stepsize is not None and self.clr_stepsize < 1:
            raise ValueError("clr_stepsize must be positive")
        if self.max_epochs < 1 or self.patience < 0:
            raise ValueError("max_epochs must be >= 1 and patience >= 0")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    def stepsize(self, batches_per_epoch: int) -> int:
        return self.clr_stepsize if self.clr_stepsize is not None else 4 * max(1, batches_per_epoch)


def lr_at(iteration: int, cfg: TrainConfig, stepsize: int | None = None) -> float:
    """Triangular policy between ``lr_base`` and ``lr_max``."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    step = stepsize if stepsize is not None else cfg.stepsize(1)
    cycle = math.floor(1 + iteration / (2 * step))
    x = abs(iteration / step - 2 * cycle + 1)
    return cfg.lr_base + (cfg.lr_max - cfg.lr_base) * max(0.0, 1.0 - x)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: BeCoMENetParams, **kw) -> "AdamState":
        return cls(m={n: np.zeros(t.shape) for n, t in params.tensors.items()},
                   v={n: np.zeros(t.shape) for n, t in params.tensors.items()}, **kw)


def adam_step(params: BeCoMENetParams | dict, grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """Bias-corrected ADAM update, in place. Missing gradients count as zero."""
    tensors = params.tensors if isinstance(params, BeCoMENetParams) else params
    for name, g in grads.items():
        if name not in tensors:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != tensors[name].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {tensors[name].shape}")
        if not np.all(np.isfinite(g)):
            raise dc.NonFiniteError(f"non-finite gradient for {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, t in tensors.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(t.shape)
        m = state.m.setdefault(name, np.zeros(t.shape))
        v = state.v.setdefault(name, np.zeros(t.shape))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += state.eps
        t.data = t.data - (lr / c1) * m / denom


@dataclass
class Batch:
    images: np.ndarray
    landmarks: np.ndarray
    au_labels: np.ndarray  # [b, c]
    expr_onehot: np.ndarray  # [b, k]
    subject_ids: list[str]

    @classmethod
    def from_dataset(cls, ds: Dataset, idx) -> "Batch":
        idx = np.asarray(idx, dtype=int)
        return cls(ds.images[idx], ds.landmarks[idx], ds.au_labels[idx].astype(np.float64),
                   ds.expr_onehot()[idx], ds.subject_ids[idx].tolist())

    def __len__(self) -> int:
        return len(self.images)


def _identity_column(batch: Batch, identity: dict[str, float]) -> np.ndarray:
    return np.array([identity[s] for s in batch.subject_ids])


def train_step(params: BeCoMENetParams, au_batch: Batch, expr_batch: Batch | None, weights: LabelWeights,
               cfg: TrainConfig, state: AdamState, identity: dict[str, float], lr: float,
               rng: np.random.Generator) -> LossBreakdown:
    """One shared-parameter update from an AU batch and (optionally) an expression batch."""
    params.zero_grad()
    parts: dict[str, dc.Tensor] = {}
    with dc.Tape() as tape:
        z = forward_features(params, au_batch.images, au_batch.landmarks, training=True, rng=rng)
        parts["wmce"] = wmce(forward_au(params, z), au_batch.au_labels, weights)
        if cfg.enable_bgc:
            parts["bgc_au"] = _bgc_or_skip(z, au_batch.au_labels, au_batch, identity, cfg, "AU")
        if cfg.enable_multitask:
            if expr_batch is None:
                raise ValueError("multi-task training needs an expression batch")
            ze = forward_features(params, expr_batch.images, expr_batch.landmarks, training=True, rng=rng)
            parts["wcce"] = wcce(forward_expr(params, ze), expr_batch.expr_onehot, weights)
            if cfg.enable_bgc:
                parts["bgc_expr"] = _bgc_or_skip(ze, expr_batch.expr_onehot, expr_batch, identity, cfg, "expression")
        parts = {k: v for k, v in parts.items() if v is not None}
        total = total_loss(parts["wmce"], parts.get("wcce"), parts.get("bgc_au"), parts.get("bgc_expr"))
        tape.backward(total)
    grads = {n: t.grad for n, t in params.tensors.items() if t.grad is not None}
    adam_step(params, grads, state, lr)
    params.zero_grad()
    vals = {k: v.item() for k, v in parts.items()}
    return LossBreakdown(wmce=vals.get("wmce", 0.0), wcce=vals.get("wcce", 0.0), bgc_au=vals.get("bgc_au", 0.0),
                         bgc_expr=vals.get("bgc_expr", 0.0), total=total.item())


def _bgc_or_skip(z, labels, batch: Batch, identity, cfg: TrainConfig, task: str):
    if len(set(batch.subject_ids)) < 2:
        log.warning("%s batch holds a single subject; skipping the correlation loss for this step", task)
        return None
    return bgc_from_batch(z, labels, _identity_column(batch, identity), cfg.alpha, cfg.m)


# ---------------------------------------------------------------- metrics


@dataclass
class MetricsReport:
    au_names: list[str]
    precision: list[float]
    recall: list[float]
    f1: list[float]
    support: list[int]  # positives per AU
    degenerate: list[bool]  # no positives and none predicted: F1 set to 0
    mean_f1: float
    n_samples: int
    expr_accuracy: float | None = None
    folds: list["MetricsReport"] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "folds"}
        d["folds"] = [f.to_dict() for f in self.folds]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["au", "precision", "recall", "f1", "support", "degenerate"])
        for row in zip(self.au_names, self.precision, self.recall, self.f1, self.support, self.degenerate):
            name, p, r, f, s, d = row
            w.writerow([name, repr(p), repr(r), repr(f), s, int(d)])
        w.writerow(["mean", "", "", repr(self.mean_f1), "", ""])
        return buf.getvalue()


def metrics_from_predictions(probs: np.ndarray, labels: np.ndarray, au_names, threshold: float = 0.5,
                             expr_pred: np.ndarray | None = None, expr_true: np.ndarray | None = None) -> MetricsReport:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    pred = probs >= threshold
    truth = labels == 1
    tp = (pred & truth).sum(axis=0)
    fp = (pred & ~truth).sum(axis=0)
    fn = (~pred & truth).sum(axis=0)
    prec, rec, f1, degen = [], [], [], []
    for a, b_, c_ in zip(tp, fp, fn):
        p = a / (a + b_) if a + b_ else 0.0
        r = a / (a + c_) if a + c_ else 0.0
        prec.append(float(p))
        rec.append(float(r))
        f1.append(float(2 * p * r / (p + r)) if p + r > 0 else 0.0)
        degen.append(bool(a + b_ + c_ == 0))
    acc = None
    if expr_pred is not None and expr_true is not None and len(expr_true):
        acc = float(np.mean(np.asarray(expr_pred) == np.asarray(expr_true)))
    return MetricsReport(list(au_names), prec, rec, f1, truth.sum(axis=0).astype(int).tolist(), degen,
                         float(np.mean(f1)) if f1 else 0.0, int(len(labels)), acc)


def predict_au(params: BeCoMENetParams, ds: Dataset, chunk: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode AU probabilities and expression argmax for every sample."""
    au, ex = [], []
    for s in range(0, len(ds), chunk):
        z = forward_features(params, ds.images[s:s + chunk], ds.landmarks[s:s + chunk])
        au.append(forward_au(params, z).data)
        ex.append(np.argmax(forward_expr(params, z).data, axis=1))
    if not au:
        return np.zeros((0, params.config.c)), np.zeros(0, dtype=int)
    return np.concatenate(au), np.concatenate(ex)


def evaluate(params: BeCoMENetParams, ds: Dataset, threshold: float = 0.5, chunk: int = 64) -> MetricsReport:
    """Per-AU precision/recall/F1 at ``threshold`` over the AU-labeled samples of ``ds``."""
    au_ds = ds.with_au()
    probs, ex = predict_au(params, au_ds, chunk)
    has_expr = au_ds.expr_labels >= 0
    return metrics_from_predictions(probs, au_ds.au_labels, ds.au_names, threshold,
                                    ex[has_expr], au_ds.expr_labels[has_expr])


# ---------------------------------------------------------------- fitting


@dataclass
class FitResult:
    params: BeCoMENetParams
    history: list[dict]
    best_epoch: int
    best_val_f1: float | None
    weights: LabelWeights
    identity: dict[str, float]

    def history_json(self) -> str:
        return json.dumps({"best_epoch": self.best_epoch, "best_val_f1": self.best_val_f1,
                           "history": self.history}, indent=2, sort_keys=True) + "\n"


def split_validation(ds: Dataset, fraction: float, rng: np.random.Generator) -> tuple[list[str], list[str]]:
    """Subject-level train/validation split; empty validation when too few subjects."""
    subjects = ds.subjects
    n_val = int(round(fraction * len(subjects)))
    if fraction > 0 and len(subjects) >= 2:
        n_val = max(1, n_val)
    n_val = min(n_val, len(subjects) - 1)
    order = rng.permutation(len(subjects))
    val = sorted(subjects[i] for i in order[:n_val])
    train = sorted(subjects[i] for i in order[n_val:])
    return train, val


class _BatchStream:
    """Endless reshuffled full batches over one dataset."""

    def __init__(self, ds: Dataset, b: int, rng: np.random.Generator):
        self.ds, self.b, self.rng = ds, min(b, len(ds)), rng
        self.order = np.zeros(0, dtype=int)

    def next(self) -> Batch:
        if len(self.order) < self.b:
            self.order = self.rng.permutation(len(self.ds))
        idx, self.order = self.order[:self.b], self.order[self.b:]
        return Batch.from_dataset(self.ds, idx)


def fit(params: BeCoMENetParams, dataset_au: Dataset, dataset_expr: Dataset | None, cfg: TrainConfig,
        seed_label: str = "fit", identity: dict[str, float] | None = None) -> FitResult:
    """Train in place with early stopping on validation mean F1; returns the best parameters.

    All randomness comes from streams derived from ``cfg.seed`` and
    ``seed_label``, so separate fits (e.g. CV folds) stay independent.
    ``identity`` maps subject ids to identity-node scalars; by default a
    table is drawn for the training subjects.
    """
    au_all = dataset_au.with_au()
    if len(au_all) == 0:
        raise ValueError("no AU-labeled samples to train on")
    ex_all = dataset_expr.with_expr() if (cfg.enable_multitask and dataset_expr is not None) else None
    if cfg.enable_multitask and (ex_all is None or len(ex_all) == 0):
        raise ValueError("multi-task training needs expression-labeled samples")

    train_subj, val_subj = split_validation(au_all, cfg.val_fraction, derive_rng(cfg.seed, f"{seed_label}/val"))
    au_train = au_all.for_subjects(train_subj)
    au_val = au_all.for_subjects(val_subj) if val_subj else None
    ex_train = ex_all.for_subjects(set(ex_all.subjects) - set(val_subj)) if ex_all is not None else None
    if ex_train is not None and len(ex_train) == 0:
        ex_train = ex_all
    if len(au_train) < 3:
        raise ValueError("need at least 3 AU-labeled training samples")

    weights = compute_label_weights(au_train.au_labels, None if ex_train is None else ex_train.expr_labels,
                                    c=au_all.c, k=max(dataset_au.k, 1 if ex_train is None else ex_train.k),
                                    scheme=cfg.weight_scheme)
    all_subj = set(au_train.subjects) | (set(ex_train.subjects) if ex_train is not None else set())
    if identity is None:
        identity = identity_table(sorted(all_subj), derive_rng(cfg.seed, f"{seed_label}/identity"))
    missing = all_subj - set(identity)
    if missing:
        raise ValueError(f"identity table lacks subjects {sorted(missing)}")

    au_stream = _BatchStream(au_train, cfg.batch_size, derive_rng(cfg.seed, f"{seed_label}/au-batches"))
    ex_stream = (_BatchStream(ex_train, cfg.batch_size, derive_rng(cfg.seed, f"{seed_label}/expr-batches"))
                 if ex_train is not None else None)
    drop_rng = derive_rng(cfg.seed, f"{seed_label}/dropout")
    batches_per_epoch = max(1, len(au_train) // au_stream.b)
    stepsize = cfg.stepsize(batches_per_epoch)
    state = AdamState.for_params(params)

    history: list[dict] = []
    best = params.copy()
    best_f1: float | None = None
    best_epoch = 0
    wait = 0
    it = 0
    for epoch in range(1, cfg.max_epochs + 1):
        sums = dict(wmce=0.0, wcce=0.0, bgc_au=0.0, bgc_expr=0.0, total=0.0)
        for _ in range(batches_per_epoch):
            lr = lr_at(it, cfg, stepsize)
            br = train_step(params, au_stream.next(), ex_stream.next() if ex_stream else None, weights, cfg,
                            state, identity, lr, drop_rng)
            for k, v in br.to_dict().items():
                sums[k] += v
            it += 1
        row = {k: v / batches_per_epoch for k, v in sums.items()}
        row.update(epoch=epoch, iterations=it, lr=lr)
        if au_val is not None:
            val = evaluate(params, au_val, cfg.threshold, cfg.eval_batch)
            row["val_mean_f1"] = val.mean_f1
            if best_f1 is None or val.mean_f1 > best_f1:
                best_f1, best_epoch, wait = val.mean_f1, epoch, 0
                best = params.copy()
            else:
                wait += 1
        else:
            best, best_epoch = params.copy(), epoch
        history.append(row)
        log.info("epoch %d total=%.4f val_f1=%s", epoch, row["total"], row.get("val_mean_f1"))
        if au_val is not None and wait > 0 and wait >= cfg.patience:
            break
    return FitResult(best, history, best_epoch, best_f1, weights, identity)


# ---------------------------------------------------------------- cross-validation


@dataclass
class CrossvalResult:
    pooled: MetricsReport
    split: FoldSplit
    probs: np.ndarray  # pooled AU probabilities, test-fold order
    labels: np.ndarray
    subject_ids: list[str]
    fold_index: np.ndarray
    histories: list[list[dict]]
    identity_corr: list[float]  # per fold, held-out mean |cos(Z_j, g)|

    def predictions_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        c = self.labels.shape[1]
        w.writerow(["fold", "subject_id"] + [f"prob_{i}" for i in range(c)] + [f"label_{i}" for i in range(c)])
        for f, s, p, y in zip(self.fold_index, self.subject_ids, self.probs, self.labels):
            w.writerow([int(f), s] + [repr(float(v)) for v in p] + [int(v) for v in y])
        return buf.getvalue()


def identity_correlation(params: BeCoMENetParams, ds: Dataset, identity: dict[str, float], batch_size: int,
                         rng: np.random.Generator) -> float:
    """Mean |cos| between each eval-mode feature column and the identity column over held-out batches.

    Cosines are uncentered, the same angle the correlation loss screens.
    Dead (all-zero) feature columns count as 0.
    """
    order = rng.permutation(len(ds))
    b = min(batch_size, len(ds))
    vals = []
    for s in range(0, len(order) - b + 1, b):
        idx = np.sort(order[s:s + b])
        z = forward_features(params, ds.images[idx], ds.landmarks[idx]).data
        g = np.array([identity[x] for x in ds.subject_ids[idx]])
        zn = np.linalg.norm(z, axis=0)
        gn = np.linalg.norm(g)
        with np.errstate(invalid="ignore", divide="ignore"):
            cos = np.where(zn > 1e-12, (g @ z) / (np.maximum(zn, 1e-300) * gn), 0.0)
        vals.append(float(np.mean(np.abs(cos))))
    return float(np.mean(vals)) if vals else float("nan")


def _run_fold(i: int, split: FoldSplit, dataset_au: Dataset, dataset_expr: Dataset | None,
              net_cfg: NetworkConfig, cfg: TrainConfig, identity: dict[str, float]):
    train_s, test_s = split.train_test(i)
    au_train = dataset_au.for_subjects(train_s)
    ex_train = dataset_expr.for_subjects(train_s) if dataset_expr is not None else None
    au_test = dataset_au.for_subjects(test_s).with_au()
    leaked = set(au_train.subjects) & set(au_test.subjects)
    if ex_train is not None:
        leaked |= set(ex_train.subjects) & set(test_s)
    if leaked:
        raise AssertionError(f"fold {i}: test subjects in training data: {sorted(leaked)}")
    params = build(net_cfg, derive_rng(cfg.seed, f"fold{i}/init"))
    res = fit(params, au_train, ex_train, cfg, seed_label=f"fold{i}", identity=identity)
    probs, ex_pred = predict_au(res.params, au_test, cfg.eval_batch)
    corr = identity_correlation(res.params, au_test, identity, cfg.batch_size,
                                derive_rng(cfg.seed, f"fold{i}/heldout-batches"))
    return au_test, probs, ex_pred, res.history, corr


def crossval(dataset_au: Dataset, dataset_expr: Dataset | None, net_cfg: NetworkConfig, cfg: TrainConfig,
             k: int = 3, workers: int = 1) -> CrossvalResult:
    """k-fold subject-independent CV; metrics are scored on the pooled test predictions."""
    if k < 2:
        raise ValueError("cross-validation needs k >= 2 (k=1 leaves no held-out data)")
    subjects = sorted(set(dataset_au.subjects) | (set(dataset_expr.subjects) if dataset_expr is not None else set()))
    split = kfold_subject_split(subjects, k, derive_rng(cfg.seed, "folds"))
    identity = identity_table(subjects, derive_rng(cfg.seed, "identity"))
    args = [(i, split, dataset_au, dataset_expr, net_cfg, cfg, identity) for i in range(k)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(lambda a: _run_fold(*a), args))
    else:
        outs = [_run_fold(*a) for a in args]

    fold_reports, probs, labels, subj, fidx, ex_pred, ex_true = [], [], [], [], [], [], []
    for i, (test, p, e, _, _) in enumerate(outs):
        has_expr = test.expr_labels >= 0
        fold_reports.append(metrics_from_predictions(p, test.au_labels, dataset_au.au_names, cfg.threshold,
                                                     e[has_expr], test.expr_labels[has_expr]))
        probs.append(p)
        labels.append(test.au_labels)
        subj.extend(test.subject_ids.tolist())
        fidx.append(np.full(len(test), i))
        ex_pred.append(e[has_expr])
        ex_true.append(test.expr_labels[has_expr])
    probs_all = np.concatenate(probs)
    labels_all = np.concatenate(labels)
    pooled = metrics_from_predictions(probs_all, labels_all, dataset_au.au_names, cfg.threshold,
                                      np.concatenate(ex_pred), np.concatenate(ex_true))
    pooled.folds = fold_reports
    return CrossvalResult(pooled, split, probs_all, labels_all, subj, np.concatenate(fidx),
                          [o[3] for o in outs], [o[4] for o in outs])
