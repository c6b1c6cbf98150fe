"""Training loop, evaluation and the cross-dataset protocol."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.model_selection import KFold

from .checkpoint import save_checkpoint
from .data import DatasetManifest
from .exceptions import ConfigError, DataError, LeakageError, NumericError
from .losses import LossWeights, loss_terms
from .metrics import UndefinedCorrelation, linear_fit, plcc, srocc
from .model import Model, ModelConfig, build_model, forward
from .tensor import Tensor, backward, concat, no_grad, reshape

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainSchedule:
    """Optimisation settings.

    Defaults are the desk-scale recipe (60 epochs); the full-size recipe is
    lr 1e-4, cosine annealing, batch 16, 600 epochs, alpha = beta = 0.5.
    With ``optimizer = "gd"``, ``momentum = 0`` and ``clip_norm = 0`` the update
    is plain gradient descent.  A positive ``momentum`` turns on heavy-ball
    velocity; ``optimizer = "adam"`` uses bias-corrected first and second
    moment estimates (decay rates 0.9 and 0.999) instead.  A positive
    ``clip_norm`` rescales any gradient whose global norm exceeds it, for
    either optimiser.
    """

    lr: float = 1e-4
    min_lr: float = 0.0
    epochs: int = 60
    batch_size: int = 16
    seed: int = 0
    alpha: float = 0.5
    beta: float = 0.5
    enable_cb: bool = True
    enable_ap: bool = True
    momentum: float = 0.0
    clip_norm: float = 0.0
    optimizer: str = "gd"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr < 0 or self.min_lr < 0:
            raise ConfigError("learning rates must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.optimizer not in ("gd", "adam"):
            raise ConfigError(f"optimizer must be 'gd' or 'adam', got {self.optimizer!r}")
        if self.clip_norm < 0:
            raise ConfigError("clip_norm must be non-negative (0 disables clipping)")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.enable_cb, self.enable_ap)


def cosine_lr(t: int, t_total: int, lr0: float, lr_min: float = 0.0) -> float:
    """Cosine annealing from ``lr0`` at step 0 to ``lr_min`` at ``t_total``."""
    if not 0 <= t <= t_total:
        raise ValueError(f"step {t} outside [0, {t_total}]")
    if t_total == 0:
        return lr0
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * t / t_total))


def fit(model: Model, images: np.ndarray, targets: np.ndarray, schedule: TrainSchedule,
        names=None) -> list[dict]:
    """Gradient descent on the full objective; returns the per-epoch log.

    ``targets`` must already be normalised.  Each log entry holds the epoch, the
    mean over batches of the total loss and of each enabled term, and the
    learning rate of the epoch's last step.
    """
    n = len(images)
    if n == 0:
        raise DataError("no training images")
    targets = np.asarray(targets, dtype=np.float64)
    weights = schedule.weights
    rng = np.random.default_rng(schedule.seed)
    per_epoch = math.ceil(n / schedule.batch_size)
    t_total = schedule.epochs * per_epoch
    params = model.parameters()
    state = _OptimizerState(params, schedule)
    log, step = [], 0
    model.zero_grad()
    for epoch in range(schedule.epochs):
        order = rng.permutation(n)
        sums: dict[str, float] = {}
        lr = schedule.lr
        for b in range(per_epoch):
            idx = order[b * schedule.batch_size:(b + 1) * schedule.batch_size]
            lr = cosine_lr(step, t_total, schedule.lr, schedule.min_lr)
            preds, feats = [], []
            for i in idx:
                mos, f = forward(model, images[i])
                preds.append(reshape(mos, (1,)))
                feats.append(f)
            terms = loss_terms(concat(preds), Tensor(targets[idx]), feats, weights)
            total = terms["total"].item()
            if not math.isfinite(total):
                which = [names[i] for i in idx] if names is not None else idx.tolist()
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b} "
                                   f"(images {which})")
            backward(terms["total"])
            state.step(lr)
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v.item()
            step += 1
        entry = {"epoch": epoch, "loss": sums.pop("total") / per_epoch}
        entry.update({k: v / per_epoch for k, v in sums.items()})
        entry["lr"] = lr
        log.append(entry)
        logger.debug("epoch %d loss %.6f lr %.3g", epoch, entry["loss"], lr)
    return log


class _OptimizerState:
    """Per-parameter buffers and the update rule selected by the schedule."""

    ADAM_B1, ADAM_B2, ADAM_EPS = 0.9, 0.999, 1e-8

    def __init__(self, params, schedule: TrainSchedule):
        self.params, self.schedule, self.t = params, schedule, 0
        adam = schedule.optimizer == "adam"
        self.m = [np.zeros_like(p.data) for p in params] if adam or schedule.momentum else None
        self.v = [np.zeros_like(p.data) for p in params] if adam else None

    def step(self, lr: float):
        sched = self.schedule
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if sched.clip_norm:
            norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
            if norm > sched.clip_norm:
                grads = [g * (sched.clip_norm / norm) for g in grads]
        self.t += 1
        for k, (p, g) in enumerate(zip(self.params, grads)):
            if self.v is not None:
                self.m[k] = self.ADAM_B1 * self.m[k] + (1 - self.ADAM_B1) * g
                self.v[k] = self.ADAM_B2 * self.v[k] + (1 - self.ADAM_B2) * g * g
                m_hat = self.m[k] / (1 - self.ADAM_B1 ** self.t)
                v_hat = self.v[k] / (1 - self.ADAM_B2 ** self.t)
                g = m_hat / (np.sqrt(v_hat) + self.ADAM_EPS)
            elif self.m is not None:
                self.m[k] = sched.momentum * self.m[k] + g
                g = self.m[k]
            p.data -= lr * g
            p.grad = None


def _load_split(manifest: DatasetManifest, split: str):
    records = manifest.split(split)
    if not records:
        raise DataError(f"manifest has no {split!r} records")
    return records, manifest.load_images(records)


def train(model: Model, manifest: DatasetManifest, schedule: TrainSchedule, out_dir=None):
    """Fit ``model`` on the manifest's train split.

    Returns ``(checkpoint_path, log)``; the checkpoint and a ``train_log.csv`` are
    written only when ``out_dir`` is given (otherwise the path is ``None``).
    """
    records, images = _load_split(manifest, "train")
    size = model.config.image_size
    if images.shape[1:] != (3, size, size):
        raise DataError(f"images are {images.shape[2]}x{images.shape[3]}, model expects "
                        f"{size}x{size}")
    model.mos_scale = manifest.mos_scale
    targets = manifest.normalize([r.mos for r in records])
    log = fit(model, images, targets, schedule, names=[r.path for r in records])
    ckpt = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt = out_dir / "model.mscn"
        save_checkpoint(model, ckpt)
        write_log(log, out_dir / "train_log.csv")
    return ckpt, log


def write_log(log: list[dict], path):
    keys = list(dict.fromkeys(k for e in log for k in e))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        w.writerows(log)


@dataclass
class EvalReport:
    """Correlations and scatter data; ``undefined`` flags a constant prediction."""

    plcc: float
    srocc: float
    n: int
    scatter: list[tuple[float, float]]
    slope: float = 0.0
    intercept: float = 0.0
    undefined: bool = False
    message: str = ""
    paths: list[str] = field(default_factory=list)

    def write_scatter(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["predicted", "actual"])
            w.writerows((repr(p), repr(a)) for p, a in self.scatter)

    def summary(self) -> str:
        if self.undefined:
            return f"n={self.n} correlation undefined: {self.message}"
        return (f"n={self.n} PLCC={self.plcc:.4f} SROCC={self.srocc:.4f} "
                f"fit: actual = {self.slope:.4f} * predicted + {self.intercept:.4f}")


def report_from_predictions(pred, actual, paths=None) -> EvalReport:
    """Build an :class:`EvalReport`, ordering samples by path when paths are given."""
    pred = np.asarray(pred, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if paths is not None:
        order = np.argsort(np.asarray(paths, dtype=object), kind="stable")
        pred, actual = pred[order], actual[order]
        paths = [paths[i] for i in order]
    scatter = list(zip(pred.tolist(), actual.tolist()))
    slope, intercept = linear_fit(pred, actual)
    try:
        r, rho = plcc(pred, actual), srocc(pred, actual)
    except UndefinedCorrelation as exc:
        return EvalReport(math.nan, math.nan, len(pred), scatter, slope, intercept,
                          undefined=True, message=str(exc), paths=paths or [])
    return EvalReport(r, rho, len(pred), scatter, slope, intercept, paths=paths or [])


def predict_images(model: Model, images) -> np.ndarray:
    lo, hi = model.mos_scale
    out = np.empty(len(images))
    with no_grad():
        for i, img in enumerate(images):
            out[i] = forward(model, img)[0].item()
    return lo + out * (hi - lo)


def evaluate(model: Model, manifest: DatasetManifest, split: str = "test") -> EvalReport:
    """Score every image of ``split`` and correlate with its MOS."""
    records, images = _load_split(manifest, split)
    pred = predict_images(model, images)
    return report_from_predictions(pred, [r.mos for r in records], [r.path for r in records])


def check_leakage(train: DatasetManifest, test: DatasetManifest):
    shared_tags = train.tags & test.tags
    if shared_tags:
        raise LeakageError(f"train and test manifests share dataset tags {sorted(shared_tags)}")
    a = {str(train.resolve(r).resolve()) for r in train.records}
    b = {str(test.resolve(r).resolve()) for r in test.records}
    both = sorted(a & b)
    if both:
        raise LeakageError(f"{len(both)} image path(s) appear in both sets, e.g. {both[0]}")


@dataclass
class CrossValReport:
    """SROCC per fold for each ``train->test`` pair."""

    results: dict[str, list[float]]

    def stats(self, key: str) -> dict[str, float]:
        v = np.asarray(self.results[key], dtype=np.float64)
        q1, med, q3 = np.nanpercentile(v, [25, 50, 75])
        return {"min": float(np.nanmin(v)), "q1": float(q1), "median": float(med),
                "q3": float(q3), "max": float(np.nanmax(v))}

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["pair", "fold", "srocc"])
            for key, values in self.results.items():
                for i, v in enumerate(values):
                    w.writerow([key, i, repr(v)])

    def write_summary_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["pair", "min", "q1", "median", "q3", "max"])
            for key in self.results:
                s = self.stats(key)
                w.writerow([key] + [repr(s[k]) for k in ("min", "q1", "median", "q3", "max")])


def cross_dataset(pairs, config: ModelConfig, schedule: TrainSchedule, folds: int = 5,
                  out_dir=None) -> CrossValReport:
    """Train on folds of one dataset, test on all of another.

    For every ``(train_manifest, test_manifest)`` pair the training records are
    split into ``folds`` seeded folds; each run trains a fresh model on all but
    one fold and reports SROCC on the complete foreign test set.
    """
    pairs = list(pairs)
    if not pairs:
        raise DataError("no manifest pairs given")
    for tr, te in pairs:
        check_leakage(tr, te)
    results = {}
    for tr, te in pairs:
        key = f"{'+'.join(sorted(tr.tags))}->{'+'.join(sorted(te.tags))}"
        records = tr.records
        if len(records) < folds:
            raise DataError(f"{key}: {len(records)} training records cannot form {folds} folds")
        images = tr.load_images(records)
        targets = tr.normalize([r.mos for r in records])
        test_images = te.load_images(te.records)
        test_mos = [r.mos for r in te.records]
        splitter = KFold(n_splits=folds, shuffle=True, random_state=schedule.seed)
        values = []
        for fold, (keep, _) in enumerate(splitter.split(np.arange(len(records)))):
            model = build_model(config)
            model.mos_scale = tr.mos_scale
            fit(model, images[keep], targets[keep], schedule)
            rep = report_from_predictions(predict_images(model, test_images), test_mos)
            values.append(rep.srocc)
            logger.info("%s fold %d SROCC %.4f", key, fold, rep.srocc)
        results[key] = values
    report = CrossValReport(results)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report.write_csv(out_dir / "crossval_srocc.csv")
        report.write_summary_csv(out_dir / "crossval_summary.csv")
    return report
