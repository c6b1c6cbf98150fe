"""Training objective: L1 on MOS plus cross-branch and adaptive-pooling consistency."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

from .exceptions import ConfigError, ShapeError
from .model import BranchFeatures
from .patch import TokenGrid
from .tensor import Tensor, abs_, adaptive_avg_pool, add, mean, scale, square, sub


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    beta: float = 0.5
    enable_cb: bool = True
    enable_ap: bool = True

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("loss weights alpha and beta must be non-negative")


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    return mean(square(sub(a, b)))


def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error."""
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss: prediction {pred.shape} vs target {target.shape}")
    return mean(abs_(sub(pred, target)))


def _coarsest(a: TokenGrid, b: TokenGrid) -> tuple[int, int]:
    return min(a.grid_h, b.grid_h), min(a.grid_w, b.grid_w)


def cb_loss(f_s: TokenGrid, f_l: TokenGrid, alpha: float) -> Tensor:
    """``alpha * MSE`` between the two branches after pooling both to the coarser grid."""
    if f_s.d != f_l.d:
        raise ShapeError(f"cb_loss: embedding dims {f_s.d} and {f_l.d} differ")
    hw = _coarsest(f_s, f_l)
    a = adaptive_avg_pool(f_s.to_map(), hw)
    b = adaptive_avg_pool(f_l.to_map(), hw)
    return scale(mse(a, b), alpha)


def ap_loss(f_orig: TokenGrid, f_pool: TokenGrid, beta: float) -> Tensor:
    """``beta * MSE`` between the adaptively pooled fine features and the coarse ones."""
    if f_orig.d != f_pool.d:
        raise ShapeError(f"ap_loss: embedding dims {f_orig.d} and {f_pool.d} differ")
    if f_pool.grid_h > f_orig.grid_h or f_pool.grid_w > f_orig.grid_w:
        raise ShapeError(f"ap_loss: pooled grid {f_pool.grid_h}x{f_pool.grid_w} is larger "
                         f"than the original {f_orig.grid_h}x{f_orig.grid_w}")
    pooled = adaptive_avg_pool(f_orig.to_map(), (f_pool.grid_h, f_pool.grid_w))
    return scale(mse(pooled, f_pool.to_map()), beta)


def _need(feats: BranchFeatures, *names):
    missing = [n for n in names if getattr(feats, n) is None]
    if missing:
        raise ConfigError(f"consistency loss needs both branches; missing {missing}")


def loss_terms(pred: Tensor, target, feats, weights: LossWeights) -> dict[str, Tensor]:
    """Individual objective terms and their sum under ``'total'``.

    ``feats`` is one :class:`BranchFeatures` or a sequence (one per image); the
    consistency terms are averaged over the sequence.  Disabled terms are absent.
    """
    if isinstance(feats, BranchFeatures):
        feats = [feats]
    terms = {"l1": l1_loss(pred, target)}
    if weights.enable_cb:
        parts = []
        for f in feats:
            _need(f, "F_s", "F_l")
            parts.append(cb_loss(f.F_s, f.F_l, weights.alpha))
        terms["cb"] = _average(parts)
    if weights.enable_ap:
        parts = []
        for f in feats:
            _need(f, "E_s", "E_l")
            parts.append(ap_loss(f.E_l, f.E_s, weights.beta))
        terms["ap"] = _average(parts)
    total = terms["l1"]
    for key in ("cb", "ap"):
        if key in terms:
            total = add(total, terms[key])
    terms["total"] = total
    return terms


def _average(parts: Sequence[Tensor]) -> Tensor:
    acc = parts[0]
    for t in parts[1:]:
        acc = add(acc, t)
    return acc if len(parts) == 1 else scale(acc, 1.0 / len(parts))


def total_loss(pred: Tensor, target, feats, weights: LossWeights) -> Tensor:
    """L1 + enabled consistency terms."""
    return loss_terms(pred, target, feats, weights)["total"]
