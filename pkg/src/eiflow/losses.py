"""Training objectives: iteration-weighted robust flow loss, its
bidirectional variant, the feature-similarity loss, and their totals.

Per-pixel flow error enters a Charbonnier-style penalty rho(x) = (x^2 + eps)^q
and is averaged over valid pixels, so loss scale is independent of image size
(lambda stays meaningful across resolutions).  Later refinement iterations get
geometrically larger weights phi^(N-i+1).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .evalviz import FlowField
from .tensorops import Tensor

__all__ = ["LossConfig", "flow_loss", "bidirectional_flow_loss",
           "similarity_loss", "total_loss"]


@dataclass(frozen=True)
class LossConfig:
    phi: float = 0.8
    q: float = 0.5
    eps: float = 1e-8
    lam: float = 100.0
    iterations: int = 6

    def __post_init__(self):
        if not 0.0 < self.phi <= 1.0:
            raise ValueError("phi must lie in (0, 1]")
        if not 0.0 < self.q < 1.0:
            raise ValueError("q must lie in (0, 1)")
        if self.eps <= 0.0:
            raise ValueError("eps must be positive")
        if self.lam < 0.0:
            raise ValueError("lambda must be non-negative")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


def _as_tensor(pred) -> Tensor:
    if isinstance(pred, Tensor):
        return pred
    if isinstance(pred, FlowField):
        return Tensor(pred.as_array())
    raise TypeError("prediction must be a Tensor or FlowField")


def flow_loss(preds: Sequence, gt: FlowField, cfg: LossConfig = LossConfig()) -> Tensor:
    """Weighted sum over iterations of the valid-pixel mean robust error.

    ``preds`` holds the per-iteration (2, H, W) flow predictions, earliest
    first; weights rise from phi^N to phi^1 so later iterations dominate.
    """
    if len(preds) == 0:
        raise ValueError("flow_loss needs at least one prediction")
    valid = gt.valid.astype(bool)
    count = float(valid.sum())
    if count == 0:
        raise ValueError("ground truth has no valid pixels")
    n = len(preds)
    gt_arr = gt.as_array()
    total: Tensor | None = None
    for i, raw in enumerate(preds, start=1):
        pred = _as_tensor(raw)
        if pred.shape != gt_arr.shape:
            raise ValueError("prediction shape does not match ground truth")
        dtype = pred.data.dtype
        diff = pred - Tensor(np.where(valid, gt_arr, 0.0).astype(dtype))
        mask = Tensor(valid.astype(dtype))
        sq = ((diff * diff) * mask).sum(axis=0)
        robust = (sq + cfg.eps) ** cfg.q
        term = (robust * mask).sum() * (cfg.phi ** (n - i + 1) / count)
        total = term if total is None else total + term
    return total


def bidirectional_flow_loss(preds_fwd: Sequence, preds_bwd: Sequence,
                            gt_fwd: FlowField, gt_bwd: FlowField,
                            cfg: LossConfig = LossConfig()) -> Tensor:
    return (flow_loss(preds_fwd, gt_fwd, cfg)
            + flow_loss(preds_bwd, gt_bwd, cfg)) * 0.5


def similarity_loss(pseudo_feat: Tensor, target_feat: Tensor) -> Tensor:
    """Mean squared elementwise difference between two feature maps."""
    if pseudo_feat.shape != target_feat.shape:
        raise ValueError("similarity_loss inputs must share shape")
    d = pseudo_feat - target_feat
    return (d * d).mean()


def total_loss(flow_term: Tensor, sim_term: Tensor, lam: float) -> Tensor:
    """flow + lambda * similarity; pass the bidirectional or plain flow term."""
    if lam < 0.0:
        raise ValueError("lambda must be non-negative")
    if lam == 0.0:
        return flow_term
    return flow_term + sim_term * lam
