"""Bidirectional training: one shared network learns forward flow from
(image1, events) and backward flow from (image2, reversed events) in the
same optimizer step, with AdamW and CSV loss logging.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .events import EventStream, reverse, voxelize
from .evalviz import FlowField, epe
from .losses import LossConfig, flow_loss, similarity_loss, total_loss
from .network import Model, save_checkpoint
from .tensorops import Tensor, backward

__all__ = ["TrainSample", "TrainConfig", "AdamW", "make_bidirectional_pair",
           "train_loop", "evaluate"]


@dataclass
class TrainSample:
    image1: np.ndarray
    image2: np.ndarray
    events: EventStream
    gt_fwd: FlowField
    gt_bwd: FlowField

    def __post_init__(self):
        self.image1 = np.asarray(self.image1, dtype=np.float32)
        self.image2 = np.asarray(self.image2, dtype=np.float32)
        for img in (self.image1, self.image2):
            if img.ndim != 3 or img.shape[0] != 3:
                raise ValueError("images must be (3, H, W)")
        if self.image1.shape != self.image2.shape:
            raise ValueError("image pair must share shape")
        h, w = self.image1.shape[1:]
        if (self.events.height, self.events.width) != (h, w):
            raise ValueError("event extent does not match images")
        if self.gt_fwd.u.shape != (h, w) or self.gt_bwd.u.shape != (h, w):
            raise ValueError("ground-truth extent does not match images")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    lr: float = 4e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    batch_size: int = 1
    loss: LossConfig = field(default_factory=LossConfig)
    checkpoint_every: int = 0  # 0 = final checkpoint only
    ckpt_path: Path | str | None = None
    log_path: Path | str | None = None

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.betas[0] < 1 and 0 <= self.betas[1] < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be non-negative")


class AdamW:
    """Decoupled weight decay applied before the bias-corrected Adam update.

    Parameters update in sorted-name order; a non-finite gradient anywhere
    rejects the whole step before any state mutates.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 4e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        self.params = params
        self.names = sorted(params)
        self.lr = float(lr)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m = {n: np.zeros_like(params[n].data) for n in self.names}
        self.v = {n: np.zeros_like(params[n].data) for n in self.names}

    def zero_grad(self) -> None:
        for n in self.names:
            self.params[n].grad = None

    def step(self) -> None:
        grads = {}
        for n in self.names:
            g = self.params[n].grad
            if g is None:
                raise ValueError(f"parameter {n!r} has no gradient")
            g = np.asarray(g, dtype=self.params[n].data.dtype)
            if not np.all(np.isfinite(g)):
                raise ValueError(f"non-finite gradient in parameter {n!r}")
            grads[n] = g
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for n in self.names:
            p = self.params[n]
            g = grads[n]
            if self.weight_decay:
                p.data = p.data - self.lr * self.weight_decay * p.data
            self.m[n] = b1 * self.m[n] + (1.0 - b1) * g
            self.v[n] = b2 * self.v[n] + (1.0 - b2) * g * g
            m_hat = self.m[n] / c1
            v_hat = self.v[n] / c2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_bidirectional_pair(sample: TrainSample, bins: int):
    """(image1, forward volume) and (image2, reversed-event volume)."""
    fwd = (sample.image1, voxelize(sample.events, bins))
    bwd = (sample.image2, voxelize(reverse(sample.events), bins))
    return fwd, bwd


def _sample_losses(model: Model, sample: TrainSample, cfg: TrainConfig):
    (img1, vol_f), (img2, vol_b) = make_bidirectional_pair(
        sample, model.cfg.event_bins)
    res_f = model.forward(img1, vol_f)
    res_b = model.forward(img2, vol_b)
    lf = (flow_loss(res_f.flows, sample.gt_fwd, cfg.loss)
          + flow_loss(res_b.flows, sample.gt_bwd, cfg.loss)) * 0.5
    # Each direction's pseudo feature is supervised toward the other
    # direction's real image feature, taken as a constant target so the
    # similarity term trains the fusion path rather than degrading the
    # image encoder toward event-derived features.
    ls = (similarity_loss(res_f.pseudo_feat, Tensor(res_b.image_feat.data))
          + similarity_loss(res_b.pseudo_feat, Tensor(res_f.image_feat.data))) * 0.5
    return total_loss(lf, ls, cfg.loss.lam), lf, ls


def train_loop(model: Model, samples: Sequence[TrainSample],
               cfg: TrainConfig) -> list[tuple[int, float, float, float]]:
    """Run ``cfg.steps`` optimizer steps over seeded shuffled epochs.

    Visiting samples in a fresh seeded permutation per epoch decorrelates
    accumulation batches (datasets often arrive grouped by scene, which makes
    consecutive gradients redundant); the permutation stream is fixed, so two
    runs with identical inputs stay bit-identical.

    Returns the loss log rows (step, total, flow, sim); also writes them to
    ``cfg.log_path`` as CSV when given, and checkpoints to ``cfg.ckpt_path``.
    A non-finite loss or gradient aborts after saving the last good weights.
    """
    if len(samples) == 0:
        raise ValueError("empty training set")
    opt = AdamW(model.params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps,
                weight_decay=cfg.weight_decay)
    rows: list[tuple[int, float, float, float]] = []
    log_file = None
    writer = None
    if cfg.log_path is not None:
        log_file = open(cfg.log_path, "w", newline="")
        writer = csv.writer(log_file)
        writer.writerow(["step", "loss_total", "loss_flow", "loss_sim"])

    def save(path):
        if path is not None:
            save_checkpoint(path, model)

    order = np.arange(len(samples))
    shuffler = np.random.default_rng(1234)
    shuffler.shuffle(order)
    cursor = 0
    try:
        for step in range(cfg.steps):
            opt.zero_grad()
            tot = fl = sm = 0.0
            for _ in range(cfg.batch_size):
                if cursor == len(samples):
                    shuffler.shuffle(order)
                    cursor = 0
                sample = samples[int(order[cursor])]
                cursor += 1
                loss, lf, ls = _sample_losses(model, sample, cfg)
                val = loss.item()
                if not math.isfinite(val):
                    save(cfg.ckpt_path)
                    raise RuntimeError(
                        f"non-finite loss at step {step}; last good weights saved")
                tot += val
                fl += lf.item()
                sm += ls.item()
                backward(loss * (1.0 / cfg.batch_size))
            try:
                opt.step()
            except ValueError as exc:
                save(cfg.ckpt_path)
                raise RuntimeError(
                    f"optimizer rejected step {step}: {exc}; last good weights saved"
                ) from exc
            b = cfg.batch_size
            rows.append((step, tot / b, fl / b, sm / b))
            if writer is not None:
                writer.writerow([step, f"{tot / b:.6f}", f"{fl / b:.6f}",
                                 f"{sm / b:.6f}"])
                log_file.flush()
            if (cfg.checkpoint_every and cfg.ckpt_path is not None
                    and (step + 1) % cfg.checkpoint_every == 0):
                save(cfg.ckpt_path)
        save(cfg.ckpt_path)
    finally:
        if log_file is not None:
            log_file.close()
    return rows


def evaluate(model: Model, samples: Sequence[TrainSample]) -> float:
    """Mean dense endpoint error of forward predictions over ``samples``."""
    if len(samples) == 0:
        raise ValueError("empty evaluation set")
    total = 0.0
    for s in samples:
        vol = voxelize(s.events, model.cfg.event_bins)
        pred = model.predict(s.image1, vol)
        total += epe(pred, s.gt_fwd)
    return total / len(samples)
