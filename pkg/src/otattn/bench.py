"""Random objects detection benchmark.

Each sample is a multiset of ``k`` Gaussian objects hidden among ``h`` zero
vectors; a model must copy the objects into its slots.  Training uses a
Hungarian-matched MSE loss and evaluation reports the matched RMSE divided by
the generation scale, so the always-zero predictor scores 1.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ot import hungarian
from .slot_attention import SAConfig, forward, init_params

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "step", "loss", "eval_rmse_normalized", "wall_seconds")


@dataclass
class TrainConfig:
    dataset_size: int = 64000
    epochs: int = 20
    batch_size: int = 64
    lr: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    k: int = 5
    h: int = 100
    c: int = 32
    eval_size: int = 6400
    eval_each_epoch: bool = True
    lr_schedule: str = "constant"  # or "cosine": linear warmup then cosine decay to zero
    warmup_steps: int = 0

    def __post_init__(self):
        if min(self.dataset_size, self.batch_size, self.k, self.c, self.eval_size) < 1 or self.epochs < 0 or self.h < 0:
            raise ValueError("sizes must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")

    @property
    def steps_per_epoch(self) -> int:
        return self.dataset_size // self.batch_size

    def lr_at(self, step: int) -> float:
        """Learning rate for 0-based optimizer step ``step``."""
        if self.warmup_steps and step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        if self.lr_schedule == "constant":
            return self.lr
        total = max(self.epochs * self.steps_per_epoch - self.warmup_steps, 1)
        frac = min((step - self.warmup_steps) / total, 1.0)
        return self.lr * 0.5 * (1 + math.cos(math.pi * frac))


@dataclass
class RandomObjectsSample:
    X: np.ndarray
    targets: np.ndarray
    sigma: float


class RandomObjects:
    """Lazily materialized dataset: only targets and their row positions are stored."""

    def __init__(self, sigma: float, size: int, k: int = 5, h: int = 100, c: int = 32, rng=None):
        if not sigma > 0:
            raise ValueError("sigma must be positive")
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.sigma = float(sigma)
        self.k, self.h, self.c = k, h, c
        self.targets = sigma * rng.standard_normal((size, k, c))
        order = np.argsort(rng.random((size, k + h)), axis=1)
        self.positions = order[:, :k]

    def __len__(self):
        return len(self.targets)

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(idx)
        B = len(idx)
        X = np.zeros((B, self.k + self.h, self.c))
        rows = np.repeat(np.arange(B), self.k)
        X[rows, self.positions[idx].ravel()] = self.targets[idx].reshape(-1, self.c)
        return X, self.targets[idx]

    def __getitem__(self, i: int) -> RandomObjectsSample:
        X, t = self.batch([i])
        return RandomObjectsSample(X[0], t[0], self.sigma)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def generate_dataset(sigma: float, cfg: TrainConfig, rng=None, size: int | None = None) -> RandomObjects:
    return RandomObjects(sigma, cfg.dataset_size if size is None else size, cfg.k, cfg.h, cfg.c, rng)


def _pair_mse(pred: np.ndarray, targets: np.ndarray) -> np.ndarray:
    # (B, k, m): mean squared error between target j and slot i
    return ((targets[:, :, None, :] - pred[:, None, :, :]) ** 2).mean(axis=-1)


def match(pred: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Slot index assigned to each target, ``(B, k)``."""
    pair = _pair_mse(pred, targets)
    return np.stack([hungarian(p) for p in pair])


def hungarian_mse_loss(pred, targets) -> Tensor:
    """Mean per-pair MSE under the lowest-cost target-to-slot matching.

    The matching is a constant of the backward pass.
    """
    pred = ad.as_tensor(pred)
    targets = np.asarray(targets, dtype=np.float64)
    if pred.ndim == 2:
        pred = ad.reshape(pred, (1,) + pred.shape)
        targets = targets[None]
    B, m, _ = pred.shape
    k = targets.shape[1]
    if m < k:
        raise ValueError(f"need at least as many slots ({m}) as targets ({k})")
    slots = match(pred.data, targets)
    sel = pred[np.repeat(np.arange(B), k), slots.ravel()]
    diff = sel - targets.reshape(B * k, -1)
    return ad.mean(diff * diff)


def normalized_rmse(pred: np.ndarray, targets: np.ndarray, sigma: float) -> float:
    slots = match(pred, targets)
    B, k = slots.shape
    sel = pred[np.repeat(np.arange(B), k), slots.ravel()].reshape(targets.shape)
    return float(np.sqrt(np.mean((sel - targets) ** 2)) / sigma)


class Adam:
    def __init__(self, params: dict, lr=4e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, params, log_rows):
        super().__init__(msg)
        self.params = params
        self.log_rows = log_rows


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)  # per-epoch dicts keyed by LOG_COLUMNS
    step_losses: list = field(default_factory=list)
    final_eval: float = float("nan")

    def write_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: r[k] for k in LOG_COLUMNS})


def _streams(seed: int):
    data, held_out, init, noise = np.random.SeedSequence(seed).spawn(4)
    return (np.random.default_rng(data), np.random.default_rng(held_out),
            np.random.default_rng(init), np.random.default_rng(noise))


def predict(params, X: np.ndarray, sa_cfg: SAConfig, rng) -> np.ndarray:
    Z, _ = forward(X, {k: Tensor(v) for k, v in params.items()}, sa_cfg, rng)
    return Z.data


def evaluate_normalized_rmse(params, sigma: float, cfg: TrainConfig, sa_cfg: SAConfig | None = None,
                             predictor: Callable | None = None, batch_size: int = 320) -> float:
    """Matched RMSE over the held-out set divided by ``sigma``.

    ``predictor(X) -> slots`` overrides the model, e.g. for baselines.
    """
    _, held_rng, _, _ = _streams(cfg.seed)
    data = generate_dataset(sigma, cfg, held_rng, size=cfg.eval_size)
    noise_rng = np.random.default_rng([cfg.seed, 7])
    sq, count = 0.0, 0
    for start in range(0, len(data), batch_size):
        X, T = data.batch(np.arange(start, min(start + batch_size, len(data))))
        pred = predictor(X) if predictor is not None else predict(params, X, sa_cfg, noise_rng)
        slots = match(pred, T)
        B, k = slots.shape
        sel = pred[np.repeat(np.arange(B), k), slots.ravel()].reshape(T.shape)
        sq += float(((sel - T) ** 2).sum())
        count += T.size
    return float(np.sqrt(sq / count) / sigma)


def train(variant: str, sigma: float, cfg: TrainConfig, sa_cfg: SAConfig | None = None,
          progress: Optional[Callable[[dict], None]] = None):
    """Train one model; returns ``(params, TrainingLog)``.

    Deterministic given ``cfg.seed``.  A non-finite loss raises
    :class:`TrainingDiverged` carrying the last finite parameters.
    """
    sa_cfg = sa_cfg or SAConfig(variant=variant)
    if sa_cfg.variant != SAConfig(variant=variant).variant:
        raise ValueError("variant disagrees with sa_cfg.variant")
    if cfg.k > sa_cfg.num_slots:
        raise ValueError("more objects than slots")
    data_rng, _, init_rng, noise_rng = _streams(cfg.seed)
    data = generate_dataset(sigma, cfg, data_rng)
    params = init_params(sa_cfg, init_rng)
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    tlog = TrainingLog()
    t0 = time.perf_counter()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = data_rng.permutation(len(data))
        losses = []
        for start in range(0, len(data) - cfg.batch_size + 1, cfg.batch_size):
            X, T = data.batch(order[start:start + cfg.batch_size])
            tape = ad.Tape()
            P = {k: tape.variable(v) for k, v in params.items()}
            Z, _ = forward(X, P, sa_cfg, noise_rng)
            loss = hungarian_mse_loss(Z, T)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"non-finite loss at step {step}", params, tlog.rows)
            gm = ad.backward(loss)
            grads = {k: gm[P[k]] for k in params}
            tape.release()
            if not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDiverged(f"non-finite gradient at step {step}", params, tlog.rows)
            opt.lr = cfg.lr_at(step)
            opt.step(params, grads)
            step += 1
            losses.append(float(loss.data))
            tlog.step_losses.append(float(loss.data))
        ev = evaluate_normalized_rmse(params, sigma, cfg, sa_cfg) if cfg.eval_each_epoch else float("nan")
        row = {"epoch": epoch, "step": step, "loss": float(np.mean(losses)) if losses else float("nan"),
               "eval_rmse_normalized": ev, "wall_seconds": time.perf_counter() - t0}
        tlog.rows.append(row)
        log.info("epoch %d step %d loss %.6g eval %.4f (%.1fs)", epoch, step, row["loss"], ev, row["wall_seconds"])
        if progress:
            progress(row)
    tlog.final_eval = evaluate_normalized_rmse(params, sigma, cfg, sa_cfg)
    if not tlog.rows or cfg.eval_each_epoch is False:
        tlog.rows.append({"epoch": cfg.epochs, "step": step,
                          "loss": tlog.step_losses[-1] if tlog.step_losses else float("nan"),
                          "eval_rmse_normalized": tlog.final_eval,
                          "wall_seconds": time.perf_counter() - t0})
    return params, tlog
