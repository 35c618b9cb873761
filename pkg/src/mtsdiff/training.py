"""Losses, Adam, EMA tracking and the training loop."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, asdict, fields
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataio import DatasetManifest, SequenceBatch, compute_stats, normalize
from .denoiser import loss_weight, one_hot, predict, split_logits
from .diffusion import forward_noise
from .state import ModelState

log = logging.getLogger(__name__)


class NumericFailure(FloatingPointError):
    def __init__(self, step: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 100
    ema_decay: float = 0.997
    lambda_num: float = 1.0
    lambda_emb: float = 1.0
    p_drop: float = 0.1
    seed: int = 0
    learn_schedule: bool = True
    eval_every: int = 50  # optimizer steps between EMA-loss evaluations
    eval_size: int = 512
    max_minutes: float | None = None
    # network size
    hidden: int = 64
    layers: int = 3
    emb_dim: int = 16
    time_dim: int = 64
    label_dim: int = 16

    def __post_init__(self):
        if not 0 < self.ema_decay < 1:
            raise ValueError("ema_decay must lie in (0, 1)")
        if not 0 <= self.p_drop <= 1:
            raise ValueError("p_drop must lie in [0, 1]")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.lambda_num < 0 or self.lambda_emb < 0:
            raise ValueError("loss weights must be nonnegative")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown TrainConfig keys: {unknown}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def model_overrides(self) -> dict:
        return {k: getattr(self, k) for k in ("hidden", "layers", "emb_dim", "time_dim", "label_dim")}


# -- losses -------------------------------------------------------------------------
def numerical_loss(x0_hat: Tensor, x0: np.ndarray, sigma) -> Tensor:
    """Mean of ``lambda(sigma) * (x0_hat - x0)^2`` over batch, positions and features."""
    diff = ad.sub(x0_hat, np.asarray(x0, dtype=x0_hat.dtype))
    return ad.mean(ad.mul(loss_weight(ad.as_tensor(sigma)), ad.mul(diff, diff)))


def categorical_loss(logits: Tensor, targets: np.ndarray, cards: Sequence[int]) -> Tensor:
    """Cross-entropy averaged over categorical features, positions and batch."""
    parts = split_logits(logits, cards)
    total = None
    for j, z in enumerate(parts):
        ce, _ = ad.softmax_cross_entropy(z, targets[..., j])
        total = ce if total is None else ad.add(total, ce)
    return ad.mul(total, 1.0 / len(cards))


def drop_labels(labels_1h: np.ndarray, p_drop: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Zero each row with probability ``p_drop``; returns the new matrix and the drop mask."""
    drop = rng.random(labels_1h.shape[0]) < p_drop
    out = labels_1h.copy()
    out[drop] = 0
    return out, drop


@dataclass
class StepNoise:
    """All randomness of one training step, so a loss can be re-evaluated exactly."""

    t: np.ndarray
    eps_num: np.ndarray
    eps_emb: np.ndarray
    drop: np.ndarray

    @classmethod
    def draw(cls, rng: np.random.Generator, B: int, L: int, n_num: int, n_emb: int, p_drop: float) -> "StepNoise":
        t = rng.random(B)
        eps_num = rng.standard_normal((B, L, n_num))
        eps_emb = rng.standard_normal((B, L, n_emb))
        drop = rng.random(B) < p_drop
        return cls(t, eps_num, eps_emb, drop)


def with_label_channel(cat: np.ndarray, labels: np.ndarray) -> np.ndarray:
    L = cat.shape[1]
    return np.concatenate([cat, np.repeat(labels.reshape(-1, 1, 1), L, axis=1)], axis=-1).astype(np.int64)


def compute_losses(state: ModelState, x_num: np.ndarray, cat: np.ndarray, labels: np.ndarray,
                   noise: StepNoise) -> tuple[Tensor, Tensor]:
    """Numerical and categorical losses for a normalised batch.

    ``cat`` holds the data categoricals; the label channel is appended here.
    """
    cfg = state.cfg
    dtype = state.dtype
    targets = with_label_channel(cat, labels)
    x0_emb = state.embeddings.lookup(targets)
    x_num_t, _, s_num = forward_noise(np.asarray(x_num, dtype=dtype), noise.t, state.sched_num, eps=noise.eps_num)
    x_emb_t, _, s_emb = forward_noise(x0_emb, noise.t, state.sched_emb, group=cfg.emb_dim, eps=noise.eps_emb)
    lab = one_hot(labels, cfg.n_labels, dtype)
    lab[noise.drop] = 0
    x0_hat, logits = predict(state.net, x_num_t, s_num, x_emb_t, s_emb, noise.t, lab)
    return numerical_loss(x0_hat, x_num, s_num), categorical_loss(logits, targets, cfg.cat_cards)


def total_loss(cfg: TrainConfig, l_num: Tensor, l_emb: Tensor) -> Tensor:
    return ad.add(ad.mul(l_num, cfg.lambda_num), ad.mul(l_emb, cfg.lambda_emb))


# -- optimiser / EMA ------------------------------------------------------------------
class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.value = np.asarray(p.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps), dtype=p.value.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def ema_update(shadow: np.ndarray, value: np.ndarray, decay: float) -> np.ndarray:
    return decay * shadow + (1 - decay) * value


# -- training loop -------------------------------------------------------------------------
@dataclass
class TrainResult:
    state: ModelState
    history: list[dict]
    best_ema_loss: float
    best_step: int


def train(manifest: DatasetManifest, data: SequenceBatch, cfg: TrainConfig,
          on_log: Callable[[dict], None] | None = None) -> TrainResult:
    """Fit a generator on raw (un-normalised) ``data``.

    The returned state is the snapshot with the lowest EMA-evaluated loss on a
    fixed evaluation batch.
    """
    rng = np.random.default_rng(cfg.seed)
    state = ModelState.create(manifest, cfg.model_overrides(), seed=cfg.seed)
    state.stats = compute_stats(data.numerical)
    counts = np.bincount(data.labels, minlength=manifest.n_labels)
    state.label_freqs = (counts / counts.sum()).tolist()
    state.extra = {"train_config": cfg.to_dict()}
    x_all = normalize(data.numerical, state.stats).astype(state.dtype)
    cat_all = data.categorical.astype(np.int64)
    lab_all = data.labels.astype(np.int64)
    N, L = x_all.shape[:2]
    n_emb = state.cfg.n_cat * state.cfg.emb_dim

    named = state.named_parameters()
    sched_names = state.schedule_parameter_names()
    trainable = [p for n, p in named if cfg.learn_schedule or n not in sched_names]
    opt = Adam(trainable, lr=cfg.learning_rate)

    # fixed evaluation batch and noise for the EMA loss
    eval_rng = np.random.default_rng([cfg.seed, 1])
    eval_idx = eval_rng.choice(N, size=min(cfg.eval_size, N), replace=False)
    eval_noise = StepNoise.draw(eval_rng, len(eval_idx), L, state.cfg.n_num, n_emb, 0.0)

    def ema_loss() -> float:
        with ad.no_grad(), state.use_ema():
            ln, le = compute_losses(state, x_all[eval_idx], cat_all[eval_idx], lab_all[eval_idx], eval_noise)
            return float(total_loss(cfg, ln, le).value)

    history: list[dict] = []
    best = (np.inf, 0, None)
    acc_num, acc_emb, acc_n = 0.0, 0.0, 0
    start = time.monotonic()
    step = 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(N)
        for lo in range(0, N, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            noise = StepNoise.draw(rng, len(idx), L, state.cfg.n_num, n_emb, cfg.p_drop)
            ln, le = compute_losses(state, x_all[idx], cat_all[idx], lab_all[idx], noise)
            loss = total_loss(cfg, ln, le)
            if not np.isfinite(loss.value):
                raise NumericFailure(step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            for n, p in named:
                state.ema[n] = np.asarray(ema_update(state.ema[n], p.value, cfg.ema_decay), dtype=p.value.dtype)
            acc_num += float(ln.value)
            acc_emb += float(le.value)
            acc_n += 1
            if step % cfg.eval_every == 0:
                el = ema_loss()
                if not np.isfinite(el):
                    raise NumericFailure(step, "EMA loss")
                rec = {"step": step, "loss_num": acc_num / acc_n, "loss_emb": acc_emb / acc_n, "ema_loss": el}
                history.append(rec)
                acc_num, acc_emb, acc_n = 0.0, 0.0, 0
                if on_log:
                    on_log(rec)
                if el < best[0]:
                    best = (el, step, _snapshot(state))
        if cfg.max_minutes is not None and time.monotonic() - start > 60 * cfg.max_minutes:
            log.info("time budget reached after epoch %d", epoch + 1)
            break
    state.step = step
    el = ema_loss()
    rec = {"step": step, "loss_num": acc_num / max(acc_n, 1), "loss_emb": acc_emb / max(acc_n, 1), "ema_loss": el}
    if acc_n:
        history.append(rec)
        if on_log:
            on_log(rec)
    if el < best[0] or best[2] is None:
        best = (el, step, _snapshot(state))
    _restore(state, best[2])
    state.extra["total_steps"] = step
    state.step = best[1]
    state.extra["best_ema_loss"] = best[0]
    state.extra["best_step"] = best[1]
    return TrainResult(state, history, best[0], best[1])


def _snapshot(state: ModelState) -> dict:
    return {
        "params": {n: p.value.copy() for n, p in state.named_parameters()},
        "ema": {n: v.copy() for n, v in state.ema.items()},
        "step": state.step,
    }


def _restore(state: ModelState, snap: dict) -> None:
    for n, p in state.named_parameters():
        p.value = snap["params"][n].copy()
    state.ema = {n: v.copy() for n, v in snap["ema"].items()}


def write_metrics_csv(history: list[dict], path) -> None:
    lines = ["step,loss_num,loss_emb,ema_loss"]
    for r in history:
        lines.append(f"{r['step']},{r['loss_num']:.8g},{r['loss_emb']:.8g},{r['ema_loss']:.8g}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
