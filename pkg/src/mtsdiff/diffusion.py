"""Forward noising, the probability-flow Euler sampler and classifier-free guidance."""
from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataio import SequenceBatch, denormalize
from .denoiser import one_hot, predict, split_logits
from .embedspace import nearest_decode, score_interpolate
from .schedule import ScheduleParams, sigma_field, sigma_grid, time_grid
from .state import ModelState

MODES = ("uncond", "cfg-comb", "cfg-bal")


@dataclass
class SamplerConfig:
    steps: int = 50
    w_num: float = 2.0
    w_cat: float = 2.0
    mode: str = "uncond"
    seed: int = 0
    chunk: int = 1024

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.chunk < 1:
            raise ValueError("chunk must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def expand_groups(sig: Tensor, group: int) -> Tensor:
    """Repeat each feature's noise level over its ``group`` embedding dims: ``[B,L,F] -> [B,L,F*group]``."""
    if group == 1:
        return sig
    B, L, F = sig.shape
    return ad.reshape(ad.broadcast_to(ad.reshape(sig, (B, L, F, 1)), (B, L, F, group)), (B, L, F * group))


def forward_noise(x0, t, schedule: ScheduleParams, rng: np.random.Generator | None = None,
                  group: int = 1, eps: np.ndarray | None = None) -> tuple[Tensor, np.ndarray, Tensor]:
    """``x_t = x0 + sigma(t) * eps`` with per-(feature, position) noise levels.

    ``x0`` is ``[B, L, F*group]``; ``t`` holds one time per sample. Returns
    ``(x_t, eps, sigma)`` where ``sigma`` has the shape of ``x0`` and stays
    differentiable in the schedule parameters.
    """
    x0 = ad.as_tensor(x0)
    sig = expand_groups(sigma_field(schedule, t), group)
    if sig.shape != x0.shape:
        raise ValueError(f"schedule gives noise of shape {sig.shape} for data of shape {x0.shape}")
    if sig.dtype != x0.dtype:
        sig = ad.mul(sig, np.asarray(1.0, dtype=x0.dtype))
    if eps is None:
        eps = rng.standard_normal(x0.shape)
    eps = np.asarray(eps, dtype=x0.dtype)
    return ad.add(x0, ad.mul(sig, eps)), eps, sig


def euler_step(x, x0_hat, sigma_cur, sigma_next):
    """One first-order step of the probability-flow ODE in sigma.

    With the score ``(x0_hat - x) / sigma^2`` the update is
    ``x + (sigma_next - sigma_cur) / sigma_cur * (x - x0_hat)``.
    """
    sigma_cur = np.asarray(sigma_cur)
    sigma_next = np.asarray(sigma_next)
    if np.any(sigma_next >= sigma_cur) or np.any(sigma_next < 0):
        raise ValueError("noise levels must strictly decrease along the sampling path")
    return x + ((sigma_next - sigma_cur) / sigma_cur) * (x - x0_hat)


def euler_sample(denoise: Callable[[np.ndarray, np.ndarray, int], np.ndarray], x_init: np.ndarray,
                 sigmas: np.ndarray) -> np.ndarray:
    """Integrate from ``sigmas[0]`` down to ``sigmas[-1]``.

    ``denoise(x, sigma_i, i)`` returns the clean-data estimate; ``sigmas`` is
    ``[S+1, ...]`` and broadcasts against ``x``. The final state is returned as is.
    """
    x = x_init
    for i in range(sigmas.shape[0] - 1):
        x = euler_step(x, denoise(x, sigmas[i], i), sigmas[i], sigmas[i + 1])
    return x


def cfg_combine(conditional, unconditional, w: float):
    return (1.0 + w) * conditional - w * unconditional


def draw_labels(mode: str, n: int, n_labels: int, freqs, rng: np.random.Generator) -> np.ndarray | None:
    if mode == "uncond":
        return None
    if mode == "cfg-comb":
        p = np.asarray(freqs if freqs is not None else np.full(n_labels, 1.0 / n_labels), dtype=np.float64)
        return rng.choice(n_labels, size=n, p=p / p.sum())
    labels = np.arange(n) % n_labels
    return rng.permutation(labels)


def _softmax(z: np.ndarray) -> np.ndarray:
    return ad.softmax_np(z)


def sample(state: ModelState, config: SamplerConfig, n: int, labels: np.ndarray | None = None) -> SequenceBatch:
    """Generate ``n`` sequences with the EMA weights of ``state``.

    Initial noise and labels are drawn up front from ``config.seed``, so the
    result does not depend on how the work is chunked.
    """
    cfg = state.cfg
    K = cfg.n_labels
    L, d = state.seq_len, cfg.emb_dim
    rng = np.random.default_rng(config.seed)
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != (n,):
            raise ValueError(f"labels must have shape ({n},)")
        if labels.size and (labels.min() < 0 or labels.max() >= K):
            raise ValueError(f"unknown label class in {sorted(set(labels.tolist()))}; expected [0, {K})")
        if config.mode == "uncond":
            raise ValueError("labels are only used by the cfg modes")
    else:
        labels = draw_labels(config.mode, n, K, state.label_freqs, rng)
    x_num = state.sched_num.sigma_max * rng.standard_normal((n, L, cfg.n_num))
    x_emb = state.sched_emb.sigma_max * rng.standard_normal((n, L, cfg.n_cat * d))

    with state.use_ema():
        ts = time_grid(config.steps)
        s_num = sigma_grid(state.sched_num, config.steps)  # [S+1, L, Fn]
        s_emb = np.repeat(sigma_grid(state.sched_emb, config.steps), d, axis=-1)  # [S+1, L, Fc*d]
        out_num, out_emb = [], []
        for lo in range(0, n, config.chunk):
            hi = min(n, lo + config.chunk)
            lab = None if labels is None else labels[lo:hi]
            xn, xe = _sample_chunk(state, config, x_num[lo:hi], x_emb[lo:hi], lab, ts, s_num, s_emb)
            out_num.append(xn)
            out_emb.append(xe)
        x_num = np.concatenate(out_num)
        x_emb = np.concatenate(out_emb)
        cats = np.stack(
            [nearest_decode(state.embeddings, j, x_emb[..., j * d:(j + 1) * d]) for j in range(cfg.n_cat)], axis=-1
        )
    if labels is None:
        # majority vote of the diffused label channel; ties -> lowest class
        counts = np.stack([(cats[..., -1] == k).sum(axis=1) for k in range(K)], axis=1)
        labels = counts.argmax(axis=1)
    numerical = x_num if state.stats is None else denormalize(x_num, state.stats)
    return SequenceBatch(numerical.astype(np.float32), cats[..., :-1].astype(np.uint8), labels.astype(np.uint8))


def _sample_chunk(state, config, x_num, x_emb, labels, ts, s_num, s_emb):
    cfg = state.cfg
    B = x_num.shape[0]
    n_num = cfg.n_num
    dtype = state.dtype
    zero = np.zeros((B, cfg.n_labels), dtype=dtype)
    cond = None if labels is None else one_hot(labels, cfg.n_labels, dtype)

    def run(xn, xe, sn, se, t, lab):
        with ad.no_grad():
            x0, logits = predict(
                state.net,
                xn.astype(dtype), np.broadcast_to(sn, xn.shape).astype(dtype),
                xe.astype(dtype), np.broadcast_to(se, xe.shape).astype(dtype),
                np.full(B, t), lab,
            )
        return x0.value.astype(np.float64), logits.value.astype(np.float64)

    x = np.concatenate([x_num, x_emb], axis=-1)
    sig = np.concatenate([s_num, s_emb], axis=-1)

    def denoise(xs, sg, i):
        xn, xe = xs[..., :n_num], xs[..., n_num:]
        sn, se = sg[..., :n_num], sg[..., n_num:]
        if cond is None:
            x0, logits = run(xn, xe, sn, se, ts[i], zero)
        else:
            x0c, lc = run(xn, xe, sn, se, ts[i], cond)
            x0u, lu = run(xn, xe, sn, se, ts[i], zero)
            x0 = cfg_combine(x0c, x0u, config.w_num)
            logits = cfg_combine(lc, lu, config.w_cat)
        emb_hat = [score_interpolate(state.embeddings, j, _softmax(z))
                   for j, z in enumerate(split_logits(logits, cfg.cat_cards))]
        return np.concatenate([x0] + emb_hat, axis=-1)

    x = euler_sample(denoise, x, sig)
    return x[..., :n_num], x[..., n_num:]
