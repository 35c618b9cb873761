"""Factorised power-mean noise schedules.

Each feature type (numerical values, categorical embeddings) owns one
:class:`ScheduleParams`. The shape parameter for feature ``f`` at sequence
position ``l`` is ``rho_global + rho_feature[f] + rho_time[l]`` passed through a
smooth clamp, and the noise level is the power mean between ``sigma_min`` and
``sigma_max`` at diffusion time ``t``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SIGMA_MIN = 0.002
SIGMA_MAX_NUM = 80.0
SIGMA_MAX_EMB = 100.0
RHO_INIT_NUM = 1.0
RHO_INIT_EMB = 7.0
RHO_CLAMP = (0.1, 15.0)
# sharpness of the soft clamp; the clamp deviates from identity by
# ~exp(-k * distance_to_bound) / k inside the range
CLAMP_SHARPNESS = 50.0


@dataclass
class ScheduleParams:
    sigma_min: float
    sigma_max: float
    rho_global: Tensor
    rho_feature: Tensor
    rho_time: Tensor
    rho_clamp: tuple[float, float] = RHO_CLAMP

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError(f"need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}")
        lo, hi = self.rho_clamp
        if not 0 < lo < hi:
            raise ValueError(f"bad rho clamp {self.rho_clamp}")

    @classmethod
    def create(
        cls,
        n_features: int,
        seq_len: int,
        sigma_max: float,
        rho_init: float,
        sigma_min: float = SIGMA_MIN,
        dtype=np.float64,
    ) -> "ScheduleParams":
        return cls(
            sigma_min=sigma_min,
            sigma_max=sigma_max,
            rho_global=Tensor(np.array(rho_init, dtype=dtype), requires_grad=True, name="rho_global"),
            rho_feature=Tensor(np.zeros(n_features, dtype=dtype), requires_grad=True, name="rho_feature"),
            rho_time=Tensor(np.zeros(seq_len, dtype=dtype), requires_grad=True, name="rho_time"),
        )

    @property
    def n_features(self) -> int:
        return self.rho_feature.shape[0]

    @property
    def seq_len(self) -> int:
        return self.rho_time.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.rho_global, self.rho_feature, self.rho_time]

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())


def numerical_schedule(n_features: int, seq_len: int, dtype=np.float64) -> ScheduleParams:
    return ScheduleParams.create(n_features, seq_len, SIGMA_MAX_NUM, RHO_INIT_NUM, dtype=dtype)


def embedding_schedule(n_features: int, seq_len: int, dtype=np.float64) -> ScheduleParams:
    return ScheduleParams.create(n_features, seq_len, SIGMA_MAX_EMB, RHO_INIT_EMB, dtype=dtype)


def soft_clamp(x: Tensor, lo: float, hi: float, k: float = CLAMP_SHARPNESS) -> Tensor:
    """``lo + softplus(k(x-lo))/k - softplus(k(x-hi))/k``: identity inside, saturating outside."""
    up = ad.softplus(ad.mul(ad.sub(x, lo), k))
    down = ad.softplus(ad.mul(ad.sub(x, hi), k))
    return ad.add(ad.mul(ad.sub(up, down), 1.0 / k), lo)


def rho_table(params: ScheduleParams) -> Tensor:
    """Clamped shape parameters for all positions, shape ``[L, F]``."""
    raw = params.rho_global + params.rho_time.reshape(-1, 1) + params.rho_feature.reshape(1, -1)
    return soft_clamp(raw, *params.rho_clamp)


def effective_rho(params: ScheduleParams, f: int, l: int) -> float:
    if not 0 <= f < params.n_features:
        raise IndexError(f"feature index {f} out of range [0, {params.n_features})")
    if not 0 <= l < params.seq_len:
        raise IndexError(f"time index {l} out of range [0, {params.seq_len})")
    raw = params.rho_global.value + params.rho_feature.value[f] + params.rho_time.value[l]
    with ad.no_grad():
        return float(soft_clamp(Tensor(np.asarray(raw, dtype=np.float64)), *params.rho_clamp).value)


def power_mean(t, rho: Tensor, sigma_min: float, sigma_max: float) -> Tensor:
    """``(smin^(1/rho) + t (smax^(1/rho) - smin^(1/rho)))^rho`` with broadcasting.

    ``t`` is a constant (array or scalar); ``rho`` carries gradients.
    """
    inv = ad.power(rho, -1.0)
    a = ad.exp(ad.mul(inv, np.log(sigma_min)))
    b = ad.exp(ad.mul(inv, np.log(sigma_max)))
    t = np.asarray(t, dtype=rho.dtype)
    base = ad.add(a, ad.mul(ad.sub(b, a), Tensor(t)))
    return ad.exp(ad.mul(rho, ad.log(base)))


def _check_t(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1) or not np.all(np.isfinite(t)):
        raise ValueError("diffusion time must lie in [0, 1]")
    return t


def sigma(params: ScheduleParams, t: float, f: int, l: int) -> float:
    _check_t(t)
    rho = effective_rho(params, f, l)
    with ad.no_grad():
        out = power_mean(t, Tensor(np.asarray(rho)), params.sigma_min, params.sigma_max)
    return float(out.value)


def sigma_field(params: ScheduleParams, t) -> Tensor:
    """Differentiable noise levels for per-sample times ``t`` (shape ``[B]``).

    Returns shape ``[B, L, F]``.
    """
    t = _check_t(t).reshape(-1, 1, 1)
    rho = rho_table(params)
    return power_mean(t, rho.reshape(1, *rho.shape), params.sigma_min, params.sigma_max)


def as_float64(params: ScheduleParams) -> ScheduleParams:
    """Detached double-precision copy (used for sampling grids)."""
    return ScheduleParams(
        params.sigma_min,
        params.sigma_max,
        Tensor(params.rho_global.value.astype(np.float64)),
        Tensor(params.rho_feature.value.astype(np.float64)),
        Tensor(params.rho_time.value.astype(np.float64)),
        params.rho_clamp,
    )


def time_grid(steps: int) -> np.ndarray:
    """Uniform sampling times ``1 - i/S`` for ``i = 0..S``."""
    if int(steps) != steps or steps < 1:
        raise ValueError(f"steps must be a positive integer, got {steps}")
    return 1.0 - np.arange(steps + 1, dtype=np.float64) / steps


def sigma_grid(params: ScheduleParams, steps: int) -> np.ndarray:
    """Noise levels along the sampling grid, shape ``[S+1, L, F]``.

    The endpoints are pinned to ``sigma_max`` / ``sigma_min`` exactly.
    """
    ts = time_grid(steps)
    with ad.no_grad():
        out = sigma_field(as_float64(params), ts).value
    out[0] = params.sigma_max
    out[-1] = params.sigma_min
    return out
