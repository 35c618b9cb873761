"""Bidirectional GRU denoiser with FiLM time conditioning and EDM preconditioning."""
from __future__ import annotations

from dataclasses import dataclass, asdict, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SIGMA_DATA = 0.5


# -- EDM preconditioning --------------------------------------------------------
def c_in(sigma, sigma_data: float = SIGMA_DATA):
    return (sigma * sigma + sigma_data**2) ** -0.5


def c_skip(sigma, sigma_data: float = SIGMA_DATA):
    return sigma_data**2 / (sigma * sigma + sigma_data**2)


def c_out(sigma, sigma_data: float = SIGMA_DATA):
    return sigma * sigma_data * (sigma * sigma + sigma_data**2) ** -0.5


def loss_weight(sigma, sigma_data: float = SIGMA_DATA):
    """EDM weight ``(sigma^2 + sd^2) / (sigma sd)^2``; equals ``1 / c_out^2``."""
    return (sigma * sigma + sigma_data**2) / (sigma * sigma_data) ** 2


def precondition_in(x_t, sigma) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("noise levels must be positive")
    x_t = np.asarray(x_t)
    if np.broadcast_shapes(x_t.shape, sigma.shape) != x_t.shape:
        raise ValueError(f"sigma shape {sigma.shape} does not match input {x_t.shape}")
    return c_in(sigma) * x_t


# -- layers ---------------------------------------------------------------------
class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype, bias: bool = True,
                 zero: bool = False, name: str = "linear"):
        bound = 1.0 / np.sqrt(n_in)
        w = np.zeros((n_in, n_out)) if zero else rng.uniform(-bound, bound, (n_in, n_out))
        self.weight = Tensor(w.astype(dtype), requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True, name=f"{name}.bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        return y if self.bias is None else ad.add(y, self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])


class GRULayer:
    """Single-direction GRU (reset gate applied to the previous state before the
    recurrent candidate matmul).

    Weights ~ U(-1/sqrt(H), 1/sqrt(H)), biases zero.
    """

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator, dtype, name: str = "gru"):
        self.hidden = hidden
        b = 1.0 / np.sqrt(hidden)
        self.w_x = Tensor(rng.uniform(-b, b, (n_in, 3 * hidden)).astype(dtype), requires_grad=True, name=f"{name}.w_x")
        self.u_rz = Tensor(rng.uniform(-b, b, (hidden, 2 * hidden)).astype(dtype), requires_grad=True, name=f"{name}.u_rz")
        self.u_n = Tensor(rng.uniform(-b, b, (hidden, hidden)).astype(dtype), requires_grad=True, name=f"{name}.u_n")
        self.bias = Tensor(np.zeros(3 * hidden, dtype=dtype), requires_grad=True, name=f"{name}.bias")

    def parameters(self) -> list[Tensor]:
        return [self.w_x, self.u_rz, self.u_n, self.bias]

    def __call__(self, x: Tensor, reverse: bool = False) -> Tensor:
        H = self.hidden
        B, L, _ = x.shape
        proj = ad.add(ad.matmul(x, self.w_x), self.bias)
        steps = ad.unbind(proj, axis=1)
        order = range(L - 1, -1, -1) if reverse else range(L)
        h = None
        outs: list[Tensor | None] = [None] * L
        for l in order:
            xp = steps[l]
            x_rz, x_n = xp[:, : 2 * H], xp[:, 2 * H:]
            if h is None:
                rz = ad.sigmoid(x_rz)
                z = rz[:, H:]
                n = ad.tanh(x_n)
                h = ad.sub(n, ad.mul(z, n))
            else:
                rz = ad.sigmoid(ad.add(x_rz, ad.matmul(h, self.u_rz)))
                r, z = rz[:, :H], rz[:, H:]
                n = ad.tanh(ad.add(x_n, ad.matmul(ad.mul(r, h), self.u_n)))
                h = ad.add(n, ad.mul(z, ad.sub(h, n)))
            outs[l] = h
        return ad.stack(outs, axis=1)


class BiGRULayer:
    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator, dtype, name: str = "bigru"):
        self.fwd = GRULayer(n_in, hidden, rng, dtype, name=f"{name}.fwd")
        self.bwd = GRULayer(n_in, hidden, rng, dtype, name=f"{name}.bwd")

    def parameters(self) -> list[Tensor]:
        return self.fwd.parameters() + self.bwd.parameters()

    def __call__(self, x: Tensor) -> Tensor:
        return ad.concat([self.fwd(x), self.bwd(x, reverse=True)], axis=-1)


def film(h_in: Tensor, gamma: Tensor, shift: Tensor) -> Tensor:
    """``LayerNorm(h) * (1 + gamma) + shift`` with per-sample ``gamma``/``shift`` of shape ``[B, W]``."""
    B, W = gamma.shape
    hn = ad.layer_norm(h_in)
    g = ad.reshape(ad.add(gamma, 1.0), (B, 1, W))
    s = ad.reshape(shift, (B, 1, W))
    return ad.add(ad.mul(hn, g), s)


def sinusoidal(t: np.ndarray, dim: int, dtype) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    args = 1000.0 * np.asarray(t, dtype=np.float64).reshape(-1, 1) * freqs
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb.astype(dtype)


# -- the full network -----------------------------------------------------------------
@dataclass
class ModelConfig:
    n_num: int
    cat_cards: list[int]
    n_labels: int
    emb_dim: int = 16
    hidden: int = 64
    layers: int = 3
    time_dim: int = 64
    label_dim: int = 16

    @property
    def n_cat(self) -> int:
        return len(self.cat_cards)

    @property
    def input_width(self) -> int:
        return self.n_num + self.n_cat * self.emb_dim + self.label_dim

    @property
    def output_width(self) -> int:
        return self.n_num + sum(self.cat_cards)

    def to_dict(self) -> dict:
        return asdict(self)


def expected_parameter_count(cfg: ModelConfig) -> int:
    """Closed-form learnable parameter count of :class:`DenoiserModel` (excluding
    embeddings and schedules)."""
    H, T = cfg.hidden, cfg.time_dim
    gru = 0
    for i in range(cfg.layers):
        n_in = H if i == 0 else 2 * H
        gru += 2 * (n_in * 3 * H + H * 2 * H + H * H + 3 * H)
    time = (T * T + T) * 2
    film_ = cfg.layers * 2 * (T * 2 * H + 2 * H)
    label = cfg.n_labels * cfg.label_dim
    inp = cfg.input_width * H + H
    head = 2 * H * cfg.output_width + cfg.output_width
    return gru + time + film_ + label + inp + head


class DenoiserModel:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        H, T = cfg.hidden, cfg.time_dim
        self.time_fc1 = Linear(T, T, rng, dtype, name="time.fc1")
        self.time_fc2 = Linear(T, T, rng, dtype, name="time.fc2")
        self.label_embed = Linear(cfg.n_labels, cfg.label_dim, rng, dtype, bias=False, name="label")
        self.input_proj = Linear(cfg.input_width, H, rng, dtype, name="input")
        self.grus = []
        self.film_gamma = []
        self.film_shift = []
        for i in range(cfg.layers):
            n_in = H if i == 0 else 2 * H
            self.grus.append(BiGRULayer(n_in, H, rng, dtype, name=f"gru{i}"))
            self.film_gamma.append(Linear(T, 2 * H, rng, dtype, zero=True, name=f"film{i}.gamma"))
            self.film_shift.append(Linear(T, 2 * H, rng, dtype, zero=True, name=f"film{i}.shift"))
        self.head = Linear(2 * H, cfg.output_width, rng, dtype, name="head")

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        mods = [self.time_fc1, self.time_fc2, self.label_embed, self.input_proj]
        for g, fg, fs in zip(self.grus, self.film_gamma, self.film_shift):
            mods += [g, fg, fs]
        mods.append(self.head)
        out = []
        for m in mods:
            out += [(p.name, p) for p in m.parameters()]
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def time_embedding(self, t: np.ndarray) -> Tensor:
        s = Tensor(sinusoidal(t, self.cfg.time_dim, self.dtype))
        return ad.silu(self.time_fc2(ad.silu(self.time_fc1(s))))

    def film_params(self, temb: Tensor, layer: int) -> tuple[Tensor, Tensor]:
        return self.film_gamma[layer](temb), self.film_shift[layer](temb)

    def bigru_forward(self, h: Tensor, t: np.ndarray) -> Tensor:
        """Stacked BiGRU over projected inputs ``[B, L, H]`` -> ``[B, L, 2H]``."""
        temb = self.time_embedding(t)
        for i, gru in enumerate(self.grus):
            h = gru(h)
            gamma, shift = self.film_params(temb, i)
            h = film(h, gamma, shift)
        return h

    def forward(self, x_num: Tensor, x_emb: Tensor, t: np.ndarray, labels: np.ndarray) -> Tensor:
        """Raw network output ``[B, L, n_num + sum(C)]``.

        ``x_num`` / ``x_emb`` are already input-scaled; ``labels`` is ``[B, K]``
        (one-hot rows or zero rows for the unconditional pass).
        """
        cfg = self.cfg
        B, L, _ = x_num.shape
        if x_num.shape[-1] != cfg.n_num or x_emb.shape != (B, L, cfg.n_cat * cfg.emb_dim):
            raise ValueError(f"input shapes {x_num.shape}, {x_emb.shape} do not match the model")
        labels = np.asarray(labels, dtype=self.dtype)
        if labels.shape != (B, cfg.n_labels):
            raise ValueError(f"label matrix must be [{B}, {cfg.n_labels}], got {labels.shape}")
        lab = ad.broadcast_to(ad.reshape(self.label_embed(Tensor(labels)), (B, 1, cfg.label_dim)),
                              (B, L, cfg.label_dim))
        h = self.input_proj(ad.concat([x_num, x_emb, lab], axis=-1))
        h = self.bigru_forward(h, t)
        return self.head(h)


def one_hot(labels: np.ndarray, k: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label outside [0, {k})")
    out = np.zeros((labels.shape[0], k), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out


def predict(model: DenoiserModel, x_num_t, sigma_num, x_emb_t, sigma_emb, t, labels) -> tuple[Tensor, Tensor]:
    """Preconditioned prediction.

    ``sigma_num`` is ``[B, L, n_num]`` and ``sigma_emb`` is ``[B, L, n_cat * d]``
    (Tensors or arrays). Returns the denoised numerical estimate and the raw
    categorical logits ``[B, L, sum(C)]``.
    """
    x_num_t, x_emb_t = ad.as_tensor(x_num_t), ad.as_tensor(x_emb_t)
    sigma_num, sigma_emb = ad.as_tensor(sigma_num), ad.as_tensor(sigma_emb)
    if sigma_num.shape != x_num_t.shape or sigma_emb.shape != x_emb_t.shape:
        raise ValueError("noise level shapes must match their inputs")
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("diffusion time must lie in [0, 1]")
    out = model.forward(ad.mul(x_num_t, c_in(sigma_num)), ad.mul(x_emb_t, c_in(sigma_emb)), t, labels)
    n = model.cfg.n_num
    raw_num, logits = out[..., :n], out[..., n:]
    x0 = ad.add(ad.mul(x_num_t, c_skip(sigma_num)), ad.mul(raw_num, c_out(sigma_num)))
    return x0, logits


def denoise_numerical(model, x_num_t, sigma_num, x_emb_t, sigma_emb, t, labels) -> Tensor:
    return predict(model, x_num_t, sigma_num, x_emb_t, sigma_emb, t, labels)[0]


def denoise_categorical(model, x_num_t, sigma_num, x_emb_t, sigma_emb, t, labels) -> Tensor:
    return predict(model, x_num_t, sigma_num, x_emb_t, sigma_emb, t, labels)[1]


def split_logits(logits, cards: Sequence[int]) -> list:
    """Per-feature views of the concatenated logits (Tensor or array)."""
    out, lo = [], 0
    for c in cards:
        out.append(logits[..., lo:lo + c])
        lo += c
    return out
