"""Finite-difference verification of every gradient the training loop relies on.

The suite builds a miniature generator (hidden 8, length 4, batch 2), moves all
parameters to a generic random point and compares backprop against central
differences for each parameter tensor, plus a few standalone primitives.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataio import compute_stats, normalize, simulate_toy, toy_manifest
from .embedspace import EmbeddingTable
from .schedule import numerical_schedule, sigma_field
from .state import ModelState
from .training import StepNoise, TrainConfig, compute_losses, total_loss

MINI = {"hidden": 8, "layers": 3, "emb_dim": 4, "time_dim": 8, "label_dim": 4}


@dataclass
class CheckResult:
    name: str
    coords: int
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_err) and self.max_rel_err < self.tol)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name} coords={self.coords} max_rel_err={self.max_rel_err:.3e} tol={self.tol:.0e}"


H = 1e-5
TOL = 1e-4
SINGLE_TOL = 1e-3


def mini_state(dtype=np.float64, seed: int = 0, seq_len: int = 4, batch: int = 2):
    """Miniature model at a perturbed parameter point plus one fixed training step's inputs."""
    rng = np.random.default_rng(seed)
    data, _ = simulate_toy(batch, seq_len, seed)
    manifest = toy_manifest(batch, seq_len, seed)
    state = ModelState.create(manifest, MINI, seed=seed, dtype=dtype)
    for n, p in state.named_parameters():
        scale = 0.3 if n.startswith("sched_") else 0.1
        p.value = np.asarray(p.value + scale * rng.standard_normal(p.shape), dtype=dtype)
    x = normalize(data.numerical, compute_stats(data.numerical)).astype(dtype)
    noise = StepNoise.draw(rng, batch, seq_len, state.cfg.n_num, state.cfg.n_cat * state.cfg.emb_dim, 0.0)
    # moderate noise levels keep the loss well conditioned; one unconditional row
    noise.t = np.linspace(0.3, 0.6, batch)
    noise.drop = np.arange(batch) == 0
    return state, (x, data.categorical.astype(np.int64), data.labels.astype(np.int64), noise)


def _objective(state, x, cat, lab, noise):
    cfg = TrainConfig()

    def fn() -> Tensor:
        ln, le = compute_losses(state, x, cat, lab, noise)
        return total_loss(cfg, ln, le)

    return fn


def check_objective(seed: int = 0) -> list[CheckResult]:
    """Coordinate-wise finite-difference check of the complete training objective, per parameter."""
    state, batch = mini_state(np.float64, seed)
    fn = _objective(state, *batch)
    return [CheckResult(name, p.value.size, ad.grad_check(fn, [p], h=H), TOL) for name, p in state.named_parameters()]


def check_single_precision(seed: int = 0) -> list[CheckResult]:
    """Float32 backprop against float64 backprop at the same point.

    Finite differences cannot resolve single-precision gradients coordinate by
    coordinate, so the production dtype is checked against the double build
    (which the finite-difference suite covers). Error is the relative L2 norm
    per parameter tensor.
    """
    grads = {}
    for dtype in (np.float64, np.float32):
        state, (x, cat, lab, noise) = mini_state(np.float64, seed)
        if dtype == np.float32:
            for _, p in state.named_parameters():
                p.value = p.value.astype(np.float32)
            state.net.dtype = np.float32
        fn = _objective(state, x.astype(dtype), cat, lab, noise)
        fn().backward()
        grads[dtype] = {n: (np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64))
                        for n, p in state.named_parameters()}
    out = []
    for n, g64 in grads[np.float64].items():
        g32 = grads[np.float32][n]
        err = float(np.linalg.norm(g32 - g64) / max(np.linalg.norm(g64), 1e-8))
        out.append(CheckResult(f"float32:{n}", g64.size, err, SINGLE_TOL))
    return out


def check_primitives(seed: int = 0) -> list[CheckResult]:
    dtype, h, tol = np.float64, H, TOL
    rng = np.random.default_rng(seed)
    out = []

    a = Tensor(rng.standard_normal((5, 4)).astype(dtype), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 3)).astype(dtype), requires_grad=True)
    w = rng.standard_normal((5, 3)).astype(dtype)
    out.append(CheckResult("matmul", a.value.size + b.value.size,
                           ad.grad_check(lambda: ad.tsum(ad.mul(ad.matmul(a, b), w)), [a, b], h=h), tol))

    table = EmbeddingTable([3, 2], 4, rng, dtype=dtype)
    probe = [rng.standard_normal((c, 4)).astype(dtype) for c in table.cardinalities]

    def emb_fn():
        parts = [ad.tsum(ad.mul(table.normalized(j), probe[j])) for j in range(2)]
        return ad.add(parts[0], parts[1])

    out.append(CheckResult("embed", sum(p.value.size for p in table.parameters()),
                           ad.grad_check(emb_fn, table.parameters(), h=h), tol))

    sched = numerical_schedule(3, 4, dtype=dtype)
    for p in sched.parameters():
        p.value = np.asarray(p.value + 0.5 * rng.standard_normal(p.shape), dtype=dtype)
    t = np.array([0.2, 0.5, 0.9])
    wt = rng.standard_normal((3, 4, 3)).astype(dtype)
    out.append(CheckResult("schedule", sched.num_parameters(),
                           ad.grad_check(lambda: ad.tsum(ad.mul(ad.log(sigma_field(sched, t)), wt)),
                                         sched.parameters(), h=h), tol))

    x = Tensor(rng.standard_normal((2, 3, 6)).astype(dtype), requires_grad=True)
    wl = rng.standard_normal((2, 3, 6)).astype(dtype)
    out.append(CheckResult("layer_norm", x.value.size,
                           ad.grad_check(lambda: ad.tsum(ad.mul(ad.layer_norm(x), wl)), [x], h=h), tol))

    z = Tensor(rng.standard_normal((4, 5)).astype(dtype), requires_grad=True)
    tgt = rng.integers(0, 5, size=4)
    out.append(CheckResult("softmax_cross_entropy", z.value.size,
                           ad.grad_check(lambda: ad.softmax_cross_entropy(z, tgt)[0], [z], h=h), tol))
    return out


def run_suite(double: bool = True, seed: int = 0) -> list[CheckResult]:
    """Full finite-difference suite in float64 when ``double``; otherwise the
    quick float32-versus-float64 consistency check."""
    if double:
        return check_primitives(seed) + check_objective(seed)
    return check_single_precision(seed)
