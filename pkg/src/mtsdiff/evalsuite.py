"""Fidelity, discriminability and downstream-utility metrics for synthetic sequences.

Numerical arrays are ``[N, L, F]``; categorical arrays are ``[N, L, F]`` of
integer indices. Every metric accepts an optional ``info`` dict that it fills
with the configuration it actually used.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.stats import rankdata

from . import autodiff as ad
from .dataio import SequenceBatch, fingerprint
from .denoiser import GRULayer, Linear

log = logging.getLogger(__name__)

FIDELITY = ("mmd", "corr_mae", "acf_mse", "dtw", "tvd", "trans_dist")
DEFAULT_METRICS = FIDELITY + ("c2st_logistic",)
ALL_METRICS = DEFAULT_METRICS + ("c2st_gru", "tstr", "trtr")


def _fill(info: dict | None, **kv) -> None:
    if info is not None:
        info.update(kv)


# -- numerical fidelity --------------------------------------------------------------
def median_bandwidth(z: np.ndarray) -> float:
    """Median pairwise Euclidean distance over distinct pairs; 1.0 if that is zero."""
    d2 = _sq_dists(z, z)
    iu = np.triu_indices(len(z), k=1)
    med = float(np.sqrt(np.median(d2[iu]))) if len(iu[0]) else 0.0
    return med if med > 0 else 1.0


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aa = np.sum(a * a, axis=1)[:, None]
    bb = np.sum(b * b, axis=1)[None, :]
    return np.maximum(aa + bb - 2.0 * a @ b.T, 0.0)


def mmd2_rbf(x: np.ndarray, y: np.ndarray, bandwidth: float | None = None) -> tuple[float, float]:
    """Biased squared MMD with kernel ``exp(-|a-b|^2 / (2 h^2))``.

    Rows are observations. ``h`` defaults to the median heuristic on the pooled
    sample. Returns ``(mmd2, h)``.
    """
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(y, dtype=np.float64).reshape(len(y), -1)
    if len(x) == 0 or len(y) == 0:
        raise ValueError("mmd needs non-empty samples")
    h = median_bandwidth(np.concatenate([x, y])) if bandwidth is None else float(bandwidth)
    g = 1.0 / (2.0 * h * h)
    kxx = np.exp(-g * _sq_dists(x, x)).mean()
    kyy = np.exp(-g * _sq_dists(y, y)).mean()
    kxy = np.exp(-g * _sq_dists(x, y)).mean()
    return max(float(kxx + kyy - 2.0 * kxy), 0.0), h


def _paired_subsample(n_a: int, n_b: int, k: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    # identical generators: equal-size inputs get identical index sets
    ia = np.random.default_rng(seed).permutation(n_a)[:k]
    ib = np.random.default_rng(seed).permutation(n_b)[:k]
    return ia, ib


def mmd(real: np.ndarray, synth: np.ndarray, max_samples: int = 1000, seed: int = 0,
        info: dict | None = None) -> float:
    """Square root of the per-feature squared MMD averaged over features.

    Each feature's sequence is one ``L``-dimensional observation.
    """
    real = np.asarray(real, dtype=np.float64)
    synth = np.asarray(synth, dtype=np.float64)
    if len(real) < 2 or len(synth) < 2:
        raise ValueError("mmd needs at least 2 samples per side")
    if real.shape[1:] != synth.shape[1:]:
        raise ValueError(f"shape mismatch {real.shape[1:]} vs {synth.shape[1:]}")
    k = min(max_samples, len(real), len(synth))
    ia, ib = _paired_subsample(len(real), len(synth), k, seed)
    vals, hs = [], []
    for f in range(real.shape[2]):
        m2, h = mmd2_rbf(real[ia, :, f], synth[ib, :, f])
        vals.append(m2)
        hs.append(h)
    _fill(info, kernel="rbf", bandwidth="median pooled", bandwidths=hs, per_feature_mmd2=vals,
          n_per_side=k, seed=seed, estimator="biased V-statistic")
    return float(np.sqrt(np.mean(vals)))


def _corr(x: np.ndarray, keep: np.ndarray) -> np.ndarray:
    xs = x[:, keep]
    xc = xs - xs.mean(axis=0)
    sd = np.sqrt((xc * xc).mean(axis=0))
    return (xc.T @ xc) / len(xc) / np.outer(sd, sd)


def corr_mae(real: np.ndarray, synth: np.ndarray, info: dict | None = None) -> float:
    """Mean absolute difference of the pooled Pearson correlation matrices (strict upper triangle)."""
    F = real.shape[-1]
    if F < 2:
        raise ValueError("corr_mae needs at least 2 numerical features")
    r = np.asarray(real, dtype=np.float64).reshape(-1, F)
    s = np.asarray(synth, dtype=np.float64).reshape(-1, F)
    keep = (r.std(axis=0) > 0) & (s.std(axis=0) > 0)
    skipped = [int(i) for i in np.flatnonzero(~keep)]
    _fill(info, pooled="samples x timesteps", skipped_features=skipped)
    if keep.sum() < 2:
        return 0.0
    iu = np.triu_indices(int(keep.sum()), k=1)
    return float(np.mean(np.abs(_corr(r, keep)[iu] - _corr(s, keep)[iu])))


def mean_acf(x: np.ndarray, max_lag: int, info: dict | None = None) -> np.ndarray:
    """Sample-averaged autocorrelation at lags ``1..max_lag``; returns ``[F, max_lag]``.

    Constant sequences have no autocorrelation and are left out of the average.
    """
    x = np.asarray(x, dtype=np.float64)
    N, L, F = x.shape
    if L < 2 or not 1 <= max_lag < L:
        raise ValueError(f"need 1 <= max_lag < L (L={L}, max_lag={max_lag})")
    xc = x - x.mean(axis=1, keepdims=True)
    denom = np.sum(xc * xc, axis=1)  # [N, F]
    ok = denom > 1e-12 * np.maximum(1.0, np.sum(x * x, axis=1))
    safe = np.where(ok, denom, 1.0)
    out = np.zeros((F, max_lag))
    for k in range(1, max_lag + 1):
        r = np.sum(xc[:, :-k] * xc[:, k:], axis=1) / safe  # [N, F]
        cnt = ok.sum(axis=0)
        out[:, k - 1] = np.where(cnt > 0, np.sum(np.where(ok, r, 0.0), axis=0) / np.maximum(cnt, 1), 0.0)
    _fill(info, constant_sequences=int((~ok).sum()))
    return out


def acf_mse(real: np.ndarray, synth: np.ndarray, max_lag: int | None = None, info: dict | None = None) -> float:
    L = real.shape[1]
    if L < 2:
        raise ValueError("acf_mse needs L > 1")
    K = min(10, L - 1) if max_lag is None else max_lag
    ir, is_ = {}, {}
    a = mean_acf(real, K, ir)
    b = mean_acf(synth, K, is_)
    if ir["constant_sequences"] or is_["constant_sequences"]:
        log.info("acf: skipped %d real and %d synthetic constant sequences",
                 ir["constant_sequences"], is_["constant_sequences"])
    _fill(info, max_lag=K, constant_real=ir["constant_sequences"], constant_synth=is_["constant_sequences"])
    return float(np.mean((a - b) ** 2))


def dtw_batch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """DTW with ``|a_i - b_j|`` cost and steps (1,0), (0,1), (1,1) for rows of ``a [M, La]`` and ``b [M, Lb]``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 1:
        a, b = a[None], b[None]
    if a.shape[-1] == 0 or b.shape[-1] == 0:
        raise ValueError("dtw of an empty sequence")
    M, La = a.shape
    Lb = b.shape[1]
    cost = np.abs(a[:, :, None] - b[:, None, :])
    D = np.full((M, La + 1, Lb + 1), np.inf)
    D[:, 0, 0] = 0.0
    for i in range(1, La + 1):
        prev = D[:, i - 1]
        row = D[:, i]
        diag_up = np.minimum(prev[:, :-1], prev[:, 1:])
        for j in range(1, Lb + 1):
            row[:, j] = cost[:, i - 1, j - 1] + np.minimum(diag_up[:, j - 1], row[:, j - 1])
    return D[:, La, Lb]


def dtw_distance(a, b) -> float:
    return float(dtw_batch(np.asarray(a)[None], np.asarray(b)[None])[0])


def dtw(real: np.ndarray, synth: np.ndarray, pairs: int = 200, seed: int = 0, info: dict | None = None) -> float:
    """Mean per-feature DTW over ``pairs`` seeded random real/synthetic pairings."""
    real = np.asarray(real, dtype=np.float64)
    synth = np.asarray(synth, dtype=np.float64)
    if real.shape[1] == 0 or synth.shape[1] == 0:
        raise ValueError("dtw of an empty sequence")
    ia = np.random.default_rng(seed).integers(len(real), size=pairs)
    ib = np.random.default_rng(seed).integers(len(synth), size=pairs)
    F = real.shape[2]
    a = real[ia].transpose(0, 2, 1).reshape(pairs * F, -1)
    b = synth[ib].transpose(0, 2, 1).reshape(pairs * F, -1)
    _fill(info, pairs=pairs, seed=seed, pairing="seeded random", local_cost="absolute difference")
    return float(dtw_batch(a, b).mean())


# -- categorical fidelity ----------------------------------------------------------------
def _freqs(x: np.ndarray, card: int) -> np.ndarray:
    """Category frequencies per timestep: ``[N, L] -> [L, card]``."""
    out = np.stack([(x == k).mean(axis=0) for k in range(card)], axis=-1)
    return out


def tvd(real: np.ndarray, synth: np.ndarray, cards: Sequence[int], info: dict | None = None) -> float:
    """Per-feature, per-timestep total variation distance of the marginals, averaged."""
    vals = []
    for j, c in enumerate(cards):
        p = _freqs(real[..., j], c)
        q = _freqs(synth[..., j], c)
        vals.append(0.5 * np.abs(p - q).sum(axis=-1).mean())
    _fill(info, per_feature=[float(v) for v in vals])
    return float(np.mean(vals)) if vals else 0.0


def transition_counts(x: np.ndarray, card: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64)
    src = x[:, :-1].ravel()
    dst = x[:, 1:].ravel()
    return np.bincount(src * card + dst, minlength=card * card).reshape(card, card).astype(np.float64)


def trans_dist(real: np.ndarray, synth: np.ndarray, cards: Sequence[int], info: dict | None = None) -> float:
    """Occupancy-weighted row TVD between one-step transition matrices.

    Weights come from the real side only, so the metric is not symmetric. A
    state seen on one side but never left on the other counts with its full
    weight.
    """
    if real.shape[1] < 2:
        raise ValueError("trans_dist needs L > 1")
    vals, unobserved = [], []
    for j, c in enumerate(cards):
        cr = transition_counts(real[..., j], c)
        cs = transition_counts(synth[..., j], c)
        nr, ns = cr.sum(axis=1), cs.sum(axis=1)
        occ = nr / max(nr.sum(), 1.0)
        d = 0.0
        for k in range(c):
            if nr[k] == 0 and ns[k] == 0:
                continue
            if nr[k] == 0 or ns[k] == 0:
                unobserved.append([j, k])
                d += occ[k]
                continue
            d += occ[k] * 0.5 * np.abs(cr[k] / nr[k] - cs[k] / ns[k]).sum()
        vals.append(d)
    _fill(info, per_feature=[float(v) for v in vals], one_sided_rows=unobserved, weights="real occupancy",
          symmetric=False)
    return float(np.mean(vals)) if vals else 0.0


# -- classifiers --------------------------------------------------------------------------
def auc(scores: np.ndarray, y: np.ndarray) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties count half)."""
    y = np.asarray(y).astype(bool)
    n1, n0 = int(y.sum()), int((~y).sum())
    if n1 == 0 or n0 == 0:
        raise ValueError("auc needs both classes")
    r = rankdata(scores)
    return float((r[y].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


@dataclass
class Featurizer:
    """Standardises numerical channels and one-hot encodes categoricals."""

    mean: np.ndarray
    std: np.ndarray
    cards: list[int]

    @classmethod
    def fit(cls, batch: SequenceBatch, cards: Sequence[int]) -> "Featurizer":
        x = np.asarray(batch.numerical, dtype=np.float64)
        F = x.shape[-1]
        flat = x.reshape(-1, F)
        sd = flat.std(axis=0)
        return cls(flat.mean(axis=0), np.where(sd > 0, sd, 1.0), list(cards))

    def sequences(self, batch: SequenceBatch) -> np.ndarray:
        """``[N, L, F_num + sum(C)]``."""
        parts = [(np.asarray(batch.numerical, dtype=np.float64) - self.mean) / self.std]
        cat = np.asarray(batch.categorical, dtype=np.int64)
        for j, c in enumerate(self.cards):
            parts.append(np.eye(c)[cat[..., j]])
        return np.concatenate(parts, axis=-1)

    def flat(self, batch: SequenceBatch) -> np.ndarray:
        s = self.sequences(batch)
        return s.reshape(len(s), -1)


def fit_logistic(x: np.ndarray, y: np.ndarray, l2: float = 1e-2) -> np.ndarray:
    """L2-regularised logistic regression; returns ``[w..., b]``."""
    n, d = x.shape
    y = np.asarray(y, dtype=np.float64)

    def fg(wb):
        w, b = wb[:d], wb[d]
        z = x @ w + b
        loss = np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * w @ w
        r = (0.5 * (1.0 + np.tanh(0.5 * z)) - y) / n
        return loss, np.concatenate([x.T @ r + l2 * w, [r.sum()]])

    res = minimize(fg, np.zeros(d + 1), jac=True, method="L-BFGS-B", options={"maxiter": 500})
    return res.x


def logistic_scores(wb: np.ndarray, x: np.ndarray) -> np.ndarray:
    return x @ wb[:-1] + wb[-1]


@dataclass
class GRUClassifierConfig:
    hidden: int = 32
    epochs: int = 15
    batch_size: int = 128
    learning_rate: float = 3e-3


class GRUClassifier:
    """One-direction GRU, mean-pooled over time, linear softmax head."""

    def __init__(self, n_in: int, n_classes: int, cfg: GRUClassifierConfig, seed: int):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.n_classes = n_classes
        self.gru = GRULayer(n_in, cfg.hidden, rng, np.float32, name="clf.gru")
        self.head = Linear(cfg.hidden, n_classes, rng, np.float32, name="clf.head")
        self.rng = rng

    def parameters(self):
        return self.gru.parameters() + self.head.parameters()

    def logits(self, x: np.ndarray) -> ad.Tensor:
        h = self.gru(ad.Tensor(np.asarray(x, dtype=np.float32)))
        return self.head(ad.mean(h, axis=1))

    def fit(self, x: np.ndarray, y: np.ndarray) -> "GRUClassifier":
        from .training import Adam

        opt = Adam(self.parameters(), lr=self.cfg.learning_rate)
        n = len(x)
        for _ in range(self.cfg.epochs):
            perm = self.rng.permutation(n)
            for lo in range(0, n, self.cfg.batch_size):
                idx = perm[lo:lo + self.cfg.batch_size]
                loss, _ = ad.softmax_cross_entropy(self.logits(x[idx]), y[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
        return self

    def predict_proba(self, x: np.ndarray, chunk: int = 1024) -> np.ndarray:
        out = []
        with ad.no_grad():
            for lo in range(0, len(x), chunk):
                out.append(ad.softmax_np(self.logits(x[lo:lo + chunk]).value.astype(np.float64)))
        return np.concatenate(out)


def _class_auc(proba: np.ndarray, y: np.ndarray) -> float:
    """Binary AUC of class 1, or macro one-vs-rest over the classes present."""
    if proba.shape[1] == 2:
        return auc(proba[:, 1], y == 1)
    present = [k for k in range(proba.shape[1]) if 0 < (y == k).sum() < len(y)]
    return float(np.mean([auc(proba[:, k], y == k) for k in present]))


def _split_halves(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    return perm[: n // 2], perm[n // 2:]


def c2st(real: SequenceBatch, synth: SequenceBatch, cards: Sequence[int], discriminator: str = "logistic",
         seeds: Sequence[int] = range(5), max_samples: int = 2000, gru: GRUClassifierConfig | None = None,
         info: dict | None = None) -> float:
    """Held-out AUC of a real-vs-synthetic discriminator, averaged over seeds.

    Both sides are subsampled to the same size and split in half with the same
    permutation, so each half is balanced.
    """
    if discriminator not in ("logistic", "gru"):
        raise ValueError(f"unknown discriminator {discriminator!r}")
    n = min(len(real), len(synth), max_samples)
    if n < 4:
        raise ValueError("c2st needs at least 4 samples per side")
    gru = gru or GRUClassifierConfig()
    aucs = []
    for s in seeds:
        ir, is_ = _paired_subsample(len(real), len(synth), n, 1000 + s)
        r, sy = real.subset(ir), synth.subset(is_)
        tr, te = _split_halves(n, np.random.default_rng(s))
        feat = Featurizer.fit(r.subset(tr), cards)
        if discriminator == "logistic":
            xr, xs = feat.flat(r), feat.flat(sy)
        else:
            xr, xs = feat.sequences(r), feat.sequences(sy)
        x_tr = np.concatenate([xr[tr], xs[tr]])
        y_tr = np.concatenate([np.ones(len(tr), np.int64), np.zeros(len(tr), np.int64)])
        x_te = np.concatenate([xr[te], xs[te]])
        y_te = np.concatenate([np.ones(len(te), np.int64), np.zeros(len(te), np.int64)])
        if discriminator == "logistic":
            score = logistic_scores(fit_logistic(x_tr, y_tr), x_te)
        else:
            score = GRUClassifier(x_tr.shape[-1], 2, gru, s).fit(x_tr, y_tr).predict_proba(x_te)[:, 1]
        aucs.append(auc(score, y_te))
    meta = dict(discriminator=discriminator, seeds=list(seeds), n_per_side=n, per_seed=aucs,
                std=float(np.std(aucs)), split="half/half, paired")
    if discriminator == "gru":
        meta["gru"] = vars(gru).copy()
    else:
        meta["l2"] = 1e-2
    _fill(info, **meta)
    return float(np.mean(aucs))


def tstr(train: SequenceBatch, test_real: SequenceBatch, cards: Sequence[int], n_labels: int = 2,
         seeds: Sequence[int] = range(5), gru: GRUClassifierConfig | None = None,
         info: dict | None = None) -> float:
    """Train a GRU classifier on ``train`` and report its AUC on ``test_real``.

    Synthetic ``train`` gives TSTR; real ``train`` gives the TRTR baseline.
    """
    y = np.asarray(train.labels, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise ValueError("training labels contain a single class")
    yt = np.asarray(test_real.labels, dtype=np.int64)
    gru = gru or GRUClassifierConfig()
    feat = Featurizer.fit(train, cards)
    x = feat.sequences(train)
    xt = feat.sequences(test_real)
    aucs = []
    for s in seeds:
        clf = GRUClassifier(x.shape[-1], n_labels, gru, s).fit(x, y)
        aucs.append(_class_auc(clf.predict_proba(xt), yt))
    _fill(info, classifier="gru", gru=vars(gru).copy(), seeds=list(seeds), per_seed=aucs,
          std=float(np.std(aucs)), n_train=len(train), n_test=len(test_real))
    return float(np.mean(aucs))


# -- report ---------------------------------------------------------------------------------
@dataclass
class EvalReport:
    metrics: dict[str, float] = field(default_factory=dict)
    meta: dict[str, dict] = field(default_factory=dict)
    fingerprints: dict[str, str] = field(default_factory=dict)
    seed: int = 0

    def to_dict(self) -> dict:
        return {"metrics": self.metrics, "meta": self.meta, "fingerprints": self.fingerprints, "seed": self.seed}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def evaluate(real: SequenceBatch, synth: SequenceBatch, cards: Sequence[int], n_labels: int = 2,
             metrics: Sequence[str] = DEFAULT_METRICS, seed: int = 0, real_test: SequenceBatch | None = None,
             n_seeds: int = 5, gru: GRUClassifierConfig | None = None) -> EvalReport:
    unknown = sorted(set(metrics) - set(ALL_METRICS))
    if unknown:
        raise ValueError(f"unknown metrics {unknown}; choose from {list(ALL_METRICS)}")
    if any(m in ("tstr", "trtr") for m in metrics) and real_test is None:
        raise ValueError("tstr/trtr need a held-out real test set")
    rep = EvalReport(seed=seed)
    rep.fingerprints = {"real": fingerprint(real), "synth": fingerprint(synth)}
    if real_test is not None:
        rep.fingerprints["real_test"] = fingerprint(real_test)
    seeds = [seed + i for i in range(n_seeds)]
    rn, sn = real.numerical, synth.numerical
    rc, sc = real.categorical, synth.categorical
    runners = {
        "mmd": lambda i: mmd(rn, sn, seed=seed, info=i),
        "corr_mae": lambda i: corr_mae(rn, sn, info=i),
        "acf_mse": lambda i: acf_mse(rn, sn, info=i),
        "dtw": lambda i: dtw(rn, sn, seed=seed, info=i),
        "tvd": lambda i: tvd(rc, sc, cards, info=i),
        "trans_dist": lambda i: trans_dist(rc, sc, cards, info=i),
        "c2st_logistic": lambda i: c2st(real, synth, cards, "logistic", seeds, info=i),
        "c2st_gru": lambda i: c2st(real, synth, cards, "gru", seeds, gru=gru, info=i),
        "tstr": lambda i: tstr(synth, real_test, cards, n_labels, seeds, gru=gru, info=i),
        "trtr": lambda i: tstr(real, real_test, cards, n_labels, seeds, gru=gru, info=i),
    }
    for name in metrics:
        info: dict = {}
        t0 = time.monotonic()
        rep.metrics[name] = runners[name](info)
        info["seconds"] = round(time.monotonic() - t0, 3)
        rep.meta[name] = info
        log.info("%s = %.6g", name, rep.metrics[name])
    return rep
