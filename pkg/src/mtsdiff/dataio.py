"""Dataset directories, normalisation, imputation and the toy generator.

A dataset directory holds::

    manifest.json   shapes, feature names, cardinalities, optional statistics
    num.f32         little-endian float32, row-major [N, L, F_num]
    cat.u8          uint8 category indices [N, L, F_cat]
    labels.u8       uint8 labels [N]
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np
from filelock import FileLock

FORMAT_VERSION = 1
TARGET_STD = 0.5
MANIFEST = "manifest.json"
BLOBS = ("num.f32", "cat.u8", "labels.u8")


class FormatError(ValueError):
    """Malformed or inconsistent dataset / checkpoint content."""


class IngestionError(FormatError):
    pass


@dataclass
class NormStats:
    mean: list[float]
    std: list[float]

    @property
    def constant(self) -> list[bool]:
        return [s == 0 for s in self.std]


@dataclass
class DatasetManifest:
    n: int
    seq_len: int
    numerical: list[str]
    categorical: list[dict]  # [{"name": ..., "cardinality": ...}]
    label: dict  # {"name": ..., "cardinality": ...}
    normalization: NormStats | None = None
    version: int = FORMAT_VERSION
    seed: int | None = None

    @property
    def cardinalities(self) -> list[int]:
        return [int(c["cardinality"]) for c in self.categorical]

    @property
    def n_labels(self) -> int:
        return int(self.label["cardinality"])

    def validate(self) -> None:
        if self.version != FORMAT_VERSION:
            raise FormatError(f"unsupported dataset format version {self.version}")
        if self.seq_len < 1:
            raise FormatError("seq_len must be >= 1")
        for c in self.categorical + [self.label]:
            if not 2 <= int(c["cardinality"]) <= 255:
                raise FormatError(f"cardinality of {c['name']!r} must be in [2, 255]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["normalization"] = None if self.normalization is None else asdict(self.normalization)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        d = dict(d)
        if d.get("normalization") is not None:
            d["normalization"] = NormStats(**d["normalization"])
        try:
            return cls(**d)
        except TypeError as e:
            raise FormatError(f"bad manifest: {e}") from None


@dataclass
class SequenceBatch:
    numerical: np.ndarray  # [B, L, F_num]
    categorical: np.ndarray  # [B, L, F_cat]
    labels: np.ndarray  # [B]

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, idx) -> "SequenceBatch":
        return SequenceBatch(self.numerical[idx], self.categorical[idx], self.labels[idx])


def _check_batch(manifest: DatasetManifest, batch: SequenceBatch) -> None:
    n, L = manifest.n, manifest.seq_len
    want = {
        "numerical": (n, L, len(manifest.numerical)),
        "categorical": (n, L, len(manifest.categorical)),
        "labels": (n,),
    }
    for key, shape in want.items():
        got = getattr(batch, key).shape
        if got != shape:
            raise FormatError(f"{key} has shape {got}, manifest expects {shape}")
    if not np.all(np.isfinite(batch.numerical)):
        raise FormatError("numerical data contains non-finite entries")
    _check_indices(batch.categorical, manifest.cardinalities)
    if batch.labels.size and (batch.labels.min() < 0 or batch.labels.max() >= manifest.n_labels):
        i = int(np.argmax((batch.labels < 0) | (batch.labels >= manifest.n_labels)))
        raise FormatError(f"label {int(batch.labels[i])} at sample {i} is >= {manifest.n_labels}")


def _check_indices(cat: np.ndarray, cards: Sequence[int]) -> None:
    for j, c in enumerate(cards):
        bad = np.argwhere((cat[..., j] < 0) | (cat[..., j] >= c))
        if bad.size:
            s, t = bad[0]
            raise FormatError(
                f"category {int(cat[s, t, j])} >= cardinality {c} at sample={s} time={t} feature={j}"
            )


def write_dataset(path, manifest: DatasetManifest, batch: SequenceBatch) -> None:
    manifest.validate()
    _check_batch(manifest, batch)
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with FileLock(str(path) + ".lock"):
        (path / MANIFEST).write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
        (path / "num.f32").write_bytes(np.ascontiguousarray(batch.numerical, dtype="<f4").tobytes())
        (path / "cat.u8").write_bytes(np.ascontiguousarray(batch.categorical, dtype=np.uint8).tobytes())
        (path / "labels.u8").write_bytes(np.ascontiguousarray(batch.labels, dtype=np.uint8).tobytes())
    try:
        os.remove(str(path) + ".lock")
    except FileNotFoundError:
        pass


def read_dataset(path) -> tuple[DatasetManifest, SequenceBatch]:
    path = Path(path)
    mpath = path / MANIFEST
    if not mpath.exists():
        raise FormatError(f"no {MANIFEST} in {path}")
    try:
        manifest = DatasetManifest.from_dict(json.loads(mpath.read_text()))
    except json.JSONDecodeError as e:
        raise FormatError(f"{MANIFEST} is not valid JSON: {e}") from None
    manifest.validate()
    n, L = manifest.n, manifest.seq_len
    specs = {
        "num.f32": ("<f4", (n, L, len(manifest.numerical))),
        "cat.u8": (np.uint8, (n, L, len(manifest.categorical))),
        "labels.u8": (np.uint8, (n,)),
    }
    arrays = {}
    for blob, (dtype, shape) in specs.items():
        bpath = path / blob
        if not bpath.exists():
            raise FormatError(f"missing blob {blob}")
        raw = bpath.read_bytes()
        want = int(np.prod(shape)) * np.dtype(dtype).itemsize
        if len(raw) != want:
            raise FormatError(f"blob {blob} has {len(raw)} bytes, expected {want}")
        arrays[blob] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    batch = SequenceBatch(arrays["num.f32"].astype(np.float32), arrays["cat.u8"], arrays["labels.u8"])
    _check_indices(batch.categorical, manifest.cardinalities)
    if batch.labels.size and batch.labels.max() >= manifest.n_labels:
        i = int(np.argmax(batch.labels >= manifest.n_labels))
        raise FormatError(f"label {int(batch.labels[i])} at sample {i} is >= {manifest.n_labels}")
    return manifest, batch


def fingerprint(batch: SequenceBatch) -> str:
    h = hashlib.sha256()
    for a in (batch.numerical.astype("<f4"), batch.categorical.astype(np.uint8), batch.labels.astype(np.uint8)):
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()[:16]


# -- normalisation ------------------------------------------------------------------
def compute_stats(numerical: np.ndarray) -> NormStats:
    x = numerical.reshape(-1, numerical.shape[-1]).astype(np.float64)
    return NormStats(mean=x.mean(axis=0).tolist(), std=x.std(axis=0).tolist())


def _scale(stats: NormStats) -> np.ndarray:
    std = np.asarray(stats.std, dtype=np.float64)
    return np.where(std > 0, TARGET_STD / np.where(std > 0, std, 1.0), 0.0)


def normalize(numerical: np.ndarray, stats: NormStats) -> np.ndarray:
    """``(x - mean) * 0.5 / std`` per feature; constant features map to 0."""
    x = np.asarray(numerical, dtype=np.float64)
    return (x - np.asarray(stats.mean)) * _scale(stats)


def denormalize(numerical: np.ndarray, stats: NormStats) -> np.ndarray:
    x = np.asarray(numerical, dtype=np.float64)
    return x * (np.asarray(stats.std, dtype=np.float64) / TARGET_STD) + np.asarray(stats.mean)


# -- imputation ------------------------------------------------------------------
def impute(raw: np.ndarray, names: Sequence[str] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Hierarchical fill of non-finite entries in ``[N, L, F]``.

    Order: last observation carried forward, then the sample's own mean of
    observed values, then the dataset-wide feature mean. Returns the filled
    array and an observed-mask (1 = observed) of the same shape as uint8.
    """
    raw = np.asarray(raw, dtype=np.float64)
    x = raw.copy()
    if x.ndim == 1:
        filled, mask = impute(x[None, :, None], names)
        return filled[0, :, 0], mask[0, :, 0]
    observed = np.isfinite(x)
    N, L, F = x.shape
    for f in range(F):
        if not observed[..., f].any():
            name = names[f] if names is not None else str(f)
            raise IngestionError(f"feature {name!r} has no observed values in the dataset")
    # LOCF: index of the most recent observation at or before each step
    pos = np.where(observed, np.arange(L)[None, :, None], -1)
    last = np.maximum.accumulate(pos, axis=1)
    has_prev = last >= 0
    take = np.take_along_axis(x, np.maximum(last, 0), axis=1)
    x = np.where(has_prev, take, np.nan)
    # per-sample mean of observed entries
    cnt = observed.sum(axis=1, keepdims=True)
    tot = np.where(observed, raw, 0.0).sum(axis=1, keepdims=True)
    sample_mean = np.where(cnt > 0, tot / np.maximum(cnt, 1), np.nan)
    x = np.where(np.isnan(x), np.broadcast_to(sample_mean, x.shape), x)
    # dataset mean
    ds_mean = np.array([raw[..., f][observed[..., f]].mean() for f in range(F)])
    x = np.where(np.isnan(x), np.broadcast_to(ds_mean, x.shape), x)
    return x, observed.astype(np.uint8)


# -- toy generator ----------------------------------------------------------------
TOY_STAY = 0.85
TOY_MEANS = np.array([[-1.0, 0.0, 1.0], [1.0, 0.0, -1.0], [0.0, 1.0, -1.0]])  # [feature, regime]
TOY_AR = 0.8
TOY_NOISE = 0.1
TOY_OBS_CORRECT = 0.9
TOY_MASK_P = np.array([0.95, 0.8, 0.6])


def simulate_toy(n: int, seq_len: int = 24, seed: int = 0) -> tuple[SequenceBatch, np.ndarray]:
    """Regime-switching mixed-type sequences; also returns the hidden regimes ``[n, L]``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    L = seq_len
    trans = np.full((3, 3), (1 - TOY_STAY) / 2)
    np.fill_diagonal(trans, TOY_STAY)
    cum = trans.cumsum(axis=1)
    regimes = np.empty((n, L), dtype=np.int64)
    regimes[:, 0] = rng.integers(0, 3, n)
    for t in range(1, L):
        u = rng.random(n)
        regimes[:, t] = np.minimum((u[:, None] > cum[regimes[:, t - 1]]).sum(axis=1), 2)
    mu = TOY_MEANS.T[regimes]  # [n, L, 3]
    x = np.empty((n, L, 3))
    stat_sd = TOY_NOISE / np.sqrt(1 - TOY_AR**2)
    x[:, 0] = mu[:, 0] + stat_sd * rng.standard_normal((n, 3))
    for t in range(1, L):
        x[:, t] = mu[:, t] + TOY_AR * (x[:, t - 1] - mu[:, t]) + TOY_NOISE * rng.standard_normal((n, 3))
    correct = rng.random((n, L)) < TOY_OBS_CORRECT
    offset = rng.integers(1, 3, (n, L))  # uniform over the two other states
    obs = np.where(correct, regimes, (regimes + offset) % 3)
    mask = (rng.random((n, L)) < TOY_MASK_P[regimes]).astype(np.int64)
    labels = ((regimes == 2).mean(axis=1) > 1 / 3).astype(np.uint8)
    cat = np.stack([obs, mask], axis=-1).astype(np.uint8)
    return SequenceBatch(x.astype(np.float32), cat, labels), regimes


def toy_manifest(n: int, seq_len: int, seed: int) -> DatasetManifest:
    return DatasetManifest(
        n=n,
        seq_len=seq_len,
        numerical=["x0", "x1", "x2"],
        categorical=[{"name": "regime_obs", "cardinality": 3}, {"name": "observed", "cardinality": 2}],
        label={"name": "label", "cardinality": 2},
        seed=seed,
    )


def gen_toy(path, n: int, seq_len: int = 24, seed: int = 0) -> tuple[DatasetManifest, SequenceBatch]:
    batch, _ = simulate_toy(n, seq_len, seed)
    manifest = toy_manifest(n, seq_len, seed)
    write_dataset(path, manifest, batch)
    return manifest, batch


# -- CSV ingestion ------------------------------------------------------------------
def ingest_csv(csv_path, mapping_path) -> tuple[DatasetManifest, SequenceBatch]:
    """Long-format rows ``(sample_id, time_index, feature, value)`` -> dataset.

    The JSON mapping file gives ``seq_len``, the ``numerical`` feature names,
    ``categorical`` (name -> cardinality), ``label`` (``name``, ``cardinality``)
    and optionally ``columns`` renaming the four CSV columns. Missing numerical
    entries are imputed and one observed-mask categorical is appended per
    numerical feature.
    """
    mapping = json.loads(Path(mapping_path).read_text())
    cols = {"sample_id": "sample_id", "time_index": "time_index", "feature": "feature", "value": "value"}
    cols.update(mapping.get("columns", {}))
    L = int(mapping["seq_len"])
    num_names = list(mapping["numerical"])
    cat_map = dict(mapping.get("categorical", {}))
    label = mapping["label"]
    num_idx = {n: i for i, n in enumerate(num_names)}
    cat_idx = {n: i for i, n in enumerate(cat_map)}

    samples: dict[str, int] = {}
    rows = []
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in cols.values() if c not in (reader.fieldnames or [])]
        if missing:
            raise IngestionError(f"CSV lacks columns {missing}")
        for r in reader:
            sid = r[cols["sample_id"]]
            samples.setdefault(sid, len(samples))
            rows.append((samples[sid], r[cols["time_index"]], r[cols["feature"]], r[cols["value"]]))
    n = len(samples)
    num = np.full((n, L, len(num_names)), np.nan)
    cat = np.full((n, L, len(cat_map)), -1, dtype=np.int64)
    labels = np.full(n, -1, dtype=np.int64)
    for s, t, feat, val in rows:
        if feat == label["name"]:
            labels[s] = int(float(val))
            continue
        t = int(t)
        if not 0 <= t < L:
            raise IngestionError(f"time_index {t} outside [0, {L})")
        if feat in num_idx:
            num[s, t, num_idx[feat]] = float(val) if val not in ("", "nan", "NaN") else np.nan
        elif feat in cat_idx:
            cat[s, t, cat_idx[feat]] = int(float(val))
        else:
            raise IngestionError(f"unknown feature {feat!r}")
    if (labels < 0).any():
        raise IngestionError(f"sample {int(np.argmax(labels < 0))} has no label row")
    if (cat < 0).any():
        s, t, j = np.argwhere(cat < 0)[0]
        raise IngestionError(f"categorical {list(cat_map)[j]!r} missing at sample={s} time={t}")
    filled, mask = impute(num, num_names)
    cat_all = np.concatenate([cat, mask.astype(np.int64)], axis=-1)
    categorical = [{"name": k, "cardinality": int(v)} for k, v in cat_map.items()]
    categorical += [{"name": f"{k}_observed", "cardinality": 2} for k in num_names]
    manifest = DatasetManifest(
        n=n, seq_len=L, numerical=num_names, categorical=categorical,
        label={"name": label["name"], "cardinality": int(label["cardinality"])},
    )
    manifest.validate()
    _check_indices(cat_all, manifest.cardinalities)
    batch = SequenceBatch(filled.astype(np.float32), cat_all.astype(np.uint8), labels.astype(np.uint8))
    return manifest, batch
