"""Everything a trained generator needs: network, embeddings, schedules, EMA shadows."""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .dataio import DatasetManifest, NormStats
from .denoiser import DenoiserModel, ModelConfig
from .embedspace import EmbeddingTable
from .schedule import ScheduleParams, embedding_schedule, numerical_schedule


@dataclass
class ModelState:
    cfg: ModelConfig
    seq_len: int
    net: DenoiserModel
    embeddings: EmbeddingTable
    sched_num: ScheduleParams
    sched_emb: ScheduleParams
    data_manifest: dict
    stats: NormStats | None = None
    label_freqs: list[float] | None = None
    step: int = 0
    ema: dict[str, np.ndarray] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @classmethod
    def create(cls, manifest: DatasetManifest, cfg_overrides: dict | None = None, seed: int = 0,
               dtype=np.float32) -> "ModelState":
        """Fresh model for ``manifest``. The label rides along as the last categorical channel."""
        cfg = ModelConfig(
            n_num=len(manifest.numerical),
            cat_cards=manifest.cardinalities + [manifest.n_labels],
            n_labels=manifest.n_labels,
            **(cfg_overrides or {}),
        )
        return cls.from_config(cfg, manifest.seq_len, manifest.to_dict(), seed=seed, dtype=dtype)

    @classmethod
    def from_config(cls, cfg: ModelConfig, seq_len: int, data_manifest: dict, seed: int = 0,
                    dtype=np.float32) -> "ModelState":
        rng = np.random.default_rng(seed)
        net = DenoiserModel(cfg, rng, dtype=dtype)
        emb = EmbeddingTable(cfg.cat_cards, cfg.emb_dim, rng, dtype=dtype)
        state = cls(
            cfg=cfg,
            seq_len=seq_len,
            net=net,
            embeddings=emb,
            sched_num=numerical_schedule(cfg.n_num, seq_len, dtype=dtype),
            sched_emb=embedding_schedule(cfg.n_cat, seq_len, dtype=dtype),
            data_manifest=data_manifest,
        )
        state.reset_ema()
        return state

    @property
    def dtype(self):
        return self.net.dtype

    @property
    def n_data_cat(self) -> int:
        return self.cfg.n_cat - 1

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [(f"net.{n}", p) for n, p in self.net.named_parameters()]
        out += [(f"emb.{p.name}", p) for p in self.embeddings.parameters()]
        out += [(f"sched_num.{p.name}", p) for p in self.sched_num.parameters()]
        out += [(f"sched_emb.{p.name}", p) for p in self.sched_emb.parameters()]
        return out

    def schedule_parameter_names(self) -> set[str]:
        return {n for n, _ in self.named_parameters() if n.startswith("sched_")}

    def reset_ema(self) -> None:
        self.ema = {n: p.value.copy() for n, p in self.named_parameters()}

    @contextlib.contextmanager
    def use_ema(self):
        """Temporarily swap the EMA shadows into the live parameters."""
        saved = {}
        for n, p in self.named_parameters():
            saved[n] = p.value
            p.value = self.ema[n].copy()
        try:
            yield self
        finally:
            for n, p in self.named_parameters():
                p.value = saved[n]
