"""Token-level reconstruction accuracy and the baselines used to read it."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .model import ConfigMismatch, ExpertModel, reconstruct_batches


@dataclass(frozen=True)
class TraResult:
    correct: int
    total: int

    @property
    def tra(self) -> float:
        return self.correct / self.total if self.total else 0.0


def tra(x, x_hat, pad_id: int | None = None) -> TraResult:
    """Fraction of positions where ``x_hat`` reproduces ``x``.

    Positions where ``x`` is ``pad_id`` count in neither numerator nor
    denominator.
    """
    x = np.asarray(x).reshape(-1)
    x_hat = np.asarray(x_hat).reshape(-1)
    if x.shape != x_hat.shape:
        raise ValueError(f"length mismatch: {x.shape[0]} vs {x_hat.shape[0]}")
    keep = np.ones(x.shape, dtype=bool) if pad_id is None else x != pad_id
    return TraResult(int(np.sum((x == x_hat) & keep)), int(keep.sum()))


def random_guess_baseline(V: int) -> float:
    if V < 1:
        raise ValueError("V must be >= 1")
    return 1.0 / V


@dataclass
class CorpusTra:
    tra: float
    loss: float
    correct: int
    total: int
    block_tra: list[float] = field(default_factory=list)
    block_loss: list[float] = field(default_factory=list)
    block_tokens: list[int] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["block_index", "loss_nats_per_token", "tra"])
            for i, (l, t) in enumerate(zip(self.block_loss, self.block_tra)):
                w.writerow([i, f"{l:.9f}", f"{t:.9f}"])


def corpus_tra(model: ExpertModel, corpus, batch_size: int = 64) -> CorpusTra:
    """Token-weighted TRA and mean loss over every block, with per-block traces."""
    blocks = corpus.blocks if hasattr(corpus, "blocks") else np.asarray(corpus)
    cfg = model.config
    if blocks.ndim != 2 or blocks.shape[1] != cfg.L:
        raise ConfigMismatch(f"config mismatch: corpus L={blocks.shape[-1]} vs model L={cfg.L}")
    res = CorpusTra(0.0, 0.0, 0, 0)
    loss_sum = 0.0
    offset = 0
    for _, x_hat, losses in reconstruct_batches(model, blocks, batch_size):
        ids = blocks[offset : offset + len(x_hat)]
        offset += len(x_hat)
        for row, row_hat, l in zip(ids, x_hat, losses):
            r = tra(row, row_hat, cfg.pad_id)
            res.block_tra.append(r.tra)
            res.block_loss.append(float(l))
            res.block_tokens.append(r.total)
            res.correct += r.correct
            res.total += r.total
            loss_sum += float(l) * r.total
    if res.total:
        res.tra = res.correct / res.total
        res.loss = loss_sum / res.total
    return res
