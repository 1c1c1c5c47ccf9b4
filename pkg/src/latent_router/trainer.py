"""Training, checkpoints, frozen incremental experts and the latent-length ablation."""
from __future__ import annotations

import csv
import json
import math
import os
import struct
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, NonFiniteError, Parameter
from .corpus import Corpus
from .metrics import corpus_tra
from .model import ConfigMismatch, ExpertModel, ModelConfig

CKPT_MAGIC = b"LRCK"
CKPT_VERSION = 1
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


class CheckpointError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


class FreezeViolation(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 32
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    eval_every: int = 500
    checkpoint_path: str | None = None
    eval_blocks: int = 200  # validation blocks scored at each eval
    schedule: str = "constant"  # or "cosine": linear warmup then cosine decay to zero
    warmup_steps: int = 0
    grad_clip: float | None = None  # global-norm clip before each Adam step

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")

    def lr_at(self, step: int) -> float:
        """Learning rate for 1-based ``step``."""
        if self.warmup_steps and step <= self.warmup_steps:
            return self.lr * step / self.warmup_steps
        if self.schedule == "constant":
            return self.lr
        span = max(1, self.steps - self.warmup_steps)
        frac = min(1.0, (step - self.warmup_steps) / span)
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * frac))


@dataclass
class TracePoint:
    step: int
    train_loss: float
    val_tra: float | None


@dataclass
class TrainResult:
    model: ExpertModel
    trace: list[TracePoint] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)  # every step

    @property
    def final_val_tra(self) -> float | None:
        return self.trace[-1].val_tra if self.trace else None

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "train_loss", "val_tra"])
            for t in self.trace:
                w.writerow([t.step, f"{t.train_loss:.9f}", "" if t.val_tra is None else f"{t.val_tra:.9f}"])


def thread_limit():
    """Cap BLAS threads at LATENT_ROUTER_THREADS (default 1) for reproducible sums."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(int(os.environ.get("LATENT_ROUTER_THREADS", "1")))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index batches from per-epoch shuffles."""
    buf = np.empty(0, dtype=np.int64)
    while True:
        while len(buf) < batch_size:
            buf = np.concatenate([buf, rng.permutation(n)])
        yield buf[:batch_size]
        buf = buf[batch_size:]


def train(model: ExpertModel, corpus: Corpus, cfg: TrainConfig, val: Corpus | None = None) -> TrainResult:
    """Minimise reconstruction cross-entropy with Adam; mutates ``model`` in place."""
    mc = model.config
    if corpus.L != mc.L:
        raise ConfigMismatch(f"config mismatch: corpus L={corpus.L} vs model L={mc.L}")
    if len(corpus) == 0:
        raise ValueError("empty training corpus")
    if model.adam is None:
        model.adam = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    else:
        model.adam.lr, model.adam.beta1, model.adam.beta2, model.adam.eps = cfg.lr, cfg.beta1, cfg.beta2, cfg.eps
    state = model.adam
    params = model.parameters()
    rng = np.random.default_rng([cfg.seed, 0x7A41])
    batches = _batches(len(corpus), cfg.batch_size, rng)
    blocks = corpus.blocks.astype(np.int64)
    val_sub = val.take(cfg.eval_blocks) if val is not None else None
    result = TrainResult(model)
    window: list[float] = []
    with thread_limit():
        for step in range(1, cfg.steps + 1):
            ids = blocks[next(batches)]
            state.lr = cfg.lr_at(step)
            try:
                with ad.recording() as tape:
                    loss = model.loss_tensor(ids)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise NonFiniteError("loss")
                ad.backward(loss, tape)
                if cfg.grad_clip is not None:
                    ad.clip_grad_norm(params, cfg.grad_clip)
                ad.adam_step(params, state)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite loss at step {step}: {exc}") from None
            model.step += 1
            result.losses.append(value)
            window.append(value)
            if step % cfg.eval_every == 0 or step == cfg.steps:
                vt = corpus_tra(model, val_sub).tra if val_sub is not None and len(val_sub) else None
                result.trace.append(TracePoint(step, float(np.mean(window)), vt))
                window = []
    if cfg.checkpoint_path:
        save_checkpoint(model, cfg.checkpoint_path)
    return result


# ------------------------------------------------------------------ checkpoints


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _MASK64
    return h


def _manifest(arrays: dict[str, np.ndarray], offset: int) -> tuple[list[dict], list[bytes], int]:
    entries, chunks = [], []
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    return entries, chunks, offset


def checkpoint_bytes(model: ExpertModel) -> bytes:
    """Serialise to the LRCK layout: magic, version, header length, JSON header,
    float32 payload, FNV-1a-64 digest of everything before it."""
    arrays = {k: p.data for k, p in model.params.items()}
    header: dict = {"config": model.config.to_dict(), "step": model.step}
    params, chunks, offset = _manifest(arrays, 0)
    header["params"] = params
    if model.adam is not None:
        a = model.adam
        m_entries, m_chunks, offset = _manifest({k: a.m[k] for k in a.m}, offset)
        v_entries, v_chunks, offset = _manifest({k: a.v[k] for k in a.v}, offset)
        header["adam"] = {"lr": a.lr, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps,
                          "step": a.step, "m": m_entries, "v": v_entries}
        chunks += m_chunks + v_chunks
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(head)) + head + b"".join(chunks)
    return body + struct.pack("<Q", fnv1a64(body))


def checkpoint_digest(model: ExpertModel) -> int:
    return struct.unpack("<Q", checkpoint_bytes(model)[-8:])[0]


def save_checkpoint(model: ExpertModel, path) -> int:
    data = checkpoint_bytes(model)
    Path(path).write_bytes(data)
    return struct.unpack("<Q", data[-8:])[0]


def load_checkpoint(path, expect: ModelConfig | None = None) -> ExpertModel:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not an LRCK checkpoint")
    body, tail = raw[:-8], raw[-8:]
    if struct.unpack("<Q", tail)[0] != fnv1a64(body):
        raise CheckpointError(f"{path}: digest mismatch (corrupt or truncated)")
    version, hlen = struct.unpack("<II", body[4:12])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header = json.loads(body[12 : 12 + hlen].decode("utf-8"))
    payload = body[12 + hlen :]
    config = ModelConfig.from_dict(header["config"])
    if expect is not None and expect != config:
        raise ConfigMismatch(f"config mismatch: checkpoint {config} vs expected {expect}")

    def read(entry) -> np.ndarray:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=entry["offset"])
        return arr.reshape(entry["shape"]).astype(np.float32)

    params = {e["name"]: Parameter(e["name"], read(e)) for e in header["params"]}
    model = ExpertModel(config, params, step=header["step"])
    if "adam" in header:
        a = header["adam"]
        model.adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step=a["step"],
                               m={e["name"]: read(e) for e in a["m"]}, v={e["name"]: read(e) for e in a["v"]})
    return model


# ------------------------------------------------------------------ incremental experts


def train_incremental(registry, new_id: str, corpus: Corpus, cfg: TrainConfig,
                      config: ModelConfig | None = None, val: Corpus | None = None):
    """Train a fresh expert and mount it; every existing expert stays frozen.

    Raises FreezeViolation if any pre-existing expert's checkpoint digest
    changes across the run.
    """
    if new_id in registry.experts:
        from .router import RegistryError

        raise RegistryError(f"duplicate expert id {new_id!r}")
    if config is None:
        config = next(iter(registry.experts.values())).config if registry.experts else ModelConfig(L=corpus.L)
    before = {eid: checkpoint_digest(m) for eid, m in registry.experts.items()}
    model = ExpertModel.init(config, seed=cfg.seed)
    result = train(model, corpus, cfg, val)
    after = {eid: checkpoint_digest(m) for eid, m in registry.experts.items()}
    changed = [eid for eid in before if before[eid] != after[eid]]
    if changed:
        raise FreezeViolation(f"frozen experts modified during training: {changed}")
    registry.register(new_id, model)
    return registry, result


# ------------------------------------------------------------------ ablation


@dataclass
class AblationRow:
    M: int
    compression_ratio: float
    val_tra: float


def _ablation_run(args):
    base, M, corpus, val, cfg = args
    model = ExpertModel.init(replace(base, M=M), seed=cfg.seed)
    train(model, corpus, replace(cfg, checkpoint_path=None), val)
    score = corpus_tra(model, val).tra
    return AblationRow(M, model.config.compression_ratio, score)


def ablate_M(base: ModelConfig, Ms, corpus: Corpus, cfg: TrainConfig, val: Corpus,
             workers: int = 1) -> list[AblationRow]:
    """One independent training run per latent length, all with ``cfg.seed``."""
    Ms = list(Ms)
    if len(set(Ms)) != len(Ms):
        raise ValueError(f"duplicate M values in {Ms}")
    for M in Ms:
        if not 1 <= M < base.L:
            raise ValueError(f"M={M} must satisfy 1 <= M < L={base.L}")
    jobs = [(base, M, corpus, val, cfg) for M in sorted(Ms)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_ablation_run, jobs))
    return [_ablation_run(j) for j in jobs]


def write_ablation(rows: list[AblationRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["M", "compression_ratio", "val_tra"])
        for r in rows:
            w.writerow([r.M, f"{r.compression_ratio:.6f}", f"{r.val_tra:.9f}"])


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
