"""Transformer autoencoder that squeezes an L-token block through M latent vectors.

Encoder: token + position embeddings run through bidirectional self-attention
blocks. The default "chunk" readout then maps each contiguous L/M-token span to
one latent with a shared linear layer; the "query" readout instead appends M
learned latent queries and keeps their outputs. Either way the result is z.

Decoder: L learned position queries (the content-free auxiliary signal m)
cross-attend to z, then attend among themselves, and emit all L logits in one
parallel pass. The decoder entry points take z only, so there is no path by
which the original tokens can reach it.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Parameter, Tensor

PAD_ID = 256


class ConfigMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    L: int = 64
    M: int = 4
    d_model: int = 64
    n_layers_enc: int = 2
    n_layers_dec: int = 2
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = 257
    pad_id: int | None = PAD_ID
    readout: str = "chunk"  # how the encoder forms z: "chunk" (per-span projection) or "query" (latent queries)

    def __post_init__(self):
        if not 1 <= self.M < self.L:
            raise ValueError(f"need 1 <= M < L, got M={self.M}, L={self.L}")
        if self.readout not in ("query", "chunk"):
            raise ValueError(f"unknown readout {self.readout!r}")
        if self.readout == "chunk" and self.L % self.M:
            raise ValueError(f"chunk readout needs M to divide L, got L={self.L}, M={self.M}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if min(self.d_ff, self.vocab_size, self.n_layers_enc, self.n_layers_dec) < 1:
            raise ValueError("d_ff, vocab_size and layer counts must be positive")
        if self.pad_id is not None and not 0 <= self.pad_id < self.vocab_size:
            raise ValueError(f"pad_id {self.pad_id} outside vocabulary of size {self.vocab_size}")

    @property
    def compression_ratio(self) -> float:
        return compression_ratio(self.L, self.M)

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        """512 tokens into 8 latents of width 512 with a GPT-2 sized vocabulary."""
        return cls(L=512, M=8, d_model=512, n_layers_enc=6, n_layers_dec=6, n_heads=8,
                   d_ff=2048, vocab_size=50257, pad_id=None)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def compression_ratio(L: int, M: int) -> float:
    if not 1 <= M < L:
        raise ValueError(f"need 1 <= M < L, got M={M}, L={L}")
    return L / M


@dataclass
class ReconstructionOutput:
    logits: np.ndarray
    x_hat: np.ndarray
    loss: float | None = None


def _attn_names(prefix: str) -> list[tuple[str, str]]:
    return [(f"{prefix}.{w}", "w" if w[0] == "w" else "b")
            for w in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]


def _block_names(prefix: str, cross: bool = False) -> list[tuple[str, str]]:
    names = []
    if cross:
        names += [(f"{prefix}.lnx.g", "ones"), (f"{prefix}.lnx.b", "zeros")]
        names += _attn_names(f"{prefix}.xattn")
    names += [(f"{prefix}.ln1.g", "ones"), (f"{prefix}.ln1.b", "zeros")]
    names += _attn_names(f"{prefix}.attn")
    names += [
        (f"{prefix}.ln2.g", "ones"), (f"{prefix}.ln2.b", "zeros"),
        (f"{prefix}.ff.w1", "w1"), (f"{prefix}.ff.b1", "b1"),
        (f"{prefix}.ff.w2", "w2"), (f"{prefix}.ff.b2", "b"),
    ]
    return names


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[tuple[int, ...], str]]:
    d, f, V = cfg.d_model, cfg.d_ff, cfg.vocab_size
    kind_shape = {"ones": (d,), "zeros": (d,), "w": (d, d), "b": (d,), "w1": (d, f), "b1": (f,), "w2": (f, d)}
    out: dict[str, tuple[tuple[int, ...], str]] = {
        "encoder.tok_emb": ((V, d), "normal"),
        "encoder.pos_emb": ((cfg.L, d), "normal"),
    }
    if cfg.readout == "query":
        out["encoder.latent_queries"] = ((cfg.M, d), "normal")
    else:
        out["encoder.pool.w"] = (((cfg.L // cfg.M) * d, d), "pool")
        out["encoder.pool.b"] = ((d,), "zeros")
    for i in range(cfg.n_layers_enc):
        for name, kind in _block_names(f"encoder.layer{i}"):
            out[name] = (kind_shape[kind], kind)
    out["encoder.ln_f.g"] = ((d,), "ones")
    out["encoder.ln_f.b"] = ((d,), "zeros")
    out["decoder.pos_queries"] = ((cfg.L, d), "normal")
    out["decoder.latent_pos"] = ((cfg.M, d), "normal")
    for i in range(cfg.n_layers_dec):
        for name, kind in _block_names(f"decoder.layer{i}", cross=True):
            out[name] = (kind_shape[kind], kind)
    out["decoder.ln_f.g"] = ((d,), "ones")
    out["decoder.ln_f.b"] = ((d,), "zeros")
    out["decoder.head.w"] = ((d, V), "w")
    out["decoder.head.b"] = ((V,), "zeros")
    return out


@dataclass
class ExpertModel:
    """One encoder+decoder parameter set; a domain compressor."""

    config: ModelConfig
    params: dict[str, Parameter] = field(default_factory=dict)
    step: int = 0
    adam: AdamState | None = None

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=np.float32, std: float | None = None) -> "ExpertModel":
        """Gaussian weights (default std d_model**-0.5), zero biases, unit LN gains."""
        if std is None:
            std = config.d_model**-0.5
        rng = np.random.default_rng(seed)
        params = {}
        for name, (shape, kind) in param_shapes(config).items():
            if kind == "ones":
                data = np.ones(shape)
            elif kind in ("zeros", "b", "b1"):
                data = np.zeros(shape)
            elif kind == "pool":  # fan-in scaled: it sums L/M token vectors
                data = rng.normal(0.0, shape[0] ** -0.5, size=shape)
            else:
                data = rng.normal(0.0, std, size=shape)
            params[name] = Parameter(name, data.astype(dtype))
        return cls(config, params)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def astype(self, dtype) -> "ExpertModel":
        return ExpertModel(self.config, {k: Parameter(k, p.data.astype(dtype)) for k, p in self.params.items()})

    def copy(self) -> "ExpertModel":
        return self.astype(self.dtype)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    # -------------------------------------------------------------- graph pieces

    def _attention(self, a: Tensor, kv: Tensor, prefix: str) -> Tensor:
        """Multi-head attention of queries ``a`` over keys/values ``kv``."""
        p = self.params
        B, T, d = a.shape
        S = kv.shape[1]
        H = self.config.n_heads
        dh = d // H

        def heads(t: Tensor, n: int) -> Tensor:
            return ad.transpose(ad.reshape(t, (B, n, H, dh)), (0, 2, 1, 3))

        q = heads(ad.linear(a, p[f"{prefix}.wq"], p[f"{prefix}.bq"]), T)
        k = heads(ad.linear(kv, p[f"{prefix}.wk"], p[f"{prefix}.bk"]), S)
        v = heads(ad.linear(kv, p[f"{prefix}.wv"], p[f"{prefix}.bv"]), S)
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        att = ad.matmul(ad.softmax(scores, axis=-1), v)
        att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (B, T, d))
        return ad.linear(att, p[f"{prefix}.wo"], p[f"{prefix}.bo"])

    def _block(self, h: Tensor, prefix: str, memory: Tensor | None = None) -> Tensor:
        """Pre-LN block: [cross-attention to ``memory``], self-attention, feed-forward."""
        p = self.params
        if memory is not None:
            a = ad.layer_norm(h, p[f"{prefix}.lnx.g"], p[f"{prefix}.lnx.b"])
            h = ad.add(h, self._attention(a, memory, f"{prefix}.xattn"))
        a = ad.layer_norm(h, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
        h = ad.add(h, self._attention(a, a, f"{prefix}.attn"))
        f = ad.layer_norm(h, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
        f = ad.linear(ad.gelu(ad.linear(f, p[f"{prefix}.ff.w1"], p[f"{prefix}.ff.b1"])),
                      p[f"{prefix}.ff.w2"], p[f"{prefix}.ff.b2"])
        return ad.add(h, f)

    def encode_tensor(self, ids: np.ndarray) -> Tensor:
        """(B, L) token ids -> (B, M, d_model) latent tensor."""
        cfg = self.config
        p = self.params
        B = ids.shape[0]
        h = ad.add(ad.embedding(p["encoder.tok_emb"], ids), p["encoder.pos_emb"])
        if cfg.readout == "query":
            queries = ad.broadcast_to(p["encoder.latent_queries"], (B, cfg.M, cfg.d_model))
            h = ad.concat([h, queries], axis=1)
        for i in range(cfg.n_layers_enc):
            h = self._block(h, f"encoder.layer{i}")
        if cfg.readout == "query":
            h = ad.take(h, (slice(None), slice(cfg.L, None)))
        else:  # each latent is a linear map of its own contiguous L/M-token span
            h = ad.reshape(h, (B, cfg.M, (cfg.L // cfg.M) * cfg.d_model))
            h = ad.linear(h, p["encoder.pool.w"], p["encoder.pool.b"])
        return ad.layer_norm(h, p["encoder.ln_f.g"], p["encoder.ln_f.b"])

    def decode_tensor(self, z: Tensor) -> Tensor:
        """(B, M, d_model) latents -> (B, L, V) logits.  Sees only z and decoder weights."""
        cfg = self.config
        p = self.params
        B = z.shape[0]
        memory = ad.add(z, p["decoder.latent_pos"])
        h = ad.broadcast_to(p["decoder.pos_queries"], (B, cfg.L, cfg.d_model))
        for i in range(cfg.n_layers_dec):
            h = self._block(h, f"decoder.layer{i}", memory)
        h = ad.layer_norm(h, p["decoder.ln_f.g"], p["decoder.ln_f.b"])
        return ad.linear(h, p["decoder.head.w"], p["decoder.head.b"])

    def loss_tensor(self, ids: np.ndarray) -> Tensor:
        """Mean cross-entropy (nats/token) of reconstructing ``ids``, PAD excluded."""
        cfg = self.config
        logits = self.decode_tensor(self.encode_tensor(ids))
        flat = ad.reshape(logits, (-1, cfg.vocab_size))
        return ad.cross_entropy(flat, ids.reshape(-1), weights=content_mask(ids, cfg))

    def auxiliary_signal(self) -> np.ndarray:
        """The decoder's L x d_model position queries; the same for every input."""
        return self.params["decoder.pos_queries"].data.copy()

    def check_blocks(self, ids) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        cfg = self.config
        if ids.ndim != 2 or ids.shape[1] != cfg.L:
            raise ConfigMismatch(f"config mismatch: block length {ids.shape[-1]} != L={cfg.L}")
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
            raise ConfigMismatch(f"config mismatch: token ids outside [0, {cfg.vocab_size})")
        return ids.astype(np.int64)


def content_mask(ids: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    if cfg.pad_id is None:
        return np.ones(ids.size)
    return (ids.reshape(-1) != cfg.pad_id).astype(np.float64)


def argmax_lowest(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. the lowest token id
    return np.argmax(logits, axis=-1)


def _row_losses(logits: np.ndarray, ids: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    z = logits.astype(np.float64)
    zmax = z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=-1)) + zmax[..., 0]
    nll = lse - np.take_along_axis(z, ids[..., None], axis=-1)[..., 0]
    mask = content_mask(ids, cfg).reshape(ids.shape)
    denom = mask.sum(axis=-1)
    return np.where(denom > 0, (nll * mask).sum(axis=-1) / np.maximum(denom, 1), 0.0)


# ------------------------------------------------------------------ public ops


def encode(model: ExpertModel, x) -> np.ndarray:
    """Latent code (M, d_model) for one block, or (B, M, d_model) for a batch."""
    ids = model.check_blocks(x)
    z = model.encode_tensor(ids).data
    return z[0] if np.asarray(x).ndim == 1 else z


def decode(model: ExpertModel, z) -> ReconstructionOutput:
    cfg = model.config
    z = np.asarray(z)
    single = z.ndim == 2
    if single:
        z = z[None]
    if z.shape[1:] != (cfg.M, cfg.d_model):
        raise ConfigMismatch(f"config mismatch: latent shape {z.shape[1:]} != ({cfg.M}, {cfg.d_model})")
    logits = model.decode_tensor(Tensor(z.astype(model.dtype, copy=False))).data
    if single:
        logits = logits[0]
    return ReconstructionOutput(logits=logits, x_hat=argmax_lowest(logits))


def reconstruct(model: ExpertModel, x) -> ReconstructionOutput:
    ids = model.check_blocks(x)
    out = decode(model, model.encode_tensor(ids).data)
    losses = _row_losses(out.logits.reshape(ids.shape + (-1,)), ids, model.config)
    if np.asarray(x).ndim == 1:
        out.logits, out.x_hat = out.logits[0], out.x_hat[0]
        out.loss = float(losses[0])
    else:
        out.loss = losses
    return out


def reconstruct_batches(model: ExpertModel, blocks: np.ndarray, batch_size: int = 64):
    """Yield (logits, x_hat, per-block loss) over ``blocks`` in chunks."""
    blocks = model.check_blocks(blocks)
    for s in range(0, len(blocks), batch_size):
        ids = blocks[s : s + batch_size]
        logits = model.decode_tensor(model.encode_tensor(ids)).data
        yield logits, argmax_lowest(logits), _row_losses(logits, ids, model.config)


def isolation_probe(model: ExpertModel, z, x_a, x_b) -> bool:
    """True iff decoding ``z`` is unaffected by which input was last encoded."""
    encode(model, x_a)
    with_a = decode(model, z).logits
    encode(model, x_b)
    with_b = decode(model, z).logits
    return bool(np.array_equal(with_a, with_b))
