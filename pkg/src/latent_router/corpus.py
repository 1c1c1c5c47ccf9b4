"""Byte-level corpora: synthetic code/text grammars, random tokens, file ingestion.

Tokens are raw byte values 0..255 with 256 reserved for padding, so V = 257.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import PAD_ID, ModelConfig

TIERS = ("in_domain", "semi_ood", "full_ood", "ingested")
MAGIC = b"LRC1"


class CorpusFormatError(ValueError):
    pass


@dataclass
class Corpus:
    name: str
    blocks: np.ndarray  # (N, L) uint16
    tier: str
    labels: list[str] | None = None  # per-block tier tags for mixed corpora

    def __post_init__(self):
        if self.tier not in TIERS and self.tier != "mixed":
            raise ValueError(f"unknown tier {self.tier!r}")
        self.blocks = np.asarray(self.blocks, dtype=np.uint16)
        if self.blocks.ndim != 2:
            raise ValueError("blocks must be a 2-D array")
        if self.labels is not None and len(self.labels) != len(self.blocks):
            raise ValueError("labels length must match block count")

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def L(self) -> int:
        return self.blocks.shape[1]

    def block_labels(self) -> list[str]:
        return list(self.labels) if self.labels is not None else [self.tier] * len(self)

    def split(self, holdout: float = 0.1) -> tuple["Corpus", "Corpus"]:
        """Every round(1/holdout)-th block goes to validation."""
        k = round(1.0 / holdout)
        idx = np.arange(len(self))
        val = idx % k == k - 1
        lab = self.block_labels()
        tr = Corpus(f"{self.name}.train", self.blocks[~val], self.tier,
                    None if self.labels is None else [lab[i] for i in idx[~val]])
        va = Corpus(f"{self.name}.val", self.blocks[val], self.tier,
                    None if self.labels is None else [lab[i] for i in idx[val]])
        return tr, va

    def take(self, n: int) -> "Corpus":
        return Corpus(self.name, self.blocks[:n], self.tier, None if self.labels is None else self.labels[:n])


@dataclass(frozen=True)
class GrammarSpec:
    kind: str  # "code_like" | "text_like"
    seed: int = 0
    size: int = 100
    max_depth: int = 2
    ident_pool: int = 16
    markov_order: int = 2

    def __post_init__(self):
        if self.kind not in ("code_like", "text_like"):
            raise ValueError(f"unknown grammar kind {self.kind!r}")
        if self.size < 1:
            raise ValueError("size must be >= 1")


# ------------------------------------------------------------------ tokenizer


def tokenize(data: bytes) -> np.ndarray:
    return np.frombuffer(data, dtype=np.uint8).astype(np.uint16)


def detokenize(tokens) -> bytes:
    t = np.asarray(tokens).reshape(-1)
    return bytes(t[t != PAD_ID].astype(np.uint8).tolist())


def blockize(tokens: np.ndarray, L: int, pad: bool = True) -> np.ndarray:
    n = len(tokens)
    nblocks = -(-n // L) if pad else n // L
    out = np.full((nblocks, L), PAD_ID, dtype=np.uint16)
    flat = out.reshape(-1)
    flat[: min(n, nblocks * L)] = tokens[: nblocks * L]
    return out


# ------------------------------------------------------------------ code grammar

IDENTS = [
    "count", "total", "value", "index", "item", "data", "name", "size",
    "node", "list", "key", "result", "state", "order", "line", "point",
    "time", "word", "part", "level", "place", "group", "number", "world",
]
TYPES = ["Node", "List", "Map", "Point", "State", "Group", "Time", "Word", "Line", "Result"]
FUNCS = ["get", "set", "add", "len", "max", "min", "push", "pop", "find", "read", "load", "sum"]
BINOPS = [" + ", " - ", " * "]
CMPS = [" < ", " > ", " == ", " != "]


class _CodeGen:
    def __init__(self, rng: np.random.Generator, spec: GrammarSpec):
        self.rng = rng
        self.spec = spec
        self.idents = IDENTS[: max(2, min(spec.ident_pool, len(IDENTS)))]

    def pick(self, seq):
        return seq[self.rng.integers(len(seq))]

    def expr(self, depth: int) -> str:
        r = self.rng.random()
        if depth >= self.spec.max_depth or r < 0.35:
            return self.pick(self.idents) if self.rng.random() < 0.7 else str(self.rng.integers(10))
        if r < 0.6:
            n = self.rng.integers(1, 3)
            return f"{self.pick(FUNCS)}({', '.join(self.expr(depth + 1) for _ in range(n))})"
        if r < 0.75:
            return f"{self.pick(self.idents)}[{self.expr(depth + 1)}]"
        if r < 0.9:
            return f"({self.expr(depth + 1)}{self.pick(BINOPS)}{self.expr(depth + 1)})"
        return f"[{self.expr(depth + 1)}, {self.expr(depth + 1)}]"

    def simple(self) -> str:
        r = self.rng.random()
        if r < 0.5:
            return f"{self.pick(self.idents)} = {self.expr(1)};"
        if r < 0.8:
            return f"{self.pick(FUNCS)}({self.expr(1)});"
        return f"return {self.expr(1)};"

    def statement(self) -> str:
        r = self.rng.random()
        if r < 0.1:
            return f"let {self.pick(self.idents)} = new {self.pick(TYPES)}({self.expr(1)});"
        if r < 0.3:
            return f"let {self.pick(self.idents)} = {self.expr(0)};"
        if r < 0.5:
            return f"{self.pick(self.idents)} = {self.expr(0)};"
        if r < 0.65:
            kw = "if" if self.rng.random() < 0.6 else "while"
            cond = f"{self.expr(1)}{self.pick(CMPS)}{self.expr(1)}"
            return f"{kw} ({cond}) {{ {self.simple()} }}"
        if r < 0.85:
            return f"{self.pick(FUNCS)}({self.expr(1)});"
        return f"return {self.expr(0)};"


def render_code(spec: GrammarSpec, n_bytes: int) -> bytes:
    rng = np.random.default_rng([spec.seed, 0xC0DE])
    gen = _CodeGen(rng, spec)
    parts: list[str] = []
    total = 0
    while total < n_bytes:
        s = gen.statement() + "\n"
        parts.append(s)
        total += len(s)
    return "".join(parts).encode("ascii")


# ------------------------------------------------------------------ text grammar

WORDS = [
    "the", "a", "of", "and", "to", "in", "is", "was", "for", "with", "on", "as",
    "by", "at", "from", "it", "that", "this", "his", "her", "their", "one", "new",
    "first", "city", "river", "war", "king", "year", "people", "music", "film",
    "game", "team", "season", "album", "church", "school", "army", "town",
    "which", "later", "after", "during", "while", "when", "other", "many",
    "known", "became", "played", "released", "built", "called", "found",
    "small", "large", "early", "north", "south",
] + IDENTS
PUNCT = [",", "."]


def _successors(seed: int, state: tuple[int, ...], vocab: int, k: int = 5):
    digest = hashlib.blake2b(repr((seed, state)).encode(), digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    succ = rng.choice(vocab, size=k, replace=False)
    probs = rng.dirichlet(np.ones(k))
    return succ, probs


def render_text(spec: GrammarSpec, n_bytes: int) -> bytes:
    """Order-k word Markov chain with sentence/comma punctuation."""
    rng = np.random.default_rng([spec.seed, 0x7E47])
    order = max(1, spec.markov_order)
    vocab = len(WORDS)
    table: dict[tuple[int, ...], tuple[np.ndarray, np.ndarray]] = {}
    state = tuple(int(i) for i in rng.integers(vocab, size=order))
    out: list[str] = []
    total = 0
    sentence_len = 0
    target_len = int(rng.integers(6, 14))
    capital = True
    while total < n_bytes:
        if state not in table:
            table[state] = _successors(spec.seed, state, vocab)
        succ, probs = table[state]
        w = int(succ[rng.choice(len(succ), p=probs)])
        word = WORDS[w].capitalize() if capital else WORDS[w]
        piece = ("" if not out or out[-1].endswith("\n") else " ") + word
        capital = False
        sentence_len += 1
        if sentence_len >= target_len:
            piece += "."
            sentence_len = 0
            target_len = int(rng.integers(6, 14))
            capital = True
            if rng.random() < 0.2:
                piece += "\n"
        elif sentence_len > 2 and rng.random() < 0.08:
            piece += ","
        out.append(piece)
        total += len(piece)
        state = state[1:] + (w,)
    return "".join(out).encode("ascii")


# ------------------------------------------------------------------ generators


def _from_bytes(data: bytes, size: int, config: ModelConfig) -> np.ndarray:
    toks = tokenize(data[: size * config.L])
    return blockize(toks, config.L, pad=False)


def gen_code_like(spec: GrammarSpec, config: ModelConfig) -> Corpus:
    if spec.kind != "code_like":
        raise ValueError("gen_code_like needs a code_like spec")
    data = render_code(spec, spec.size * config.L)
    return Corpus(f"code_s{spec.seed}", _from_bytes(data, spec.size, config), "in_domain")


def gen_text_like(spec: GrammarSpec, config: ModelConfig) -> Corpus:
    if spec.kind != "text_like":
        raise ValueError("gen_text_like needs a text_like spec")
    data = render_text(spec, spec.size * config.L)
    return Corpus(f"text_s{spec.seed}", _from_bytes(data, spec.size, config), "semi_ood")


def gen_random(seed: int, size: int, config: ModelConfig) -> Corpus:
    if size < 1:
        raise ValueError("size must be >= 1")
    rng = np.random.default_rng([seed, 0x5A5D])
    high = min(256, config.vocab_size) if config.pad_id == PAD_ID else config.vocab_size
    blocks = rng.integers(0, high, size=(size, config.L))
    if config.pad_id is not None and config.pad_id < high:
        raise ValueError("random generation with an in-range pad id is unsupported")
    return Corpus(f"random_s{seed}", blocks.astype(np.uint16), "full_ood")


def ingest_file(path, config: ModelConfig) -> Corpus:
    data = Path(path).read_bytes()
    if not data:
        raise CorpusFormatError(f"{path}: empty file")
    return Corpus(Path(path).name, blockize(tokenize(data), config.L, pad=True), "ingested")


def interleave(corpora: list[Corpus], name: str = "mixed") -> Corpus:
    """Round-robin blocks from each corpus, tagging each with its source tier."""
    n = min(len(c) for c in corpora)
    blocks, labels = [], []
    for i in range(n):
        for c in corpora:
            blocks.append(c.blocks[i])
            labels.append(c.block_labels()[i])
    return Corpus(name, np.stack(blocks), "mixed", labels)


# ------------------------------------------------------------------ file format


def save_corpus(corpus: Corpus, path, vocab_size: int = 257) -> None:
    n, L = corpus.blocks.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<III", vocab_size, L, n))
        fh.write(corpus.blocks.astype("<u2").tobytes())


def load_corpus(path, tier: str = "ingested", name: str | None = None) -> tuple[Corpus, int]:
    """Returns the corpus and the vocabulary size recorded in the header."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC or len(raw) < 16:
        raise CorpusFormatError(f"{path}: not an LRC1 corpus file")
    V, L, n = struct.unpack("<III", raw[4:16])
    body = raw[16:]
    if len(body) != 2 * L * n:
        raise CorpusFormatError(f"{path}: expected {n}x{L} tokens, found {len(body) // 2}")
    blocks = np.frombuffer(body, dtype="<u2").reshape(n, L).astype(np.uint16)
    if blocks.size and blocks.max() >= V:
        raise CorpusFormatError(f"{path}: token id >= V={V}")
    return Corpus(name or Path(path).stem, blocks, tier), V


def byte_histogram(corpus: Corpus) -> np.ndarray:
    t = corpus.blocks.reshape(-1)
    t = t[t != PAD_ID]
    return np.bincount(t, minlength=256)[:256].astype(np.float64)


def preview(corpus: Corpus, n: int = 3) -> str:
    return "\n---\n".join(detokenize(b).decode("latin-1") for b in corpus.blocks[:n])
