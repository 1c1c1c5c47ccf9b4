"""Shared setup for the toy experiments: corpora, expert training and a checkpoint cache.

The scripts in ``scripts/`` and the acceptance tests both go through here so
they train exactly the same models.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .corpus import Corpus, GrammarSpec, gen_code_like, gen_random, gen_text_like
from .model import ExpertModel, ModelConfig
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

KINDS = ("code", "text")


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        steps=3000, batch_size=32, lr=5e-3, eval_every=500, schedule="cosine", warmup_steps=100))
    train_blocks: int = 8000
    eval_blocks: int = 200
    corpus_seed: int = 1

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": asdict(self.train),
                "train_blocks": self.train_blocks, "eval_blocks": self.eval_blocks,
                "corpus_seed": self.corpus_seed}


def training_corpus(kind: str, exp: ExperimentConfig) -> Corpus:
    if kind == "code":
        return gen_code_like(GrammarSpec("code_like", seed=exp.corpus_seed, size=exp.train_blocks), exp.model)
    if kind == "text":
        return gen_text_like(GrammarSpec("text_like", seed=exp.corpus_seed + 1, size=exp.train_blocks), exp.model)
    raise ValueError(f"unknown kind {kind!r}")


def heldout_corpora(exp: ExperimentConfig) -> dict[str, Corpus]:
    """Fresh-seed evaluation sets for the three tiers (never seen in training)."""
    n, s = exp.eval_blocks, exp.corpus_seed + 100
    return {
        "code": gen_code_like(GrammarSpec("code_like", seed=s, size=n), exp.model),
        "text": gen_text_like(GrammarSpec("text_like", seed=s + 1, size=n), exp.model),
        "random": gen_random(s + 2, n, exp.model),
    }


def _source_digest() -> str:
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def run_key(kind: str, exp: ExperimentConfig, seed: int) -> str:
    blob = json.dumps({"kind": kind, "seed": seed, "exp": exp.to_dict(), "src": _source_digest()},
                      sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def train_expert(kind: str, exp: ExperimentConfig, seed: int = 0, cache_dir=None,
                 log=None) -> ExpertModel:
    """Train (or load a cached) expert on ``kind`` with init and batch seed ``seed``.

    A cached checkpoint is only reused when the package sources and every
    setting match, so it is the same file a fresh run would write.
    """
    cfg = replace(exp.train, seed=seed, checkpoint_path=None)
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"{kind}-s{seed}-{run_key(kind, exp, seed)}.ckpt"
        if path.exists():
            return load_checkpoint(path, expect=exp.model)
    model = ExpertModel.init(exp.model, seed=seed)
    val = heldout_corpora(exp)[kind]
    res = train(model, training_corpus(kind, exp), cfg, val)
    if log is not None:
        for t in res.trace:
            log(f"{kind} seed={seed} M={exp.model.M} step={t.step} loss={t.train_loss:.4f} val_tra={t.val_tra:.4f}")
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, path)
    return model
