"""Gate-free dispatch: each block goes to the expert that reconstructs it best.

No classifier is trained.  A block is scored by running every registered
expert's reconstruct pass; the lowest mean cross-entropy wins, and if even the
winner's token accuracy is below ``tra_accept`` the block is flagged as a
novel domain that calls for a new expert.
"""
from __future__ import annotations

import csv
import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

from .metrics import tra
from .model import ConfigMismatch, ExpertModel, reconstruct, reconstruct_batches

NOVEL = "NOVEL"
DEFAULT_TRA_ACCEPT = 0.75


class RegistryError(ValueError):
    pass


@dataclass
class ExpertRegistry:
    experts: dict[str, ExpertModel] = field(default_factory=dict)  # insertion order = registration order

    def __len__(self) -> int:
        return len(self.experts)

    def ids(self) -> list[str]:
        return list(self.experts)

    def register(self, expert_id: str, model: ExpertModel) -> "ExpertRegistry":
        if expert_id in self.experts:
            raise RegistryError(f"duplicate expert id {expert_id!r}")
        if expert_id == NOVEL:
            raise RegistryError(f"{NOVEL!r} is reserved")
        if self.experts:
            ref = next(iter(self.experts.values())).config
            if (ref.L, ref.vocab_size) != (model.config.L, model.config.vocab_size):
                raise ConfigMismatch(
                    f"config mismatch: expert {expert_id!r} has L={model.config.L}, V={model.config.vocab_size}; "
                    f"registry uses L={ref.L}, V={ref.vocab_size}"
                )
        self.experts[expert_id] = model
        return self


def register_expert(registry: ExpertRegistry, expert_id: str, model: ExpertModel) -> ExpertRegistry:
    return registry.register(expert_id, model)


@dataclass
class RoutingDecision:
    scores: dict[str, tuple[float, float]]  # expert_id -> (loss, tra)
    selected: str
    tra_accept: float

    @property
    def best(self) -> str:
        return select(self.scores)


def select(scores: dict[str, tuple[float, float]]) -> str:
    """argmin loss; ties resolved by dict (registration) order."""
    best_id, best_loss = None, np.inf
    for eid, (loss, _) in scores.items():
        if loss < best_loss:
            best_id, best_loss = eid, loss
    if best_id is None:  # every loss was inf/nan
        best_id = next(iter(scores))
    return best_id


def decide(scores: dict[str, tuple[float, float]], tra_accept: float) -> RoutingDecision:
    if not 0.0 <= tra_accept <= 1.0:
        raise ValueError(f"tra_accept must lie in [0, 1], got {tra_accept}")
    if not scores:
        raise RegistryError("no experts registered")
    best = select(scores)
    chosen = best if scores[best][1] >= tra_accept else NOVEL
    return RoutingDecision(scores=scores, selected=chosen, tra_accept=tra_accept)


def score_block(registry: ExpertRegistry, x) -> dict[str, tuple[float, float]]:
    if not registry.experts:
        raise RegistryError("no experts registered")
    out = {}
    for eid, model in registry.experts.items():
        r = reconstruct(model, np.asarray(x))
        out[eid] = (float(r.loss), tra(x, r.x_hat, model.config.pad_id).tra)
    return out


def route(registry: ExpertRegistry, x, tra_accept: float = DEFAULT_TRA_ACCEPT) -> RoutingDecision:
    return decide(score_block(registry, x), tra_accept)


def score_corpus(registry: ExpertRegistry, blocks: np.ndarray, batch_size: int = 64) -> list[dict[str, tuple[float, float]]]:
    """Batched equivalent of calling score_block on every row."""
    if not registry.experts:
        raise RegistryError("no experts registered")
    per_block: list[dict[str, tuple[float, float]]] = [{} for _ in range(len(blocks))]
    for eid, model in registry.experts.items():
        i = 0
        for _, x_hat, losses in reconstruct_batches(model, blocks, batch_size):
            for row_hat, l in zip(x_hat, losses):
                per_block[i][eid] = (float(l), tra(blocks[i], row_hat, model.config.pad_id).tra)
                i += 1
    return per_block


@dataclass
class RoutingTrace:
    decisions: list[RoutingDecision]
    labels: list[str] | None
    expert_ids: list[str]

    def summary(self, expected: dict[str, str] | None = None) -> dict:
        """Per-tier routing accuracy and the NOVEL fraction.

        ``expected`` maps tier label -> the expert id (or NOVEL) that should
        receive it; without it, accuracy is reported only for tiers whose
        label is itself a registered expert id.
        """
        n = len(self.decisions)
        novel = sum(d.selected == NOVEL for d in self.decisions)
        out: dict = {"blocks": n, "novel_fraction": novel / n if n else 0.0, "per_tier_accuracy": {}}
        if self.labels is None:
            return out
        hits: dict[str, int] = defaultdict(int)
        counts = Counter(self.labels)
        for d, lab in zip(self.decisions, self.labels):
            target = (expected or {}).get(lab, lab)
            hits[lab] += d.selected == target
        for lab in counts:
            target = (expected or {}).get(lab, lab)
            if target in self.expert_ids or target == NOVEL:
                out["per_tier_accuracy"][lab] = hits[lab] / counts[lab]
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["block_index", "tier_label"]
                       + [f"loss_{e}" for e in self.expert_ids]
                       + [f"tra_{e}" for e in self.expert_ids] + ["selected"])
            for i, d in enumerate(self.decisions):
                lab = self.labels[i] if self.labels is not None else ""
                w.writerow([i, lab]
                           + [f"{d.scores[e][0]:.9f}" for e in self.expert_ids]
                           + [f"{d.scores[e][1]:.9f}" for e in self.expert_ids] + [d.selected])

    def write_summary(self, path, expected: dict[str, str] | None = None) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(expected), fh, indent=2, sort_keys=True)
            fh.write("\n")


def route_stream(registry: ExpertRegistry, corpus, tra_accept: float = DEFAULT_TRA_ACCEPT) -> RoutingTrace:
    blocks = corpus.blocks
    labels = corpus.block_labels() if hasattr(corpus, "block_labels") else None
    if len(blocks) == 0:
        return RoutingTrace([], labels, registry.ids())
    ref = next(iter(registry.experts.values())).config if registry.experts else None
    if ref is not None and blocks.shape[1] != ref.L:
        raise ConfigMismatch(f"config mismatch: corpus L={blocks.shape[1]} vs experts L={ref.L}")
    decisions = [decide(s, tra_accept) for s in score_corpus(registry, blocks)]
    return RoutingTrace(decisions, labels, registry.ids())
