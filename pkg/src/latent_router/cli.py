"""Command line: gen, train, eval, route, ablate, analyze.

Every subcommand writes a ``<out>.manifest.json`` next to its main output.
Exit codes: 0 ok, 1 runtime/I-O failure, 2 usage or validation error.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis, corpus as corpus_mod, metrics, router, trainer
from .model import ConfigMismatch, ExpertModel, ModelConfig


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _pair(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected NAME=PATH, got {text!r}")
    k, v = text.split("=", 1)
    return k, v


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    return json.loads(Path(path).read_text())


def _model_config(args, file_cfg: dict) -> ModelConfig:
    d = dict(file_cfg.get("model", {}))
    for f in fields(ModelConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            d[f.name] = flag
    if getattr(args, "block_len", None) is not None:
        d["L"] = args.block_len
    return ModelConfig(**d)


def _train_config(args, file_cfg: dict) -> trainer.TrainConfig:
    d = dict(file_cfg.get("train", {}))
    for f in fields(trainer.TrainConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            d[f.name] = flag
    return trainer.TrainConfig(**d)


def _write_manifest(out: str, args, config: dict, inputs: list[str], outputs: list[str], t0: float) -> None:
    manifest = {
        "command_line": sys.argv if args.argv is None else args.argv,
        "config": config,
        "seeds": {k: v for k, v in vars(args).items() if "seed" in k and v is not None},
        "inputs": inputs,
        "outputs": outputs,
        "tool_version": __version__,
        "wall_clock_seconds": round(time.perf_counter() - t0, 3),
    }
    Path(f"{out}.manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _load_corpus(path: str, cfg: ModelConfig | None = None, tier: str = "ingested", name=None):
    c, V = corpus_mod.load_corpus(path, tier=tier, name=name)
    if cfg is not None and (c.L != cfg.L or V != cfg.vocab_size):
        raise ConfigMismatch(f"config mismatch: corpus {path} has L={c.L}, V={V}; model has L={cfg.L}, V={cfg.vocab_size}")
    return c


# ------------------------------------------------------------------ subcommands


def cmd_gen(args) -> None:
    t0 = time.perf_counter()
    cfg = _model_config(args, _load_config_file(args.config))
    if args.kind == "random":
        c = corpus_mod.gen_random(args.seed, args.size, cfg)
    else:
        kind = {"code": "code_like", "text": "text_like"}[args.kind]
        spec = corpus_mod.GrammarSpec(kind, seed=args.seed, size=args.size)
        c = corpus_mod.gen_code_like(spec, cfg) if kind == "code_like" else corpus_mod.gen_text_like(spec, cfg)
    corpus_mod.save_corpus(c, args.out, cfg.vocab_size)
    if args.preview:
        Path(args.preview).write_text(corpus_mod.preview(c, 5), encoding="latin-1")
    print(f"blocks={len(c)} L={c.L} out={args.out}")
    _write_manifest(args.out, args, {"model": cfg.to_dict(), "kind": args.kind, "size": args.size}, [], [args.out], t0)


def cmd_train(args) -> None:
    t0 = time.perf_counter()
    file_cfg = _load_config_file(args.config)
    mcfg = _model_config(args, file_cfg)
    tcfg = _train_config(args, file_cfg)
    tcfg = replace(tcfg, checkpoint_path=args.out)
    train_c = _load_corpus(args.corpus, mcfg)
    val_c = _load_corpus(args.val, mcfg) if args.val else None
    model = ExpertModel.init(mcfg, seed=tcfg.seed, std=args.init_std)
    res = trainer.train(model, train_c, tcfg, val_c)
    outputs = [args.out]
    if args.trace:
        res.write_trace(args.trace)
        outputs.append(args.trace)
    last = res.trace[-1]
    vt = "" if last.val_tra is None else f" val_tra={last.val_tra:.6f}"
    print(f"step={last.step} train_loss={last.train_loss:.6f}{vt}")
    _write_manifest(args.out, args, {"model": mcfg.to_dict(), "train": asdict(tcfg), "init_std": args.init_std},
                    [args.corpus] + ([args.val] if args.val else []), outputs, t0)


def cmd_eval(args) -> None:
    t0 = time.perf_counter()
    model = trainer.load_checkpoint(args.checkpoint)
    c = _load_corpus(args.corpus, model.config)
    res = metrics.corpus_tra(model, c)
    print(f"tra={res.tra:.6f}")
    print(f"loss={res.loss:.6f}")
    res.write_csv(args.out)
    _write_manifest(args.out, args, {"model": model.config.to_dict()}, [args.checkpoint, args.corpus], [args.out], t0)


def _registry(pairs) -> router.ExpertRegistry:
    reg = router.ExpertRegistry()
    for eid, path in pairs:
        reg.register(eid, trainer.load_checkpoint(path))
    return reg


def _labelled_corpus(pairs, cfg: ModelConfig):
    parts = [_load_corpus(path, cfg, name=label) for label, path in pairs]
    for (label, _), c in zip(pairs, parts):
        c.labels = [label] * len(c)
    if len(parts) == 1:
        return parts[0]
    return corpus_mod.interleave(parts)


def cmd_route(args) -> None:
    t0 = time.perf_counter()
    reg = _registry(args.expert)
    cfg = next(iter(reg.experts.values())).config
    c = _labelled_corpus(args.corpus, cfg)
    trace = router.route_stream(reg, c, args.tra_accept)
    trace.write_csv(args.out)
    expected = dict(args.expect or [])
    summary_path = args.summary or f"{args.out}.summary.json"
    trace.write_summary(summary_path, expected)
    s = trace.summary(expected)
    print(json.dumps(s, sort_keys=True))
    _write_manifest(args.out, args, {"tra_accept": args.tra_accept, "expect": expected},
                    [p for _, p in args.expert] + [p for _, p in args.corpus], [args.out, summary_path], t0)


def cmd_ablate(args) -> None:
    t0 = time.perf_counter()
    file_cfg = _load_config_file(args.config)
    mcfg = _model_config(args, file_cfg)
    tcfg = replace(_train_config(args, file_cfg), checkpoint_path=None)
    train_c = _load_corpus(args.corpus, mcfg)
    val_c = _load_corpus(args.val, mcfg)
    rows = trainer.ablate_M(mcfg, args.Ms, train_c, tcfg, val_c)
    trainer.write_ablation(rows, args.out)
    for r in rows:
        print(f"M={r.M} ratio={r.compression_ratio:g} tra={r.val_tra:.6f}")
    _write_manifest(args.out, args, {"model": mcfg.to_dict(), "train": asdict(tcfg), "Ms": args.Ms},
                    [args.corpus, args.val], [args.out], t0)


def cmd_analyze(args) -> None:
    t0 = time.perf_counter()
    model = trainer.load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mats = {}
    for label, path in args.corpus:
        c = _load_corpus(path, model.config, name=label)
        c.labels = [label] * len(c)
        mats[label] = analysis.collect_latents(model, c)
    labels = list(mats)
    pooled = analysis.LatentMatrix(
        np.concatenate([mats[k].data for k in labels]),
        [lab for k in labels for lab in mats[k].labels],
    )
    pca_on = mats[args.pca_label] if args.pca_label else mats[labels[0]]
    report = analysis.pca_cumvar(pca_on)
    report.write_csv(out / "pca.csv")
    coords, labs = analysis.project_2d(pooled)
    analysis.write_projection_csv(coords, labs, out / "projection.csv")
    analysis.write_latents_csv(pooled, out / "latents.csv")
    summary = {"intrinsic_dim_95": report.intrinsic_dim_95, "feature_width": pca_on.shape[1]}
    if len(labels) >= 2:
        summary["probe_accuracy"] = analysis.linear_probe(mats[labels[0]], mats[labels[1]], seed=args.seed)
        summary["probe_pair"] = labels[:2]
    (out / "analysis.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    _write_manifest(str(out / "analysis"), args, {"seed": args.seed, "pca_label": args.pca_label},
                    [args.checkpoint] + [p for _, p in args.corpus],
                    [str(out / n) for n in ("pca.csv", "projection.csv", "latents.csv", "analysis.json")], t0)


# ------------------------------------------------------------------ parser


def _model_flags(p) -> None:
    p.add_argument("--block-len", "--L", dest="block_len", type=_positive)
    p.add_argument("--M", type=_positive)
    p.add_argument("--d-model", dest="d_model", type=_positive)
    p.add_argument("--n-layers-enc", dest="n_layers_enc", type=_positive)
    p.add_argument("--n-layers-dec", dest="n_layers_dec", type=_positive)
    p.add_argument("--n-heads", dest="n_heads", type=_positive)
    p.add_argument("--d-ff", dest="d_ff", type=_positive)
    p.add_argument("--readout", choices=["chunk", "query"], help="how the encoder forms the latents")


def _train_flags(p) -> None:
    p.add_argument("--steps", type=_positive)
    p.add_argument("--batch-size", dest="batch_size", type=_positive)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=_positive)
    p.add_argument("--schedule", choices=["constant", "cosine"])
    p.add_argument("--warmup-steps", dest="warmup_steps", type=int)
    p.add_argument("--grad-clip", dest="grad_clip", type=float)
    p.add_argument("--init-std", dest="init_std", type=float,
                   help="weight init std (default d_model**-0.5)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="latent-router", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a corpus file")
    p.add_argument("--kind", choices=["code", "text", "random"], required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=_positive, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--preview", help="write a plain-text preview of the first blocks here")
    _model_flags(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one expert")
    p.add_argument("--corpus", required=True)
    p.add_argument("--val")
    p.add_argument("--out", required=True)
    p.add_argument("--trace")
    p.add_argument("--config")
    _model_flags(p)
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-block TRA and loss of a checkpoint on a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("route", help="route labelled corpora across experts")
    p.add_argument("--expert", type=_pair, action="append", required=True, metavar="ID=CKPT")
    p.add_argument("--corpus", type=_pair, action="append", required=True, metavar="LABEL=PATH")
    p.add_argument("--expect", type=_pair, action="append", metavar="LABEL=EXPERT",
                   help="expert (or NOVEL) each label should route to; defaults to the label itself")
    p.add_argument("--tra-accept", dest="tra_accept", type=float, default=router.DEFAULT_TRA_ACCEPT)
    p.add_argument("--out", required=True)
    p.add_argument("--summary")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_route)

    p = sub.add_parser("ablate", help="train one model per latent length M")
    p.add_argument("--corpus", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--Ms", type=lambda s: [int(x) for x in s.split(",")], required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    _model_flags(p)
    _train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("analyze", help="PCA, linear probe and 2-D projection of latents")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", type=_pair, action="append", required=True, metavar="LABEL=PATH")
    p.add_argument("--pca-label", dest="pca_label")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_analyze)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    args.argv = argv
    if args.command == "ablate" and args.M is not None:
        ap.error("--M is not accepted by ablate; use --Ms")
    try:
        with trainer.thread_limit():
            args.func(args)
    except (ConfigMismatch, router.RegistryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, TypeError, KeyError) as exc:
        if isinstance(exc, (trainer.CheckpointError, corpus_mod.CorpusFormatError)):
            print(f"error: {exc}", file=sys.stderr)
            return 1
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, trainer.TrainingDiverged, trainer.FreezeViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
