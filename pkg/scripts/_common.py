import argparse
from dataclasses import replace

from latent_router.experiments import ExperimentConfig


def parser(description: str) -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(description=description)
    ap.add_argument("--steps", type=int, default=3000)
    ap.add_argument("--lr", type=float, default=5e-3)
    ap.add_argument("--train-blocks", type=int, default=8000)
    ap.add_argument("--cache-dir", default="runs/cache", help="trained experts are reused from here")
    ap.add_argument("--out", default="runs")
    return ap


def experiment(args) -> ExperimentConfig:
    exp = ExperimentConfig()
    return replace(exp, train=replace(exp.train, steps=args.steps, lr=args.lr), train_blocks=args.train_blocks)
