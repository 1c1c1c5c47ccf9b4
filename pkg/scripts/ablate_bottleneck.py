"""Held-out TRA of the code expert as the number of latent vectors M varies."""
import sys
from dataclasses import replace
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))
from _common import experiment, parser  # noqa: E402

from latent_router.experiments import heldout_corpora, train_expert
from latent_router.metrics import corpus_tra
from latent_router.trainer import AblationRow, write_ablation


def main():
    ap = parser(__doc__)
    ap.add_argument("--Ms", type=lambda s: [int(x) for x in s.split(",")], default=[1, 2, 4, 8])
    args = ap.parse_args()
    exp = experiment(args)
    val = heldout_corpora(exp)["code"]
    rows = []
    for M in sorted(args.Ms):
        e = replace(exp, model=replace(exp.model, M=M))
        m = train_expert("code", e, seed=0, cache_dir=args.cache_dir, log=print)
        rows.append(AblationRow(M, e.model.compression_ratio, corpus_tra(m, val).tra))
        print(f"M={M} ratio={rows[-1].compression_ratio:g} tra={rows[-1].val_tra:.4f}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ablation(rows, out / "ablation.csv")


if __name__ == "__main__":
    main()
