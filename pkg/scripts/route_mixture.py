"""Route a mixed held-out stream across a code expert and a text expert."""
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))
from _common import experiment, parser  # noqa: E402

from latent_router.corpus import interleave
from latent_router.experiments import heldout_corpora, train_expert
from latent_router.router import ExpertRegistry, route_stream


def main():
    ap = parser(__doc__)
    ap.add_argument("--tra-accept", type=float, default=0.5)
    args = ap.parse_args()
    exp = experiment(args)
    reg = ExpertRegistry()
    for kind in ("code", "text"):
        reg.register(kind, train_expert(kind, exp, seed=0, cache_dir=args.cache_dir, log=print))
    tiers = heldout_corpora(exp)
    mix = interleave([tiers["code"], tiers["text"], tiers["random"]])
    trace = route_stream(reg, mix, tra_accept=args.tra_accept)
    expected = {"in_domain": "code", "semi_ood": "text", "full_ood": "NOVEL"}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trace.write_csv(out / "routing.csv")
    trace.write_summary(out / "routing_summary.json", expected)
    print(trace.summary(expected))


if __name__ == "__main__":
    main()
