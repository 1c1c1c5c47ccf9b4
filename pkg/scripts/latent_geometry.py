"""PCA spectrum, linear probe and 2-D projection of the code expert's latents."""
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))
from _common import experiment, parser  # noqa: E402

import numpy as np

from latent_router.analysis import (LatentMatrix, centroid_separation, collect_latents, linear_probe,
                                    pca_cumvar, project_2d, write_projection_csv)
from latent_router.experiments import heldout_corpora, train_expert


def main():
    args = parser(__doc__).parse_args()
    exp = experiment(args)
    m = train_expert("code", exp, seed=0, cache_dir=args.cache_dir, log=print)
    tiers = heldout_corpora(exp)
    lat = {k: collect_latents(m, c) for k, c in tiers.items()}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rep = pca_cumvar(lat["code"])
    rep.write_csv(out / "pca_code.csv")
    pooled = LatentMatrix(np.concatenate([lat["code"].data, lat["text"].data]),
                          ["code"] * len(lat["code"].data) + ["text"] * len(lat["text"].data))
    coords, labels = project_2d(pooled)
    write_projection_csv(coords, labels, out / "projection.csv")
    between, within = centroid_separation(coords, labels)
    summary = {
        "feature_width": lat["code"].shape[1],
        "intrinsic_dim_95": rep.intrinsic_dim_95,
        "probe_code_vs_text": linear_probe(lat["code"], lat["text"]),
        "probe_code_vs_random": linear_probe(lat["code"], lat["random"]),
        "centroid_distance": between,
        "mean_within_class_spread": within,
    }
    (out / "geometry.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
