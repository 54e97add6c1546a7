"""Train one dann and one baseline model, then export t-SNE coordinates of held-out stem features.

    python scripts/embeddings.py --config configs/benchmark.yaml --out runs/embeddings

Produces ``<out>/<mode>/final.ckpt`` and ``<out>/tsne_<mode>.csv`` (columns x,y,dataset,y_C,y_D)
for side-by-side scatter plots with any plotting tool.
"""

import argparse
import dataclasses
from pathlib import Path

import numpy as np

from mitodann.analysis import EmbeddingSet, TsneConfig, domain_gap, export_embedding, tsne
from mitodann.cli import apply_overrides, load_config_file, run_config
from mitodann.engine import prepare_data, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/benchmark.yaml")
    ap.add_argument("--out", default="runs/embeddings")
    ap.add_argument("--set", action="append", default=[])
    ap.add_argument("--perplexity", type=float, default=30.0)
    args = ap.parse_args()
    cfg = run_config(apply_overrides(load_config_file(args.config), args.set))
    out = Path(args.out)
    data = prepare_data(cfg)
    test = data.manifest.subset("test")
    for mode in ("dann", "baseline"):
        res = train(dataclasses.replace(cfg, mode=mode, output_dir=str(out / mode)), data)
        feats = res.model.extract(data.test_x)
        emb = EmbeddingSet(feats, test.datasets(), data.test_y_cell, data.test_y_domain)
        coords = tsne(emb, TsneConfig(perplexity=args.perplexity, seed=cfg.seed)).embedding
        export_embedding(coords, emb, out / f"tsne_{mode}.csv")
        gap = domain_gap(emb)["accuracy"]
        print(mode, "target acc", res.final_eval["target_cell_acc"], "domain gap", gap,
              "feature norm", float(np.linalg.norm(feats, axis=1).mean()), flush=True)


if __name__ == "__main__":
    main()
