"""Five-seed dann vs baseline comparison on the synthetic benchmark.

    python scripts/benchmark.py --config configs/benchmark.yaml --out runs/benchmark [--runs 5]

Writes ``<out>/<mode>/suite_<mode>.json`` per mode plus ``<out>/comparison.json``.
"""

import argparse
import dataclasses
import json
from pathlib import Path

from mitodann.cli import apply_overrides, load_config_file, run_config
from mitodann.engine import run_suite


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/benchmark.yaml")
    ap.add_argument("--out", default="runs/benchmark")
    ap.add_argument("--runs", type=int, default=5)
    ap.add_argument("--set", action="append", default=[])
    args = ap.parse_args()
    cfg = run_config(apply_overrides(load_config_file(args.config), args.set))
    out = Path(args.out)
    table = {}
    for mode in ("dann", "baseline"):
        summary = run_suite(dataclasses.replace(cfg, mode=mode, output_dir=str(out / mode)), args.runs, with_gap=True)
        table[mode] = {"target_cell_acc": summary["target_cell_acc"], "domain_gap": summary["domain_gap"]}
        print(mode, json.dumps(table[mode]["target_cell_acc"]), "gap", table[mode]["domain_gap"]["median"], flush=True)
    (out / "comparison.json").write_text(json.dumps(table, indent=2) + "\n")


if __name__ == "__main__":
    main()
