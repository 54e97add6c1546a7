"""Per-epoch target accuracy, kNN domain gap and domain-head accuracy for a list of variants.

    python scripts/trajectory.py variants.jsonl > trajectory.log

Each line of the JSONL file is a dict of RunConfig fields (nested sections as dicts)
plus an optional ``label``.  Output: one line per variant.
"""

import json
import sys
import time

from mitodann.analysis import domain_gap
from mitodann.cli import run_config
from mitodann.engine import prepare_data, train


def run(values):
    values = dict(values)
    label = values.pop("label", "")
    cfg = run_config(values)
    start = time.time()
    data = prepare_data(cfg)
    rows = []

    def hook(epoch, model, rec):
        gap = domain_gap(model.extract(data.test_x), data.test_y_domain)["accuracy"]
        rows.append((round(rec.target_cell_acc, 3), round(gap, 3), round(rec.domain_acc, 3)))

    res = train(cfg, data, epoch_hook=hook)
    print(label, cfg.mode, cfg.seed, "final", res.final_eval["target_cell_acc"],
          "secs", round(time.time() - start), "(target_acc, gap, head_domain_acc) per epoch:", rows, flush=True)


if __name__ == "__main__":
    for line in open(sys.argv[1]):
        line = line.strip()
        if line and not line.startswith("#"):
            run(json.loads(line))
