"""Two-task cluster-split: how much of task 1 survives training on task 2.

Runs the methods of configs/synthetic_two_task.yaml over a few seeds, prints
task-1 retention and task-2 accuracy per method, and writes the bar chart.
With the full 20 seeds and only none/PPAP this is acceptance criterion 7.

    python demos/synthetic_forgetting.py --seeds 3 --out runs/demo_forgetting
"""

import argparse
from collections import defaultdict
from pathlib import Path

import numpy as np
import yaml

from ppap.config import validate
from ppap.experiment import execute, plan_cells, write_outputs
from ppap.report import render

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "synthetic_two_task.yaml"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--out", default="runs/demo_forgetting")
    args = ap.parse_args()

    raw = yaml.safe_load(CONFIG.read_text())
    raw["seeds"] = list(range(args.seeds))
    raw["training"]["epochs"] = args.epochs
    raw["output"] = args.out
    cfg = validate(raw)
    results = execute(cfg, plan_cells(cfg), cfg.workers)
    if write_outputs(cfg, results, args.out):
        raise SystemExit(f"some cells failed, see {args.out}/failures.txt")
    rows = [r for res in results for r in res.rows]

    acc = defaultdict(list)
    for r in rows:
        label = r["method"] if r["strength"] == "" else f"{r['method']}({float(r['strength']):g})"
        final = r["stage"] == "after-task2" or (r["method"] == "scratch" and r["stage"] == f"after-{r['task_id']}")
        if final:
            acc[label, r["task_id"]].append(float(r["accuracy"]))
    print(f"{'method':<12} {'task 1':>8} {'task 2':>8}   (mean over {args.seeds} seeds)")
    for label in dict.fromkeys(k[0] for k in acc):
        print(f"{label:<12} {np.mean(acc[label, 'task1']):>8.3f} {np.mean(acc[label, 'task2']):>8.3f}")

    for name, svg in render(rows, "bars").items():
        (Path(args.out) / name).write_text(svg)
        print("wrote", Path(args.out) / name)


if __name__ == "__main__":
    main()
