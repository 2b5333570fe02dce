"""Retention vs adaptation on synthetic leave-one-superclass-out.

Pretrains on 19 of 20 Gaussian superclasses, finetunes on the held-out
superclass's 5 fine classes with each method, then linear-probes the
pretraining task. Prints the best mean euclidean score of each method family
and writes the scatter chart with its three reference lines.

The full configs/loco_synthetic.yaml (20 hold-outs x 3 seeds) is acceptance
criterion 8 and takes about half an hour on one core; the defaults here use
a few hold-outs.

    python demos/loco_tradeoff.py --holdouts 0 1 2 3 --out runs/demo_loco
"""

import argparse
from pathlib import Path

import yaml

from ppap.config import validate
from ppap.experiment import execute, plan_cells, write_outputs
from ppap.report import frontier_scores, render

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "loco_synthetic.yaml"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--holdouts", type=int, nargs="+", default=[0, 1, 2, 3])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default="runs/demo_loco")
    args = ap.parse_args()

    raw = yaml.safe_load(CONFIG.read_text())
    raw.update(seeds=[args.seed], workers=args.workers, output=args.out)
    raw["data"]["holdouts"] = args.holdouts
    cfg = validate(raw)
    results = execute(cfg, plan_cells(cfg), cfg.workers)
    if write_outputs(cfg, results, args.out):
        raise SystemExit(f"some cells failed, see {args.out}/failures.txt")
    rows = [r for res in results for r in res.rows]

    for (group, seed), fams in sorted(frontier_scores(rows).items()):
        print(f"{group} seed {seed}, {len(args.holdouts)} hold-outs")
        for fam, (score, label) in sorted(fams.items(), key=lambda kv: -kv[1][0]):
            print(f"  {fam:<5} best {label:<12} mean euclidean {score:.4f}")
    for name, svg in render(rows, "scatter").items():
        (Path(args.out) / name).write_text(svg)
        print("wrote", Path(args.out) / name)


if __name__ == "__main__":
    main()
