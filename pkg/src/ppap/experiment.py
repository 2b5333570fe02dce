"""Turn a validated :class:`ExperimentConfig` into run cells and execute them.

A cell is the unit of parallel work and owns its data, model, optimizer and
accumulators. ``synthetic`` and ``sequence`` cells are (seed, method);
``loco`` cells are (hold-out, epoch config, seed) and run every configured
method against one shared pretraining. Results are merged in cell order, so
the CSV does not depend on the worker count.

Run ids are slash-separated: ``synthetic/s0/ppap(0.1)``,
``loco/e20x20/h3/s0/si(0.005)``. Reports group on the part before the
hold-out (``loco/e20x20``).
"""

from __future__ import annotations

import logging
import re
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._io import atomic_write_bytes, atomic_write_text
from .data import (
    CIFAR100_STATS,
    LOCO_STATS,
    SplitPlan,
    cifar_sequence_tasks,
    gen_synthetic_loco,
    gen_synthetic_tasks,
    load_cifar,
    make_loco_tasks,
)
from .harness import format_csv, metrics_rows, run_sequence, sweep_loco
from .models import build_cnn_multihead, build_convnet, build_mlp
from .plateau import dump_profile

log = logging.getLogger("ppap")


@dataclass(frozen=True)
class Cell:
    index: int
    seed: int
    method: object = None  # MethodSpec, or None for a LOCO sweep
    holdout: int | None = None
    epochs: tuple | None = None

    @property
    def name(self):
        if self.holdout is not None:
            return f"loco/e{self.epochs[0]}x{self.epochs[1]}/h{self.holdout}/s{self.seed}"
        return f"s{self.seed}/{self.method.label}"


@dataclass
class CellResult:
    cell: Cell
    rows: list
    profiles: dict  # file name -> bytes
    error: str | None = None


def plan_cells(cfg):
    seeds = cfg.seeds
    if cfg.protocol == "loco":
        holdouts = range(cfg.data["n_super"]) if cfg.data["holdouts"] == "all" else cfg.data["holdouts"]
        combos = [(tuple(e), h, s) for e in cfg.training["epoch_configs"] for h in holdouts for s in seeds]
        return [Cell(i, s, None, h, e) for i, (e, h, s) in enumerate(combos)]
    methods = cfg.method_specs()
    combos = [(s, m) for s in seeds for m in methods]
    return [Cell(i, s, m) for i, (s, m) in enumerate(combos)]


def _safe(name):
    return re.sub(r"[^A-Za-z0-9_.()+-]+", "_", name)


def _sequence_tasks(cfg, seed):
    d, t = cfg.data, cfg.training
    if cfg.protocol == "synthetic":
        kw = {k: d[k] for k in ("classes_per_task", "n_per_class", "spread", "cluster_std", "dim", "rotation_deg",
                                "noise")}
        return gen_synthetic_tasks(d["kind"], d["n_tasks"], seed, epochs=t["epochs"], batch_size=t["batch_size"],
                                   plan_fractions=tuple(d["split"]), **kw)
    c10 = load_cifar(d["cifar10_path"], "cifar10", "train", CIFAR100_STATS)
    c100 = load_cifar(d["cifar100_path"], "cifar100", "train", CIFAR100_STATS)
    return cifar_sequence_tasks(c10, c100, SplitPlan(tuple(d["split"]), seed), t["epochs"], t["batch_size"],
                                d["n_tasks"])


def _sequence_model(cfg, tasks):
    m = cfg.model
    heads, names = [t.n_classes for t in tasks], [t.head for t in tasks]
    if m["kind"] == "cnn":
        return build_cnn_multihead(tasks[0].train.inputs.shape[1:], heads, names, tuple(m["channels"]), m["dense"],
                                   tuple(m["dropout"]))
    d = int(np.prod(tasks[0].train.inputs.shape[1:]))
    return build_mlp([d, *m["hidden"], 0], head_dims=heads, head_names=names)


def _loco_data(cfg, seed):
    d = cfg.data
    if d["source"] == "cifar":
        return load_cifar(d["cifar100_path"], "cifar100", "train", LOCO_STATS)
    return gen_synthetic_loco(seed, n_super=d["n_super"], n_fine=d["n_fine"], dim=d["dim"],
                              n_per_fine=d["n_per_fine"], super_spread=d["super_spread"],
                              fine_spread=d["fine_spread"], noise=d["noise"])


def _loco_model(cfg, pretrain, finetune):
    m = cfg.model
    heads = [pretrain.n_classes, finetune.n_classes]
    if m["kind"] == "cnn":
        return build_convnet(pretrain.train.inputs.shape[1:], heads)
    d = int(np.prod(pretrain.train.inputs.shape[1:]))
    return build_mlp([d, *m["hidden"], 0], head_dims=heads, head_names=[pretrain.head, finetune.head])


def _black(stats):
    """Normalised value of a zero pixel: crop padding is black before normalisation."""
    mean, std = (np.asarray(v, np.float32) for v in stats)
    return tuple(float(x) for x in -mean / std)


def run_cell(cfg, cell):
    """Execute one cell; exceptions are captured into the result rather than raised."""
    try:
        timing = cfg.record_timing
        profiles = {}
        if cell.holdout is None:
            tasks = _sequence_tasks(cfg, cell.seed)
            rcfg = cfg.run_config(_sequence_model(cfg, tasks), cell.seed)
            if cfg.data["source"] == "cifar":
                rcfg.augment_fill = _black(CIFAR100_STATS)
            rec = run_sequence(tasks, cell.method, rcfg, cell.seed)
            run_id = f"{cfg.protocol}/{cell.name}"
            rows = metrics_rows(rec, run_id, timing)
            for p in rec.profiles:
                profiles[f"{_safe(run_id)}__{_safe(p.task_id)}.ppap"] = dump_profile(p)
            return CellResult(cell, rows, profiles)
        data = _loco_data(cfg, cell.seed)
        plan = SplitPlan(tuple(cfg.data["split"]), cell.seed)
        pre, fin = make_loco_tasks(data, cell.holdout, plan, cell.epochs, cfg.training["batch_size"],
                                   cfg.data["n_super"])
        rcfg = cfg.run_config(_loco_model(cfg, pre, fin), cell.seed)
        if cfg.data["source"] == "cifar":
            rcfg.augment_fill = _black(LOCO_STATS)
        rows = []
        for rec in sweep_loco(pre, fin, cfg.method_specs(), rcfg, cell.seed):
            label = rec.method if rec.strength is None else f"{rec.method}({rec.strength:g})"
            rows.extend(metrics_rows(rec, f"{cell.name}/{label}", timing))
            for p in rec.profiles:
                profiles.setdefault(f"{_safe(cell.name)}.ppap", dump_profile(p))
        return CellResult(cell, rows, profiles)
    except Exception:  # reported per cell; the run exits non-zero
        return CellResult(cell, [], {}, traceback.format_exc())


def _run_cell_star(args):
    return run_cell(*args)


def execute(cfg, cells=None, workers=1):
    """Run all cells (bounded pool when ``workers > 1``); results in cell order."""
    cells = plan_cells(cfg) if cells is None else cells
    results = []

    def done(res):
        results.append(res)
        status = "failed" if res.error else f"{len(res.rows)} rows"
        log.info("cell %d/%d %s: %s", len(results), len(cells), res.cell.name, status)

    if workers <= 1 or len(cells) <= 1:
        for c in cells:
            done(run_cell(cfg, c))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for res in pool.map(_run_cell_star, [(cfg, c) for c in cells]):
                done(res)
    return sorted(results, key=lambda r: r.cell.index)


def write_outputs(cfg, results, out):
    """Write the metrics CSV (or a ``.partial`` one plus ``failures.txt``) and profiles.

    Returns the number of failed cells.
    """
    out = Path(out)
    rows = [row for r in results for row in r.rows]
    failed = [r for r in results if r.error]
    if failed:
        atomic_write_text(out / "metrics.partial.csv", format_csv(rows))
        report = "".join(f"== cell {r.cell.index} ({r.cell.name})\n{r.error}\n" for r in failed)
        atomic_write_text(out / "failures.txt", report)
        return len(failed)
    if cfg.save_profiles:
        for r in results:
            for name, blob in r.profiles.items():
                atomic_write_bytes(out / "profiles" / name, blob)
    atomic_write_text(out / "metrics.csv", format_csv(rows))
    for stale in ("metrics.partial.csv", "failures.txt"):
        (out / stale).unlink(missing_ok=True)
    return 0
