"""Continual-learning protocols and metrics.

Two protocols are provided:

* :func:`run_sequence` trains a multi-head model on tasks in order and reports
  validation accuracy on every task seen so far after each stage.
* :func:`run_loco` / :func:`sweep_loco` pretrain on all superclasses but one,
  finetune on the held-out superclass's fine classes, then linear-probe the
  pretraining head. The probe accuracy is the retention axis (X) and the
  finetune accuracy the adaptation axis (Y).

Method state (profiles, importance maps) lives only inside a run; every run
takes an explicit seed and derives independent generators from it.
"""

from __future__ import annotations

import csv
import io
import math
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .baselines import SITracker, add_gradients, ewc_fisher, merge_importance, penalty_gradient
from .data import Batch, TaskSpec, augment
from .errors import ConfigError
from .models import Head, ModelSpec, activate_head, build_mlp, init_head, init_params, sync_trainable
from .optim import apply_update, make_optimizer
from .plateau import BlendConfig, PlateauProfiler, combine_profiles, loss_delta, make_ppap_hook

__all__ = [
    "TaskSpec", "MethodSpec", "RunConfig", "MetricsRecord", "train_task", "run_sequence", "run_loco",
    "sweep_loco", "loco_pretrain", "loco_finetune", "linear_probe", "evaluate", "euclidean_score",
    "CSV_FIELDS", "metrics_rows", "format_csv", "read_metrics_csv",
]

METHODS = ("none", "ppap", "si", "ewc", "scratch")


@dataclass(frozen=True)
class MethodSpec:
    name: str = "none"
    r: float = 1.0
    k: float = 25.0
    combine: str = "min"
    spike_trigger: str = "positive"
    default_score: float = 1.0
    c: float = 0.0
    xi: float = 1e-3
    lam: float = 0.0
    fisher_samples: int = 2000

    def __post_init__(self):
        if self.name not in METHODS:
            raise ConfigError(f"unknown method {self.name!r}; choose from {METHODS}", "method.name")
        BlendConfig(self.r, self.default_score)
        if self.k <= 0:
            raise ConfigError("k must be positive", "method.k")
        if self.c < 0 or self.lam < 0:
            raise ConfigError("regularization strength must be >= 0", "method")
        if self.xi <= 0:
            raise ConfigError("xi must be positive", "method.xi")
        if self.fisher_samples < 1:
            raise ConfigError("fisher_samples must be >= 1", "method.fisher_samples")

    @property
    def strength(self):
        return {"ppap": self.r, "si": self.c, "ewc": self.lam}.get(self.name)

    @property
    def label(self):
        s = self.strength
        return self.name if s is None else f"{self.name}({s:g})"


@dataclass
class RunConfig:
    model: ModelSpec | None = None
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    augment: bool = False
    augment_fill: tuple | None = None
    probe_epochs: int = 100
    probe_patience: int = 10
    probe_lr: float = 1e-3
    probe_batch_size: int = 256
    seed: int = 0

    def make_optimizer(self, lr=None):
        lr = self.lr if lr is None else lr
        if self.optimizer == "adam":
            return make_optimizer("adam", lr=lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)
        return make_optimizer(self.optimizer, lr=lr, momentum=self.momentum)


@dataclass
class MetricsRecord:
    method: str
    strength: float | None
    seed: int
    rows: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    retention: float | None = None
    adaptation: float | None = None
    euclidean: float | None = None
    references: dict = field(default_factory=dict)
    profiles: list = field(default_factory=list)
    params: object = None  # final parameters (sequence runs)
    wall_time: float = 0.0

    def add(self, task_id, stage, accuracy, euclidean=None):
        if not 0.0 <= accuracy <= 1.0:
            raise ValueError(f"accuracy {accuracy} outside [0, 1]")
        self.rows.append({"task_id": task_id, "stage": stage, "accuracy": accuracy, "euclidean_score": euclidean})


def _rngs(seed, *labels):
    ss = np.random.SeedSequence([int(seed), *[zlib.crc32(label.encode()) for label in labels]])
    return np.random.default_rng(ss)


# metrics ---------------------------------------------------------------------------

def euclidean_score(x, y):
    """Distance of (retention, adaptation) from the origin."""
    for v in (x, y):
        if not 0.0 <= v <= 1.0:
            raise ConfigError(f"accuracy {v} outside [0, 1]")
    return math.sqrt(x * x + y * y)


def evaluate(model, params, split, head=None):
    """Fraction of argmax-correct predictions on ``split`` through ``head``."""
    if split is None or len(split) == 0:
        raise ConfigError("cannot evaluate on an empty split")
    m = activate_head(model, head) if head is not None else model
    logits = nn.predict_logits(m, params, split.inputs)
    return float(np.mean(logits.argmax(axis=1) == split.labels))


# training -----------------------------------------------------------------------------

def train_task(model, params, task, cfg, rng, *, hook=None, profiler=None, si_tracker=None, penalty=None):
    """Train the active head + backbone on ``task``; returns per-step losses.

    ``profiler`` and ``si_tracker`` observe each step (actual parameter change
    and the unregularized mini-batch gradient); ``penalty`` adds an anchor
    penalty gradient before the optimizer; ``hook`` modifies each raw update.
    None of the observers consume random numbers, so attaching them never
    changes the trajectory.
    """
    opt = cfg.make_optimizer()
    names = [n for n in model.trainable_names() if params.is_trainable(n)]
    observe = profiler is not None or si_tracker is not None
    n = len(task.train)
    losses = []
    for _ in range(task.epochs):
        order = rng.permutation(n)
        for start in range(0, n, task.batch_size):
            batch = task.train.take(order[start:start + task.batch_size])
            if cfg.augment:
                batch = augment(batch, rng=rng, fill=cfg.augment_fill)
            loss, graph = nn.forward(model, params, batch, train=True, rng=rng)
            grads = graph.backward()
            step_grads = grads if penalty is None else add_gradients(grads, penalty_gradient(penalty, params))
            before = {k: params[k].copy() for k in names} if observe else None
            updates = opt.compute_raw_update(step_grads, names)
            apply_update(params, updates, hook, step_grads)
            if observe:
                delta = {k: params[k].astype(np.float64) - before[k] for k in names}
                if profiler is not None:
                    dl = loss_delta(model, params, batch, loss, masks=graph.masks)
                    profiler.observe(dl, delta, grads)
                if si_tracker is not None:
                    si_tracker.track(grads, delta)
            losses.append(loss)
    return losses


def default_model(tasks, hidden=(32, 32)):
    d = int(np.prod(tasks[0].train.inputs.shape[1:]))
    return build_mlp([d, *hidden, 0], head_dims=[t.n_classes for t in tasks], head_names=[t.head for t in tasks])


def _check_heads(model, tasks):
    for t in tasks:
        if t.head not in model.head_names:
            raise ConfigError(f"task {t.task_id!r} uses head {t.head!r} missing from the model", "tasks")
        if model.head_spec(t.head).n_out != t.n_classes:
            raise ConfigError(
                f"head {t.head!r} has {model.head_spec(t.head).n_out} outputs, task {t.task_id!r} has {t.n_classes} classes",
                "tasks",
            )


def run_sequence(tasks, method, config=None, seed=None):
    """Train ``tasks`` in order with ``method``; evaluate every seen task after each stage.

    PPAP profiles are accumulated during every task and the combination of all
    previous profiles modulates the updates of the next one. SI and EWC
    importances are summed across tasks, anchored at the latest task's end.
    """
    config = config or RunConfig()
    seed = config.seed if seed is None else seed
    tasks = list(tasks)
    model = config.model or default_model(tasks)
    _check_heads(model, tasks)
    t0 = time.perf_counter()
    rec = MetricsRecord(method.name, method.strength, seed)
    rng = _rngs(seed, "train")
    fisher_rng = _rngs(seed, "fisher")
    params = init_params(model, seed)
    profiles, importance = [], None

    for t, task in enumerate(tasks):
        m = activate_head(model, task.head)
        if method.name == "scratch":
            params = init_params(m, seed * 7919 + t)
        sync_trainable(m, params)
        names = [n for n in m.trainable_names() if params.is_trainable(n)]
        hook = profiler = tracker = None
        if method.name == "ppap":
            if profiles:
                combined = combine_profiles(profiles, method.combine, method.default_score)
                hook = make_ppap_hook(combined, BlendConfig(method.r, method.default_score))
            profiler = PlateauProfiler.for_params(params, names, method.k, method.spike_trigger)
        elif method.name == "si":
            tracker = SITracker(params, names)
        penalty = importance if method.name in ("si", "ewc") and importance is not None else None
        train_task(m, params, task, config, rng, hook=hook, profiler=profiler, si_tracker=tracker, penalty=penalty)

        if profiler is not None:
            profiles.append(profiler.finalize(task.task_id))
        elif tracker is not None:
            importance = merge_importance(importance, tracker.consolidate(params, method.xi, method.c))
        elif method.name == "ewc":
            size = min(method.fisher_samples, len(task.train))
            idx = np.sort(fisher_rng.choice(len(task.train), size=size, replace=False))
            importance = merge_importance(importance, ewc_fisher(m, params, task.train.take(idx), method.lam, names))

        stage = f"after-{task.task_id}"
        seen = [task] if method.name == "scratch" else tasks[: t + 1]
        for prev in seen:
            rec.add(prev.task_id, stage, evaluate(model, params, prev.val, prev.head))
        if method.name == "scratch":
            rec.final[task.task_id] = rec.rows[-1]["accuracy"]

    if method.name != "scratch":
        rec.final = {r["task_id"]: r["accuracy"] for r in rec.rows if r["stage"] == f"after-{tasks[-1].task_id}"}
    accs = [rec.final[t.task_id] for t in tasks]
    rec.adaptation = accs[-1]
    rec.retention = float(np.mean(accs[:-1])) if len(accs) > 1 else None
    if rec.retention is not None:
        rec.euclidean = euclidean_score(rec.retention, rec.adaptation)
        for row in rec.rows:
            if row["stage"] == f"after-{tasks[-1].task_id}" and row["task_id"] == tasks[-1].task_id:
                row["euclidean_score"] = rec.euclidean
    rec.profiles = profiles
    rec.params = params
    rec.wall_time = time.perf_counter() - t0
    return rec


# LOCO ---------------------------------------------------------------------------------

def linear_probe(model, params, probe_task, cfg=None, epochs=None, seed=0):
    """Retrain a freshly initialized head on frozen-backbone features.

    Features are computed once in evaluation mode; only the head of
    ``probe_task.head`` is trained (on ``probe_task.train``) and its validation
    accuracy returned. ``params`` is never modified. Training stops early when
    the epoch loss has not improved for ``cfg.probe_patience`` epochs.
    """
    cfg = cfg or RunConfig()
    epochs = cfg.probe_epochs if epochs is None else epochs
    head = model.head_spec(probe_task.head)
    if head.n_out != probe_task.n_classes:
        raise ConfigError(f"probe head {head.name!r} has {head.n_out} outputs, task has {probe_task.n_classes}")
    f_train = nn.features(model, params, probe_task.train.inputs)
    f_val = nn.features(model, params, probe_task.val.inputs)
    probe = ModelSpec((f_train.shape[1],), (), (Head(head.name, f_train.shape[1], head.n_out),), head.name)
    rng = _rngs(seed, "probe")
    pp = nn.ParamStore()
    init_head(pp, probe.head_spec(), rng)
    opt = make_optimizer("adam", lr=cfg.probe_lr)
    names = probe.trainable_names()
    train = Batch(f_train, probe_task.train.labels)
    best, stale = math.inf, 0
    for _ in range(epochs):
        order = rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(train), cfg.probe_batch_size):
            idx = order[start:start + cfg.probe_batch_size]
            loss, graph = nn.forward(probe, pp, train.take(idx))
            apply_update(pp, opt.compute_raw_update(graph.backward(), names))
            total += loss * len(idx)
        total /= len(train)
        if total < best - 1e-4 * max(1.0, abs(best) if math.isfinite(best) else 1.0):
            best, stale = total, 0
        else:
            stale += 1
            if cfg.probe_patience and stale >= cfg.probe_patience:
                break
    return evaluate(probe, pp, Batch(f_val, probe_task.val.labels))


@dataclass
class LocoSnapshot:
    model: ModelSpec
    params: nn.ParamStore
    pretrain_accuracy: float
    profile: object = None
    si_map: object = None
    ewc_map: object = None
    seed: int = 0


def loco_model(pretrain, finetune, config):
    if config.model is not None:
        model = config.model
    else:
        d = int(np.prod(pretrain.train.inputs.shape[1:]))
        model = build_mlp([d, 64, 64, 0], head_dims=[pretrain.n_classes, finetune.n_classes],
                          head_names=[pretrain.head, finetune.head])
    _check_heads(model, [pretrain, finetune])
    return model


def loco_pretrain(pretrain, finetune, config=None, methods=(), seed=None):
    """Pretrain once, collecting whatever the given methods need from the pretraining run."""
    config = config or RunConfig()
    seed = config.seed if seed is None else seed
    model = activate_head(loco_model(pretrain, finetune, config), pretrain.head)
    params = init_params(model, seed)
    names = [n for n in model.trainable_names() if params.is_trainable(n)]
    want = {m.name for m in methods}
    ppap = [m for m in methods if m.name == "ppap"]
    profiler = tracker = None
    if ppap:
        k = {m.k for m in ppap}
        trig = {m.spike_trigger for m in ppap}
        if len(k) > 1 or len(trig) > 1:
            raise ConfigError("all PPAP variants in one LOCO sweep must share k and spike_trigger", "methods")
        profiler = PlateauProfiler.for_params(params, names, k.pop(), trig.pop())
    if "si" in want:
        tracker = SITracker(params, names)
    train_task(model, params, pretrain, config, _rngs(seed, "pretrain"), profiler=profiler, si_tracker=tracker)
    snap = LocoSnapshot(model, params, evaluate(model, params, pretrain.val), seed=seed)
    if profiler is not None:
        snap.profile = profiler.finalize(pretrain.task_id)
    if tracker is not None:
        xi = {m.xi for m in methods if m.name == "si"}.pop()
        snap.si_map = tracker.consolidate(params, xi)
    if "ewc" in want:
        size = min(max(m.fisher_samples for m in methods if m.name == "ewc"), len(pretrain.train))
        idx = np.sort(_rngs(seed, "fisher").choice(len(pretrain.train), size=size, replace=False))
        snap.ewc_map = ewc_fisher(model, params, pretrain.train.take(idx), 0.0, names)
    return snap


def loco_finetune(snap, finetune, method, config=None):
    """Finetune a copy of the snapshot with ``method`` active; returns (params, finetune accuracy)."""
    config = config or RunConfig()
    model = activate_head(snap.model, finetune.head)
    params = snap.params.copy()
    sync_trainable(model, params)
    hook = penalty = None
    if method.name == "ppap":
        hook = make_ppap_hook(snap.profile, BlendConfig(method.r, method.default_score))
    elif method.name == "si":
        penalty = snap.si_map.with_strength(method.c)
    elif method.name == "ewc":
        penalty = snap.ewc_map.with_strength(method.lam)
    elif method.name != "none":
        raise ConfigError(f"method {method.name!r} is not supported in LOCO", "method.name")
    train_task(model, params, finetune, config, _rngs(snap.seed, "finetune"), hook=hook, penalty=penalty)
    return params, evaluate(model, params, finetune.val)


def _loco_record(snap, pretrain, finetune, method, config):
    t0 = time.perf_counter()
    params, y = loco_finetune(snap, finetune, method, config)
    x = linear_probe(snap.model, params, pretrain, config, seed=snap.seed)
    rec = MetricsRecord(method.name, method.strength, snap.seed)
    score = euclidean_score(x, y)
    rec.add(pretrain.task_id, "pretrain_end", snap.pretrain_accuracy)
    rec.add(pretrain.task_id, "probe", x, score)
    rec.add(finetune.task_id, "finetune_end", y, score)
    rec.retention, rec.adaptation, rec.euclidean = x, y, score
    rec.final = {pretrain.task_id: x, finetune.task_id: y}
    rec.wall_time = time.perf_counter() - t0
    return rec


def sweep_loco(pretrain, finetune, methods, config=None, seed=None):
    """One pretraining run shared by every method variant; plain finetuning is always included.

    Each record's ``references`` holds the three reference accuracies: end of
    pretraining, probed pretraining accuracy after plain finetuning, and plain
    finetuning accuracy.
    """
    config = config or RunConfig()
    seed = config.seed if seed is None else seed
    methods = list(methods)
    baseline = next((m for m in methods if m.name == "none"), MethodSpec("none"))
    snap = loco_pretrain(pretrain, finetune, config, methods, seed)
    base = _loco_record(snap, pretrain, finetune, baseline, config)
    refs = {"pretrain_end": snap.pretrain_accuracy, "degraded": base.retention, "finetune_target": base.adaptation}
    out = []
    for m in methods:
        rec = base if m is baseline else _loco_record(snap, pretrain, finetune, m, config)
        rec.references = dict(refs)
        if m.name == "ppap":
            rec.profiles = [snap.profile]
        out.append(rec)
    return out


def run_loco(pretrain, finetune, method, config=None, seed=None):
    """Single-method LOCO run; plain finetuning from the same snapshot supplies the references."""
    methods = [method] if method.name == "none" else [MethodSpec("none"), method]
    return sweep_loco(pretrain, finetune, methods, config, seed)[-1]


# CSV ---------------------------------------------------------------------------------

CSV_FIELDS = ["run_id", "method", "strength", "task_id", "stage", "accuracy", "euclidean_score", "seed",
              "wall_time_seconds"]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_rows(record, run_id, record_timing=False):
    wall = record.wall_time if record_timing else None
    return [
        {
            "run_id": run_id,
            "method": record.method,
            "strength": _fmt(record.strength),
            "task_id": row["task_id"],
            "stage": row["stage"],
            "accuracy": _fmt(row["accuracy"]),
            "euclidean_score": _fmt(row["euclidean_score"]),
            "seed": str(record.seed),
            "wall_time_seconds": "" if wall is None else f"{wall:.3f}",
        }
        for row in record.rows
    ]


def format_csv(rows):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def read_metrics_csv(paths):
    """Rows from one or more metrics CSVs; every file must carry exactly the schema header."""
    if isinstance(paths, (str, bytes)) or hasattr(paths, "__fspath__"):
        paths = [paths]
    rows = []
    for p in paths:
        with open(p, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != CSV_FIELDS:
                raise ConfigError(f"{p}: header {reader.fieldnames} does not match schema {CSV_FIELDS}")
            rows.extend(reader)
    if not rows:
        raise ConfigError("no metric rows found")
    return rows
