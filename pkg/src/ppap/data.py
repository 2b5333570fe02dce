"""Datasets, splits and task construction.

CIFAR files are read from the public binary layout (no downloading). The
synthetic generators are small, seeded stand-ins for the image protocols so
that whole experiments run in seconds.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._io import atomic_write_bytes
from .errors import ConfigError, FormatError

CIFAR100_STATS = ((0.5071, 0.4867, 0.4408), (0.2675, 0.2565, 0.2761))
LOCO_STATS = ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616))

_PIXELS = 3072


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ConfigError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def take(self, idx):
        return Batch(self.inputs[idx], self.labels[idx])


@dataclass
class LabeledSet:
    """Inputs with fine labels and optional coarse (superclass) labels."""

    inputs: np.ndarray
    labels: np.ndarray
    coarse: np.ndarray | None = None

    def __len__(self):
        return len(self.labels)

    def take(self, idx):
        return LabeledSet(self.inputs[idx], self.labels[idx], None if self.coarse is None else self.coarse[idx])

    def batch(self, idx=None, coarse=False):
        idx = np.arange(len(self)) if idx is None else idx
        labels = self.coarse if coarse else self.labels
        return Batch(self.inputs[idx], labels[idx])


@dataclass
class TaskSpec:
    task_id: str
    train: Batch
    val: Batch
    head: str
    n_classes: int
    epochs: int = 1
    batch_size: int = 32
    test: Batch | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}", f"{self.task_id}.epochs")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", f"{self.task_id}.batch_size")
        if len(self.train) == 0 or len(self.val) == 0:
            raise ConfigError("train and validation splits must be non-empty", self.task_id)


# CIFAR -----------------------------------------------------------------------------

def normalize(x, stats):
    mean, std = (np.asarray(s, np.float32).reshape(1, -1, 1, 1) for s in stats)
    return (x - mean) / std


def denormalize(x, stats):
    mean, std = (np.asarray(s, np.float32).reshape(1, -1, 1, 1) for s in stats)
    return x * std + mean


def parse_cifar(buf, variant):
    """Decode raw CIFAR records into (pixels uint8 N x 3 x 32 x 32, labels, coarse)."""
    if variant not in ("cifar10", "cifar100"):
        raise ConfigError(f"unknown CIFAR variant {variant!r}")
    n_label = 1 if variant == "cifar10" else 2
    rec = n_label + _PIXELS
    if len(buf) == 0:
        raise FormatError("empty CIFAR file", 0)
    if len(buf) % rec:
        raise FormatError(f"file size {len(buf)} is not a multiple of the {rec}-byte record", (len(buf) // rec) * rec)
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, rec)
    pixels = raw[:, n_label:].reshape(-1, 3, 32, 32)
    if variant == "cifar10":
        return pixels, raw[:, 0].astype(np.int64), None
    return pixels, raw[:, 1].astype(np.int64), raw[:, 0].astype(np.int64)


def _cifar_files(path, variant, split):
    path = Path(path)
    if path.is_file():
        return [path]
    if variant == "cifar10":
        names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    else:
        names = [f"{split}.bin"]
    files = [path / n for n in names]
    missing = [str(f) for f in files if not f.exists()]
    if missing:
        raise ConfigError(f"missing CIFAR files: {missing}", str(path))
    return files


def load_cifar(path, variant, split="train", stats=CIFAR100_STATS):
    """Read a CIFAR binary file (or the standard directory layout) into a LabeledSet.

    Pixels are scaled to [0, 1] and normalised per channel with ``stats``
    (``(mean, std)``). CIFAR-100 sets ``coarse`` to the superclass labels.
    """
    parts = []
    for f in _cifar_files(path, variant, split):
        parts.append(parse_cifar(Path(f).read_bytes(), variant))
    pixels = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    coarse = None if parts[0][2] is None else np.concatenate([p[2] for p in parts])
    x = normalize(pixels.astype(np.float32) / np.float32(255.0), stats).astype(np.float32)
    return LabeledSet(x, labels, coarse)


# splits ------------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitPlan:
    fractions: tuple = (0.8, 0.2)
    seed: int = 0
    stratify: bool = True

    def __post_init__(self):
        if not self.fractions or any(f < 0 for f in self.fractions):
            raise ConfigError(f"invalid split fractions {self.fractions}", "fractions")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {sum(self.fractions)}", "fractions")


def _largest_remainder(n, fractions):
    raw = [n * f for f in fractions]
    counts = [int(np.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def make_task_splits(labels, plan):
    """Disjoint, seeded index arrays, one per fraction.

    With stratification each sample gets a within-class quantile key (class
    order shuffled by the seed) and the sorted sequence is cut at the global
    boundaries, so totals are exact and each class is split within +-1 sample.
    """
    labels = np.asarray(getattr(labels, "labels", labels))
    n = len(labels)
    rng = np.random.default_rng(plan.seed)
    counts = _largest_remainder(n, plan.fractions)
    parts = sum(1 for f in plan.fractions if f > 0)
    if plan.stratify:
        keys = np.empty(n)
        for c in np.unique(labels):
            idx = np.flatnonzero(labels == c)
            if len(idx) < parts:
                raise ConfigError(f"class {c} has {len(idx)} samples, fewer than {parts} split parts")
            perm = rng.permutation(idx)
            keys[perm] = (np.arange(len(perm)) + 0.5) / len(perm)
        tiebreak = rng.permutation(n)
        order = np.lexsort((tiebreak, keys))
    else:
        order = rng.permutation(n)
    bounds = np.cumsum([0] + counts)
    return [np.sort(order[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]


def make_loco_tasks(data, holdout, plan=None, epochs=(20, 20), batch_size=256, n_super=20):
    """Leave-one-superclass-out pair: (pretrain on superclasses, finetune on held-out fine classes).

    Pretrain labels are the remaining coarse labels relabelled to 0..n_super-2;
    finetune labels are the held-out superclass's fine labels relabelled 0..4.
    """
    if data.coarse is None:
        raise ConfigError("LOCO needs coarse (superclass) labels")
    if not 0 <= holdout < n_super:
        raise ConfigError(f"holdout superclass must be in [0, {n_super}), got {holdout}", "holdout")
    plan = plan or SplitPlan((0.8, 0.16, 0.04))
    splits = make_task_splits(data.labels, plan)
    while len(splits) < 3:
        splits.append(np.zeros(0, np.int64))
    keep_super = np.array([c for c in range(n_super) if c != holdout])
    super_map = np.full(n_super, -1)
    super_map[keep_super] = np.arange(len(keep_super))
    fine_ids = np.unique(data.labels[data.coarse == holdout])
    fine_map = {int(f): i for i, f in enumerate(fine_ids)}

    def pre(idx):
        idx = idx[data.coarse[idx] != holdout]
        return Batch(data.inputs[idx], super_map[data.coarse[idx]])

    def fin(idx):
        idx = idx[data.coarse[idx] == holdout]
        return Batch(data.inputs[idx], np.array([fine_map[int(f)] for f in data.labels[idx]], np.int64))

    tr, va, te = splits[:3]
    pretrain = TaskSpec(f"pretrain-h{holdout}", pre(tr), pre(va), "pretrain", len(keep_super), epochs[0], batch_size,
                        pre(te) if len(te) else None, {"holdout": holdout})
    finetune = TaskSpec(f"finetune-h{holdout}", fin(tr), fin(va), "finetune", len(fine_ids), epochs[1], batch_size,
                        fin(te) if len(te) else None, {"holdout": holdout})
    return pretrain, finetune


def cifar_sequence_tasks(cifar10, cifar100, plan=None, epochs=60, batch_size=256, n_tasks=6):
    """Task 1: all of CIFAR-10; tasks 2..n: consecutive blocks of 10 CIFAR-100 classes."""
    plan = plan or SplitPlan((0.8, 0.2))
    tasks = []
    tr, va = make_task_splits(cifar10.labels, plan)
    tasks.append(TaskSpec("task1", cifar10.batch(tr), cifar10.batch(va), "task1", 10, epochs, batch_size))
    for t in range(1, n_tasks):
        cls = np.arange(10 * (t - 1), 10 * t)
        sel = np.flatnonzero(np.isin(cifar100.labels, cls))
        sub = cifar100.take(sel)
        sub = LabeledSet(sub.inputs, sub.labels - cls[0])
        tr, va = make_task_splits(sub.labels, SplitPlan(plan.fractions, plan.seed + t, plan.stratify))
        tasks.append(TaskSpec(f"task{t + 1}", sub.batch(tr), sub.batch(va), f"task{t + 1}", 10, epochs, batch_size))
    return tasks


# synthetic ---------------------------------------------------------------------------

def _moons(n, rng, noise):
    n_out = n // 2
    n_in = n - n_out
    t_out = rng.uniform(0, np.pi, n_out)
    t_in = rng.uniform(0, np.pi, n_in)
    x = np.concatenate([
        np.stack([np.cos(t_out), np.sin(t_out)], 1),
        np.stack([1 - np.cos(t_in), 0.5 - np.sin(t_in)], 1),
    ])
    y = np.concatenate([np.zeros(n_out, np.int64), np.ones(n_in, np.int64)])
    return x + noise * rng.standard_normal(x.shape), y


def gen_synthetic_tasks(kind, n_tasks, seed=0, *, classes_per_task=5, n_per_class=100, spread=2.0,
                        cluster_std=0.6, dim=2, rotation_deg=45.0, noise=0.1, epochs=1, batch_size=32,
                        plan_fractions=(0.8, 0.2)):
    """Seeded low-dimensional classification tasks with controllable shift.

    ``cluster-split``: ``n_tasks * classes_per_task`` Gaussian clusters with
    centres drawn from N(0, spread^2); task t owns its own block of clusters.
    ``moons-rotation``: two-moons data rotated by ``t * rotation_deg`` for task t.
    """
    if n_tasks < 1:
        raise ConfigError(f"n_tasks must be >= 1, got {n_tasks}", "n_tasks")
    rng = np.random.default_rng(seed)
    tasks = []
    if kind == "cluster-split":
        centers = rng.standard_normal((n_tasks * classes_per_task, dim)) * spread
        for t in range(n_tasks):
            xs, ys = [], []
            for c in range(classes_per_task):
                mu = centers[t * classes_per_task + c]
                xs.append(mu + cluster_std * rng.standard_normal((n_per_class, dim)))
                ys.append(np.full(n_per_class, c, np.int64))
            x, y = np.concatenate(xs).astype(np.float32), np.concatenate(ys)
            tasks.append(_task_from(x, y, t, classes_per_task, seed, epochs, batch_size, plan_fractions))
    elif kind == "moons-rotation":
        for t in range(n_tasks):
            x, y = _moons(n_per_class * 2, rng, noise)
            a = np.deg2rad(rotation_deg * t)
            rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
            x = (x - 0.5) @ rot.T
            tasks.append(_task_from(x.astype(np.float32), y, t, 2, seed, epochs, batch_size, plan_fractions))
    else:
        raise ConfigError(f"unknown synthetic task kind {kind!r}", "kind")
    return tasks


def _task_from(x, y, t, n_classes, seed, epochs, batch_size, fractions):
    tr, va = make_task_splits(y, SplitPlan(tuple(fractions), seed * 1000 + t))
    tid = f"task{t + 1}"
    return TaskSpec(tid, Batch(x[tr], y[tr]), Batch(x[va], y[va]), tid, n_classes, epochs, batch_size)


def gen_synthetic_loco(seed=0, n_super=20, n_fine=5, dim=16, n_per_fine=40, super_spread=3.0,
                       fine_spread=1.0, noise=0.7):
    """Hierarchical Gaussian data: superclass centres, fine-class offsets, sample noise.

    Fine labels are global (``super * n_fine + j``); ``coarse`` holds the superclass.
    """
    rng = np.random.default_rng(seed)
    supers = rng.standard_normal((n_super, dim)) * super_spread
    xs, fine, coarse = [], [], []
    for s in range(n_super):
        offsets = rng.standard_normal((n_fine, dim)) * fine_spread
        for j in range(n_fine):
            xs.append(supers[s] + offsets[j] + noise * rng.standard_normal((n_per_fine, dim)))
            fine.append(np.full(n_per_fine, s * n_fine + j))
            coarse.append(np.full(n_per_fine, s))
    return LabeledSet(np.concatenate(xs).astype(np.float32), np.concatenate(fine).astype(np.int64),
                      np.concatenate(coarse).astype(np.int64))


# augmentation --------------------------------------------------------------------

def hflip(x, mask):
    """Mirror images (N, C, H, W) where ``mask`` is True."""
    out = x.copy()
    out[mask] = x[mask][..., ::-1]
    return out


def shift_crop(x, shifts, pad=4, fill=None):
    """Zero-pad by ``pad`` and crop back to size at per-image offsets ``shifts`` (dy, dx) in [-pad, pad].

    A (0, 0) shift returns the original image.
    """
    n, c, h, w = x.shape
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), x.dtype)
    if fill is not None:
        padded += np.asarray(fill, x.dtype).reshape(1, c, 1, 1)
    padded[:, :, pad:pad + h, pad:pad + w] = x
    out = np.empty_like(x)
    for i, (dy, dx) in enumerate(shifts):
        if abs(dy) > pad or abs(dx) > pad:
            raise ConfigError(f"shift ({dy}, {dx}) exceeds padding {pad}")
        out[i] = padded[i, :, pad + dy:pad + dy + h, pad + dx:pad + dx + w]
    return out


def augment(batch, ops=("crop-pad-4", "hflip"), rng=None, fill=None):
    """Random crop-with-padding and horizontal flip of an image batch (copy)."""
    if batch.inputs.ndim != 4:
        raise ConfigError("augment expects an image batch (N, C, H, W)")
    rng = np.random.default_rng() if rng is None else rng
    x = batch.inputs
    for op in ops:
        if op == "crop-pad-4":
            x = shift_crop(x, rng.integers(-4, 5, size=(len(x), 2)), 4, fill)
        elif op == "hflip":
            x = hflip(x, rng.random(len(x)) < 0.5)
        else:
            raise ConfigError(f"unknown augmentation {op!r}")
    return Batch(x, batch.labels)


# synthetic dataset cache ----------------------------------------------------------

_DS_MAGIC = b"PPDS"
_DS_VERSION = 1


def dump_dataset(data):
    x = np.ascontiguousarray(data.inputs, "<f4")
    has_coarse = getattr(data, "coarse", None) is not None
    out = bytearray(_DS_MAGIC)
    out += struct.pack("<HBIB", _DS_VERSION, int(has_coarse), len(x), x.ndim - 1)
    out += struct.pack(f"<{x.ndim - 1}I", *x.shape[1:])
    out += x.tobytes() + np.ascontiguousarray(data.labels, "<i4").tobytes()
    if has_coarse:
        out += np.ascontiguousarray(data.coarse, "<i4").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def save_dataset(data, path):
    atomic_write_bytes(path, dump_dataset(data))


def parse_dataset(buf):
    if len(buf) < 16 or buf[:4] != _DS_MAGIC:
        raise FormatError("not a PPDS dataset", 0)
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    version, has_coarse, n, rank = struct.unpack_from("<HBIB", body, 4)
    if version != _DS_VERSION:
        raise FormatError(f"unsupported dataset version {version}", 4)
    if zlib.crc32(body) != crc:
        raise FormatError("checksum mismatch", len(body))
    pos = 12
    shape = struct.unpack_from(f"<{rank}I", body, pos)
    pos += 4 * rank
    size = n * int(np.prod(shape))
    need = pos + 4 * size + 4 * n * (2 if has_coarse else 1)
    if need != len(body):
        raise FormatError(f"expected {need} payload bytes, found {len(body)}", len(body))
    x = np.frombuffer(body, "<f4", size, pos).reshape((n, *shape)).astype(np.float32)
    pos += 4 * size
    y = np.frombuffer(body, "<i4", n, pos).astype(np.int64)
    pos += 4 * n
    coarse = np.frombuffer(body, "<i4", n, pos).astype(np.int64) if has_coarse else None
    return LabeledSet(x, y, coarse)


def load_dataset(path):
    return parse_dataset(Path(path).read_bytes())
