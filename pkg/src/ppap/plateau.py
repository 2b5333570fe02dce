"""Plateau-phase activity profiling.

While a task trains, every step contributes a per-weight activity

    A_w = (theta_after - theta_before)_w * dL/dtheta_w * exp(-k * dL_step**2)

where ``dL_step`` is the change of the mini-batch loss caused by the step. Two
statistics are accumulated per weight: the sum of ``|A_w|`` and, through a
Welford recurrence, the population standard deviation of ``A_w``. A step whose
loss rises by more than ``sqrt(1 / (2k))`` shrinks everything accumulated so far
by the same Gaussian factor, so only the last quiet stretch of training counts.

At the end both statistics are min-max normalised over all weights, multiplied,
and normalised again into a flexibility score in [0, 1]. On the next task the
score modulates each optimizer step:

    update' = r * update + (1 - r) * update * P
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import nn
from ._io import atomic_write_bytes
from .errors import ConfigError, FormatError, NumericError, StateError

SPIKE_TRIGGERS = ("positive", "absolute")
COMBINE_RULES = ("latest", "min", "product")


def gaussian_scale(delta_loss, k):
    """``exp(-k * delta_loss**2)``: 1 at zero, symmetric, decaying with |delta_loss|."""
    if not k > 0:
        raise ConfigError(f"Gaussian width k must be positive, got {k}", "k")
    return math.exp(-k * float(delta_loss) ** 2)


def spike_threshold(k):
    return math.sqrt(1.0 / (2.0 * k))


def activity_step(delta_theta, grad, f):
    return np.asarray(delta_theta, np.float64) * np.asarray(grad, np.float64) * f


def loss_delta(model, params_after, batch, loss_before, masks=None):
    """Loss change of one step, re-evaluated on the same batch and dropout masks."""
    after = nn.loss_value(model, params_after, batch, masks=masks)
    delta = after - loss_before
    if not math.isfinite(delta):
        raise NumericError("non-finite loss difference", "loss_delta")
    return delta


@dataclass
class ActivityAccumulator:
    """Running per-weight statistics; ``n`` is the (reducible) effective count.

    ``steps`` counts every accumulated step and is never reduced; it is the
    denominator of the running-mean update.
    """

    k: float
    S: dict
    mean: dict
    ssd: dict
    n: int = 0
    steps: int = 0
    reductions: int = 0
    spike_trigger: str = "positive"
    finalized: bool = False

    @classmethod
    def zeros(cls, shapes, k=25.0, spike_trigger="positive"):
        if not k > 0:
            raise ConfigError(f"Gaussian width k must be positive, got {k}", "k")
        if spike_trigger not in SPIKE_TRIGGERS:
            raise ConfigError(f"spike_trigger must be one of {SPIKE_TRIGGERS}", "spike_trigger")
        z = lambda: {n: np.zeros(s, np.float64) for n, s in shapes.items()}
        return cls(k=float(k), S=z(), mean=z(), ssd=z(), spike_trigger=spike_trigger)

    @property
    def sigma_thresh(self):
        return spike_threshold(self.k)

    def names(self):
        return list(self.S)

    def std(self):
        if self.n < 1:
            raise StateError("no accumulated steps")
        return {n: np.sqrt(v / self.n) for n, v in self.ssd.items()}


def accumulate(acc, activities):
    """Add one step of activities (name -> array) to ``acc``."""
    if acc.finalized:
        raise StateError("accumulator already finalized")
    denom = acc.steps + 1
    for name in acc.S:
        a = activities[name]
        acc.S[name] += np.abs(a)
        prev = acc.mean[name]
        mean = prev + (a - prev) / denom
        acc.ssd[name] += (a - prev) * (a - mean)
        acc.mean[name] = mean
    acc.n += 1
    acc.steps += 1


def reduce_on_spike(acc, delta_loss, k=None):
    """Shrink the accumulated statistics if the step's loss change is a spike.

    Returns True when the reduction fired. Must run before that step's
    :func:`accumulate`.
    """
    if acc.finalized:
        raise StateError("accumulator already finalized")
    k = acc.k if k is None else k
    thresh = spike_threshold(k)
    fired = delta_loss > thresh if acc.spike_trigger == "positive" else abs(delta_loss) > thresh
    if not fired:
        return False
    f = gaussian_scale(delta_loss, k)
    for name in acc.S:
        acc.S[name] *= f
        acc.ssd[name] *= f * f
    acc.n = math.ceil(acc.n * f)
    acc.reductions += 1
    return True


def _minmax(values):
    flat = np.concatenate([v.ravel() for v in values]) if values else np.zeros(0)
    lo, hi = flat.min(), flat.max()
    if hi == lo:
        return [np.ones_like(v) for v in values]
    return [(v - lo) / (hi - lo) for v in values]


@dataclass(frozen=True, eq=False)
class PlateauProfile:
    """Per-weight flexibility scores in [0, 1] (read-only float32 arrays)."""

    scores: dict
    task_id: str = ""
    k: float = 0.0
    steps: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        frozen = {}
        for n, v in self.scores.items():
            arr = np.array(v, dtype=np.float32)
            arr.flags.writeable = False
            frozen[n] = arr
        object.__setattr__(self, "scores", frozen)

    def __getitem__(self, name):
        return self.scores[name]

    def __contains__(self, name):
        return name in self.scores

    def names(self):
        return list(self.scores)

    def flat(self):
        return np.concatenate([v.ravel() for v in self.scores.values()]) if self.scores else np.zeros(0, np.float32)

    def __eq__(self, other):
        if not isinstance(other, PlateauProfile):
            return NotImplemented
        if (self.task_id, self.k, self.steps) != (other.task_id, other.k, other.steps):
            return False
        if list(self.scores) != list(other.scores):
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.scores.values(), other.scores.values())
        )

    __hash__ = None


def finalize_profile(acc, task_id=""):
    """Turn the accumulated statistics into a profile; the accumulator becomes read-only."""
    if acc.finalized:
        raise StateError("accumulator already finalized")
    if acc.steps == 0 or acc.n < 1:
        raise StateError("cannot finalize a profile with zero accumulated steps")
    names = acc.names()
    s_norm = _minmax([acc.S[n] for n in names])
    sd = acc.std()
    sd_norm = _minmax([sd[n] for n in names])
    pre = [a * b for a, b in zip(s_norm, sd_norm)]
    final = _minmax(pre)
    acc.finalized = True
    return PlateauProfile(dict(zip(names, final)), task_id=str(task_id), k=acc.k, steps=acc.steps)


@dataclass(frozen=True)
class BlendConfig:
    r: float = 0.03
    default_score: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.r <= 1.0:
            raise ConfigError(f"blend fraction r must be in [0, 1], got {self.r}", "r")
        if not 0.0 <= self.default_score <= 1.0:
            raise ConfigError("default_score must be in [0, 1]", "default_score")


def make_ppap_hook(profile, blend=None):
    """Update hook applying ``r * u + (1 - r) * u * P`` per weight.

    Evaluated as ``u * (r + (1 - r) * P)`` with the bracket precomputed, which
    is exact at both endpoints (r=1 gives ``u``, r=0 gives ``u * P``).
    Parameters missing from the profile use ``blend.default_score``.
    """
    blend = blend or BlendConfig()
    r = blend.r
    factors = {n: np.float32(r) + np.float32(1.0 - r) * p for n, p in profile.scores.items()}
    default = np.float32(r + (1.0 - r) * blend.default_score)

    def hook(name, update, grad=None):
        fac = factors.get(name)
        if fac is None:
            return update * default
        if fac.shape != update.shape:
            raise ConfigError(f"profile shape {fac.shape} does not match update {update.shape}", name)
        return update * fac

    hook.profile = profile
    hook.blend = blend
    return hook


def combine_profiles(profiles, rule="min", default_score=1.0):
    """Elementwise combination of several task profiles.

    Names missing from a profile count as ``default_score`` there. ``latest``
    keeps the last profile, ``min`` the most conservative score, ``product``
    multiplies.
    """
    profiles = list(profiles)
    if not profiles:
        raise ConfigError("combine_profiles needs at least one profile")
    if rule not in COMBINE_RULES:
        raise ConfigError(f"combination rule must be one of {COMBINE_RULES}, got {rule!r}", "combine")
    if len(profiles) == 1:
        return profiles[0]
    if rule == "latest":
        return profiles[-1]
    names = []
    for p in profiles:
        names.extend(n for n in p.names() if n not in names)
    out = {}
    for name in names:
        shape = next(p[name].shape for p in profiles if name in p)
        stack = []
        for p in profiles:
            if name in p:
                if p[name].shape != shape:
                    raise ConfigError(f"shape mismatch between profiles for {name!r}", name)
                stack.append(p[name])
            else:
                stack.append(np.full(shape, default_score, np.float32))
        arr = np.stack(stack)
        out[name] = arr.min(axis=0) if rule == "min" else arr.prod(axis=0)
    return PlateauProfile(
        out,
        task_id="+".join(p.task_id for p in profiles),
        k=profiles[-1].k,
        steps=sum(p.steps for p in profiles),
        meta={"rule": rule},
    )


class PlateauProfiler:
    """Drives one task's accumulation: call :meth:`observe` once per optimizer step."""

    def __init__(self, shapes, k=25.0, spike_trigger="positive"):
        self.acc = ActivityAccumulator.zeros(shapes, k, spike_trigger)
        self.last_scale = None

    @classmethod
    def for_params(cls, params, names, k=25.0, spike_trigger="positive"):
        return cls({n: params[n].shape for n in names}, k, spike_trigger)

    def observe(self, delta_loss, delta_theta, grads):
        """Spike check, then accumulate ``delta_theta * grad * f`` for every tracked weight."""
        f = gaussian_scale(delta_loss, self.acc.k)
        reduce_on_spike(self.acc, delta_loss)
        accumulate(self.acc, {n: activity_step(delta_theta[n], grads[n], f) for n in self.acc.S})
        self.last_scale = f
        return f

    def finalize(self, task_id=""):
        return finalize_profile(self.acc, task_id)


# serialization ---------------------------------------------------------------------

_MAGIC = b"PPAP"
_VERSION = 1


def dump_profile(profile):
    task = profile.task_id.encode("utf-8")
    out = bytearray(_MAGIC)
    out += struct.pack("<Hd", _VERSION, profile.k)
    out += struct.pack("<H", len(task)) + task
    out += struct.pack("<QI", profile.steps, len(profile.scores))
    for name, arr in profile.scores.items():
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def save_profile(profile, path):
    atomic_write_bytes(path, dump_profile(profile))


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated profile: need {n} bytes", self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_profile(buf):
    if len(buf) < len(_MAGIC) + 4:
        raise FormatError("truncated profile", len(buf))
    if buf[:4] != _MAGIC:
        raise FormatError("bad magic, not a profile file", 0)
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    r = _Reader(body)
    r.take(4)
    version, k = r.unpack("<Hd")
    if version != _VERSION:
        raise FormatError(f"unsupported profile version {version}", 4)
    if zlib.crc32(body) != crc:
        raise FormatError("checksum mismatch", len(body))
    (tlen,) = r.unpack("<H")
    task_id = r.take(tlen).decode("utf-8")
    steps, count = r.unpack("<QI")
    scores = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I") if rank else ()
        size = int(np.prod(shape)) if rank else 1
        scores[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(body):
        raise FormatError("trailing bytes after last entry", r.pos)
    return PlateauProfile(scores, task_id=task_id, k=k, steps=steps)


def load_profile(path):
    with open(path, "rb") as fh:
        return parse_profile(fh.read())
