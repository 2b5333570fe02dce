"""Quadratic-anchor baselines: Synaptic Intelligence and Elastic Weight Consolidation.

Both produce an :class:`ImportanceMap` (per-weight importance plus anchor
values) after a task; on the next task :func:`penalty_gradient` is added to
the loss gradient before the optimizer computes its step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .data import Batch
from .errors import ConfigError


@dataclass
class ImportanceMap:
    method: str  # "si" | "ewc"
    omega: dict
    anchors: dict
    strength: float
    damping: float | None = None

    def __post_init__(self):
        if self.method not in ("si", "ewc"):
            raise ConfigError(f"unknown importance method {self.method!r}")
        for n, w in self.omega.items():
            if np.any(w < 0):
                raise ConfigError("importance must be non-negative", n)
            if n not in self.anchors or self.anchors[n].shape != w.shape:
                raise ConfigError("anchor missing or shape mismatch", n)

    def with_strength(self, strength):
        return ImportanceMap(self.method, self.omega, self.anchors, strength, self.damping)


class SITracker:
    """Path integral ``omega_w += -grad_w * delta_theta_w`` over a task's steps."""

    def __init__(self, params, names):
        self.start = {n: params[n].astype(np.float64) for n in names}
        self.omega = {n: np.zeros(params[n].shape, np.float64) for n in names}

    def track(self, grads, deltas):
        for n, w in self.omega.items():
            w -= np.asarray(grads[n], np.float64) * np.asarray(deltas[n], np.float64)

    def consolidate(self, params, xi=1e-3, strength=0.0):
        end = {n: params[n] for n in self.omega}
        return si_consolidate(self.omega, self.start, end, xi, strength)


def si_track(omega, grads, deltas):
    """In-place SI update of a name -> running-omega map; returns it."""
    for n in omega:
        omega[n] = omega[n] - np.asarray(grads[n], np.float64) * np.asarray(deltas[n], np.float64)
    return omega


def si_consolidate(omega, theta_start, theta_end, xi=1e-3, strength=0.0):
    """``Omega = max(omega, 0) / ((theta_end - theta_start)**2 + xi)``, anchored at ``theta_end``."""
    if not xi > 0:
        raise ConfigError(f"SI damping xi must be positive, got {xi}", "xi")
    importance, anchors = {}, {}
    for n, w in omega.items():
        end = np.asarray(theta_end[n], np.float64)
        move = end - np.asarray(theta_start[n], np.float64)
        importance[n] = np.maximum(np.asarray(w, np.float64), 0.0) / (move * move + xi)
        anchors[n] = np.array(theta_end[n], copy=True)
    return ImportanceMap("si", importance, anchors, strength, xi)


def ewc_fisher(model, params, sample, strength=0.0, names=None):
    """Diagonal empirical Fisher: mean over samples of the squared per-sample log-likelihood gradient."""
    if sample is None or len(sample) == 0:
        raise ConfigError("EWC Fisher estimate needs a non-empty sample")
    names = model.trainable_names() if names is None else names
    fisher = {n: np.zeros(params[n].shape, np.float64) for n in names}
    for i in range(len(sample)):
        one = Batch(sample.inputs[i:i + 1], sample.labels[i:i + 1])
        _, graph = nn.forward(model, params, one)
        grads = graph.backward()
        for n in names:
            g = np.asarray(grads[n], np.float64)
            fisher[n] += g * g
    for n in names:
        fisher[n] /= len(sample)
    anchors = {n: params[n].copy() for n in names}
    return ImportanceMap("ewc", fisher, anchors, strength)


def penalty_gradient(imap, params):
    """Gradient of the anchor penalty for every weight in ``imap``.

    SI: ``c * sum Omega (theta - theta*)^2``  ->  ``2 c Omega (theta - theta*)``
    EWC: ``lam/2 * sum F (theta - theta*)^2`` ->  ``lam F (theta - theta*)``
    """
    scale = 2.0 * imap.strength if imap.method == "si" else imap.strength
    out = {}
    for n, w in imap.omega.items():
        p = params[n]
        out[n] = (scale * w * (p.astype(np.float64) - imap.anchors[n])).astype(p.dtype)
    return out


def merge_importance(prev, new):
    """Accumulate importance across tasks; anchors move to the newest task's end point."""
    if prev is None:
        return new
    omega = {}
    for n in set(prev.omega) | set(new.omega):
        if n in prev.omega and n in new.omega:
            omega[n] = prev.omega[n] + new.omega[n]
        else:
            omega[n] = (new.omega if n in new.omega else prev.omega)[n]
    anchors = {**prev.anchors, **new.anchors}
    ordered = [n for n in list(prev.omega) + list(new.omega) if n in omega]
    omega = {n: omega[n] for n in dict.fromkeys(ordered)}
    return ImportanceMap(new.method, omega, anchors, new.strength, new.damping)


def add_gradients(grads, extra):
    """``grads + extra`` for names present in both; other entries pass through."""
    out = dict(grads)
    for n, g in extra.items():
        if n in out:
            out[n] = out[n] + g
    return out
