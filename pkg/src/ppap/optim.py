"""SGD-with-momentum and Adam with an update hook between computing and applying a step.

``compute_raw_update`` turns gradients into a step without touching the
parameters; ``apply_update`` passes each step through an optional hook
``hook(name, update, grad) -> update`` and adds the result. The hook is how
profile-modulated training is plugged in, so the optimizer's own state
(moments, bias correction) is never altered by it.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ContractError


class Optimizer:
    def __init__(self, lr):
        if lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {lr}", "lr")
        self.lr = lr
        self.step_count = 0

    def _check(self, grads, names):
        if names is not None:
            for n in names:
                if n not in grads:
                    raise ConfigError(f"missing gradient for trainable parameter {n!r}", n)

    def compute_raw_update(self, grads, names=None):
        raise NotImplementedError

    def step(self, params, grads, hook=None, names=None):
        updates = self.compute_raw_update(grads, names)
        apply_update(params, updates, hook, grads)
        return updates


class SGD(Optimizer):
    """``v <- momentum * v + g``; update ``-lr * v``."""

    def __init__(self, lr=0.01, momentum=0.0):
        super().__init__(lr)
        if not 0.0 <= momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {momentum}", "momentum")
        self.momentum = momentum
        self.velocity = {}

    def compute_raw_update(self, grads, names=None):
        self._check(grads, names)
        self.step_count += 1
        updates = {}
        for n, g in grads.items():
            v = self.velocity.get(n)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[n] = v
            updates[n] = -self.lr * v
        return updates


class Adam(Optimizer):
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(lr)
        for label, b in (("beta1", beta1), ("beta2", beta2)):
            if not 0.0 <= b < 1.0:
                raise ConfigError(f"{label} must be in [0, 1), got {b}", label)
        if eps <= 0:
            raise ConfigError("eps must be positive", "eps")
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, {}

    def compute_raw_update(self, grads, names=None):
        self._check(grads, names)
        self.step_count += 1
        updates = {}
        for n, g in grads.items():
            # per-parameter step counts: heads join mid-run
            t = self.t.get(n, 0) + 1
            self.t[n] = t
            m = self.m.get(n, np.zeros_like(g))
            v = self.v.get(n, np.zeros_like(g))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * (g * g)
            self.m[n], self.v[n] = m, v
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            updates[n] = -self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return updates


def apply_update(params, updates, hook=None, grads=None):
    """``theta <- theta + hook(update)`` for every entry of ``updates``."""
    for n, u in updates.items():
        if hook is not None:
            g = None if grads is None else grads.get(n)
            new = hook(n, u, g)
            if np.shape(new) != np.shape(u):
                raise ContractError(f"hook changed update shape for {n!r}: {np.shape(u)} -> {np.shape(new)}")
            u = new
        p = params[n]
        params[n] = (p + u).astype(p.dtype, copy=False)


def make_optimizer(kind, **kw):
    kinds = {"adam": Adam, "sgd": SGD}
    if kind not in kinds:
        raise ConfigError(f"unknown optimizer {kind!r}; choose from {sorted(kinds)}", "optimizer.kind")
    return kinds[kind](**kw)
