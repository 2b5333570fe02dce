"""Minimal reverse-mode differentiation for feed-forward networks.

Values live in numpy arrays. Every op returns a :class:`Tensor` that remembers
its parents and a closure propagating the upstream gradient; ``backward`` walks
the tape in reverse topological order. Only what the model builders need is
provided: dense, 2D convolution (stride 1, zero padding), ReLU, 2x2 max-pool,
dropout, flatten and softmax cross-entropy, plus a few elementwise helpers.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NumericError, StateError

GradientStore = dict  # parameter name -> gradient array


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None, parents=(), backward_fn=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_wrap(other), Tensor(np.asarray(-1.0, self.data.dtype))))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def sum(self):
        return tsum(self)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise StateError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological(self)
        for node in order:
            node.grad = None
        self.grad = grad
        for node in reversed(order):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _topological(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _accum(t, g):
    if not (t.requires_grad or t.backward_fn is not None):
        return
    t.grad = g if t.grad is None else t.grad + g


def _node(data, parents, fn):
    live = tuple(p for p in parents if p.requires_grad or p.backward_fn is not None)
    if not live:
        return Tensor(data)
    return Tensor(data, parents=live, backward_fn=fn)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise helpers ---------------------------------------------------------

def add(a, b):
    def fn(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), fn)


def mul(a, b):
    def fn(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), fn)


def tsum(a):
    def fn(g):
        _accum(a, np.broadcast_to(g, a.shape).copy())

    return _node(np.asarray(a.data.sum()), (a,), fn)


# layers ------------------------------------------------------------------------

def dense(x, w, b):
    """``x @ w + b`` with ``w`` shaped (in, out)."""

    def fn(g):
        _accum(x, g @ w.data.T)
        _accum(w, x.data.T @ g)
        _accum(b, g.sum(axis=0))

    return _node(x.data @ w.data + b.data, (x, w, b), fn)


def conv2d(x, w, b, padding):
    """Stride-1 cross-correlation. x: (N, C, H, W); w: (O, C, kh, kw)."""
    n, c, _, _ = x.shape
    o, c_w, kh, kw = w.shape
    if c != c_w:
        raise ConfigError(f"conv expects {c_w} input channels, got {c}")
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # N, C, Ho, Wo, kh, kw
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2) + b.data[None, :, None, None]

    def fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        _accum(w, (g2.T @ cols).reshape(w.shape))
        _accum(b, g2.sum(axis=0))
        if x.requires_grad or x.backward_fn is not None:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros_like(xp, dtype=dcols.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + ho, j:j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            _accum(x, dxp[:, :, p:p + x.shape[2], p:p + x.shape[3]] if p else dxp)

    return _node(np.ascontiguousarray(out), (x, w, b), fn)


def relu(x):
    mask = x.data > 0

    def fn(g):
        _accum(x, g * mask)

    out = _node(x.data * mask, (x,), fn)
    return out, mask


def maxpool2(x):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigError(f"max-pool 2x2 needs even spatial dims, got {h}x{w}")
    r = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = r.argmax(axis=-1)
    out = np.take_along_axis(r, idx[..., None], axis=-1)[..., 0]

    def fn(g):
        dr = np.zeros(r.shape, dtype=g.dtype)
        np.put_along_axis(dr, idx[..., None], g[..., None], axis=-1)
        _accum(x, dr.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w))

    return _node(out, (x,), fn), idx


def dropout(x, mask):
    """Inverted dropout with a precomputed, already-scaled mask."""

    def fn(g):
        _accum(x, g * mask)

    return _node(x.data * mask, (x,), fn)


def flatten(x):
    shape = x.shape

    def fn(g):
        _accum(x, g.reshape(shape))

    return _node(x.data.reshape(shape[0], -1), (x,), fn)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy; the loss value is accumulated in float64."""
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()

    def fn(g):
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        _accum(logits, (d * (float(g) / n)).astype(logits.data.dtype))

    return _node(np.asarray(loss), (logits,), fn)


# parameters ----------------------------------------------------------------------

class ParamStore:
    """Ordered name -> array map with per-entry trainable/frozen flags."""

    def __init__(self, entries=None, frozen=()):
        self._data = {}
        self._frozen = set()
        for name, value in (entries or {}).items():
            arr = np.asarray(value)
            self._data[name] = np.array(arr, dtype=arr.dtype if arr.dtype.kind == "f" else np.float32)
        self.freeze(frozen)

    def __getitem__(self, name):
        return self._data[name]

    def __setitem__(self, name, value):
        value = np.asarray(value)
        if name in self._data and value.shape != self._data[name].shape:
            raise ConfigError(f"shape {value.shape} does not match {self._data[name].shape}", name)
        self._data[name] = value

    def __contains__(self, name):
        return name in self._data

    def __iter__(self):
        return iter(self._data)

    def __len__(self):
        return len(self._data)

    def names(self):
        return list(self._data)

    def items(self):
        return self._data.items()

    def freeze(self, names):
        for n in names:
            if n not in self._data:
                raise KeyError(n)
            self._frozen.add(n)

    def unfreeze(self, names):
        self._frozen.difference_update(names)

    def is_trainable(self, name):
        return name not in self._frozen

    def trainable_names(self):
        return [n for n in self._data if n not in self._frozen]

    def num_scalars(self, trainable_only=True):
        return sum(v.size for n, v in self._data.items() if not trainable_only or n not in self._frozen)

    def copy(self):
        out = ParamStore()
        out._data = {n: v.copy() for n, v in self._data.items()}
        out._frozen = set(self._frozen)
        return out

    def astype(self, dtype):
        out = self.copy()
        out._data = {n: v.astype(dtype) for n, v in out._data.items()}
        return out

    def fingerprint(self, names=None):
        h = hashlib.sha256()
        for n in names if names is not None else self._data:
            v = np.ascontiguousarray(self._data[n])
            h.update(n.encode())
            h.update(str(v.dtype).encode() + str(v.shape).encode())
            h.update(v.tobytes())
        return h.hexdigest()

    def flat(self, names=None):
        names = self.names() if names is None else names
        return np.concatenate([self._data[n].ravel() for n in names]) if names else np.zeros(0)


# forward / backward ------------------------------------------------------------

@dataclass
class ComputeGraph:
    """Result of one forward pass: loss node, parameter leaves and cached layer state."""

    loss: Tensor
    leaves: dict
    masks: dict = field(default_factory=dict)
    patterns: dict = field(default_factory=dict)
    used: bool = False

    @property
    def value(self):
        return float(self.loss.data)

    def backward(self):
        return backward(self)

    def signature(self):
        """Hash of all ReLU and max-pool selection patterns (kink detection)."""
        h = hashlib.sha1()
        for k in sorted(self.patterns):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.patterns[k]).tobytes())
        return h.hexdigest()


def _check_finite(arr, layer):
    if not np.isfinite(arr).all():
        raise NumericError("non-finite activation", layer)


def _dropout_mask(shape, rate, rng, dtype):
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / dtype.type(1.0 - rate)


def _run(model, params, inputs, *, train, rng, masks, record, heads=True):
    trainable = set(model.trainable_names()) if record else set()
    leaves = {}

    def leaf(name):
        t = Tensor(params[name], requires_grad=name in trainable and params.is_trainable(name), name=name)
        leaves[name] = t
        return t

    x = Tensor(inputs)
    used_masks, patterns = {}, {}
    for layer in model.layers:
        kind = layer.kind
        if kind == "dense":
            x = dense(x, leaf(f"{layer.name}.weight"), leaf(f"{layer.name}.bias"))
        elif kind == "conv2d":
            x = conv2d(x, leaf(f"{layer.name}.weight"), leaf(f"{layer.name}.bias"), layer.padding)
        elif kind == "relu":
            x, patterns[layer.name] = relu(x)
        elif kind == "maxpool2":
            x, patterns[layer.name] = maxpool2(x)
        elif kind == "flatten":
            x = flatten(x)
        elif kind == "dropout":
            if masks is not None and layer.name in masks:
                m = masks[layer.name]
                if m.shape != x.shape:
                    raise ConfigError(f"dropout mask shape {m.shape} != activation {x.shape}", layer.name)
            elif train and layer.rate > 0:
                if rng is None:
                    raise ConfigError("training forward with dropout needs an rng", layer.name)
                m = _dropout_mask(x.shape, layer.rate, rng, x.data.dtype)
            else:
                m = None
            if m is not None:
                used_masks[layer.name] = m
                x = dropout(x, m)
        else:
            raise ConfigError(f"unsupported layer kind {kind!r}", layer.name)
        _check_finite(x.data, layer.name)
    if heads:
        head = model.head_spec()
        x = dense(x, leaf(f"head.{head.name}.weight"), leaf(f"head.{head.name}.bias"))
        _check_finite(x.data, f"head.{head.name}")
    return x, leaves, used_masks, patterns


def _check_batch(model, batch):
    if len(batch.labels) == 0:
        raise ConfigError("empty batch")
    if tuple(batch.inputs.shape[1:]) != tuple(model.input_shape):
        raise ConfigError(f"input shape {tuple(batch.inputs.shape[1:])} does not match model {tuple(model.input_shape)}")
    dim = model.head_spec().n_out
    if batch.labels.min() < 0 or batch.labels.max() >= dim:
        raise ConfigError(f"labels outside [0, {dim}) for head {model.active_head!r}")


def forward(model, params, batch, *, train=False, rng=None, masks=None):
    """Mean softmax cross-entropy of ``batch`` under the model's active head.

    Returns ``(loss, graph)``. With ``train=True`` dropout masks are drawn from
    ``rng`` unless supplied through ``masks``; the masks actually used are kept on
    the graph so a later pass can replay them.
    """
    _check_batch(model, batch)
    logits, leaves, used, patterns = _run(model, params, batch.inputs, train=train, rng=rng, masks=masks, record=True)
    loss = softmax_cross_entropy(logits, batch.labels)
    if not np.isfinite(loss.data):
        raise NumericError("non-finite loss", "softmax_cross_entropy")
    return float(loss.data), ComputeGraph(loss, leaves, used, patterns)


def backward(graph):
    if graph.used:
        raise StateError("backward already called on this graph; run a new forward pass")
    graph.used = True
    graph.loss.backward()
    grads = {}
    for name, t in graph.leaves.items():
        if t.requires_grad:
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            if not np.isfinite(g).all():
                raise NumericError("non-finite gradient", name)
            grads[name] = g
    return grads


def loss_value(model, params, batch, masks=None):
    """Loss only, no tape; ``masks`` replays the dropout of an earlier pass."""
    _check_batch(model, batch)
    logits, _, _, _ = _run(model, params, batch.inputs, train=False, rng=None, masks=masks, record=False)
    value = float(softmax_cross_entropy(logits, batch.labels).data)
    if not np.isfinite(value):
        raise NumericError("non-finite loss", "softmax_cross_entropy")
    return value


def predict_logits(model, params, inputs, batch_size=1024):
    out = []
    for i in range(0, len(inputs), batch_size):
        logits, _, _, _ = _run(model, params, inputs[i:i + batch_size], train=False, rng=None, masks=None, record=False)
        out.append(logits.data)
    return np.concatenate(out) if out else np.zeros((0, model.head_spec().n_out))


def features(model, params, inputs, batch_size=1024):
    """Backbone output (input to the heads) in evaluation mode."""
    out = []
    for i in range(0, len(inputs), batch_size):
        x, _, _, _ = _run(model, params, inputs[i:i + batch_size], train=False, rng=None, masks=None, record=False, heads=False)
        out.append(x.data)
    return np.concatenate(out)


# gradient oracle -----------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: dict
    tol: float
    skipped: int = 0
    checked: int = 0

    @property
    def passed(self):
        return all(e < self.tol for e in self.max_rel_error.values())

    @property
    def worst(self):
        return max(self.max_rel_error.values(), default=0.0)


def relative_error(a, b, floor=0.0, zero=1e-12):
    """``|a - b| / max(|a|, |b|, floor)``; 0 when both sides are below ``zero``."""
    a, b = float(a), float(b)
    if abs(a) < zero and abs(b) < zero:
        return 0.0
    return abs(a - b) / max(abs(a), abs(b), floor)


def finite_diff_check(model, params, batch, h=1e-3, tol=1e-3, *, masks=None, analytic=None,
                      max_coords=None, seed=0, dtype=np.float64, floor=1e-4):
    """Compare backward gradients with central differences, coordinate by coordinate.

    Evaluated in ``dtype`` (float64 by default) so the oracle is not swamped by
    rounding. The central difference is itself only good to about
    ``h**2 |f'''| / 6`` (~1e-8 at h=1e-3), so relative errors use ``floor`` as
    the smallest denominator and near-zero gradients are judged absolutely.
    Coordinates whose perturbation flips a ReLU or max-pool selection
    are non-differentiable there and are skipped (counted in ``skipped``).
    Dropout is held fixed via ``masks``; pass the masks of a training pass, or
    leave it None for an evaluation-mode check.
    """
    p64 = params.astype(dtype)
    b64 = type(batch)(batch.inputs.astype(dtype), batch.labels)
    masks = None if masks is None else {k: v.astype(dtype) for k, v in masks.items()}
    _, graph = forward(model, p64, b64, masks=masks)
    base_sig = graph.signature()
    grads = graph.backward() if analytic is None else {k: np.asarray(v, dtype) for k, v in analytic.items()}
    rng = np.random.default_rng(seed)

    def probe(name, flat_index, delta):
        arr = p64[name]
        old = arr.flat[flat_index]
        arr.flat[flat_index] = old + delta
        try:
            loss, g = forward(model, p64, b64, masks=masks)
        finally:
            arr.flat[flat_index] = old
        return loss, g.signature()

    report = GradCheckReport({}, tol)
    for name in model.trainable_names():
        if not p64.is_trainable(name):
            continue
        g = grads.get(name, np.zeros_like(p64[name]))
        coords = np.arange(p64[name].size)
        if max_coords is not None and coords.size > max_coords:
            coords = np.sort(rng.choice(coords, size=max_coords, replace=False))
        worst = 0.0
        for i in coords:
            lp, sp = probe(name, i, h)
            lm, sm = probe(name, i, -h)
            if sp != base_sig or sm != base_sig:
                report.skipped += 1
                continue
            fd = (lp - lm) / (2 * h)
            worst = max(worst, relative_error(g.flat[i], fd, floor))
            report.checked += 1
        report.max_rel_error[name] = worst
    return report
