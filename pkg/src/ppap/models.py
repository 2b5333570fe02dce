"""Model specifications: a shared backbone plus one or more dense heads.

A :class:`ModelSpec` is an immutable description; parameter values live in a
:class:`~ppap.nn.ParamStore` created by :func:`init_params`. Exactly one head is
active at a time and only the backbone and the active head are trainable.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError
from .nn import ParamStore


@dataclass(frozen=True)
class Layer:
    kind: str
    name: str
    n_in: int = 0
    n_out: int = 0
    kernel: int = 0
    padding: int = 0
    rate: float = 0.0

    def param_shapes(self):
        if self.kind == "dense":
            return {f"{self.name}.weight": (self.n_in, self.n_out), f"{self.name}.bias": (self.n_out,)}
        if self.kind == "conv2d":
            return {
                f"{self.name}.weight": (self.n_out, self.n_in, self.kernel, self.kernel),
                f"{self.name}.bias": (self.n_out,),
            }
        return {}


@dataclass(frozen=True)
class Head:
    name: str
    n_in: int
    n_out: int

    def param_shapes(self):
        return {f"head.{self.name}.weight": (self.n_in, self.n_out), f"head.{self.name}.bias": (self.n_out,)}


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple
    layers: tuple
    heads: tuple
    active_head: str
    freeze_backbone: bool = False

    def __post_init__(self):
        names = [h.name for h in self.heads]
        if not names:
            raise ConfigError("model needs at least one head")
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate head names {names}")
        if self.active_head not in names:
            raise ConfigError(f"unknown head {self.active_head!r}; have {names}")

    def head_spec(self, name=None):
        name = self.active_head if name is None else name
        for h in self.heads:
            if h.name == name:
                return h
        raise ConfigError(f"unknown head {name!r}")

    @property
    def head_names(self):
        return [h.name for h in self.heads]

    def backbone_shapes(self):
        shapes = {}
        for layer in self.layers:
            shapes.update(layer.param_shapes())
        return shapes

    def param_shapes(self):
        shapes = self.backbone_shapes()
        for h in self.heads:
            shapes.update(h.param_shapes())
        return shapes

    def backbone_names(self):
        return list(self.backbone_shapes())

    def head_param_names(self, name=None):
        return list(self.head_spec(name).param_shapes())

    def trainable_names(self):
        names = [] if self.freeze_backbone else self.backbone_names()
        return names + self.head_param_names()

    def num_params(self):
        return sum(int(np.prod(s)) for s in self.param_shapes().values())

    @property
    def has_dropout(self):
        return any(layer.kind == "dropout" and layer.rate > 0 for layer in self.layers)


def activate_head(model, head):
    """Route the forward pass through ``head``; every other head is frozen."""
    model.head_spec(head)
    return replace(model, active_head=head)


def sync_trainable(model, params):
    """Set the frozen flags of ``params`` to match ``model.trainable_names()``."""
    keep = set(model.trainable_names())
    params.unfreeze(params.names())
    params.freeze([n for n in params.names() if n not in keep])
    return params


def _heads(head_dims, n_in, names=None):
    if not head_dims:
        raise ConfigError("head_dims must be non-empty")
    if names is None:
        names = [f"task{i + 1}" for i in range(len(head_dims))]
    if len(names) != len(head_dims):
        raise ConfigError("one head name per head dimension")
    return tuple(Head(n, n_in, int(d)) for n, d in zip(names, head_dims))


def build_mlp(layer_dims, head_dims=None, head_names=None):
    """Dense-ReLU stack; the final linear layer is the head.

    ``layer_dims = [d_in, h1, ..., d_out]``. With ``head_dims`` the last entry of
    ``layer_dims`` is ignored and one head per entry is created instead.
    """
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2:
        raise ConfigError(f"need at least input and output dims, got {dims}")
    layers = []
    for i, (a, b) in enumerate(zip(dims[:-2], dims[1:-1])):
        layers.append(Layer("dense", f"fc{i + 1}", a, b))
        layers.append(Layer("relu", f"relu{i + 1}"))
    if head_dims is None:
        head_dims = [dims[-1]]
        head_names = head_names or ["out"]
    heads = _heads(head_dims, dims[-2], head_names)
    return ModelSpec((dims[0],), tuple(layers), heads, heads[0].name)


def build_cnn_multihead(input_shape=(3, 32, 32), head_dims=(10,), head_names=None,
                        channels=(32, 32, 64, 64), dense=512, dropout=(0.25, 0.5)):
    """Four 3x3 conv layers in two pooled blocks, one dense layer, then the heads."""
    if not head_dims:
        raise ConfigError("head_dims must be non-empty")
    c, h, w = input_shape
    if h % 4 or w % 4:
        raise ConfigError(f"spatial dims must be divisible by 4, got {h}x{w}")
    c1, c2, c3, c4 = channels
    p_conv, p_dense = dropout
    layers = (
        Layer("conv2d", "conv1", c, c1, kernel=3, padding=1), Layer("relu", "relu1"),
        Layer("conv2d", "conv2", c1, c2, kernel=3, padding=1), Layer("relu", "relu2"),
        Layer("maxpool2", "pool1"), Layer("dropout", "drop1", rate=p_conv),
        Layer("conv2d", "conv3", c2, c3, kernel=3, padding=1), Layer("relu", "relu3"),
        Layer("conv2d", "conv4", c3, c4, kernel=3, padding=1), Layer("relu", "relu4"),
        Layer("maxpool2", "pool2"), Layer("dropout", "drop2", rate=p_conv),
        Layer("flatten", "flatten"),
        Layer("dense", "fc1", c4 * (h // 4) * (w // 4), dense), Layer("relu", "relu5"),
        Layer("dropout", "drop3", rate=p_dense),
    )
    heads = _heads(list(head_dims), dense, head_names)
    return ModelSpec(tuple(input_shape), layers, heads, heads[0].name)


def build_convnet(input_shape=(3, 32, 32), head_dims=(19, 5), head_names=("pretrain", "finetune"),
                  channels=(32, 32, 64, 64, 128, 128)):
    """Plain six-conv network used in place of a residual network (no skips, no BN)."""
    c, h, w = input_shape
    if h % 8 or w % 8:
        raise ConfigError(f"spatial dims must be divisible by 8, got {h}x{w}")
    layers, prev = [], c
    for i, ch in enumerate(channels):
        layers.append(Layer("conv2d", f"conv{i + 1}", prev, ch, kernel=3, padding=1))
        layers.append(Layer("relu", f"relu{i + 1}"))
        if i % 2 == 1:
            layers.append(Layer("maxpool2", f"pool{i // 2 + 1}"))
        prev = ch
    n_pool = len(channels) // 2
    layers.append(Layer("flatten", "flatten"))
    flat = prev * (h >> n_pool) * (w >> n_pool)
    heads = _heads(list(head_dims), flat, list(head_names))
    return ModelSpec(tuple(input_shape), tuple(layers), heads, heads[0].name)


def init_head(params, head, rng):
    """(Re)initialize one head in place: uniform(+-1/sqrt(fan_in)) weights, zero bias."""
    bound = 1.0 / np.sqrt(head.n_in)
    params[f"head.{head.name}.weight"] = rng.uniform(-bound, bound, (head.n_in, head.n_out)).astype(np.float32)
    params[f"head.{head.name}.bias"] = np.zeros(head.n_out, np.float32)


def init_params(model, seed=0):
    """He-normal backbone weights, zero biases, and small uniform heads."""
    rng = np.random.default_rng(seed)
    entries = {}
    for name, shape in model.backbone_shapes().items():
        if name.endswith(".bias"):
            entries[name] = np.zeros(shape, np.float32)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            entries[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
    params = ParamStore(entries)
    for head in model.heads:
        init_head(params, head, rng)
    return sync_trainable(model, params)
