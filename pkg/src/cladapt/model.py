"""Two-part classifier: a feature extractor (body) followed by one linear softmax head.

Architectures are described by plain dicts so they can live in experiment
configs::

    {"input_shape": [16],
     "body": [{"kind": "dense", "in": 16, "out": 32}, {"kind": "relu"},
              {"kind": "dense", "in": 32, "out": 8}],
     "head": {"in": 8}}

``dense`` needs ``out`` (``in`` is inferred when omitted and checked when given);
``conv2d`` needs ``out_channels`` and ``kernel`` (``stride`` defaults to 1,
``in_channels`` is inferred). The head's output size is the number of classes.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Any, Union

import numpy as np

from . import nn
from .nn import LayerSpec, ParamSet

CLASS_NAMES = ("asphalt", "paved", "unpaved")


class ConfigError(ValueError):
    """Invalid architecture or experiment configuration."""


def default_cnn_arch() -> dict:
    """Small CNN for 1x32x32 grayscale inputs."""
    return {
        "input_shape": [1, 32, 32],
        "body": [
            {"kind": "conv2d", "in_channels": 1, "out_channels": 8, "kernel": 3, "stride": 1},
            {"kind": "relu"},
            {"kind": "maxpool2x2"},
            {"kind": "conv2d", "in_channels": 8, "out_channels": 16, "kernel": 3, "stride": 1},
            {"kind": "relu"},
            {"kind": "maxpool2x2"},
            {"kind": "flatten"},
            {"kind": "dense", "out": 64},
            {"kind": "relu"},
        ],
        "head": {"in": 64},
    }


def default_mlp_arch(input_dim: int = 16, hidden: tuple[int, ...] = (128, 128),
                     embedding_dim: int = 64) -> dict:
    """MLP for feature-vector inputs; the embedding is the last post-ReLU layer."""
    body: list[dict] = []
    d = input_dim
    for h in (*hidden, embedding_dim):
        body.append({"kind": "dense", "in": d, "out": h})
        body.append({"kind": "relu"})
        d = h
    return {"input_shape": [input_dim], "body": body, "head": {"in": embedding_dim}}


_LAYER_KEYS = {
    "dense": {"kind", "in", "out"},
    "conv2d": {"kind", "in_channels", "out_channels", "kernel", "stride"},
    "relu": {"kind"},
    "maxpool2x2": {"kind"},
    "flatten": {"kind"},
}


def parse_arch(arch: dict) -> tuple[tuple[int, ...], list[LayerSpec], int, dict]:
    """Validate an arch dict; returns (input_shape, body layers, head input dim, normalized dict)."""
    unknown = set(arch) - {"input_shape", "body", "head"}
    if unknown:
        raise ConfigError(f"unknown architecture keys: {sorted(unknown)}")
    try:
        input_shape = tuple(int(v) for v in arch["input_shape"])
        body_cfg = list(arch["body"])
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"architecture needs 'input_shape' and 'body': {exc}") from None
    if not body_cfg:
        raise ConfigError("body must contain at least one layer")
    shape = input_shape
    layers: list[LayerSpec] = []
    normalized: list[dict] = []
    for i, cfg in enumerate(body_cfg):
        kind = cfg.get("kind")
        if kind not in _LAYER_KEYS:
            raise ConfigError(f"layer {i}: unknown kind {kind!r}")
        extra = set(cfg) - _LAYER_KEYS[kind]
        if extra:
            raise ConfigError(f"layer {i} ({kind}): unknown keys {sorted(extra)}")
        if kind == "dense":
            if len(shape) != 1:
                raise ConfigError(f"layer {i} (dense): input shape {shape} is not a vector; add flatten")
            if "out" not in cfg:
                raise ConfigError(f"layer {i} (dense): missing 'out'")
            d_in = int(cfg.get("in", shape[0]))
            if d_in != shape[0]:
                raise ConfigError(f"layer {i} (dense): declared in={d_in} but previous output is {shape[0]}")
            spec = LayerSpec("dense", in_features=d_in, out_features=int(cfg["out"]))
            norm = {"kind": "dense", "in": d_in, "out": spec.out_features}
        elif kind == "conv2d":
            if len(shape) != 3:
                raise ConfigError(f"layer {i} (conv2d): input shape {shape} is not (C, H, W)")
            for key in ("out_channels", "kernel"):
                if key not in cfg:
                    raise ConfigError(f"layer {i} (conv2d): missing {key!r}")
            c_in = int(cfg.get("in_channels", shape[0]))
            if c_in != shape[0]:
                raise ConfigError(f"layer {i} (conv2d): declared in_channels={c_in} but input has {shape[0]}")
            spec = LayerSpec("conv2d", in_channels=c_in, out_channels=int(cfg["out_channels"]),
                             kernel=int(cfg["kernel"]), stride=int(cfg.get("stride", 1)))
            if spec.kernel < 1 or spec.stride < 1 or spec.out_channels < 1:
                raise ConfigError(f"layer {i} (conv2d): kernel, stride and out_channels must be >= 1")
            norm = {"kind": "conv2d", "in_channels": c_in, "out_channels": spec.out_channels,
                    "kernel": spec.kernel, "stride": spec.stride}
        else:
            spec = LayerSpec(kind)
            norm = {"kind": kind}
        try:
            shape = spec.output_shape(shape)
        except nn.ShapeError as exc:
            raise ConfigError(f"layer {i}: {exc}") from None
        layers.append(spec)
        normalized.append(norm)
    if len(shape) != 1:
        raise ConfigError(f"body output shape {shape} is not a vector; end the body with flatten or dense")
    head_cfg = dict(arch.get("head") or {})
    extra = set(head_cfg) - {"in"}
    if extra:
        raise ConfigError(f"head: unknown keys {sorted(extra)}")
    head_in = int(head_cfg.get("in", shape[0]))
    if head_in != shape[0]:
        raise ConfigError(f"head (layer {len(layers)}): declared in={head_in} but body outputs {shape[0]}")
    norm_arch = {"input_shape": list(input_shape), "body": normalized, "head": {"in": head_in}}
    return input_shape, layers, head_in, norm_arch


@dataclass
class LayeredNet:
    """Feature extractor ``body`` plus a single dense ``head`` producing class logits."""

    body: tuple[LayerSpec, ...]
    head: LayerSpec
    params: ParamSet
    input_shape: tuple[int, ...]
    arch: dict

    @property
    def layers(self) -> list[LayerSpec]:
        return [*self.body, self.head]

    @property
    def head_index(self) -> int:
        return len(self.body)

    @property
    def embedding_dim(self) -> int:
        return self.head.in_features

    @property
    def num_classes(self) -> int:
        return self.head.out_features

    def with_params(self, params: ParamSet) -> "LayeredNet":
        return LayeredNet(self.body, self.head, params, self.input_shape, self.arch)

    def head_params(self) -> list[np.ndarray]:
        return [e.value for e in self.params if e.layer == self.head_index]

    def body_params(self) -> list[np.ndarray]:
        return [e.value for e in self.params if e.layer != self.head_index]


@dataclass(frozen=True)
class FrozenSnapshot:
    """Read-only copy of a network used as the embedding reference."""

    body: tuple[LayerSpec, ...]
    head: LayerSpec
    params: ParamSet
    input_shape: tuple[int, ...]

    @property
    def embedding_dim(self) -> int:
        return self.head.in_features

    def num_values(self) -> int:
        return self.params.num_values()


def build_model(arch_config: dict, num_classes: int = 3, seed: int = 0,
                dtype=np.float32) -> LayeredNet:
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    input_shape, body, head_in, norm = parse_arch(arch_config)
    head = LayerSpec("dense", in_features=head_in, out_features=int(num_classes))
    layers = [*body, head]
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, 0x1417]))
    params = nn.init_params(layers, rng, dtype=dtype)
    return LayeredNet(tuple(body), head, params, input_shape, norm)


Embedder = Union[LayeredNet, FrozenSnapshot]


def _as_batch(net: Embedder, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=net.params.entries[0].value.dtype)
    single = tuple(x.shape) == tuple(net.input_shape)
    if single:
        x = x[None]
    if tuple(x.shape[1:]) != tuple(net.input_shape):
        raise nn.ShapeError(f"input shape {x.shape} does not match model input {net.input_shape}")
    return x, single


def embed(net: Embedder, x) -> np.ndarray:
    """Body output (the head's input) for one sample or a batch."""
    xb, single = _as_batch(net, x)
    e = nn.forward(net.body, net.params, xb)[-1]
    return e[0] if single else e


def logits(net: LayeredNet, x) -> np.ndarray:
    xb, single = _as_batch(net, x)
    z = nn.forward(net.layers, net.params, xb)[-1]
    return z[0] if single else z


def predict(net: LayeredNet, x) -> np.ndarray:
    """Class probabilities (float64) for one sample or a batch."""
    return nn.softmax(logits(net, x))


def snapshot(net: LayeredNet) -> FrozenSnapshot:
    params = net.params.copy()
    for e in params:
        e.value.setflags(write=False)
        e.trainable = False
    return FrozenSnapshot(tuple(net.body), net.head, params, tuple(net.input_shape))


def freeze_head(net: LayeredNet) -> LayeredNet:
    h = net.head_index
    return net.with_params(net.params.with_trainable(lambda e: e.trainable and e.layer != h))


def unfreeze_all(net: LayeredNet) -> LayeredNet:
    return net.with_params(net.params.with_trainable(lambda e: True))


def clone(net: LayeredNet) -> LayeredNet:
    return LayeredNet(net.body, net.head, net.params.copy(), net.input_shape, copy.deepcopy(net.arch))


def arch_summary(arch: dict[str, Any]) -> str:
    _, body, head_in, _ = parse_arch(arch)
    return " -> ".join(layer.describe() for layer in body) + f" | head({head_in}->K)"
