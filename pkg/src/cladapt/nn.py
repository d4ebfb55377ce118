"""Small deterministic neural-network numerics on top of numpy.

Everything here works on batches: an input batch has shape ``(N, *sample_shape)``.
Parameters live in a :class:`ParamSet`, an ordered list of named arrays that is
threaded explicitly through :func:`forward`, :func:`backprop` and :func:`sgd_step`.
Matrix products and loss means accumulate in float64 and are cast back to the
parameter dtype (float32 by default).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LAYER_KINDS = ("dense", "relu", "conv2d", "maxpool2x2", "flatten")
ROLES = ("weight", "bias")


class ShapeError(ValueError):
    """Raised when a layer receives an input it cannot consume."""


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a feed-forward stack.

    ``dense`` uses ``in_features``/``out_features``; ``conv2d`` uses
    ``in_channels``/``out_channels``/``kernel``/``stride`` (valid padding).
    The remaining kinds carry no dimensions.
    """

    kind: str
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    @property
    def has_params(self) -> bool:
        return self.kind in ("dense", "conv2d")

    def describe(self) -> str:
        if self.kind == "dense":
            return f"dense({self.in_features}->{self.out_features})"
        if self.kind == "conv2d":
            return (f"conv2d({self.in_channels}->{self.out_channels}, "
                    f"{self.kernel}x{self.kernel}, s{self.stride})")
        return self.kind

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        """Per-sample output shape, or ShapeError if ``shape`` is not accepted."""
        k = self.kind
        if k == "dense":
            if len(shape) != 1 or shape[0] != self.in_features:
                raise ShapeError(f"{self.describe()} expects ({self.in_features},), got {shape}")
            return (self.out_features,)
        if k == "relu":
            return shape
        if k == "flatten":
            return (int(np.prod(shape)),)
        if len(shape) != 3:
            raise ShapeError(f"{self.describe()} expects (C, H, W), got {shape}")
        c, h, w = shape
        if k == "conv2d":
            if c != self.in_channels:
                raise ShapeError(f"{self.describe()} expects {self.in_channels} channels, got {c}")
            if h < self.kernel or w < self.kernel:
                raise ShapeError(f"{self.describe()} input {h}x{w} smaller than kernel")
            return (self.out_channels,
                    (h - self.kernel) // self.stride + 1,
                    (w - self.kernel) // self.stride + 1)
        # maxpool2x2: trailing odd row/column is dropped
        if h < 2 or w < 2:
            raise ShapeError(f"maxpool2x2 input {h}x{w} too small")
        return (c, h // 2, w // 2)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        if self.kind == "dense":
            return {"weight": (self.out_features, self.in_features), "bias": (self.out_features,)}
        if self.kind == "conv2d":
            return {"weight": (self.out_channels, self.in_channels, self.kernel, self.kernel),
                    "bias": (self.out_channels,)}
        return {}

    def fans(self) -> tuple[int, int]:
        if self.kind == "dense":
            return self.in_features, self.out_features
        area = self.kernel * self.kernel
        return self.in_channels * area, self.out_channels * area


def infer_shapes(layers: Sequence[LayerSpec], input_shape: tuple[int, ...]) -> list[tuple[int, ...]]:
    """Per-layer output shapes; the error message names the offending layer index."""
    shapes = []
    shape = tuple(input_shape)
    for i, layer in enumerate(layers):
        try:
            shape = layer.output_shape(shape)
        except ShapeError as exc:
            raise ShapeError(f"layer {i} ({layer.describe()}): {exc}") from None
        shapes.append(shape)
    return shapes


@dataclass
class ParamEntry:
    layer: int
    role: str
    value: np.ndarray
    trainable: bool = True


@dataclass
class ParamSet:
    """Ordered (layer, role) -> array mapping with a per-entry trainable flag."""

    entries: list[ParamEntry] = field(default_factory=list)

    def __iter__(self) -> Iterator[ParamEntry]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, layer: int, role: str) -> np.ndarray:
        for e in self.entries:
            if e.layer == layer and e.role == role:
                return e.value
        raise KeyError((layer, role))

    def keys(self) -> list[tuple[int, str]]:
        return [(e.layer, e.role) for e in self.entries]

    def structure(self) -> list[tuple[int, str, tuple[int, ...]]]:
        return [(e.layer, e.role, e.value.shape) for e in self.entries]

    def num_values(self) -> int:
        return sum(e.value.size for e in self.entries)

    def copy(self) -> "ParamSet":
        return ParamSet([ParamEntry(e.layer, e.role, e.value.copy(), e.trainable)
                         for e in self.entries])

    def zeros_like(self) -> "ParamSet":
        return ParamSet([ParamEntry(e.layer, e.role, np.zeros_like(e.value), e.trainable)
                         for e in self.entries])

    def with_trainable(self, predicate: Callable[[ParamEntry], bool]) -> "ParamSet":
        """Shallow copy (arrays shared) with trainable flags recomputed."""
        return ParamSet([ParamEntry(e.layer, e.role, e.value, bool(predicate(e)))
                         for e in self.entries])

    def flat(self) -> np.ndarray:
        if not self.entries:
            return np.zeros(0)
        return np.concatenate([e.value.ravel() for e in self.entries])

    def equal(self, other: "ParamSet") -> bool:
        """Bit-exact equality of structure and values."""
        if self.structure() != other.structure():
            return False
        return all(a.value.dtype == b.value.dtype and a.value.tobytes() == b.value.tobytes()
                   for a, b in zip(self.entries, other.entries))


def init_params(layers: Sequence[LayerSpec], rng: np.random.Generator,
                dtype=np.float32) -> ParamSet:
    """Glorot-uniform weights, zero biases."""
    entries = []
    for i, layer in enumerate(layers):
        shapes = layer.param_shapes()
        if not shapes:
            continue
        fan_in, fan_out = layer.fans()
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=shapes["weight"]).astype(dtype)
        entries.append(ParamEntry(i, "weight", w))
        entries.append(ParamEntry(i, "bias", np.zeros(shapes["bias"], dtype=dtype)))
    return ParamSet(entries)


def _matmul(a: np.ndarray, b: np.ndarray, dtype) -> np.ndarray:
    return np.matmul(a.astype(np.float64), b.astype(np.float64)).astype(dtype)


def _im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    # (N, C, H, W) -> (N, Ho, Wo, C*k*k)
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho, wo, c * k * k)


def _layer_forward(layer: LayerSpec, w, b, x: np.ndarray) -> np.ndarray:
    kind = layer.kind
    if kind == "dense":
        return _matmul(x, w.T, x.dtype) + b
    if kind == "relu":
        return np.maximum(x, 0).astype(x.dtype)
    if kind == "flatten":
        return x.reshape(x.shape[0], -1)
    if kind == "conv2d":
        cols = _im2col(x, layer.kernel, layer.stride)
        out = _matmul(cols, w.reshape(w.shape[0], -1).T, x.dtype) + b
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    n, c, h, wd = x.shape
    h2, w2 = h // 2, wd // 2
    blocks = x[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2)
    return blocks.max(axis=(3, 5))


def forward(layers: Sequence[LayerSpec], params: ParamSet, x: np.ndarray) -> list[np.ndarray]:
    """Run the stack on a batch; returns the output of every layer (last = logits)."""
    x = np.asarray(x)
    acts = []
    for i, layer in enumerate(layers):
        try:
            layer.output_shape(tuple(x.shape[1:]))
        except ShapeError as exc:
            raise ShapeError(f"layer {i} ({layer.describe()}): {exc}") from None
        w = b = None
        if layer.has_params:
            w, b = params.get(i, "weight"), params.get(i, "bias")
        x = _layer_forward(layer, w, b, x)
        acts.append(x)
    return acts


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to ``logits``.

    Accepts a single logit vector with an integer label, or a ``(N, K)`` batch
    with ``N`` labels. The batch loss is the mean over samples, so the returned
    gradient is ``(softmax - onehot) / N``.
    """
    logits = np.asarray(logits)
    single = logits.ndim == 1
    z = logits[None, :] if single else logits
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, k = z.shape
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if np.any(y < 0) or np.any(y >= k):
        raise ValueError(f"label out of range for {k} classes: {y.tolist()}")
    z64 = z.astype(np.float64)
    shifted = z64 - z64.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    per_sample = lse - shifted[np.arange(n), y]
    loss = float(per_sample.mean())
    grad = np.exp(shifted - lse[:, None])
    grad[np.arange(n), y] -= 1.0
    grad /= n
    grad = grad.astype(logits.dtype)
    return loss, grad[0] if single else grad


# extra_grad_hook(activations) -> (extra_loss, {layer_index: dLoss/dOutput})
GradHook = Callable[[list[np.ndarray]], tuple[float, dict[int, np.ndarray]]]


def _layer_backward(layer: LayerSpec, w, x_in: np.ndarray, x_out: np.ndarray,
                    g: np.ndarray) -> tuple[np.ndarray, Optional[np.ndarray], Optional[np.ndarray]]:
    """Returns (grad wrt input, grad wrt weight, grad wrt bias)."""
    kind = layer.kind
    dt = g.dtype
    if kind == "dense":
        gw = _matmul(g.T, x_in, dt)
        gb = g.astype(np.float64).sum(axis=0).astype(dt)
        return _matmul(g, w, dt), gw, gb
    if kind == "relu":
        return np.where(x_in > 0, g, 0).astype(dt), None, None
    if kind == "flatten":
        return g.reshape(x_in.shape), None, None
    if kind == "conv2d":
        k, s = layer.kernel, layer.stride
        n, c, h, wd = x_in.shape
        _, oc, ho, wo = g.shape
        cols = _im2col(x_in, k, s).reshape(-1, c * k * k)
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, oc)
        gw = _matmul(g2.T, cols, dt).reshape(w.shape)
        gb = g2.astype(np.float64).sum(axis=0).astype(dt)
        dcols = np.matmul(g2.astype(np.float64), w.reshape(oc, -1).astype(np.float64))
        dcols = dcols.reshape(n, ho, wo, c, k, k)
        dx = np.zeros((n, c, h, wd), dtype=np.float64)
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dx.astype(dt), gw, gb
    # maxpool2x2: route gradient to the first maximum of each window
    n, c, h, wd = x_in.shape
    h2, w2 = h // 2, wd // 2
    blocks = x_in[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2)
    flat = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = flat.argmax(axis=-1)
    mask = np.zeros_like(flat, dtype=dt)
    np.put_along_axis(mask, idx[..., None], 1, axis=-1)
    routed = (mask * g[..., None]).reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros_like(x_in, dtype=dt)
    dx[:, :, :2 * h2, :2 * w2] = routed.reshape(n, c, 2 * h2, 2 * w2)
    return dx, None, None


def backprop(layers: Sequence[LayerSpec], params: ParamSet, x: np.ndarray, labels,
             extra_grad_hook: Optional[GradHook] = None) -> tuple[float, ParamSet]:
    """Mean cross-entropy over the batch plus whatever the hook adds, and its gradient.

    The hook receives the forward activations and returns an extra loss term
    together with gradients to inject at the output of named layers. Entries
    whose trainable flag is off get exact zeros.
    """
    x = np.asarray(x)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    acts = forward(layers, params, x)
    loss, g = softmax_cross_entropy(acts[-1], labels)
    injected: dict[int, np.ndarray] = {}
    if extra_grad_hook is not None:
        extra_loss, injected = extra_grad_hook(acts)
        loss += extra_loss
    grads = params.zeros_like()
    slot = {(e.layer, e.role): e for e in grads.entries}
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        if i in injected:
            g = g + injected[i].astype(g.dtype)
        x_in = acts[i - 1] if i > 0 else x
        w = params.get(i, "weight") if layer.has_params else None
        g_in, gw, gb = _layer_backward(layer, w, x_in, acts[i], g)
        if gw is not None:
            for role, val in (("weight", gw), ("bias", gb)):
                entry = slot[(i, role)]
                if entry.trainable:
                    entry.value = val.astype(entry.value.dtype)
        if i == 0:
            break
        g = g_in
    return loss, grads


def sgd_step(params: ParamSet, grads: ParamSet, lr: float, weight_decay: float = 0.0) -> ParamSet:
    """Plain SGD with decoupled L2 decay: ``w - lr * (g + weight_decay * w)``.

    Frozen entries are passed through as the very same arrays; ``lr == 0`` is
    an exact no-op.
    """
    if lr < 0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    if weight_decay < 0:
        raise ValueError(f"weight_decay must be >= 0, got {weight_decay}")
    if params.structure() != grads.structure():
        raise RuntimeError("gradient structure does not match parameters")
    out = []
    for p, g in zip(params.entries, grads.entries):
        if not p.trainable or lr == 0:
            out.append(ParamEntry(p.layer, p.role, p.value, p.trainable))
            continue
        dt = p.value.dtype
        step = g.value
        if weight_decay:
            step = step + dt.type(weight_decay) * p.value
        new = (p.value - dt.type(lr) * step).astype(dt)
        out.append(ParamEntry(p.layer, p.role, new, True))
    return ParamSet(out)
