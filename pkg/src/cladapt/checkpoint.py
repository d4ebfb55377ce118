"""Binary checkpoint format for :class:`~cladapt.model.LayeredNet`.

Little-endian throughout::

    5s   magic b"CLNET"
    u16  format version (1)
    -- architecture block --
    u8   input ndim, then ndim x u32 input shape
    u16  layer count L (body layers followed by the head)
    L x  u8 kind code, then kind-specific u32 fields:
           0 dense       in, out
           1 relu        -
           2 conv2d      in_channels, out_channels, kernel, stride
           3 maxpool2x2  -
           4 flatten     -
    -- parameter block --
    u32  entry count E
    E x  u16 layer index, u8 role (0 weight, 1 bias), u8 trainable,
         u8 ndim, ndim x u32 shape, then prod(shape) float32 values
         in row-major order

There are no trailing bytes; a save/load round trip is bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .model import LayeredNet, parse_arch
from .nn import LayerSpec, ParamEntry, ParamSet

MAGIC = b"CLNET"
VERSION = 1
_KIND_CODES = {"dense": 0, "relu": 1, "conv2d": 2, "maxpool2x2": 3, "flatten": 4}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}
_ROLE_CODES = {"weight": 0, "bias": 1}


class CheckpointError(ValueError):
    """The file is not a valid checkpoint, or does not match the expected architecture."""


def _layer_fields(layer: LayerSpec) -> tuple[int, ...]:
    if layer.kind == "dense":
        return layer.in_features, layer.out_features
    if layer.kind == "conv2d":
        return layer.in_channels, layer.out_channels, layer.kernel, layer.stride
    return ()


def to_bytes(net: LayeredNet) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<H", VERSION)
    shape = tuple(net.input_shape)
    out += struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape)
    layers = net.layers
    out += struct.pack("<H", len(layers))
    for layer in layers:
        fields = _layer_fields(layer)
        out += struct.pack("<B", _KIND_CODES[layer.kind]) + struct.pack(f"<{len(fields)}I", *fields)
    out += struct.pack("<I", len(net.params))
    for e in net.params:
        v = np.ascontiguousarray(e.value, dtype="<f4")
        out += struct.pack("<HBBB", e.layer, _ROLE_CODES[e.role], int(e.trainable), v.ndim)
        out += struct.pack(f"<{v.ndim}I", *v.shape)
        out += v.tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos}")
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk


def _arch_from_layers(input_shape, layers: list[LayerSpec]) -> dict:
    body = []
    for layer in layers[:-1]:
        if layer.kind == "dense":
            body.append({"kind": "dense", "in": layer.in_features, "out": layer.out_features})
        elif layer.kind == "conv2d":
            body.append({"kind": "conv2d", "in_channels": layer.in_channels,
                         "out_channels": layer.out_channels, "kernel": layer.kernel,
                         "stride": layer.stride})
        else:
            body.append({"kind": layer.kind})
    return {"input_shape": list(input_shape), "body": body, "head": {"in": layers[-1].in_features}}


def from_bytes(buf: bytes, expected_arch: Optional[dict] = None,
               expected_classes: Optional[int] = None) -> LayeredNet:
    r = _Reader(buf)
    if r.raw(5) != MAGIC:
        raise CheckpointError("magic: not a CLNET checkpoint")
    (version,) = r.take("<H")
    if version != VERSION:
        raise CheckpointError(f"version: unsupported checkpoint version {version}")
    (ndim,) = r.take("<B")
    input_shape = r.take(f"<{ndim}I")
    (n_layers,) = r.take("<H")
    layers = []
    for _ in range(n_layers):
        (code,) = r.take("<B")
        kind = _CODE_KINDS.get(code)
        if kind is None:
            raise CheckpointError(f"architecture: unknown layer code {code}")
        if kind == "dense":
            i, o = r.take("<2I")
            layers.append(LayerSpec("dense", in_features=i, out_features=o))
        elif kind == "conv2d":
            ci, co, k, s = r.take("<4I")
            layers.append(LayerSpec("conv2d", in_channels=ci, out_channels=co, kernel=k, stride=s))
        else:
            layers.append(LayerSpec(kind))
    if not layers or layers[-1].kind != "dense":
        raise CheckpointError("architecture: last layer must be the dense head")
    (n_entries,) = r.take("<I")
    entries = []
    for _ in range(n_entries):
        layer, role, trainable, nd = r.take("<HBBB")
        shape = r.take(f"<{nd}I")
        count = int(np.prod(shape)) if nd else 1
        data = np.frombuffer(r.raw(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        entries.append(ParamEntry(layer, "weight" if role == 0 else "bias", data, bool(trainable)))
    if r.pos != len(buf):
        raise CheckpointError(f"checkpoint has {len(buf) - r.pos} trailing bytes")

    arch = _arch_from_layers(input_shape, layers)
    try:
        _, body, head_in, norm = parse_arch(arch)
    except ValueError as exc:
        raise CheckpointError(f"architecture: {exc}") from None
    head = layers[-1]
    expected_keys = []
    for i, lay in enumerate(layers):
        expected_keys += [(i, role, shape) for role, shape in lay.param_shapes().items()]
    got = [(e.layer, e.role, e.value.shape) for e in entries]
    if got != expected_keys:
        raise CheckpointError("parameters: entries do not match the stored architecture")
    if expected_arch is not None:
        _, exp_body, exp_head_in, exp_norm = parse_arch(expected_arch)
        if tuple(exp_norm["input_shape"]) != tuple(norm["input_shape"]):
            raise CheckpointError(f"input_shape: checkpoint has {norm['input_shape']}, "
                                  f"expected {exp_norm['input_shape']}")
        if exp_head_in != head_in:
            raise CheckpointError(f"embedding_dim: checkpoint has {head_in}, expected {exp_head_in}")
        if exp_norm["body"] != norm["body"]:
            raise CheckpointError("body: checkpoint layers differ from the expected architecture")
    if expected_classes is not None and head.out_features != expected_classes:
        raise CheckpointError(f"num_classes: checkpoint has {head.out_features}, expected {expected_classes}")
    return LayeredNet(tuple(body), head, ParamSet(entries), tuple(input_shape), norm)


def save_checkpoint(net: LayeredNet, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(net))
    return path


def load_checkpoint(path, expected_arch: Optional[dict] = None,
                    expected_classes: Optional[int] = None) -> LayeredNet:
    return from_bytes(Path(path).read_bytes(), expected_arch, expected_classes)


def describe(net: LayeredNet) -> str:
    lines = [f"input shape: {tuple(net.input_shape)}",
             f"embedding_dim: {net.embedding_dim}  num_classes: {net.num_classes}",
             f"parameters: {net.params.num_values()}"]
    for i, layer in enumerate(net.layers):
        tag = " (head)" if i == net.head_index else ""
        lines.append(f"  [{i}] {layer.describe()}{tag}")
    for e in net.params:
        state = "trainable" if e.trainable else "frozen"
        lines.append(f"  layer {e.layer} {e.role:<6} {str(e.value.shape):<16} {state}")
    return "\n".join(lines)
