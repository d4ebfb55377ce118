"""Central finite-difference checks for analytic gradients.

ReLU and max-pooling make the loss piecewise smooth. A coordinate whose
perturbation changes any ReLU sign pattern or pooling winner is skipped,
because there the finite difference straddles a kink and is not an estimate
of the derivative.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import nn
from .nn import LayerSpec, ParamSet


@dataclass
class GradCheckResult:
    checked: int
    skipped: int
    max_rel_error: float
    worst: tuple

    @property
    def checked_fraction(self) -> float:
        total = self.checked + self.skipped
        return self.checked / total if total else 0.0


def activation_pattern(layers: Sequence[LayerSpec], params: ParamSet, x: np.ndarray) -> bytes:
    acts = nn.forward(layers, params, x)
    parts = []
    for i, layer in enumerate(layers):
        inp = acts[i - 1] if i else x
        if layer.kind == "relu":
            parts.append(np.packbits(inp > 0).tobytes())
        elif layer.kind == "maxpool2x2":
            n, c, h, w = inp.shape
            h2, w2 = h // 2, w // 2
            blocks = inp[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2)
            win = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
            parts.append(win.argmax(axis=-1).astype(np.uint8).tobytes())
    return b"".join(parts)


def check_gradients(loss_fn: Callable[[ParamSet], float], analytic: ParamSet, params: ParamSet,
                    pattern_fn: Callable[[ParamSet], bytes] | None = None, eps: float = 1e-3,
                    abs_floor: float = 1e-6) -> GradCheckResult:
    """Compare ``analytic`` with central differences of ``loss_fn`` around ``params``.

    Relative error is ``|a - n| / max(|a|, |n|)``; a coordinate with
    ``|a - n| <= abs_floor`` counts as exact.
    """
    base_pattern = pattern_fn(params) if pattern_fn else None
    checked = skipped = 0
    worst_err, worst = 0.0, ()
    for k, (entry, g) in enumerate(zip(params.entries, analytic.entries)):
        for idx in np.ndindex(entry.value.shape):
            values = []
            kink = False
            for sign in (1.0, -1.0):
                probe = params.copy()
                probe.entries[k].value[idx] += sign * eps
                if pattern_fn is not None and pattern_fn(probe) != base_pattern:
                    kink = True
                    break
                values.append(loss_fn(probe))
            if kink:
                skipped += 1
                continue
            numeric = (values[0] - values[1]) / (2 * eps)
            a = float(g.value[idx])
            diff = abs(a - numeric)
            err = 0.0 if diff <= abs_floor else diff / max(abs(a), abs(numeric))
            if err > worst_err:
                worst_err, worst = err, (entry.layer, entry.role, idx, a, numeric)
            checked += 1
    return GradCheckResult(checked, skipped, worst_err, worst)


def as_float64(params: ParamSet) -> ParamSet:
    return ParamSet([nn.ParamEntry(e.layer, e.role, e.value.astype(np.float64), e.trainable)
                     for e in params])
