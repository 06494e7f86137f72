"""Simulated (fake) quantization with a learned step size.

Forward pass maps a tensor onto the uniform grid ``s * clip(round(w / s), u, v)``.
The backward pass treats the rounding operator as identity inside the clip
range (straight-through) and produces the learned-step-size gradient for the
scale factor.  A threshold-based soft-rounding variant rounds only elements
that already sit close to a grid level, leaving the rest latent; it is a
diagnostic, not a training path.

Rounding ties break half-away-from-zero; this is frozen here because every
downstream determinism guarantee depends on one fixed choice.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SCALE_FLOOR",
    "QuantizerState",
    "SoftRoundConfig",
    "round_half_away",
    "quantize",
    "quantize_backward",
    "soft_round",
    "integer_code",
    "init_scale",
]

SCALE_FLOOR = 1e-8

PER_TENSOR = "per_tensor"
PER_CHANNEL = "per_channel"


def round_half_away(z: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero."""
    return np.sign(z) * np.floor(np.abs(z) + 0.5)


def integer_range(bits: int, signed: bool) -> tuple[int, int]:
    if bits < 1:
        raise ValueError(f"bits must be >= 1, got {bits}")
    if signed:
        return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    return 0, 2**bits - 1


@dataclass
class QuantizerState:
    """Scale factor(s) plus the integer grid they map onto.

    ``s`` is a 0-d array for per-tensor granularity or a 1-d array with one
    entry per channel along ``axis``.  ``u`` and ``v`` are derived from
    ``bits`` and ``signed`` and must not be set independently.
    """

    s: np.ndarray
    bits: int
    signed: bool = True
    granularity: str = PER_TENSOR
    axis: int | None = None
    degenerate: bool = False
    u: int = field(init=False)
    v: int = field(init=False)

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.float64)
        self.u, self.v = integer_range(self.bits, self.signed)
        if self.granularity == PER_TENSOR:
            if self.s.ndim != 0:
                raise ValueError("per-tensor quantizer needs a scalar scale")
        elif self.granularity == PER_CHANNEL:
            if self.s.ndim != 1:
                raise ValueError("per-channel quantizer needs a 1-d scale vector")
            if self.axis is None:
                raise ValueError("per-channel quantizer needs a channel axis")
        else:
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if not np.all(self.s > 0):
            raise ValueError("scale must be positive elementwise")

    def broadcast_scale(self, w: np.ndarray) -> np.ndarray:
        """Scale shaped to broadcast against w along the channel axis."""
        if self.granularity == PER_TENSOR:
            return self.s
        if w.shape[self.axis] != self.s.shape[0]:
            raise ValueError(
                f"scale has {self.s.shape[0]} channels but axis {self.axis} "
                f"of shape {w.shape} has {w.shape[self.axis]}"
            )
        shape = [1] * w.ndim
        shape[self.axis] = self.s.shape[0]
        return self.s.reshape(shape)

    def copy(self) -> "QuantizerState":
        return QuantizerState(
            s=self.s.copy(),
            bits=self.bits,
            signed=self.signed,
            granularity=self.granularity,
            axis=self.axis,
            degenerate=self.degenerate,
        )


@dataclass
class SoftRoundConfig:
    """Threshold for soft rounding; fractional distances <= k snap to grid."""

    k: float = 0.45

    def __post_init__(self):
        if not 0.0 <= self.k <= 0.5:
            raise ValueError(f"soft-round threshold must lie in [0, 0.5], got {self.k}")


def quantize(w: np.ndarray, q: QuantizerState) -> np.ndarray:
    """Map w onto the quantization grid: s * clip(round(w / s), u, v)."""
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ValueError("quantize rejects non-finite input")
    s = q.broadcast_scale(w)
    code = np.clip(round_half_away(w / s), q.u, q.v)
    return s * code


def integer_code(w: np.ndarray, q: QuantizerState) -> np.ndarray:
    """Integer grid index of each element: clip(round(w / s), u, v)."""
    w = np.asarray(w, dtype=np.float64)
    s = q.broadcast_scale(w)
    return np.clip(round_half_away(w / s), q.u, q.v).astype(np.int64)


def _scale_grad_norm(q: QuantizerState, n_elements: int) -> float:
    # Learned-step-size normalization; max(v, 1) keeps the 1-bit signed grid
    # (v = 0) from dividing by zero.
    return 1.0 / np.sqrt(n_elements * max(q.v, 1))


def quantize_backward(
    w: np.ndarray, q: QuantizerState, g_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Straight-through gradients of the fake-quantize forward.

    With z = w / s and r = round(z):
      in range (u <= r <= v):  d/dw = 1,  per-element d/ds = r - z
      below range (r < u):     d/dw = 0,  per-element d/ds = u
      above range (r > v):     d/dw = 0,  per-element d/ds = v
    Returns (g_w, g_s); g_s sums the elementwise scale contributions
    (per channel for per-channel scales) and applies the learned-step-size
    normalization 1 / sqrt(N * max(v, 1)).
    """
    w = np.asarray(w, dtype=np.float64)
    g_out = np.asarray(g_out, dtype=np.float64)
    if g_out.shape != w.shape:
        raise ValueError(f"upstream gradient shape {g_out.shape} != value shape {w.shape}")
    s = q.broadcast_scale(w)
    z = w / s
    r = round_half_away(z)
    below = r < q.u
    above = r > q.v
    in_range = ~(below | above)

    g_w = g_out * in_range

    contrib = np.where(in_range, r - z, 0.0)
    contrib = np.where(below, float(q.u), contrib)
    contrib = np.where(above, float(q.v), contrib)
    weighted = contrib * g_out
    if q.granularity == PER_TENSOR:
        g_s = np.asarray(weighted.sum() * _scale_grad_norm(q, w.size))
    else:
        reduce_axes = tuple(ax for ax in range(w.ndim) if ax != q.axis)
        per_channel_n = w.size // w.shape[q.axis]
        g_s = weighted.sum(axis=reduce_axes) * _scale_grad_norm(q, per_channel_n)
    return g_w, g_s


def soft_round(w: np.ndarray, q: QuantizerState, c: SoftRoundConfig) -> np.ndarray:
    """Round only elements within fractional distance k of a grid level.

    Elements farther than k from their nearest level keep their latent value;
    everything is clipped to the representable range [s*u, s*v].
    """
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ValueError("soft_round rejects non-finite input")
    s = q.broadcast_scale(w)
    z = w / s
    r = round_half_away(z)
    snapped = np.where(np.abs(z - r) <= c.k, r, z)
    return s * np.clip(snapped, q.u, q.v)


def init_scale(
    w: np.ndarray,
    bits: int,
    signed: bool = True,
    granularity: str = PER_TENSOR,
    axis: int | None = None,
    kind: str = "weight",
) -> QuantizerState:
    """Initial quantizer for a tensor.

    Weights use max|w| / v; activations use the 99.9th percentile of |w| over
    one calibration batch divided by v.  The 1-bit signed grid has v = 0, so
    |u| stands in for v there.  All-zero input degenerates to the scale floor
    and sets the ``degenerate`` flag.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise ValueError("init_scale needs a nonempty tensor")
    u, v = integer_range(bits, signed)
    denom = v if v >= 1 else abs(u)

    abs_w = np.abs(w)
    if granularity == PER_TENSOR:
        if kind == "activation":
            raw = np.percentile(abs_w, 99.9) / denom
        else:
            raw = abs_w.max() / denom
        s0 = np.asarray(max(float(raw), SCALE_FLOOR))
        degenerate = bool(raw < SCALE_FLOOR)
    elif granularity == PER_CHANNEL:
        if axis is None:
            raise ValueError("per-channel init_scale needs a channel axis")
        reduce_axes = tuple(ax for ax in range(w.ndim) if ax != axis)
        if kind == "activation":
            raw = np.percentile(abs_w, 99.9, axis=reduce_axes) / denom
        else:
            raw = abs_w.max(axis=reduce_axes) / denom
        s0 = np.maximum(raw, SCALE_FLOOR)
        degenerate = bool(np.any(raw < SCALE_FLOOR))
    else:
        raise ValueError(f"unknown granularity {granularity!r}")

    return QuantizerState(
        s=s0, bits=bits, signed=signed, granularity=granularity, axis=axis, degenerate=degenerate
    )
