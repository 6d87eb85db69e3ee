"""Convolution + transposed-convolution feature block with gradient saliency.

Frames are ``(channels, rows, cols)`` arrays. Both layers use stride 1 and
same padding with odd square kernels, so every intermediate map keeps the
frame's spatial size and the two input Jacobians are directly comparable.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyInputError, ParameterError, ShapeError
from .numerics import relu


@dataclass
class ConvDeconvBlock:
    w_conv: np.ndarray  # (mid, in, k, k)
    b_conv: np.ndarray  # (mid,)
    w_deconv: np.ndarray  # (mid, out, k, k), transposed-conv layout
    b_deconv: np.ndarray  # (out,)

    def __post_init__(self):
        self.w_conv = np.asarray(self.w_conv, dtype=np.float64)
        self.b_conv = np.asarray(self.b_conv, dtype=np.float64).ravel()
        self.w_deconv = np.asarray(self.w_deconv, dtype=np.float64)
        self.b_deconv = np.asarray(self.b_deconv, dtype=np.float64).ravel()
        if self.w_conv.ndim != 4 or self.w_deconv.ndim != 4:
            raise ShapeError("kernels must be 4-D")
        mid, _, k, k2 = self.w_conv.shape
        if k != k2 or k % 2 == 0:
            raise ParameterError(f"kernel must be square with odd size, got {k}x{k2}")
        if self.w_deconv.shape[0] != mid or self.w_deconv.shape[2:] != (k, k):
            raise ShapeError(
                f"deconv kernel {self.w_deconv.shape} incompatible with conv kernel {self.w_conv.shape}"
            )
        if self.b_conv.shape != (mid,) or self.b_deconv.shape != (self.w_deconv.shape[1],):
            raise ShapeError("bias length does not match channel count")
        for arr in (self.w_conv, self.b_conv, self.w_deconv, self.b_deconv):
            if not np.all(np.isfinite(arr)):
                raise ParameterError("block weights must be finite")

    @property
    def in_channels(self) -> int:
        return self.w_conv.shape[1]

    @property
    def mid_channels(self) -> int:
        return self.w_conv.shape[0]

    @property
    def out_channels(self) -> int:
        return self.w_deconv.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.w_conv.shape[2]

    @classmethod
    def random(cls, in_ch=1, mid_ch=4, out_ch=4, k=3, seed=0, scale=None):
        rng = np.random.default_rng(seed)
        s = scale if scale is not None else 1.0 / np.sqrt(in_ch * k * k)
        return cls(
            rng.normal(0.0, s, (mid_ch, in_ch, k, k)),
            rng.normal(0.0, 0.1, mid_ch),
            rng.normal(0.0, 1.0 / np.sqrt(mid_ch * k * k), (mid_ch, out_ch, k, k)),
            rng.normal(0.0, 0.1, out_ch),
        )


# Low-level correlation kernels. Arrays may carry leading batch axes.


def _conv_same(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Cross-correlation: out[o,y,x] = sum_{c,i,j} w[o,c,i,j] x[c,y+i-p,x+j-p]."""
    k = w.shape[-1]
    p = k // 2
    rows, cols = x.shape[-2:]
    pad = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    xp = np.pad(x, pad)
    out = np.zeros(x.shape[:-3] + (w.shape[0], rows, cols))
    for i in range(k):
        for j in range(k):
            patch = xp[..., i : i + rows, j : j + cols]
            out += np.einsum("oc,...cyx->...oyx", w[:, :, i, j], patch)
    return out


def _deconv_same(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Stride-1 transposed convolution, w laid out (in, out, k, k).

    out[o, y+i-p, x+j-p] += w[c,o,i,j] x[c,y,x], cropped back to the input size.
    """
    k = w.shape[-1]
    p = k // 2
    rows, cols = x.shape[-2:]
    out = np.zeros(x.shape[:-3] + (w.shape[1], rows + 2 * p, cols + 2 * p))
    for i in range(k):
        for j in range(k):
            out[..., i : i + rows, j : j + cols] += np.einsum(
                "co,...cyx->...oyx", w[:, :, i, j], x
            )
    return out[..., p : p + rows, p : p + cols]


def _check_frame(block: ConvDeconvBlock, frame) -> np.ndarray:
    f = np.asarray(frame, dtype=np.float64)
    if f.ndim == 2:
        f = f[None]
    if f.ndim != 3 or f.shape[0] != block.in_channels:
        raise ShapeError(
            f"frame shape {np.shape(frame)} does not match {block.in_channels} input channels"
        )
    return f


def conv_forward(block: ConvDeconvBlock, frame) -> np.ndarray:
    f = _check_frame(block, frame)
    return relu(_conv_same(f, block.w_conv) + block.b_conv[:, None, None])


def _forward_cache(block: ConvDeconvBlock, f: np.ndarray):
    pre_c = _conv_same(f, block.w_conv) + block.b_conv[:, None, None]
    f_c = relu(pre_c)
    pre_a = _deconv_same(f_c, block.w_deconv) + block.b_deconv[:, None, None]
    return pre_c, f_c, pre_a, relu(pre_a)


def block_forward(block: ConvDeconvBlock, frame) -> np.ndarray:
    """Full block output ``ReLU(W_D *T ReLU(W_C * f + b_C) + b_D)``."""
    f = _check_frame(block, frame)
    return _forward_cache(block, f)[3]


def _backprop_conv(block, pre_c, g_c):
    # adjoint of correlation is the transposed conv with the same kernel
    return _deconv_same(g_c * (pre_c > 0), block.w_conv)


def _backprop_deconv(block, pre_a, g_a):
    # adjoint of the transposed conv is the plain correlation
    return _conv_same(g_a * (pre_a > 0), block.w_deconv)


def input_gradient(block: ConvDeconvBlock, frame, output_channel: int) -> np.ndarray:
    """Signed gradient of sum(F_A[output_channel]) with respect to the frame."""
    f = _check_frame(block, frame)
    if not 0 <= output_channel < block.out_channels:
        raise IndexError(
            f"output channel {output_channel} out of range [0, {block.out_channels})"
        )
    pre_c, _, pre_a, _ = _forward_cache(block, f)
    g_a = np.zeros_like(pre_a)
    g_a[output_channel] = 1.0
    g_c = _backprop_deconv(block, pre_a, g_a)
    return _backprop_conv(block, pre_c, g_c)


@dataclass
class SaliencyMap:
    values: np.ndarray  # (rows, cols), non-negative
    frame_index: int = 0

    def to_csv(self, path) -> None:
        rows, cols = self.values.shape
        lines = [f"{rows},{cols}"]
        lines += [",".join(repr(float(v)) for v in row) for row in self.values]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path, frame_index: int = 0) -> "SaliencyMap":
        text = Path(path).read_text().strip().splitlines()
        rows, cols = (int(v) for v in text[0].split(","))
        vals = np.array([[float(v) for v in line.split(",")] for line in text[1:]])
        if vals.shape != (rows, cols):
            raise ShapeError(f"saliency CSV body {vals.shape} != header {(rows, cols)}")
        return cls(vals, frame_index)


def saliency(block: ConvDeconvBlock, frame, output_channel: int, frame_index: int = 0) -> SaliencyMap:
    """Per-pixel gradient magnitude, summed over input channels."""
    g = input_gradient(block, frame, output_channel)
    return SaliencyMap(np.abs(g).sum(axis=0), frame_index)


def _jacobian_norms(block: ConvDeconvBlock, f: np.ndarray):
    pre_c, f_c, pre_a, f_a = _forward_cache(block, f)
    # one backward pass per output unit, batched along a leading axis
    n_c = pre_c.size
    seeds_c = np.eye(n_c).reshape((n_c,) + pre_c.shape)
    jac_c = _backprop_conv(block, pre_c, seeds_c)
    n_a = pre_a.size
    seeds_a = np.eye(n_a).reshape((n_a,) + pre_a.shape)
    jac_a = _backprop_conv(block, pre_c, _backprop_deconv(block, pre_a, seeds_a))
    return float((jac_a**2).sum()), float((jac_c**2).sum())


def frobenius_gap(block: ConvDeconvBlock, frame) -> tuple[float, float]:
    """Squared Frobenius norms of dF_A/df and dF_C/df as ``(g_a, g_c)``."""
    f = _check_frame(block, frame)
    return _jacobian_norms(block, f)


def extract_features(block: ConvDeconvBlock, frames: Sequence) -> np.ndarray:
    """Spatial-mean pooled block outputs, one row per frame."""
    frames = list(frames)
    if not frames:
        raise EmptyInputError("no frames to extract features from")
    shape = np.shape(frames[0])
    rows = []
    for t, fr in enumerate(frames):
        if np.shape(fr) != shape:
            raise ShapeError(f"frame {t} has shape {np.shape(fr)}, expected {shape}")
        rows.append(block_forward(block, fr).mean(axis=(1, 2)))
    return np.stack(rows)


def export_saliency(block: ConvDeconvBlock, frames: Sequence, out_dir, output_channel: int = 0):
    """Write one ``saliency_XXXX.csv`` per frame and return the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for t, fr in enumerate(frames):
        sm = saliency(block, fr, output_channel, frame_index=t)
        path = out_dir / f"saliency_{t:04d}.csv"
        sm.to_csv(path)
        paths.append(path)
    return paths
