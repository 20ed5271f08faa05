"""Dense shaped arrays holding real values or quantized codes.

Layout is row-major NCHW for activations, (OutC, InC, Kh, Kw) for conv
weights and (Out, In) for fully connected weights.  Quantized payloads keep
one wire code per byte in memory; the on-disk format packs them to the true
bitwidth (see the cli module).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .lognum import (
    KIND_LOG,
    ConfigError,
    DomainError,
    QuantizerConfig,
    dequantize_array,
    linquant_array,
    logquant_array,
)


@dataclass(frozen=True)
class Tensor:
    """Immutable shaped array.

    Real tensors store float32 data and no quantizer config; quantized
    tensors store uint8 wire codes plus exactly one config.
    """

    data: np.ndarray
    qconfig: Optional[QuantizerConfig] = None

    def __post_init__(self) -> None:
        if self.qconfig is None:
            if self.data.dtype != np.float32:
                raise ConfigError(f"real tensors use float32, got {self.data.dtype}")
        elif self.data.dtype != np.uint8:
            raise ConfigError(f"quantized tensors use uint8 codes, got {self.data.dtype}")
        if not self.data.flags["C_CONTIGUOUS"]:
            raise ConfigError("tensor payload must be contiguous row-major")
        self.data.setflags(write=False)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_quantized(self) -> bool:
        return self.qconfig is not None

    @staticmethod
    def from_real(values: np.ndarray) -> "Tensor":
        return Tensor(np.ascontiguousarray(values, dtype=np.float32))

    @staticmethod
    def from_codes(codes: np.ndarray, cfg: QuantizerConfig) -> "Tensor":
        return Tensor(np.ascontiguousarray(codes, dtype=np.uint8), cfg)

    def real(self) -> np.ndarray:
        """Float64 view of the dequantized (or raw real) values."""
        if self.qconfig is None:
            return self.data.astype(np.float64)
        return dequantize_array(self.data, self.qconfig)

    def dequantize(self) -> "Tensor":
        if self.qconfig is None:
            return self
        return Tensor.from_real(self.real())


def quantize_tensor(t: Tensor, cfg: QuantizerConfig) -> Tensor:
    """Elementwise quantization; shape is preserved.

    Raises ``DomainError`` when an unsigned config meets a negative element.
    """
    if t.is_quantized:
        raise ConfigError("tensor is already quantized")
    quant = logquant_array if cfg.kind == KIND_LOG else linquant_array
    codes = quant(t.data.astype(np.float64), cfg)
    return Tensor.from_codes(codes, cfg)


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    out = (size + 2 * pad - kernel) // stride + 1
    if out < 1 or (size + 2 * pad - kernel) % stride != 0:
        raise DomainError(
            f"kernel {kernel}/stride {stride}/pad {pad} does not tile an extent of {size}"
        )
    return out


def _window_view(x: np.ndarray, kh: int, kw: int, stride: int, pad: int,
                 fill: float | int) -> tuple[np.ndarray, int, int]:
    """(N, C, H, W) -> (N, oh, ow, C, kh, kw) receptive-field view."""
    n, c, h, w = x.shape
    oh = conv_output_size(h, kh, stride, pad)
    ow = conv_output_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=fill)
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (N, C, oh, ow, kh, kw)
    return win.transpose(0, 2, 3, 1, 4, 5), oh, ow


def im2col_array(x: np.ndarray, kernel: tuple[int, int], stride: int = 1,
                 pad: int = 0, fill: float | int = 0) -> tuple[np.ndarray, int, int]:
    """Lower (N, C, H, W) to a (C*kh*kw, N*oh*ow) patch matrix.

    Column j enumerates the receptive field of output position j, so a
    convolution becomes the matrix product of the reshaped weights with
    this matrix.  Padded border entries hold ``fill``.
    """
    kh, kw = kernel
    win, oh, ow = _window_view(x, kh, kw, stride, pad, fill)
    n = x.shape[0]
    cols = win.reshape(n * oh * ow, -1).T
    return np.ascontiguousarray(cols), oh, ow


def im2col(t: Tensor, kernel: tuple[int, int], stride: int = 1, pad: int = 0) -> Tensor:
    """``im2col_array`` on a Tensor; quantized inputs pad with the zero code."""
    if t.data.ndim != 4:
        raise DomainError(f"im2col expects a rank-4 activation tensor, got {t.data.ndim}")
    if t.is_quantized:
        cols, _, _ = im2col_array(t.data, kernel, stride, pad, fill=0)
        return Tensor.from_codes(cols, t.qconfig)
    cols, _, _ = im2col_array(t.data.astype(np.float64), kernel, stride, pad, fill=0.0)
    return Tensor.from_real(cols)
