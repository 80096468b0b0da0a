"""Single-sample forward passes for adapted linear and conv layers.

Convolution is cross-correlation (no kernel flip) with weights laid out as
``(d_in, d_out, k, k)``. Padding is ``"valid"`` or ``"same"`` (zero padding
of ``k - 1`` in total, the extra cell going bottom/right for even ``k``).
"""

from __future__ import annotations

import numpy as np

from .adapters import FrozenLayer, LoraAdapter, TuckerAdapter, adapter_delta
from .tensor import as_tensor, mode_n_product


def linear_forward(x, layer: FrozenLayer, adapter=None, scale: float | None = None) -> np.ndarray:
    """``W0 x`` plus the adapter's scaled contribution, without forming the update.

    For a Tucker adapter this is ``s * A (G (B^T x))``; for LoRA ``s * B (A^T x)``.
    ``scale`` overrides ``adapter.scale``.
    """
    if layer.kind != "linear":
        raise ValueError("linear_forward needs a linear layer")
    x = as_tensor(x, "x")
    if x.ndim != 1 or x.shape[0] != layer.shape[1]:
        raise ValueError(f"input of shape {x.shape} does not fit weight {layer.shape}")
    h = layer.weight @ x
    if adapter is None:
        return h
    s = adapter.scale if scale is None else scale
    if isinstance(adapter, TuckerAdapter):
        if adapter.shape != layer.shape:
            raise ValueError(f"adapter shape {adapter.shape} does not match layer {layer.shape}")
        a, b = adapter.factors
        return h + s * (a @ (adapter.core @ (b.T @ x)))
    if adapter.kind != "linear" or adapter.a.shape[0] != layer.shape[1] \
            or adapter.b.shape[0] != layer.shape[0]:
        raise ValueError("LoRA adapter does not fit this linear layer")
    return h + s * (adapter.b @ (adapter.a.T @ x))


def _pad(x: np.ndarray, k: int, padding: str) -> np.ndarray:
    if padding == "valid":
        return x
    if padding == "same":
        lo = (k - 1) // 2
        hi = k - 1 - lo
        return np.pad(x, ((0, 0), (lo, hi), (lo, hi)))
    raise ValueError(f"unknown padding {padding!r}")


def output_size(size: int, k: int, stride: int, padding: str) -> int:
    padded = size + (k - 1 if padding == "same" else 0)
    return (padded - k) // stride + 1 if padded >= k else 0


def im2col(x, k: int, stride: int = 1, padding: str = "valid"):
    """Return ``(patches, (H', W'))`` with patches of shape ``(c*k*k, H'*W')``.

    Patch rows are ordered ``(channel, kernel_row, kernel_col)``.
    """
    x = as_tensor(x, "input")
    if x.ndim != 3:
        raise ValueError(f"input must be (channels, height, width), got {x.shape}")
    if stride < 1:
        raise ValueError("stride must be positive")
    c, h, w = x.shape
    ho, wo = output_size(h, k, stride, padding), output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"kernel {k} with {padding} padding does not fit a {h}x{w} input")
    xp = _pad(x, k, padding)
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    windows = windows[:, ::stride, ::stride][:, :ho, :wo]
    # (c, ho, wo, a, b) -> (c, a, b, ho, wo)
    return np.ascontiguousarray(windows.transpose(0, 3, 4, 1, 2).reshape(c * k * k, ho * wo)), (ho, wo)


def weight_to_gemm(weight) -> np.ndarray:
    """``(d_in, d_out, k, k)`` -> ``(d_out, d_in*k*k)`` matching :func:`im2col` rows."""
    d_in, d_out, k, _ = weight.shape
    return weight.transpose(1, 0, 2, 3).reshape(d_out, d_in * k * k)


def conv2d_forward(x, weight, stride: int = 1, padding: str = "valid") -> np.ndarray:
    """Cross-correlate a ``(d_in, H, W)`` input with a ``(d_in, d_out, k, k)`` weight."""
    weight = as_tensor(weight, "weight")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"conv weight must be (d_in, d_out, k, k), got {weight.shape}")
    x = as_tensor(x, "input")
    if x.ndim != 3 or x.shape[0] != weight.shape[0]:
        raise ValueError(f"input {x.shape} does not match {weight.shape[0]} input channels")
    cols, (ho, wo) = im2col(x, weight.shape[2], stride, padding)
    return (weight_to_gemm(weight) @ cols).reshape(weight.shape[1], ho, wo)


def conv2d_adapted(x, layer: FrozenLayer, adapter=None, stride: int = 1,
                   padding: str = "valid", scale: float | None = None) -> np.ndarray:
    """Frozen conv output plus the adapter path's scaled contribution.

    A Tucker adapter is applied in factored form: the input channels are
    projected by ``A^T``, convolved with the small kernel ``G x_2 C x_3 D``,
    then lifted to the output channels by ``B``.
    """
    if layer.kind != "conv":
        raise ValueError("conv2d_adapted needs a conv layer")
    out = conv2d_forward(x, layer.weight, stride, padding)
    if adapter is None:
        return out
    s = adapter.scale if scale is None else scale
    if isinstance(adapter, TuckerAdapter):
        if adapter.shape != layer.shape:
            raise ValueError(f"adapter shape {adapter.shape} does not match layer {layer.shape}")
        a, b, c, d = adapter.factors
        small = mode_n_product(mode_n_product(adapter.core, c, 2), d, 3)
        x_proj = np.tensordot(a.T, as_tensor(x, "input"), axes=1)
        y = conv2d_forward(x_proj, small, stride, padding)
        return out + s * np.tensordot(b, y, axes=1)
    if isinstance(adapter, LoraAdapter):
        return out + s * conv2d_forward(x, adapter_delta(adapter, layer), stride, padding)
    raise TypeError(f"unsupported adapter {type(adapter).__name__}")
