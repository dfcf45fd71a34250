"""Neural building blocks: linear maps, expert FFNs, normalizations, 3D convs.

Parameters are ``Tensor`` leaves registered on ``Module`` attributes; names are
the dotted attribute paths, unique per network, which is what checkpointing
and parameter counting rely on.
"""

from __future__ import annotations

import math
from typing import Iterator, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .tensor import ShapeError, Tensor


class Module:
    """Minimal parameter container: attribute walk yields named parameters."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}.{key}" if prefix else key
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """Affine map on the trailing dimension: y = x W + b."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.weight = Tensor(_uniform_init(rng, (in_dim, out_dim), in_dim), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)
        self.in_dim = in_dim
        self.out_dim = out_dim

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"Linear: trailing dim {x.shape[-1]} != in_dim {self.in_dim} (input {x.shape})")
        squeeze = x.ndim == 1
        if squeeze:
            x = T.reshape(x, (1, -1))
        out = T.add(T.matmul(x, self.weight), self.bias)
        if squeeze:
            out = T.reshape(out, (self.out_dim,))
        return out


def gelu(x: Tensor) -> Tensor:
    """Smooth tanh-form approximation of the Gaussian error linear unit."""
    c = math.sqrt(2.0 / math.pi)
    inner = T.mul(T.add(x, T.mul(T.mul(T.mul(x, x), x), 0.044715)), c)
    return T.mul(T.mul(x, 0.5), T.add(T.tanh(inner), 1.0))


_ACTIVATIONS = {
    "gelu": gelu,
    "tanh": T.tanh,
    "identity": lambda x: x,
}


class FeedForward(Module):
    """Width-preserving expert FFN: Linear(d -> r*d) -> activation -> Linear(r*d -> d)."""

    def __init__(self, dim: int, rng: np.random.Generator, ratio: int = 2, activation: str = "gelu"):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}; choose from {sorted(_ACTIVATIONS)}")
        self.lin1 = Linear(dim, ratio * dim, rng)
        self.lin2 = Linear(ratio * dim, dim, rng)
        self.dim = dim
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(_ACTIVATIONS[self.activation](self.lin1(x)))


class DynamicTanh(Module):
    """Normalization substitute: w * tanh(alpha * x) + b on the trailing dim.

    alpha is a shared scalar; w and b are per-channel. Output is bounded in
    [b - |w|, b + |w|] elementwise regardless of input magnitude.
    """

    def __init__(self, dim: int, alpha: float = 0.5):
        self.w = Tensor(np.ones(dim), requires_grad=True)
        self.b = Tensor(np.zeros(dim), requires_grad=True)
        self.alpha = Tensor(np.asarray(alpha, dtype=np.float64), requires_grad=True)
        self.dim = dim

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.mul(self.w, T.tanh(T.mul(self.alpha, x))), self.b)


class LayerNorm(Module):
    """Per-vector standardization over the trailing dim, then affine. eps=1e-5."""

    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps
        self.dim = dim

    def __call__(self, x: Tensor) -> Tensor:
        mu = T.reduce_mean(x, axis=-1, keepdims=True)
        centered = T.sub(x, mu)
        var = T.reduce_mean(T.mul(centered, centered), axis=-1, keepdims=True)
        normed = T.div(centered, T.sqrt(T.add(var, self.eps)))
        return T.add(T.mul(normed, self.gamma), self.beta)


def make_norm(kind: str, dim: int) -> Module:
    if kind == "dyt":
        return DynamicTanh(dim)
    if kind == "ln":
        return LayerNorm(dim)
    raise ValueError(f"unknown normalization {kind!r}; choose 'dyt' or 'ln'")


# ---------------------------------------------------------------------------
# 3D convolution


def _conv3d_out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [B,C,D,H,W] with weight [O,C,k,k,k].

    Implemented as im2col + matmul; backward scatters window gradients back
    (col2im) and reduces the weight/bias terms with the matching contractions.
    """
    if x.ndim != 5:
        raise ShapeError(f"conv3d expects [B,C,D,H,W], got {x.shape}")
    O, C, k = weight.shape[0], weight.shape[1], weight.shape[2]
    if x.shape[1] != C:
        raise ShapeError(f"conv3d: input channels {x.shape[1]} != weight channels {C}")
    B = x.shape[0]
    spatial = x.shape[2:]
    out_sp = tuple(_conv3d_out_extent(n, k, stride, padding) for n in spatial)
    if any(n <= 0 for n in out_sp):
        raise ShapeError(f"conv3d: kernel {k} (stride {stride}, pad {padding}) does not fit input {x.shape}")

    pads = ((0, 0), (0, 0), (padding, padding), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pads)
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))[:, :, ::stride, ::stride, ::stride]
    # [B,C,Do,Ho,Wo,k,k,k] -> [B,Do,Ho,Wo, C*k^3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 1, 5, 6, 7)).reshape(B, *out_sp, C * k ** 3)
    wmat = weight.data.reshape(O, C * k ** 3).T
    out = cols @ wmat  # [B,Do,Ho,Wo,O]
    out = np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))
    if bias is not None:
        out = out + bias.data.reshape(1, O, 1, 1, 1)

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        gfl = g.transpose(0, 2, 3, 4, 1)  # [B,Do,Ho,Wo,O]
        dw = (cols.reshape(-1, C * k ** 3).T @ gfl.reshape(-1, O)).T.reshape(weight.shape)
        dcols = (gfl @ wmat.T).reshape(B, *out_sp, C, k, k, k).transpose(0, 4, 1, 2, 3, 5, 6, 7)
        dxp = np.zeros_like(xp)
        Do, Ho, Wo = out_sp
        for i in range(k):
            for j in range(k):
                for l in range(k):
                    dxp[:, :,
                        i: i + stride * Do: stride,
                        j: j + stride * Ho: stride,
                        l: l + stride * Wo: stride] += dcols[..., i, j, l]
        if padding:
            dx = dxp[:, :, padding:-padding, padding:-padding, padding:-padding]
        else:
            dx = dxp
        dx = np.ascontiguousarray(dx)
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3, 4))

    return T._trace(out, inputs, bwd, "conv3d")


class Conv3d(Module):
    """3D convolution layer with bias."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        fan_in = in_ch * kernel ** 3
        self.weight = Tensor(_uniform_init(rng, (out_ch, in_ch, kernel, kernel, kernel), fan_in),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose3d(Module):
    """Transposed conv with kernel 2, stride 2 (exact x2 upsampling, no overlap).

    Composed from traced primitives, so gradients come from the tape.
    """

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        self.weight = Tensor(_uniform_init(rng, (in_ch, out_ch, 2, 2, 2), in_ch), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True)
        self.in_ch = in_ch
        self.out_ch = out_ch

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 5 or x.shape[1] != self.in_ch:
            raise ShapeError(f"ConvTranspose3d: expected [B,{self.in_ch},D,H,W], got {x.shape}")
        B, C, D, H, W = x.shape
        O = self.out_ch
        flat = T.reshape(T.permute(x, (0, 2, 3, 4, 1)), (B, D * H * W, C))
        mixed = T.matmul(flat, T.reshape(self.weight, (C, O * 8)))
        blocks = T.reshape(mixed, (B, D, H, W, O, 2, 2, 2))
        interleaved = T.permute(blocks, (0, 4, 1, 5, 2, 6, 3, 7))
        out = T.reshape(interleaved, (B, O, 2 * D, 2 * H, 2 * W))
        return T.add(out, T.reshape(self.bias, (O, 1, 1, 1)))
