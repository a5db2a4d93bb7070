"""Binarized linear layers: sign weights with a learnable per-input-column
scale and shift, the straight-through backward, and the packed 1-bit
inference representation.

Forward math: with W_b = sign(W_f) and effective weight
W_eff[:, i] = alpha[i] * W_b[:, i] + beta[i], a layer computes
y = W_eff @ x, which equals W_b @ (alpha*x) + (beta.x) * ones.

Backward (straight-through, clipped): the sign function is treated as
identity inside the clip window, so the latent weight receives
g_W[j,i] = g_y[j] * alpha[i] * x[i] masked by |W_f[j,i]| <= 1; alpha and
beta are genuinely differentiable and get exact gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from ._kernels import BIT_INDEX, lut_gemv
from .tensor import Tensor


def binarize(w: np.ndarray) -> np.ndarray:
    """Entrywise sign with sign(0) = +1, same dtype as the input."""
    if not np.all(np.isfinite(w)):
        raise ValueError("binarize: non-finite entries")
    return np.where(w >= 0, 1.0, -1.0).astype(w.dtype)


@dataclass
class DenseLinearParams:
    """Plain full-precision linear layer (the scope=none counterpart)."""

    weight: Tensor  # (out_features, in_features)

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]


@dataclass
class FbiLinearParams:
    """Latent weight plus per-column scale/shift.

    weight is the full-precision latent (out_features x in_features),
    clamped to [-1, 1] after every optimizer step; alpha and beta have
    length in_features (one per column of the sign matrix).
    """

    weight: Tensor
    alpha: Tensor
    beta: Tensor

    def __post_init__(self):
        m, n = self.weight.shape
        if self.alpha.shape != (n,) or self.beta.shape != (n,):
            raise ValueError(
                f"alpha/beta must have length {n} (the input dimension), "
                f"got {self.alpha.shape} / {self.beta.shape}"
            )

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def from_latent(cls, latent: np.ndarray, requires_grad: bool = True) -> "FbiLinearParams":
        """Column statistics keep the binarized start close to the latent:
        alpha = mean |column|, beta = mean column."""
        alpha = np.abs(latent).mean(axis=0)
        beta = latent.mean(axis=0)
        return cls(
            weight=Tensor(latent, requires_grad=requires_grad),
            alpha=Tensor(alpha, requires_grad=requires_grad),
            beta=Tensor(beta, requires_grad=requires_grad),
        )


def effective_weight(p: FbiLinearParams) -> np.ndarray:
    """Materialize W_eff = alpha*sign(W_f) + beta (column-wise)."""
    wb = binarize(p.weight.data)
    return p.alpha.data * wb + p.beta.data


def fbi_linear(x: Tensor, p: FbiLinearParams) -> Tensor:
    """Batched binarized layer: rows of x are independent input vectors.

    Tape primitive with the straight-through backward; gradients flow to
    x, W_f (masked), alpha and beta.
    """
    if x.shape[-1] != p.in_features:
        raise ValueError(f"fbi_linear: x has {x.shape[-1]} features, layer expects {p.in_features}")
    wb = binarize(p.weight.data)
    w_eff = p.alpha.data * wb + p.beta.data
    out = x.data @ w_eff.T

    x_data = x.data
    latent = p.weight.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x_data.reshape(-1, x_data.shape[-1])
        g_x = (g2 @ w_eff).reshape(x_data.shape)
        mask = np.abs(latent) <= 1.0
        g_w = (g2.T @ (x2 * p.alpha.data)) * mask
        g_alpha = ((g2 @ wb) * x2).sum(axis=0)
        g_beta = g2.sum(axis=1) @ x2
        return (g_x, g_w, g_alpha, g_beta)

    return T.record_op((x, p.weight, p.alpha, p.beta), out, backward, "fbi_linear")


def fbi_forward(x: np.ndarray, p: FbiLinearParams) -> np.ndarray:
    """Single-vector forward y = W_eff @ x (no tape)."""
    x = np.asarray(x)
    if x.shape != (p.in_features,):
        raise ValueError(f"fbi_forward: expected vector of length {p.in_features}, got {x.shape}")
    return effective_weight(p) @ x


def fbi_backward_ste(
    g_y: np.ndarray, x: np.ndarray, p: FbiLinearParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Single-vector straight-through backward.

    Returns (g_Wf, g_alpha, g_beta, g_x) for y = W_eff @ x:
      g_alpha[i] = sum_j g_y[j]*W_b[j,i]*x[i]
      g_beta[i]  = (sum_j g_y[j])*x[i]
      g_x        = W_eff^T @ g_y
      g_Wf[j,i]  = g_y[j]*alpha[i]*x[i] masked by |W_f[j,i]| <= 1
    """
    g_y = np.asarray(g_y)
    x = np.asarray(x)
    if g_y.shape != (p.out_features,) or x.shape != (p.in_features,):
        raise ValueError("fbi_backward_ste: vector shapes do not match the layer")
    wb = binarize(p.weight.data)
    w_eff = p.alpha.data * wb + p.beta.data
    g_x = w_eff.T @ g_y
    g_alpha = (wb.T @ g_y) * x
    g_beta = g_y.sum() * x
    mask = np.abs(p.weight.data) <= 1.0
    g_w = np.outer(g_y, p.alpha.data * x) * mask
    return g_w, g_alpha, g_beta, g_x


# === packed 1-bit representation ===


@dataclass
class PackedMatrix:
    """Sign bits packed 64 per word, LSB-first, row-major.

    Bit k of word j in a row encodes the sign of column 64*j + k
    (1 -> +1, 0 -> -1); bits at column indices >= n are zero.  alpha and
    beta ride along as float32 side arrays.
    """

    m: int
    n: int
    words: np.ndarray  # (m, ceil(n/64)) uint64
    alpha: np.ndarray  # (n,) float32
    beta: np.ndarray  # (n,) float32

    @property
    def nbytes(self) -> int:
        """Payload bytes: bit words plus the two float32 side arrays."""
        return self.words.nbytes + self.alpha.nbytes + self.beta.nbytes


def pack(w_b: np.ndarray, alpha: np.ndarray, beta: np.ndarray) -> PackedMatrix:
    """Pack a +/-1 matrix into bit words (layout per PackedMatrix)."""
    w_b = np.asarray(w_b)
    if w_b.ndim != 2:
        raise ValueError(f"pack expects a matrix, got shape {w_b.shape}")
    if not np.all(np.abs(w_b) == 1):
        raise ValueError("pack: entries must be exactly +1 or -1")
    m, n = w_b.shape
    n_words = (n + 63) // 64
    bits = np.zeros((m, n_words * 64), dtype=np.uint8)
    bits[:, :n] = w_b > 0
    # LSB-first within each 64-bit little-endian word == LSB-first bit
    # order within each byte, bytes in ascending order
    byte_rows = np.packbits(bits, axis=1, bitorder="little")
    words = np.ascontiguousarray(byte_rows).view(np.uint64).reshape(m, n_words)
    alpha = np.ascontiguousarray(alpha, dtype=np.float32)
    beta = np.ascontiguousarray(beta, dtype=np.float32)
    if alpha.shape != (n,) or beta.shape != (n,):
        raise ValueError(f"alpha/beta must have length {n}")
    return PackedMatrix(m=m, n=n, words=np.ascontiguousarray(words), alpha=alpha, beta=beta)


def pack_params(p: FbiLinearParams) -> PackedMatrix:
    return pack(binarize(p.weight.data), p.alpha.data, p.beta.data)


def unpack(p: PackedMatrix) -> np.ndarray:
    """Recover the +/-1 matrix (float32) from the bit words."""
    byte_rows = p.words.reshape(p.m, -1).view(np.uint8)
    bits = np.unpackbits(byte_rows, axis=1, bitorder="little")[:, : p.n]
    return (bits.astype(np.float32) * 2.0) - 1.0


def packed_gemv(p: PackedMatrix, x: np.ndarray) -> np.ndarray:
    """y = W_eff @ x from the packed bits, via the sign-select kernel."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    if x.shape != (p.n,):
        raise ValueError(f"packed_gemv: expected vector of length {p.n}, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("packed_gemv: non-finite input")
    byte_rows = np.ascontiguousarray(p.words).view(np.uint8).reshape(p.m, -1)
    out = np.empty(p.m, dtype=np.float32)
    lut_gemv(byte_rows, p.n, p.alpha, p.beta, x, BIT_INDEX, out)
    return out
