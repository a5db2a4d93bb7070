"""Selective state-space block with scalar-per-head decay.

One block: input projection (binarizable) -> split into gate z, conv
channels (x, B, C) and raw timestep -> causal depthwise conv + SiLU ->
zero-order-hold discretization -> sequential state scan with a scalar
decay per head -> skip via D -> gated RMSNorm -> output projection
(binarizable).  The residual add belongs to the caller.

Two execution paths cover the same math: `block_forward` runs a whole
sequence on the tape (training), `block_step` advances one token on a
constant-size recurrent state (generation).  Tests pin them together.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .fbi import DenseLinearParams, FbiLinearParams, PackedMatrix, effective_weight, fbi_linear, packed_gemv
from .tensor import Tensor

RMS_EPS = 1e-5
DISCRETIZE_GUARD = 1e-6

LinearLayer = FbiLinearParams | DenseLinearParams | PackedMatrix | np.ndarray


@dataclass
class SsdBlockParams:
    """Parameters of one block; only the two projections are binarizable."""

    d_model: int
    d_inner: int
    d_state: int
    n_heads: int
    d_conv: int
    in_proj: LinearLayer  # d_model -> 2*d_inner + 2*d_state + n_heads
    conv_weight: Tensor  # (d_conv, d_inner + 2*d_state)
    conv_bias: Tensor
    dt_bias: Tensor  # (n_heads,)
    A_log: Tensor  # (n_heads,); decay a_h = -exp(A_log_h) < 0
    D: Tensor  # (n_heads,)
    norm_weight: Tensor  # (d_inner,)
    out_proj: LinearLayer  # d_inner -> d_model

    @property
    def head_dim(self) -> int:
        return self.d_inner // self.n_heads

    @property
    def conv_dim(self) -> int:
        return self.d_inner + 2 * self.d_state

    @property
    def in_proj_dim(self) -> int:
        return 2 * self.d_inner + 2 * self.d_state + self.n_heads


@dataclass
class RecurrentState:
    """Constant-size per-sequence state for the token-by-token path."""

    h: np.ndarray  # (n_heads, head_dim, d_state)
    conv_window: np.ndarray  # (d_conv - 1, conv_dim), most recent last

    @classmethod
    def zeros(cls, p: SsdBlockParams) -> "RecurrentState":
        dt = T.default_dtype()
        return cls(
            h=np.zeros((p.n_heads, p.head_dim, p.d_state), dtype=dt),
            conv_window=np.zeros((p.d_conv - 1, p.conv_dim), dtype=dt),
        )

    @property
    def nbytes(self) -> int:
        return self.h.nbytes + self.conv_window.nbytes


def init_block(
    d_model: int,
    n_heads: int,
    d_state: int,
    d_conv: int,
    expand: int,
    n_layer: int,
    scope_in: bool,
    scope_out: bool,
    rng: np.random.Generator,
) -> SsdBlockParams:
    """Fresh block parameters; scope flags pick binarized vs dense projections."""
    d_inner = expand * d_model
    if d_inner % n_heads:
        raise ValueError(f"d_inner={d_inner} not divisible by n_heads={n_heads}")
    conv_dim = d_inner + 2 * d_state
    d_in_proj = 2 * d_inner + 2 * d_state + n_heads

    def make_linear(m: int, n: int, binarized: bool) -> LinearLayer:
        latent = rng.normal(0.0, 0.02, size=(m, n))
        if binarized:
            return FbiLinearParams.from_latent(latent)
        return DenseLinearParams(weight=Tensor(latent, requires_grad=True))

    bound = (1.0 / d_conv) ** 0.5
    # softplus(dt_bias) lands log-uniformly in [1e-3, 1e-1]
    dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=n_heads))
    return SsdBlockParams(
        d_model=d_model,
        d_inner=d_inner,
        d_state=d_state,
        n_heads=n_heads,
        d_conv=d_conv,
        in_proj=make_linear(d_in_proj, d_model, scope_in),
        conv_weight=Tensor(rng.uniform(-bound, bound, size=(d_conv, conv_dim)), requires_grad=True),
        conv_bias=Tensor(np.zeros(conv_dim), requires_grad=True),
        dt_bias=Tensor(np.log(np.expm1(dt)), requires_grad=True),
        A_log=Tensor(np.log(rng.uniform(1.0, 16.0, size=n_heads)), requires_grad=True),
        D=Tensor(np.ones(n_heads), requires_grad=True),
        norm_weight=Tensor(np.ones(d_inner), requires_grad=True),
        out_proj=make_linear(d_model, d_inner, scope_out),
    )


def apply_linear_tape(layer: LinearLayer, x: Tensor) -> Tensor:
    if isinstance(layer, FbiLinearParams):
        return fbi_linear(x, layer)
    if isinstance(layer, DenseLinearParams):
        return T.linear(x, layer.weight)
    raise TypeError("training path needs latent parameters, not a packed/materialized matrix")


def apply_linear_step(layer: LinearLayer, x: np.ndarray) -> np.ndarray:
    if isinstance(layer, PackedMatrix):
        return packed_gemv(layer, x)
    if isinstance(layer, np.ndarray):
        return layer @ x
    if isinstance(layer, FbiLinearParams):
        return effective_weight(layer) @ x
    return layer.weight.data @ x


def rmsnorm(x: Tensor, weight: Tensor) -> Tensor:
    """Root-mean-square normalization over the last axis."""
    ms = T.tmean(T.mul(x, x), axis=x.ndim - 1, keepdims=True)
    return T.mul(T.mul(x, T.pow_const(T.add(ms, RMS_EPS), -0.5)), weight)


def _rmsnorm_np(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return x * (ms + RMS_EPS) ** -0.5 * weight


def _silu_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return x * s


def _softplus_np(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


# === discretization ===


def discretize(delta, a, B):
    """Zero-order hold: a_bar = exp(delta*a), B_bar = (expm1(delta*a)/a)*B.

    Guarded so |delta*a| < 1e-6 takes the analytic limit B_bar = delta*B;
    accepts scalars or broadcastable arrays, requires delta > 0.
    """
    delta = np.asarray(delta, dtype=float)
    a = np.asarray(a, dtype=float)
    B = np.asarray(B, dtype=float)
    if np.any(delta <= 0):
        raise ValueError("discretize: delta must be positive")
    u = delta * a
    a_bar = np.exp(u)
    coeff = np.where(np.abs(u) < DISCRETIZE_GUARD, delta, _expm1_over(u, a, delta))
    return a_bar, coeff * B


def _expm1_over(u, a, delta):
    # expm1(u)/a evaluated only where |u| is safely away from zero
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.expm1(u) / np.where(a == 0, 1.0, a)
    return np.where(a == 0, delta, out)


# === the scan primitive ===


def ssd_scan(x: Tensor, delta: Tensor, a: Tensor, B: Tensor, C: Tensor, D: Tensor) -> Tensor:
    """Sequential selective scan, one tape primitive.

    Shapes: x (L, H, P), delta (L, H), a (H,), B (L, N), C (L, N), D (H,).
    Per head h and channel p:
        h_t = a_bar[t,h] * h_{t-1} + B_bar[t,h,:] * x[t,h,p]
        y[t,h,p] = C[t,:] . h_t + D[h] * x[t,h,p]
    with h_{-1} = 0 and (a_bar, B_bar) from the guarded discretization.
    The backward pass replays the recurrence in reverse (saved states).
    """
    L, H, P = x.shape
    N = B.shape[1]
    if delta.shape != (L, H) or a.shape != (H,) or B.shape != (L, N) or C.shape != (L, N) or D.shape != (H,):
        raise ValueError("ssd_scan: operand shapes disagree")

    xv, dv, av, Bv, Cv, Dv = x.data, delta.data, a.data, B.data, C.data, D.data
    u = dv * av  # (L, H)
    a_bar = np.exp(u)
    expm1_u = np.expm1(u)
    small = np.abs(u) < DISCRETIZE_GUARD
    with np.errstate(divide="ignore", invalid="ignore"):
        k = np.where(small, dv, expm1_u / np.where(av == 0, 1.0, av))  # (L, H)
    B_bar = k[:, :, None] * Bv[:, None, :]  # (L, H, N)

    xB = xv[:, :, :, None] * B_bar[:, :, None, :]  # (L, H, P, N)
    hs = np.empty_like(xB)
    h = np.zeros((H, P, N), dtype=xv.dtype)
    for t in range(L):
        h = h * a_bar[t][:, None, None] + xB[t]
        hs[t] = h
    y = (hs * Cv[:, None, None, :]).sum(axis=3) + Dv[None, :, None] * xv

    def backward(gy):
        # dL/dh_t accumulates the direct output term plus the decayed future
        gyC = gy[:, :, :, None] * Cv[:, None, None, :]
        ghs = np.empty_like(gyC)
        gh = gyC[L - 1]
        ghs[L - 1] = gh
        for t in range(L - 2, -1, -1):
            gh = gyC[t] + a_bar[t + 1][:, None, None] * gh
            ghs[t] = gh
        h_prev = np.concatenate([np.zeros_like(hs[:1]), hs[:-1]], axis=0)

        g_C = (gy[:, :, :, None] * hs).sum(axis=(1, 2))
        g_D = (gy * xv).sum(axis=(0, 2))
        g_x = Dv[None, :, None] * gy + (ghs * B_bar[:, :, None, :]).sum(axis=3)
        g_abar = (ghs * h_prev).sum(axis=(2, 3))
        g_Bbar = (ghs * xv[:, :, :, None]).sum(axis=2)  # (L, H, N)

        g_k = (g_Bbar * Bv[:, None, :]).sum(axis=2)  # (L, H)
        g_B = (g_Bbar * k[:, :, None]).sum(axis=1)  # (L, N)
        # dk/ddelta = exp(u); dk/da = (u*exp(u) - expm1(u))/a^2 with a
        # series fallback where cancellation would bite
        with np.errstate(divide="ignore", invalid="ignore"):
            dk_da = np.where(
                np.abs(u) < 1e-3,
                dv * dv * (0.5 + u / 3.0),
                (u * a_bar - expm1_u) / np.where(av == 0, 1.0, av) ** 2,
            )
        g_delta = g_abar * av[None, :] * a_bar + g_k * a_bar
        g_a = (g_abar * dv * a_bar + g_k * dk_da).sum(axis=0)
        return (g_x, g_delta, g_a, g_B, g_C, g_D)

    return T.record_op((x, delta, a, B, C, D), y, backward, "ssd_scan")


# === causal depthwise convolution ===


def causal_conv(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Depthwise causal conv: y[t,c] = sum_k w[k,c]*x[t-K+1+k,c] + b[c]."""
    K, C = weight.shape
    L = x.shape[0]
    if x.shape != (L, C):
        raise ValueError(f"causal_conv: x {x.shape} does not match weight channels {C}")
    xp = np.concatenate([np.zeros((K - 1, C), dtype=x.data.dtype), x.data], axis=0)
    out = np.zeros_like(x.data)
    for kk in range(K):
        out += weight.data[kk] * xp[kk : kk + L]
    out = out + bias.data

    def backward(g):
        g_w = np.stack([(g * xp[kk : kk + L]).sum(axis=0) for kk in range(K)])
        g_b = g.sum(axis=0)
        gxp = np.zeros_like(xp)
        for kk in range(K):
            gxp[kk : kk + L] += weight.data[kk] * g
        return (gxp[K - 1 :], g_w, g_b)

    return T.record_op((x, weight, bias), out, backward, "causal_conv")


# === full block, sequence path ===


def block_forward(u: Tensor, p: SsdBlockParams) -> Tensor:
    """Whole-sequence block on the tape; caller adds the residual."""
    L = u.shape[0]
    if L < 1 or u.shape[1] != p.d_model:
        raise ValueError(f"block_forward: input {u.shape} does not match d_model={p.d_model}")
    di, ds, H = p.d_inner, p.d_state, p.n_heads

    zxbcdt = apply_linear_tape(p.in_proj, u)
    z = T.narrow(zxbcdt, 1, 0, di)
    xbc = T.narrow(zxbcdt, 1, di, p.conv_dim)
    dt_raw = T.narrow(zxbcdt, 1, di + p.conv_dim, H)

    xbc = T.silu(causal_conv(xbc, p.conv_weight, p.conv_bias))
    xh = T.reshape(T.narrow(xbc, 1, 0, di), (L, H, p.head_dim))
    Bmat = T.narrow(xbc, 1, di, ds)
    Cmat = T.narrow(xbc, 1, di + ds, ds)

    delta = T.softplus(T.add(dt_raw, p.dt_bias))
    a = T.neg(T.texp(p.A_log))
    y = ssd_scan(xh, delta, a, Bmat, Cmat, p.D)
    y = T.reshape(y, (L, di))

    y = rmsnorm(T.mul(y, T.silu(z)), p.norm_weight)
    return apply_linear_tape(p.out_proj, y)


# === full block, token path ===


def block_step(u_t: np.ndarray, state: RecurrentState, p: SsdBlockParams) -> tuple[np.ndarray, RecurrentState]:
    """Advance one token; mutates and returns `state`.

    Matches block_forward at the same position given the same history.
    """
    if u_t.shape != (p.d_model,):
        raise ValueError(f"block_step: input {u_t.shape} does not match d_model={p.d_model}")
    if state.h.shape != (p.n_heads, p.head_dim, p.d_state):
        raise ValueError("block_step: state shape does not match the block config")
    di, ds, H = p.d_inner, p.d_state, p.n_heads

    zxbcdt = apply_linear_step(p.in_proj, u_t)
    z = zxbcdt[:di]
    xbc_new = zxbcdt[di : di + p.conv_dim]
    dt_raw = zxbcdt[di + p.conv_dim :]

    # rolling conv window holds the previous d_conv-1 pre-activation inputs
    full = np.concatenate([state.conv_window, xbc_new[None, :]], axis=0)
    conv_out = (full * p.conv_weight.data).sum(axis=0) + p.conv_bias.data
    state.conv_window[:-1] = state.conv_window[1:]
    state.conv_window[-1] = xbc_new

    xbc = _silu_np(conv_out)
    xh = xbc[:di].reshape(H, p.head_dim)
    Bv = xbc[di : di + ds]
    Cv = xbc[di + ds :]

    delta = _softplus_np(dt_raw + p.dt_bias.data)  # (H,)
    a = -np.exp(p.A_log.data)
    a_bar, B_bar = discretize(delta[:, None], a[:, None], Bv[None, :])  # (H,1), (H,N)

    state.h *= a_bar[..., None]
    state.h += xh[:, :, None] * B_bar[:, None, :]
    y = (state.h * Cv[None, None, :]).sum(axis=2) + p.D.data[:, None] * xh

    y = _rmsnorm_np(y.reshape(di) * _silu_np(z), p.norm_weight.data)
    return apply_linear_step(p.out_proj, y), state


def block_flops(p: SsdBlockParams, L: int) -> int:
    """Multiply-add-counted forward cost of one block; exactly linear in L."""
    H, P, N = p.n_heads, p.head_dim, p.d_state
    per_token = (
        2 * p.d_model * p.in_proj_dim
        + 2 * p.d_conv * p.conv_dim
        + 4 * H * N + 3 * H  # discretization
        + 3 * H * P * N  # state update
        + 2 * H * P * N + 2 * H * P  # readout + skip
        + 6 * p.d_inner  # gate + norm
        + 2 * p.d_inner * p.d_model
    )
    return L * per_token
