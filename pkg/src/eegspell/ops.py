"""Neural-network operations on :class:`~eegspell.tensor.Tensor`.

Convolutions run as im2col + GEMM with stride 1 (downsampling is done by
pooling, matching the two architectures built on top of these ops).
Padding is ``"valid"`` or ``"same"``; for even kernels ``"same"`` puts
the extra padding on the right, i.e. left pad = (k - 1) // 2.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ParameterError, ShapeError
from .tensor import Function, Tensor


def _pad_amounts(k: int, mode: str) -> tuple[int, int]:
    if mode == "valid":
        return 0, 0
    if mode == "same":
        left = (k - 1) // 2
        return left, k - 1 - left
    raise ParameterError(f"unknown padding mode {mode!r}")


def _check_conv_dims(h: int, w: int, kh: int, kw: int, mode: str):
    pht, phb = _pad_amounts(kh, mode)
    pwl, pwr = _pad_amounts(kw, mode)
    if kh > h + pht + phb or kw > w + pwl + pwr:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than padded input {h + pht + phb}x{w + pwl + pwr}"
        )


class Conv2d(Function):
    """Cross-correlation of [B,C,H,W] with [F,C,kh,kw] filters."""

    def forward(self, x, w, padding="valid"):
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape}, {w.shape}")
        b, c, h, wd = x.shape
        f, cw, kh, kw = w.shape
        if cw != c:
            raise ShapeError(f"kernel expects {cw} input channels, input has {c}")
        _check_conv_dims(h, wd, kh, kw, padding)
        pht, phb = _pad_amounts(kh, padding)
        pwl, pwr = _pad_amounts(kw, padding)
        xp = np.pad(x, ((0, 0), (0, 0), (pht, phb), (pwl, pwr))) if padding == "same" else x
        ho, wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # [B,C,ho,wo,kh,kw]
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
            b * ho * wo, c * kh * kw
        )
        out = cols @ w.reshape(f, c * kh * kw).T
        self.cols, self.w = cols, w
        self.dims = (b, c, h, wd, f, kh, kw, ho, wo, pht, pwl, xp.shape[2], xp.shape[3])
        return np.ascontiguousarray(out.reshape(b, ho, wo, f).transpose(0, 3, 1, 2))

    def backward(self, grad):
        b, c, h, wd, f, kh, kw, ho, wo, pht, pwl, hp, wp = self.dims
        gy = np.ascontiguousarray(grad.transpose(0, 2, 3, 1)).reshape(b * ho * wo, f)
        dw = (gy.T @ self.cols).reshape(f, c, kh, kw)
        dcols = (gy @ self.w.reshape(f, c * kh * kw)).reshape(b, ho, wo, c, kh, kw)
        # scatter the column gradients back onto the padded input grid
        dxp = np.zeros((b, c, hp, wp), dtype=grad.dtype)
        dc = dcols.transpose(0, 3, 1, 2, 4, 5)  # [B,C,ho,wo,kh,kw]
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + ho, j : j + wo] += dc[:, :, :, :, i, j]
        dx = dxp[:, :, pht : pht + h, pwl : pwl + wd]
        return np.ascontiguousarray(dx), dw


def conv2d(x: Tensor, w: Tensor, padding: str = "valid") -> Tensor:
    return Conv2d.apply(x, w, padding=padding)


class DepthwiseConv2d(Function):
    """Each input map convolved independently with D filters.

    Kernel layout [C, D, kh, kw]; output has C*D maps ordered so that the
    D filters of input map c occupy slots c*D .. c*D + D - 1.
    """

    def forward(self, x, w, padding="valid"):
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(f"depthwise_conv expects 4-D input and kernel, got {x.shape}, {w.shape}")
        b, c, h, wd = x.shape
        cw, d, kh, kw = w.shape
        if cw != c:
            raise ShapeError(f"kernel expects {cw} input maps, input has {c}")
        if d < 1:
            raise ParameterError("depth multiplier must be >= 1")
        _check_conv_dims(h, wd, kh, kw, padding)
        pht, phb = _pad_amounts(kh, padding)
        pwl, pwr = _pad_amounts(kw, padding)
        xp = np.pad(x, ((0, 0), (0, 0), (pht, phb), (pwl, pwr))) if padding == "same" else x
        ho, wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # [B,C,ho,wo,kh,kw]
        out = np.einsum("bchwij,cdij->bcdhw", win, w, optimize=True)
        self.win, self.w = win, w
        self.dims = (b, c, h, wd, d, kh, kw, ho, wo, pht, pwl, xp.shape[2], xp.shape[3])
        return np.ascontiguousarray(out.reshape(b, c * d, ho, wo))

    def backward(self, grad):
        b, c, h, wd, d, kh, kw, ho, wo, pht, pwl, hp, wp = self.dims
        gy = grad.reshape(b, c, d, ho, wo)
        dw = np.einsum("bchwij,bcdhw->cdij", self.win, gy, optimize=True)
        dxp = np.zeros((b, c, hp, wp), dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + ho, j : j + wo] += np.einsum(
                    "bcdhw,cd->bchw", gy, self.w[:, :, i, j], optimize=True
                )
        dx = dxp[:, :, pht : pht + h, pwl : pwl + wd]
        return np.ascontiguousarray(dx), dw


def depthwise_conv(x: Tensor, w: Tensor, padding: str = "valid") -> Tensor:
    return DepthwiseConv2d.apply(x, w, padding=padding)


def separable_conv(x: Tensor, depth_kernel: Tensor, point_kernel: Tensor, padding: str = "same") -> Tensor:
    """Depthwise pass followed by a 1x1 pointwise mixing pass."""
    mid = depthwise_conv(x, depth_kernel, padding=padding)
    if point_kernel.ndim == 2:  # [F, C*D] convenience form
        f, cm = point_kernel.shape
        point_kernel = point_kernel.reshape(f, cm, 1, 1)
    return conv2d(mid, point_kernel, padding="valid")


class AvgPool2d(Function):
    """Non-overlapping window mean; trailing remainder rows/cols dropped."""

    def forward(self, x, window):
        ph, pw = window
        if ph < 1 or pw < 1:
            raise ParameterError("pool window must be >= 1")
        b, c, h, w = x.shape
        ho, wo = h // ph, w // pw
        if ho < 1 or wo < 1:
            raise ShapeError(f"pool window {window} larger than input {h}x{w}")
        self.dims = (b, c, h, w, ph, pw, ho, wo)
        xc = x[:, :, : ho * ph, : wo * pw]
        return xc.reshape(b, c, ho, ph, wo, pw).mean(axis=(3, 5))

    def backward(self, grad):
        b, c, h, w, ph, pw, ho, wo = self.dims
        g = grad / (ph * pw)
        g = np.broadcast_to(g[:, :, :, None, :, None], (b, c, ho, ph, wo, pw))
        dx = np.zeros((b, c, h, w), dtype=grad.dtype)
        dx[:, :, : ho * ph, : wo * pw] = g.reshape(b, c, ho * ph, wo * pw)
        return (dx,)


def avg_pool2d(x: Tensor, window: tuple[int, int]) -> Tensor:
    return AvgPool2d.apply(x, window=tuple(window))


class Elu(Function):
    def forward(self, x):
        neg = np.expm1(np.minimum(x, 0.0))
        self.out = np.where(x > 0, x, neg.astype(x.dtype))
        self.pos = x > 0
        return self.out

    def backward(self, grad):
        return (grad * np.where(self.pos, 1.0, self.out + 1.0).astype(grad.dtype),)


def elu(x: Tensor) -> Tensor:
    return Elu.apply(x)


class DropoutFn(Function):
    """Inverted dropout: mask drawn once, surviving values scaled by 1/(1-p)."""

    def forward(self, x, p, rng):
        keep = (rng.random(x.shape) >= p).astype(x.dtype)
        self.mask = keep / (1.0 - p)
        return x * self.mask

    def backward(self, grad):
        return (grad * self.mask,)


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Active only in training mode; identity (same tensor) otherwise."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    return DropoutFn.apply(x, p=p, rng=rng)


class EmbeddingFn(Function):
    def forward(self, w, idx):
        self.idx, self.vocab = idx, w.shape[0]
        return w[idx]

    def backward(self, grad):
        dw = np.zeros((self.vocab, grad.shape[-1]), dtype=grad.dtype)
        np.add.at(dw, self.idx.reshape(-1), grad.reshape(-1, grad.shape[-1]))
        return (dw,)


def embedding(w: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= w.shape[0]):
        raise ShapeError(f"embedding index out of range for table of {w.shape[0]} rows")
    return EmbeddingFn.apply(w, idx=idx.astype(np.int64))


class LayerNormFn(Function):
    """Normalize over the last axis, then scale/shift."""

    def forward(self, x, gamma, beta, eps):
        mean = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        self.invstd = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mean) * self.invstd
        self.gamma = gamma
        return self.xhat * gamma + beta

    def backward(self, grad):
        xhat, invstd = self.xhat, self.invstd
        dgamma = (grad * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
        dbeta = grad.reshape(-1, xhat.shape[-1]).sum(axis=0)
        dxhat = grad * self.gamma
        n = xhat.shape[-1]
        dx = invstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx.astype(grad.dtype), dgamma.astype(grad.dtype), dbeta.astype(grad.dtype)

    # mean subtraction above makes a constant vector normalize to zeros
    # before the affine transform, which tests rely on.


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    return LayerNormFn.apply(x, gamma, beta, eps=eps)


class BatchNorm2dFn(Function):
    """Per-channel batch normalization over (batch, height, width).

    In training mode the running statistics arrays are updated in place:
    running = momentum * running + (1 - momentum) * batch.
    """

    def forward(self, x, gamma, beta, running_mean, running_var, momentum, eps, training):
        if training:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            running_mean *= momentum
            running_mean += (1.0 - momentum) * mean
            running_var *= momentum
            running_var += (1.0 - momentum) * var
        else:
            mean, var = running_mean, running_var
        self.training = training
        self.invstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
        self.xhat = (x - mean[None, :, None, None]) * self.invstd[None, :, None, None]
        self.gamma = gamma
        self.m = x.shape[0] * x.shape[2] * x.shape[3]
        return self.xhat * gamma[None, :, None, None] + beta[None, :, None, None]

    def backward(self, grad):
        xhat, invstd = self.xhat, self.invstd
        dgamma = (grad * xhat).sum(axis=(0, 2, 3))
        dbeta = grad.sum(axis=(0, 2, 3))
        dxhat = grad * self.gamma[None, :, None, None]
        if not self.training:
            dx = dxhat * invstd[None, :, None, None]
            return dx.astype(grad.dtype), dgamma.astype(grad.dtype), dbeta.astype(grad.dtype)
        m = self.m
        s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
        dx = invstd[None, :, None, None] * (dxhat - s1 / m - xhat * s2 / m)
        return dx.astype(grad.dtype), dgamma.astype(grad.dtype), dbeta.astype(grad.dtype)


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    momentum: float = 0.9,
    eps: float = 1e-5,
    training: bool = True,
) -> Tensor:
    return BatchNorm2dFn.apply(
        x,
        gamma,
        beta,
        running_mean=running_mean,
        running_var=running_var,
        momentum=momentum,
        eps=eps,
        training=training,
    )


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class LstmFn(Function):
    """One LSTM layer over a full [B, T, I] sequence.

    Gate layout in the fused weight rows is (input, forget, cell, output).
    Two bias vectors are kept per layer; they enter the recurrence as
    their sum. Returns the hidden-state sequence [B, T, H]; final states
    are stashed on the returned tensor's producing node and exposed via
    :func:`lstm_forward`.
    """

    def forward(self, x, w_ih, w_hh, b_ih, b_hh, h0=None, c0=None):
        b, t, i = x.shape
        four_h, i_w = w_ih.shape
        h = four_h // 4
        if i_w != i:
            raise ShapeError(f"input size {i} does not match weight columns {i_w}")
        if w_hh.shape != (four_h, h):
            raise ShapeError(
                f"hidden weight shape {w_hh.shape} inconsistent with hidden size {h}"
            )
        xproj = x.reshape(b * t, i) @ w_ih.T + (b_ih + b_hh)
        xproj = xproj.reshape(b, t, four_h)
        hs = np.empty((b, t, h), dtype=x.dtype)
        gi = np.empty((t, b, h), dtype=x.dtype)
        gf = np.empty((t, b, h), dtype=x.dtype)
        gg = np.empty((t, b, h), dtype=x.dtype)
        go = np.empty((t, b, h), dtype=x.dtype)
        cs = np.empty((t, b, h), dtype=x.dtype)
        tc = np.empty((t, b, h), dtype=x.dtype)
        hprev = np.zeros((b, h), dtype=x.dtype) if h0 is None else h0.astype(x.dtype)
        cprev = np.zeros((b, h), dtype=x.dtype) if c0 is None else c0.astype(x.dtype)
        self.h0, self.c0 = hprev.copy(), cprev.copy()
        for step in range(t):
            gates = xproj[:, step] + hprev @ w_hh.T
            gi[step] = _sigmoid(gates[:, :h])
            gf[step] = _sigmoid(gates[:, h : 2 * h])
            gg[step] = np.tanh(gates[:, 2 * h : 3 * h])
            go[step] = _sigmoid(gates[:, 3 * h :])
            cprev = gf[step] * cprev + gi[step] * gg[step]
            cs[step] = cprev
            tc[step] = np.tanh(cprev)
            hprev = go[step] * tc[step]
            hs[:, step] = hprev
        self.saved = (x, w_ih, w_hh, gi, gf, gg, go, cs, tc, hs)
        self.final = (hprev.copy(), cprev.copy())
        return hs

    def backward(self, grad):
        x, w_ih, w_hh, gi, gf, gg, go, cs, tc, hs = self.saved
        b, t, i = x.shape
        h = gi.shape[2]
        dxproj = np.empty((b, t, 4 * h), dtype=grad.dtype)
        dw_hh = np.zeros_like(w_hh)
        dh_next = np.zeros((b, h), dtype=grad.dtype)
        dc_next = np.zeros((b, h), dtype=grad.dtype)
        for step in range(t - 1, -1, -1):
            dh = grad[:, step] + dh_next
            do = dh * tc[step]
            dct = dh * go[step] * (1.0 - tc[step] ** 2) + dc_next
            c_prev = cs[step - 1] if step > 0 else self.c0
            h_prev = hs[:, step - 1] if step > 0 else self.h0
            di = dct * gg[step]
            df = dct * c_prev
            dg = dct * gi[step]
            dgates = np.concatenate(
                [
                    di * gi[step] * (1.0 - gi[step]),
                    df * gf[step] * (1.0 - gf[step]),
                    dg * (1.0 - gg[step] ** 2),
                    do * go[step] * (1.0 - go[step]),
                ],
                axis=1,
            )
            dxproj[:, step] = dgates
            dw_hh += dgates.T @ h_prev
            dh_next = dgates @ w_hh
            dc_next = dct * gf[step]
        flat = dxproj.reshape(b * t, 4 * h)
        dw_ih = flat.T @ x.reshape(b * t, i)
        db = flat.sum(axis=0)
        dx = (flat @ w_ih).reshape(b, t, i)
        return dx, dw_ih, dw_hh, db.copy(), db.copy()


def lstm_forward(
    x: Tensor,
    w_ih: Tensor,
    w_hh: Tensor,
    b_ih: Tensor,
    b_hh: Tensor,
    state: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[Tensor, tuple[np.ndarray, np.ndarray]]:
    """Run one LSTM layer; returns (hidden sequence, (h_T, c_T)).

    The final states are plain arrays (no gradient path); training always
    consumes the full sequence from a zero initial state.
    """
    h0, c0 = (None, None) if state is None else state
    out = LstmFn.apply(x, w_ih, w_hh, b_ih, b_hh, h0=h0, c0=c0)
    if out.ctx is not None:
        final = out.ctx.final
    else:  # grad disabled: recompute handle from a throwaway context
        final = _lstm_final_states(x.data, w_ih.data, w_hh.data, b_ih.data, b_hh.data, h0, c0)
    return out, final


def _lstm_final_states(x, w_ih, w_hh, b_ih, b_hh, h0, c0):
    fn = LstmFn()
    fn.forward(x, w_ih, w_hh, b_ih, b_hh, h0=h0, c0=c0)
    return fn.final
