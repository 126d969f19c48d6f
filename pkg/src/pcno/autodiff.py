"""Minimal reverse-mode tensor tape for the operator and its losses.

Values are float64 or complex128 numpy arrays wrapped in :class:`Tensor`.
Each differentiable op records a :class:`TapeNode` holding references to its
parents and a closure that maps the output cotangent to per-parent cotangents;
``backward`` walks the tape in reverse topological order.

Gradients of complex tensors follow the treat-re/im-as-independent-reals
convention: ``grad = dL/dRe(z) + 1j * dL/dIm(z)``.  Viewed as float64 pairs
this lines up elementwise with the parameter storage, so the Adam update
never needs to know which parameters are complex.

Array layout for the spectral ops is (batch, channel, region, time, space),
i.e. the two transformed axes are the trailing ones.  The time axis gets a
full complex FFT, the space axis a real-to-half-spectrum FFT (unnormalized
forward, 1/(d_t*d_x) on the inverse).  `dft_truncated`/`idft_truncated` are
fused equivalents of transform+truncation built from cached DFT matrices and
GEMMs; they compute the same values as the FFT path to rounding error and
carry exact hand-derived adjoints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numba
import numpy as np

# Toggled by tests: verify that every op output is finite.
CHECK_FINITE = False

# When False, ops run eagerly without recording tape nodes (inference mode).
_TAPE_ENABLED = True


class no_grad:
    """Context manager disabling tape recording; activations are not retained."""

    def __enter__(self):
        global _TAPE_ENABLED
        self._saved = _TAPE_ENABLED
        _TAPE_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _TAPE_ENABLED
        _TAPE_ENABLED = self._saved
        return False


class Tensor:
    """A float64/complex128 array plus optional tape linkage."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype == np.complex128:
            pass
        elif np.iscomplexobj(arr):
            arr = arr.astype(np.complex128)
        else:
            arr = arr.astype(np.float64, copy=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: TapeNode | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_complex(self) -> bool:
        return self.data.dtype == np.complex128

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, " \
               f"grad={'yes' if self.requires_grad else 'no'})"

    # -- operator sugar (all defined on the op functions below) ---------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __abs__(self):
        return absolute(self)

    def __pow__(self, exponent):
        if exponent == 2:
            return mul(self, self)
        raise NotImplementedError("only squaring is supported")

    def __getitem__(self, key):
        return getitem(self, key)


@dataclass
class TapeNode:
    """Backward record: op tag, parent tensors, and the cotangent rule."""

    op: str
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], tuple]


def wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _needs_tape(*tensors: Tensor) -> bool:
    return _TAPE_ENABLED and any(t.requires_grad or t.node is not None
                                 for t in tensors)


def _make(op: str, out_data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"non-finite values produced by op {op!r}")
    out = Tensor(out_data)
    if _needs_tape(*parents):
        out.node = TapeNode(op=op, parents=parents, backward=backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the parent's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --- elementwise and reduction ops -----------------------------------------

def add(a, b) -> Tensor:
    a, b = wrap(a), wrap(b)
    out = a.data + b.data

    def back(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make("add", out, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = wrap(a), wrap(b)
    out = a.data - b.data

    def back(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make("sub", out, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = wrap(a), wrap(b)
    out = a.data * b.data
    if np.iscomplexobj(out):
        # Complex multiply under the re/im-pairs convention: g_a = g * conj(b).
        def back(g):
            return (_unbroadcast(g * np.conj(b.data), a.data.shape),
                    _unbroadcast(g * np.conj(a.data), b.data.shape))
    else:
        def back(g):
            return (_unbroadcast(g * b.data, a.data.shape),
                    _unbroadcast(g * a.data, b.data.shape))

    return _make("mul", out, (a, b), back)


def div(a, b) -> Tensor:
    a, b = wrap(a), wrap(b)
    if np.iscomplexobj(a.data) or np.iscomplexobj(b.data):
        raise NotImplementedError("division is defined for real tensors only")
    out = a.data / b.data

    def back(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make("div", out, (a, b), back)


def absolute(a) -> Tensor:
    a = wrap(a)
    if a.is_complex:
        raise NotImplementedError("abs is defined for real tensors only")
    out = np.abs(a.data)
    sign = np.sign(a.data)

    def back(g):
        return (g * sign,)

    return _make("abs", out, (a,), back)


def sqrt(a) -> Tensor:
    a = wrap(a)
    out = np.sqrt(a.data)

    def back(g):
        # Subgradient 0 at the origin (matches the abs convention), so RMS of
        # an exactly-zero residual propagates zeros instead of NaN.
        denom = 2.0 * out
        with np.errstate(divide="ignore", invalid="ignore"):
            r = g / denom
        return (np.where(denom == 0.0, 0.0, r),)

    return _make("sqrt", out, (a,), back)


def tsum(a) -> Tensor:
    a = wrap(a)
    out = np.asarray(a.data.sum())

    def back(g):
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _make("sum", out, (a,), back)


def mean(a) -> Tensor:
    a = wrap(a)
    n = a.data.size
    out = np.asarray(a.data.mean())

    def back(g):
        return (np.broadcast_to(g / n, a.data.shape).copy(),)

    return _make("mean", out, (a,), back)


def _is_basic_key(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (slice, int, type(Ellipsis), type(None))) for p in parts)


def getitem(a, key) -> Tensor:
    a = wrap(a)
    out = a.data[key]
    basic = _is_basic_key(key)

    def back(g):
        full = np.zeros_like(a.data)
        if basic:
            # Basic slices never alias, so in-place add is safe and much
            # faster than the unbuffered scatter.
            full[key] += g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _make("getitem", np.ascontiguousarray(out), (a,), back)


def stack_last(tensors: Sequence[Tensor]) -> Tensor:
    """Stack along a new trailing axis."""
    ts = [wrap(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=-1)

    def back(g):
        return tuple(np.ascontiguousarray(g[..., i]) for i in range(len(ts)))

    return _make("stack_last", out, tuple(ts), back)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    ts = [wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.ascontiguousarray(piece)
                     for piece in np.split(g, splits, axis=axis))

    return _make("concat", out, tuple(ts), back)


def embed(block, key, shape: tuple[int, ...]) -> Tensor:
    """Place ``block`` into a zero tensor of ``shape`` at basic-slice ``key``."""
    block = wrap(block)
    out = np.zeros(shape, dtype=block.data.dtype)
    out[key] = block.data

    def back(g):
        return (np.ascontiguousarray(g[key]),)

    return _make("embed", out, (block,), back)


# --- GELU -------------------------------------------------------------------

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


@numba.njit(cache=True)
def _gelu_forward(x, out, phi):
    for i in range(x.size):
        v = x[i]
        c = 0.5 * (1.0 + math.erf(v * 0.7071067811865476))
        phi[i] = c
        out[i] = v * c


@numba.njit(cache=True)
def _gelu_grad(x, phi, g, out):
    # phi saved from the forward pass spares the second erf evaluation.
    for i in range(x.size):
        v = x[i]
        dens = 0.3989422804014327 * math.exp(-0.5 * v * v)
        out[i] = g[i] * (phi[i] + v * dens)


def gelu(a) -> Tensor:
    """Exact-erf GELU, elementwise."""
    a = wrap(a)
    x = np.ascontiguousarray(a.data)
    out = np.empty_like(x)
    phi = np.empty_like(x) if _needs_tape(a) else out   # scratch when untaped
    _gelu_forward(x.ravel(), out.ravel(), phi.ravel())

    def back(g):
        gx = np.empty_like(x)
        _gelu_grad(x.ravel(), phi.ravel(), np.ascontiguousarray(g).ravel(),
                   gx.ravel())
        return (gx,)

    return _make("gelu", out, (a,), back)


def activation(a) -> Tensor:
    """The layer nonlinearity (GELU)."""
    return gelu(a)


# --- channel-wise affine map -------------------------------------------------

def pointwise_linear(v, W, b=None) -> Tensor:
    """Affine map over the channel axis (axis 1): out[s,c2,...] = W[c2,c] v[s,c,...] + b.

    v has shape (B, C, ...); W is real (C2, C); b is (C2,) or None.
    """
    v, W = wrap(v), wrap(W)
    B, C = v.data.shape[0], v.data.shape[1]
    tail = v.data.shape[2:]
    C2 = W.data.shape[0]
    v2 = v.data.reshape(B, C, -1)
    # Per-batch 2-D GEMMs: the broadcast (2d @ 3d) matmul takes a slow path.
    out = np.empty((B, C2, v2.shape[2]))
    for i in range(B):
        np.matmul(W.data, v2[i], out=out[i])
    if b is not None:
        b = wrap(b)
        out += b.data[:, None]
        parents = (v, W, b)
    else:
        parents = (v, W)
    out = out.reshape(B, C2, *tail)

    def back(g):
        g2 = np.ascontiguousarray(g).reshape(B, C2, -1)
        gv = np.empty_like(v2)
        gw = np.zeros_like(W.data)
        wt = np.ascontiguousarray(W.data.T)
        for i in range(B):
            np.matmul(wt, g2[i], out=gv[i])
            gw += g2[i] @ v2[i].T
        if len(parents) == 3:
            gb = g2.sum(axis=(0, 2))
            return gv.reshape(v.data.shape), gw, gb
        return gv.reshape(v.data.shape), gw

    return _make("pointwise_linear", out, parents, back)


# --- FFT-path spectral ops ----------------------------------------------------

def rfft_tx(v) -> Tensor:
    """Unnormalized FFT over the trailing (time, space) axes of a real tensor.

    Full complex transform along time (axis -2), real-to-half-spectrum along
    space (axis -1): (..., d_t, d_x) -> (..., d_t, d_x//2 + 1) complex.
    """
    v = wrap(v)
    if v.is_complex:
        raise ValueError("rfft_tx expects a real tensor")
    d_x = v.data.shape[-1]
    out = np.fft.fft(np.fft.rfft(v.data, axis=-1), axis=-2)

    def back(g):
        d_t = v.data.shape[-2]
        g1 = d_t * np.fft.ifft(g, axis=-2)
        h = 0.5 * g1
        h[..., 0] = np.real(g1[..., 0])
        if d_x % 2 == 0:
            h[..., -1] = np.real(g1[..., -1])
        return (d_x * np.fft.irfft(h, n=d_x, axis=-1),)

    return _make("rfft_tx", out, (v,), back)


def irfft_tx(F, d_t: int, d_x: int) -> Tensor:
    """Inverse of ``rfft_tx`` with 1/(d_t*d_x) normalization; output is real."""
    F = wrap(F)
    out = np.fft.irfft(np.fft.ifft(F.data, axis=-2), n=d_x, axis=-1)

    def back(g):
        r = np.fft.rfft(g, axis=-1)
        h = (2.0 / d_x) * r
        h[..., 0] = r[..., 0] / d_x
        if d_x % 2 == 0:
            h[..., -1] = r[..., -1] / d_x
        return (np.fft.fft(h, axis=-2) / d_t,)

    return _make("irfft_tx", out, (F,), back)


@dataclass
class ModeBlocks:
    """Retained spectral coefficients: low and high temporal bands."""

    low: Tensor
    high: Tensor


def _check_cutoffs(d_t: int, k_x: int, z_t: int, z_x: int) -> None:
    if 2 * z_t > d_t:
        raise ValueError(f"temporal cutoff {z_t} too large for {d_t} samples")
    if z_x > k_x:
        raise ValueError(f"spatial cutoff {z_x} exceeds half-spectrum size {k_x}")


def truncate_modes(F, z_t: int, z_x: int) -> ModeBlocks:
    """Keep the lowest/highest z_t temporal and lowest z_x spatial modes."""
    F = wrap(F)
    _check_cutoffs(F.data.shape[-2], F.data.shape[-1], z_t, z_x)
    return ModeBlocks(low=getitem(F, (..., slice(0, z_t), slice(0, z_x))),
                      high=getitem(F, (..., slice(F.data.shape[-2] - z_t, None),
                                       slice(0, z_x))))


def untruncate(blocks: ModeBlocks, d_t: int, k_x: int) -> Tensor:
    """Scatter mode blocks back into a zero spectrum of shape (..., d_t, k_x)."""
    low, high = wrap(blocks.low), wrap(blocks.high)
    z_t, z_x = low.data.shape[-2], low.data.shape[-1]
    _check_cutoffs(d_t, k_x, z_t, z_x)
    out = np.zeros(low.data.shape[:-2] + (d_t, k_x), dtype=np.complex128)
    out[..., :z_t, :z_x] = low.data
    out[..., d_t - z_t:, :z_x] = high.data

    def back(g):
        return (np.ascontiguousarray(g[..., :z_t, :z_x]),
                np.ascontiguousarray(g[..., d_t - z_t:, :z_x]))

    return _make("untruncate", out, (low, high), back)


# --- fused truncated-DFT path --------------------------------------------------

@dataclass(frozen=True)
class _DftPlan:
    """Cached DFT matrices (forward and adjoint, contiguous) for one grid."""

    fx_stacked: np.ndarray      # (d_x, 2 z_x) real: [Re Fx | Im Fx]
    ft: np.ndarray              # (d_t, 2 z_t) complex, kept temporal modes
    ft_adj: np.ndarray          # (2 z_t, d_t) = conj(ft).T
    fx_adj_stacked: np.ndarray  # (2 z_x, d_x) real: [Re Fx; Im Fx] transposed
    gt_T: np.ndarray            # (2 z_t, d_t) complex inverse scatter
    gt_conj: np.ndarray         # (d_t, 2 z_t)
    gx_stacked: np.ndarray      # (2 z_x, d_x) real inverse with Hermitian weights
    gx_adj_stacked: np.ndarray  # (d_x, 2 z_x) real adjoint of the above


_PLAN_CACHE: dict[tuple[int, int, int, int], _DftPlan] = {}


def _dft_plan(d_t: int, d_x: int, z_t: int, z_x: int) -> _DftPlan:
    key = (d_t, d_x, z_t, z_x)
    plan = _PLAN_CACHE.get(key)
    if plan is not None:
        return plan
    x = np.arange(d_x)
    kx = np.arange(z_x)
    fx = np.exp(-2j * np.pi * np.outer(x, kx) / d_x)          # (d_x, z_x)

    t = np.arange(d_t)
    kt = np.concatenate([np.arange(z_t), np.arange(d_t - z_t, d_t)])
    ft = np.exp(-2j * np.pi * np.outer(t, kt) / d_t)          # (d_t, 2 z_t)

    # Inverse pieces: gt scatters kept temporal modes, gx applies the
    # Hermitian-doubling weights of the real inverse transform.
    gt = np.conj(ft) / d_t                                    # (d_t, 2 z_t)
    w = np.full(z_x, 2.0)
    w[0] = 1.0
    if d_x % 2 == 0 and z_x == d_x // 2 + 1:
        w[-1] = 1.0
    gx = (np.conj(fx) * w[None, :]) / d_x                     # (d_x, z_x)

    c = np.ascontiguousarray
    plan = _DftPlan(
        fx_stacked=c(np.concatenate([fx.real, fx.imag], axis=1)),
        ft=c(ft),
        ft_adj=c(np.conj(ft).T),
        fx_adj_stacked=c(np.concatenate([fx.real.T, fx.imag.T], axis=0)),
        gt_T=c(gt.T),
        gt_conj=c(np.conj(gt)),
        gx_stacked=c(np.concatenate([gx.real.T, gx.imag.T], axis=0)),
        gx_adj_stacked=c(np.concatenate([gx.real, -gx.imag], axis=1)),
    )
    _PLAN_CACHE[key] = plan
    return plan


def dft_truncated(v, z_t: int, z_x: int) -> Tensor:
    """Truncated spectrum of a real tensor, equal to rfft_tx + truncation.

    Output shape (..., 2*z_t, z_x): rows [0, z_t) are the low temporal block,
    rows [z_t, 2*z_t) the high block.  Implemented as two GEMMs against cached
    DFT matrices, which is much faster than full FFTs on awkward grid sizes.
    """
    v = wrap(v)
    d_t, d_x = v.data.shape[-2], v.data.shape[-1]
    _check_cutoffs(d_t, d_x // 2 + 1, z_t, z_x)
    plan = _dft_plan(d_t, d_x, z_t, z_x)

    lead = v.data.shape[:-2]
    v2 = v.data.reshape(-1, d_x)                               # (S*d_t, d_x)
    d = v2 @ plan.fx_stacked                                   # one dgemm
    u = d[:, :z_x] + 1j * d[:, z_x:]
    u = u.reshape(-1, d_t, z_x)
    u_t = np.ascontiguousarray(u.swapaxes(-1, -2)).reshape(-1, d_t)
    blocks = u_t @ plan.ft                                     # one zgemm
    blocks = blocks.reshape(-1, z_x, 2 * z_t).swapaxes(-1, -2)
    out = np.ascontiguousarray(blocks).reshape(*lead, 2 * z_t, z_x)

    def back(g):
        g2 = np.ascontiguousarray(g).reshape(-1, 2 * z_t, z_x)
        g_t = np.ascontiguousarray(g2.swapaxes(-1, -2)).reshape(-1, 2 * z_t)
        g1 = g_t @ plan.ft_adj                                 # (S*z_x, d_t)
        g1 = g1.reshape(-1, z_x, d_t).swapaxes(-1, -2).reshape(-1, z_x)
        g1s = np.concatenate([g1.real, g1.imag], axis=1)       # (S*d_t, 2 z_x)
        gv = g1s @ plan.fx_adj_stacked                         # one dgemm
        return (gv.reshape(v.data.shape),)

    return _make("dft_truncated", out, (v,), back)


def idft_truncated(blocks, d_t: int, d_x: int) -> Tensor:
    """Real field from stacked mode blocks; equals untruncate + irfft_tx."""
    blocks = wrap(blocks)
    two_zt, z_x = blocks.data.shape[-2], blocks.data.shape[-1]
    z_t = two_zt // 2
    _check_cutoffs(d_t, d_x // 2 + 1, z_t, z_x)
    plan = _dft_plan(d_t, d_x, z_t, z_x)

    lead = blocks.data.shape[:-2]
    b2 = blocks.data.reshape(-1, two_zt, z_x)
    b_t = np.ascontiguousarray(b2.swapaxes(-1, -2)).reshape(-1, two_zt)
    a = b_t @ plan.gt_T                                        # (S*z_x, d_t) zgemm
    a = a.reshape(-1, z_x, d_t).swapaxes(-1, -2).reshape(-1, z_x)
    stacked = np.concatenate([a.real, -a.imag], axis=1)        # (S*d_t, 2 z_x)
    out = (stacked @ plan.gx_stacked).reshape(*lead, d_t, d_x)  # one dgemm

    def back(g):
        g2 = np.ascontiguousarray(g).reshape(-1, d_x)
        g1s = g2 @ plan.gx_adj_stacked                         # (S*d_t, 2 z_x)
        g1 = g1s[:, :z_x] + 1j * g1s[:, z_x:]
        g1 = g1.reshape(-1, d_t, z_x)
        g_t = np.ascontiguousarray(g1.swapaxes(-1, -2)).reshape(-1, d_t)
        gb = g_t @ plan.gt_conj                                # (S*z_x, 2 z_t)
        gb = gb.reshape(-1, z_x, two_zt).swapaxes(-1, -2)
        return (np.ascontiguousarray(gb).reshape(blocks.data.shape),)

    return _make("idft_truncated", out, (blocks,), back)


# --- spectral weight contractions ---------------------------------------------

def region_mix(block, K1) -> Tensor:
    """Per-mode linear map across the region axis.

    block: (B, C, E, n_t, n_x) complex; K1: (n_t, n_x, E_out, E_in) complex.
    out[b,c,f,kt,kx] = sum_e K1[kt,kx,f,e] * block[b,c,e,kt,kx].
    """
    block, K1 = wrap(block), wrap(K1)
    B, C, E, nt, nx = block.data.shape
    if K1.data.shape[:2] != (nt, nx) or K1.data.shape[2:] != (K1.data.shape[2], E):
        raise ValueError(f"region_mix shape mismatch: {K1.data.shape} vs {block.data.shape}")
    f_out = K1.data.shape[2]
    # (nt, nx, B*C, E) @ (nt, nx, E, F) -> (nt, nx, B*C, F)
    bt = np.ascontiguousarray(block.data.transpose(3, 4, 0, 1, 2)).reshape(nt, nx, B * C, E)
    k1t = np.ascontiguousarray(K1.data.swapaxes(-1, -2))       # (nt, nx, E_in, E_out)
    ot = np.matmul(bt, k1t)
    out = ot.reshape(nt, nx, B, C, f_out).transpose(2, 3, 4, 0, 1)

    def back(g):
        gt = np.ascontiguousarray(g.transpose(3, 4, 0, 1, 2)).reshape(nt, nx, B * C, f_out)
        gb = np.matmul(gt, np.conj(K1.data))                   # (nt,nx,BC,E_in)
        g_block = gb.reshape(nt, nx, B, C, E).transpose(2, 3, 4, 0, 1)
        gk = np.matmul(gt.swapaxes(-1, -2), np.conj(bt))       # (nt,nx,F,E_in)
        return (np.ascontiguousarray(g_block), gk)

    return _make("region_mix", np.ascontiguousarray(out), (block, K1), back)


def channel_mix(block, K2) -> Tensor:
    """Per-region linear map across the channel axis.

    block: (B, C, E, n_t, n_x) complex; K2: (C_out, C_in, E) complex.
    out[b,f,e,kt,kx] = sum_c K2[f,c,e] * block[b,c,e,kt,kx].
    """
    block, K2 = wrap(block), wrap(K2)
    B, C, E, nt, nx = block.data.shape
    if K2.data.shape[1:] != (C, E):
        raise ValueError(f"channel_mix shape mismatch: {K2.data.shape} vs C={C}, E={E}")
    c_out = K2.data.shape[0]
    out = np.empty((B, c_out, E, nt, nx), dtype=np.complex128)
    b2 = block.data.reshape(B, C, E, nt * nx)
    for e in range(E):
        for i in range(B):
            out[i, :, e] = np.matmul(K2.data[:, :, e], b2[i, :, e]).reshape(c_out, nt, nx)

    def back(g):
        g2 = np.ascontiguousarray(g).reshape(B, c_out, E, nt * nx)
        g_block = np.empty_like(block.data)
        gk = np.zeros_like(K2.data)
        for e in range(E):
            wh = np.conj(K2.data[:, :, e]).T
            for i in range(B):
                g_block[i, :, e] = np.matmul(wh, g2[i, :, e]).reshape(C, nt, nx)
                gk[:, :, e] += g2[i, :, e] @ np.conj(b2[i, :, e]).T
        return (g_block, gk)

    return _make("channel_mix", out, (block, K2), back)


def channel_mix_shared(block, K2) -> Tensor:
    """Channel map with one weight matrix shared by every region.

    block: (B, C, E, n_t, n_x) complex; K2: (C_out, C_in) complex.
    """
    block, K2 = wrap(block), wrap(K2)
    B, C, E, nt, nx = block.data.shape
    if K2.data.shape[1] != C:
        raise ValueError(f"channel_mix_shared shape mismatch: {K2.data.shape} vs C={C}")
    c_out = K2.data.shape[0]
    b2 = block.data.reshape(B, C, -1)
    out = np.empty((B, c_out, b2.shape[2]), dtype=np.complex128)
    for i in range(B):
        np.matmul(K2.data, b2[i], out=out[i])
    out = out.reshape(B, c_out, E, nt, nx)

    def back(g):
        g2 = np.ascontiguousarray(g).reshape(B, c_out, -1)
        g_block = np.empty_like(b2)
        gk = np.zeros_like(K2.data)
        wh = np.conj(K2.data).T
        for i in range(B):
            np.matmul(wh, g2[i], out=g_block[i])
            gk += g2[i] @ np.conj(b2[i]).T
        return (g_block.reshape(block.data.shape), gk)

    return _make("channel_mix_shared", out, (block, K2), back)


def mode_channel_mix(block, K) -> Tensor:
    """Per-mode channel map (3D-transform and per-region baselines).

    block: (B, C, M1, ..., Mk) complex; K: (C_out, C_in, M1, ..., Mk) complex.
    out[b,f,m...] = sum_c K[f,c,m...] * block[b,c,m...].
    """
    block, K = wrap(block), wrap(K)
    B, C = block.data.shape[:2]
    modes = block.data.shape[2:]
    if K.data.shape[1] != C or K.data.shape[2:] != modes:
        raise ValueError(f"mode_channel_mix shape mismatch: {K.data.shape} vs {block.data.shape}")
    c_out = K.data.shape[0]
    n_modes = int(np.prod(modes)) if modes else 1
    # (modes, B, C) @ (modes, C, F) -> (modes, B, F)
    bt = np.ascontiguousarray(
        block.data.reshape(B, C, n_modes).transpose(2, 0, 1))
    kt = np.ascontiguousarray(
        K.data.reshape(c_out, C, n_modes).transpose(2, 1, 0))
    ot = np.matmul(bt, kt)
    out = ot.transpose(1, 2, 0).reshape(B, c_out, *modes)

    def back(g):
        gt = np.ascontiguousarray(
            g.reshape(B, c_out, n_modes).transpose(2, 0, 1))     # (modes,B,F)
        gb = np.matmul(gt, np.conj(kt).swapaxes(-1, -2))         # (modes,B,C)
        g_block = gb.transpose(1, 2, 0).reshape(block.data.shape)
        gk = np.matmul(gt.swapaxes(-1, -2), np.conj(bt))         # (modes,F,C)
        g_K = gk.transpose(1, 2, 0).reshape(K.data.shape)
        return (np.ascontiguousarray(g_block), np.ascontiguousarray(g_K))

    return _make("mode_channel_mix", out, (block, K), back)


def fft_region(v) -> Tensor:
    """Full complex FFT along the region axis (axis 2 of (B,C,E,T,X))."""
    v = wrap(v)
    out = np.fft.fft(v.data, axis=2)

    def back(g):
        E = v.data.shape[2]
        gv = E * np.fft.ifft(g, axis=2)
        if not v.is_complex:
            gv = gv.real.copy()
        return (gv,)

    return _make("fft_region", out, (v,), back)


def ifft_region(F) -> Tensor:
    """Inverse FFT along the region axis (complex; realness is restored by the
    subsequent space-time inverse transform)."""
    F = wrap(F)
    out = np.fft.ifft(F.data, axis=2)

    def back(g):
        E = F.data.shape[2]
        return (np.fft.fft(g, axis=2) / E,)

    return _make("ifft_region", out, (F,), back)


# --- grid alignment ------------------------------------------------------------

def align_join(regions: Sequence[Tensor], pads_t: tuple[int, int],
               pads_x: Sequence[tuple[int, int]]) -> Tensor:
    """Zero-pad each (B, C, T, X_e) region and stack into (B, C, E, T', X')."""
    ts = [wrap(r) for r in regions]
    B, C, d_t = ts[0].data.shape[0], ts[0].data.shape[1], ts[0].data.shape[2]
    t_lo, t_hi = pads_t
    d_t_new = d_t + t_lo + t_hi
    d_x_new = ts[0].data.shape[3] + pads_x[0][0] + pads_x[0][1]
    out = np.zeros((B, C, len(ts), d_t_new, d_x_new))
    for e, t in enumerate(ts):
        x_lo, _ = pads_x[e]
        d_x = t.data.shape[3]
        out[:, :, e, t_lo:t_lo + d_t, x_lo:x_lo + d_x] = t.data

    def back(g):
        grads = []
        for e, t in enumerate(ts):
            x_lo, _ = pads_x[e]
            d_x = t.data.shape[3]
            grads.append(np.ascontiguousarray(
                g[:, :, e, t_lo:t_lo + d_t, x_lo:x_lo + d_x]))
        return tuple(grads)

    return _make("align_join", out, tuple(ts), back)


def extract_region(joined, e: int, pads_t: tuple[int, int],
                   pad_x: tuple[int, int], d_t: int, d_x: int) -> Tensor:
    """Undo padding/stacking for one region: (B,C,E,T',X') -> (B,C,T,X_e)."""
    joined = wrap(joined)
    t_lo = pads_t[0]
    x_lo = pad_x[0]
    out = np.ascontiguousarray(joined.data[:, :, e, t_lo:t_lo + d_t, x_lo:x_lo + d_x])

    def back(g):
        full = np.zeros_like(joined.data)
        full[:, :, e, t_lo:t_lo + d_t, x_lo:x_lo + d_x] = g
        return (full,)

    return _make("extract_region", out, (joined,), back)


# --- backward pass ---------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        tensor, processed = stack.pop()
        if processed:
            order.append(tensor)
            continue
        if id(tensor) in seen:
            continue
        seen.add(id(tensor))
        stack.append((tensor, True))
        if tensor.node is not None:
            for parent in tensor.node.parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate dL/dt into ``.grad`` of every reachable tensor on the tape.

    ``loss`` must be a real scalar.  Existing ``.grad`` values on the tape are
    replaced, not accumulated across calls.
    """
    if loss.data.size != 1 or loss.is_complex:
        raise ValueError("backward expects a real scalar loss")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for tensor in reversed(order):
        g = grads.pop(id(tensor), None)
        if g is None:
            continue
        if tensor.requires_grad:
            tensor.grad = g if tensor.grad is None else tensor.grad + g
        node = tensor.node
        if node is None:
            continue
        parent_grads = node.backward(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or (not parent.requires_grad and parent.node is None):
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def parameter_gradients(loss: Tensor, params: Mapping[str, Tensor]
                        ) -> tuple[dict[str, np.ndarray], list[str]]:
    """Run backward and collect per-parameter gradients.

    Parameters that the loss never touched come back as zero gradients and
    are listed in the second return value.
    """
    zero_grads(params.values())
    backward(loss)
    grads: dict[str, np.ndarray] = {}
    detached: list[str] = []
    for name, p in params.items():
        if p.grad is None:
            grads[name] = np.zeros_like(p.data)
            detached.append(name)
        else:
            grads[name] = p.grad
    return grads, detached


# --- Adam ---------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment buffers, stored as float64 views of the parameters."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def buffers_for(self, name: str, param: np.ndarray):
        flat = param.view(np.float64)
        if name not in self.m:
            self.m[name] = np.zeros_like(flat)
            self.v[name] = np.zeros_like(flat)
        return self.m[name], self.v[name]


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float, step: int,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place; ``step`` starts at 1.

    Complex parameters update through their float64 views, i.e. real and
    imaginary parts are treated as independent coordinates.
    """
    if step < 1:
        raise ValueError("step starts at 1")
    b1t = 1.0 - beta1**step
    b2t = 1.0 - beta2**step
    for name in params:
        p = params[name].data
        g = np.ascontiguousarray(grads[name]).view(np.float64)
        m, v = state.buffers_for(name, p)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / b1t) / (np.sqrt(v / b2t) + eps)
        p.view(np.float64)[...] -= lr * update
