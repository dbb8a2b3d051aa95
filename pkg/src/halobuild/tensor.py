"""Dense NCHW tensors with a dynamic reverse-mode tape.

Every differentiable op records its parents and a closure mapping the output
gradient to parent gradients; ``Tensor.backward`` walks the recorded graph in
reverse topological order. Arrays default to float32; an op never changes the
dtype of its inputs, so feeding float64 data gives a float64 graph (the
gradient audit relies on that).
"""
from __future__ import annotations

import contextlib
import functools
import threading
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractViolation, GradientAuditError, UnsupportedConfiguration

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation, optimizer updates)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float32)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __radd__ = __add__
    __rmul__ = __mul__

    def backward(self, grad: Optional[np.ndarray] = None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
        if grad is None:
            if self.data.size != 1:
                raise ContractViolation("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        return None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check4(x: Tensor, what: str):
    if x.ndim != 4:
        raise ContractViolation(f"{what} expects a rank-4 (B,C,H,W) tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _broadcast_ok(a: tuple, b: tuple) -> bool:
    if a == b:
        return True
    if len(a) != 4 or len(b) != 4:
        return False
    big, small = (a, b) if a[2] * a[3] * a[1] >= b[2] * b[3] * b[1] else (b, a)
    if small[0] != big[0]:
        return False
    per_channel = small[1] == big[1] and small[2] == 1 and small[3] == 1
    per_pixel = small[1] == 1 and small[2:] == big[2:]
    return per_channel or per_pixel


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def add(a: Tensor, b: Tensor) -> Tensor:
    if not _broadcast_ok(a.shape, b.shape):
        raise ContractViolation(f"illegal broadcast in add: {a.shape} vs {b.shape}")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if not _broadcast_ok(a.shape, b.shape):
        raise ContractViolation(f"illegal broadcast in mul: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _make(ad * bd, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-d))
    fi = np.finfo(d.dtype)
    # keep gates strictly inside (0, 1) even where exp saturates
    s = np.clip(s, fi.tiny, 1.0 - fi.epsneg).astype(d.dtype, copy=False)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,))


def concat_c(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ContractViolation("concat_c needs at least one tensor")
    for x in xs:
        _check4(x, "concat_c")
    b, _, h, w = xs[0].shape
    for x in xs[1:]:
        if (x.shape[0], x.shape[2], x.shape[3]) != (b, h, w):
            raise ContractViolation(f"concat_c: mismatched B/H/W {xs[0].shape} vs {x.shape}")
    sizes = [x.shape[1] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return _make(np.concatenate([x.data for x in xs], axis=1), xs, back)


def slice_c(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _make(x.data[:, start:stop], (x,), back)


def split_c(x: Tensor, sizes: Sequence[int]) -> list:
    _check4(x, "split_c")
    if sum(sizes) != x.shape[1]:
        raise ContractViolation(f"split_c sizes {list(sizes)} do not sum to {x.shape[1]} channels")
    out, start = [], 0
    for s in sizes:
        out.append(slice_c(x, start, start + s))
        start += s
    return out


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Fully connected map on (B, C, 1, 1) descriptors; ``w`` is (out, in)."""
    _check4(x, "linear")
    if x.shape[2:] != (1, 1):
        raise ContractViolation(f"linear expects (B,C,1,1) descriptors, got {x.shape}")
    if w.ndim != 2 or w.shape[1] != x.shape[1]:
        raise ContractViolation(f"linear weight {w.shape} incompatible with input {x.shape}")
    xv = x.data[:, :, 0, 0]
    wd = w.data
    y = xv @ wd.T
    if b is not None:
        y = y + b.data
    n = x.shape[0]

    def back(g):
        g2 = g[:, :, 0, 0]
        gx = (g2 @ wd)[:, :, None, None] if x.requires_grad else None
        gw = g2.T @ xv if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _make(y.reshape(n, -1, 1, 1), parents, back)


def mlp2(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return linear(relu(linear(x, w1, b1)), w2, b2)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                 lambda g: (np.broadcast_to(g, shape).astype(g.dtype),))


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.data.size)


# ---------------------------------------------------------------------------
# normalization (fused for speed; audited like every other primitive)
# ---------------------------------------------------------------------------

def _affine_norm(x: Tensor, gamma: Tensor, beta: Tensor, axes: tuple, eps: float) -> Tensor:
    d = x.data
    mu = d.mean(axis=axes, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gs = gamma.data.reshape(1, -1, 1, 1)
    y = xhat * gs + beta.data.reshape(1, -1, 1, 1)
    n = np.prod([d.shape[a] for a in axes])

    def back(g):
        gx = None
        if x.requires_grad:
            gh = g * gs
            gx = inv * (gh - gh.mean(axis=axes, keepdims=True)
                        - xhat * (gh * xhat).sum(axis=axes, keepdims=True) / n)
        ggam = (g * xhat).sum(axis=(0, 2, 3)).reshape(gamma.shape) if gamma.requires_grad else None
        gbet = g.sum(axis=(0, 2, 3)).reshape(beta.shape) if beta.requires_grad else None
        return gx, ggam, gbet

    return _make(y.astype(d.dtype, copy=False), (x, gamma, beta), back)


def channel_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each pixel's feature vector over channels, then per-channel affine."""
    _check4(x, "channel_norm")
    return _affine_norm(x, gamma, beta, (1,), eps)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel) plane over H x W, then per-channel affine."""
    _check4(x, "instance_norm")
    return _affine_norm(x, gamma, beta, (2, 3), eps)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

@dataclass
class ConvKernel:
    weight: Tensor
    bias: Optional[Tensor] = None
    groups: int = 1
    dilation: int = 1
    stride: int = 1
    padding_mode: str = "reflect"

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ContractViolation(f"conv weight must be rank 4, got {self.weight.shape}")
        if self.padding_mode not in ("reflect", "zero"):
            raise ContractViolation(f"padding_mode must be 'reflect' or 'zero', got {self.padding_mode!r}")
        if min(self.groups, self.dilation, self.stride) < 1:
            raise ContractViolation("groups, dilation and stride must be positive")
        out_ch = self.weight.shape[0]
        if out_ch % self.groups:
            raise ContractViolation(f"out channels {out_ch} not divisible by groups {self.groups}")
        if self.bias is not None and self.bias.shape != (out_ch,):
            raise ContractViolation(f"bias shape {self.bias.shape} != ({out_ch},)")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def depthwise(self) -> bool:
        return self.groups == self.weight.shape[0] == self.in_channels and self.weight.shape[1] == 1


@functools.lru_cache(maxsize=256)
def _pad_matrix(n: int, pad: int, mode: str, dtype: str) -> np.ndarray:
    """(n + 2 pad, n) selection matrix; rows are one-hot (reflect) or zero (zero pad)."""
    m = np.zeros((n + 2 * pad, n), dtype=dtype)
    if mode == "reflect":
        idx = np.pad(np.arange(n), pad, mode="reflect")
        m[np.arange(n + 2 * pad), idx] = 1
    else:
        m[np.arange(pad, pad + n), np.arange(n)] = 1
    m.setflags(write=False)
    return m


def _pad(d: np.ndarray, pad: int, mode: str) -> np.ndarray:
    if pad == 0:
        return d
    if mode == "reflect":
        return np.pad(d, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
    return np.pad(d, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _unpad(g: np.ndarray, h: int, w: int, pad: int, mode: str) -> np.ndarray:
    if pad == 0:
        return g
    if mode == "zero":
        return g[:, :, pad:pad + h, pad:pad + w]
    ph = _pad_matrix(h, pad, mode, g.dtype.str)
    pw = _pad_matrix(w, pad, mode, g.dtype.str)
    return np.matmul(np.matmul(ph.T, g), pw)


def _taps(kh: int, kw: int, d: int, s: int, ho: int, wo: int):
    for i in range(kh):
        for j in range(kw):
            yield i, j, (slice(i * d, i * d + s * (ho - 1) + 1, s), slice(j * d, j * d + s * (wo - 1) + 1, s))


def conv2d(x: Tensor, k: ConvKernel) -> Tensor:
    """2-D convolution with "same" padding ``dilation*(k-1)/2`` (odd kernels only)."""
    _check4(x, "conv2d")
    b, c, h, w = x.shape
    wt = k.weight.data
    cout, cpg, kh, kw = wt.shape
    if c != k.in_channels or c % k.groups:
        raise ContractViolation(
            f"conv2d: input has {c} channels, kernel expects {k.in_channels} (groups={k.groups})")
    if kh % 2 == 0 or kw % 2 == 0:
        raise UnsupportedConfiguration(f"same padding needs odd kernels, got {kh}x{kw}")
    if kh != kw:
        raise UnsupportedConfiguration(f"only square kernels are supported, got {kh}x{kw}")
    dil, st = k.dilation, k.stride
    pad = dil * (kh - 1) // 2
    ho, wo = (h - 1) // st + 1, (w - 1) // st + 1
    xd = x.data
    xp = _pad(xd, pad, k.padding_mode)
    dt = np.result_type(xd, wt)
    bias = k.bias

    if kh == 1 and st == 1 and k.groups == 1:
        w2 = wt[:, :, 0, 0]
        cols = xd.reshape(b, c, h * w)
        out = np.matmul(w2, cols).reshape(b, cout, h, w)

        def back_core(g):
            g3 = g.reshape(b, cout, h * w)
            gx = np.matmul(w2.T, g3).reshape(b, c, h, w) if x.requires_grad else None
            gw = None
            if k.weight.requires_grad:
                gw = np.einsum("bol,bcl->oc", g3, cols, optimize=True)[:, :, None, None]
            return gx, gw
    elif k.depthwise:
        wk = wt[:, 0]
        out = np.zeros((b, cout, ho, wo), dtype=dt)
        for i, j, sl in _taps(kh, kw, dil, st, ho, wo):
            out += wk[None, :, i, j, None, None] * xp[(slice(None), slice(None)) + sl]

        def back_core(g):
            gxp = np.zeros(xp.shape, dtype=g.dtype) if x.requires_grad else None
            gw = np.zeros(wt.shape, dtype=g.dtype) if k.weight.requires_grad else None
            for i, j, sl in _taps(kh, kw, dil, st, ho, wo):
                idx = (slice(None), slice(None)) + sl
                if gxp is not None:
                    gxp[idx] += wk[None, :, i, j, None, None] * g
                if gw is not None:
                    gw[:, 0, i, j] = np.einsum("bchw,bchw->c", g, xp[idx])
            gx = _unpad(gxp, h, w, pad, k.padding_mode) if gxp is not None else None
            return gx, gw
    else:
        grp = k.groups
        opg = cout // grp
        cols = np.empty((b, c, kh, kw, ho, wo), dtype=xp.dtype)
        for i, j, sl in _taps(kh, kw, dil, st, ho, wo):
            cols[:, :, i, j] = xp[(slice(None), slice(None)) + sl]
        colsg = cols.reshape(b, grp, cpg * kh * kw, ho * wo)
        wg = wt.reshape(grp, opg, cpg * kh * kw)
        out = np.matmul(wg[None], colsg).reshape(b, cout, ho, wo)

        def back_core(g):
            g4 = g.reshape(b, grp, opg, ho * wo)
            gx = gw = None
            if k.weight.requires_grad:
                gw = np.einsum("bgol,bgkl->gok", g4, colsg, optimize=True).reshape(wt.shape)
            if x.requires_grad:
                gcols = np.matmul(wg.transpose(0, 2, 1)[None], g4).reshape(b, c, kh, kw, ho, wo)
                gxp = np.zeros(xp.shape, dtype=g.dtype)
                for i, j, sl in _taps(kh, kw, dil, st, ho, wo):
                    gxp[(slice(None), slice(None)) + sl] += gcols[:, :, i, j]
                gx = _unpad(gxp, h, w, pad, k.padding_mode)
            return gx, gw

    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = out.astype(dt, copy=False)

    def back(g):
        gx, gw = back_core(g)
        if bias is None:
            return gx, gw
        return gx, gw, (g.sum(axis=(0, 2, 3)) if bias.requires_grad else None)

    parents = (x, k.weight) if bias is None else (x, k.weight, bias)
    return _make(out, parents, back)


# ---------------------------------------------------------------------------
# pooling and resampling
# ---------------------------------------------------------------------------

def pool(x: Tensor, kind: str) -> Tensor:
    _check4(x, "pool")
    d = x.data
    shape = d.shape
    if kind == "gap_spatial":
        n = shape[2] * shape[3]
        return _make(d.mean(axis=(2, 3), keepdims=True), (x,),
                     lambda g: (np.broadcast_to(g / n, shape).astype(g.dtype),))
    if kind == "avg_over_channels":
        n = shape[1]
        return _make(d.mean(axis=1, keepdims=True), (x,),
                     lambda g: (np.broadcast_to(g / n, shape).astype(g.dtype),))
    if kind == "max_over_channels":
        arg = d.argmax(axis=1)[:, None]
        out = np.take_along_axis(d, arg, axis=1)

        def back(g):
            full = np.zeros(shape, dtype=g.dtype)
            np.put_along_axis(full, arg, g, axis=1)
            return (full,)

        return _make(out, (x,), back)
    raise ContractViolation(f"unknown pool kind {kind!r}")


@functools.lru_cache(maxsize=128)
def bilinear_matrix(n_in: int, n_out: int, dtype: str = "<f4") -> np.ndarray:
    """(n_out, n_in) interpolation matrix with half-pixel centers, edge clamped."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1 - frac)
    np.add.at(m, (rows, i1), frac)
    m = m.astype(dtype)
    m.setflags(write=False)
    return m


_RESIZE = {"bilinear_up2": ("up", 2), "bilinear_up4": ("up", 4), "avg_down2": ("down", 2), "avg_down4": ("down", 4)}


def resize(x: Tensor, mode: str) -> Tensor:
    _check4(x, "resize")
    if mode not in _RESIZE:
        raise ContractViolation(f"unknown resize mode {mode!r}")
    kind, f = _RESIZE[mode]
    b, c, h, w = x.shape
    d = x.data
    if kind == "up":
        mh = bilinear_matrix(h, h * f, d.dtype.str)
        mw = bilinear_matrix(w, w * f, d.dtype.str)
        out = np.matmul(np.matmul(mh, d), mw.T)
        return _make(out, (x,), lambda g: (np.matmul(np.matmul(mh.T, g), mw),))
    if h % f or w % f:
        raise ContractViolation(f"{mode}: spatial size {h}x{w} not divisible by {f}")
    out = d.reshape(b, c, h // f, f, w // f, f).mean(axis=(3, 5))

    def back(g):
        gg = np.broadcast_to(g[:, :, :, None, :, None] / (f * f), (b, c, h // f, f, w // f, f))
        return (gg.reshape(b, c, h, w).astype(g.dtype),)

    return _make(out, (x,), back)


# ---------------------------------------------------------------------------
# spectra
# ---------------------------------------------------------------------------

@dataclass
class Spectrum:
    """Real/imaginary parts of a per-channel 2-D DFT, each a differentiable Tensor."""
    re: Tensor
    im: Tensor
    centered: bool

    @property
    def shape(self) -> tuple:
        return self.re.shape

    def magnitude(self) -> Tensor:
        return magnitude(self)


def spectral(x: Tensor, centered: bool = True) -> Spectrum:
    """Unnormalized forward DFT over (H, W); optionally shift DC to (H//2, W//2)."""
    _check4(x, "spectral")
    h, w = x.shape[2:]
    n = h * w
    z = np.fft.fft2(x.data, axes=(2, 3))
    if centered:
        z = np.fft.fftshift(z, axes=(2, 3))
    dt = x.dtype

    def adjoint(gz):
        if centered:
            gz = np.fft.ifftshift(gz, axes=(2, 3))
        return (np.real(np.fft.ifft2(gz, axes=(2, 3))) * n).astype(dt)

    re = _make(z.real.astype(dt), (x,), lambda g: (adjoint(g),))
    im = _make(z.imag.astype(dt), (x,), lambda g: (adjoint(1j * g),))
    return Spectrum(re, im, centered)


def fftshift(s: Spectrum) -> Spectrum:
    if s.centered:
        raise ContractViolation("spectrum is already centered")
    return Spectrum(_roll_hw(s.re), _roll_hw(s.im), True)


def _roll_hw(x: Tensor) -> Tensor:
    h, w = x.shape[2:]
    sh = (h // 2, w // 2)
    return _make(np.roll(x.data, sh, axis=(2, 3)), (x,),
                 lambda g: (np.roll(g, (-sh[0], -sh[1]), axis=(2, 3)),))


CROP_RATIOS = (Fraction(1), Fraction(1, 2), Fraction(1, 4), Fraction(1, 8))


def crop_window(n: int, ratio) -> tuple:
    """[start, stop) of the centered low-frequency window along one axis of length n."""
    ratio = Fraction(ratio)
    if ratio not in CROP_RATIOS:
        raise ContractViolation(f"crop ratio must be one of 1, 1/2, 1/4, 1/8; got {ratio}")
    size = max(1, -(-n * ratio.numerator // ratio.denominator))
    # even windows take the extra bin on the high side; never run past the array
    start = min(n // 2 - (size - 1) // 2, n - size)
    return start, start + size


def _crop_hw(x: Tensor, hs: tuple, ws: tuple) -> Tensor:
    shape = x.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, :, hs[0]:hs[1], ws[0]:ws[1]] = g
        return (full,)

    return _make(x.data[:, :, hs[0]:hs[1], ws[0]:ws[1]], (x,), back)


def crop_lf(s: Spectrum, ratio) -> Spectrum:
    if not s.centered:
        raise ContractViolation("crop_lf requires a centered spectrum")
    h, w = s.shape[2:]
    hs, ws = crop_window(h, ratio), crop_window(w, ratio)
    return Spectrum(_crop_hw(s.re, hs, ws), _crop_hw(s.im, hs, ws), True)


def magnitude(s: Spectrum) -> Tensor:
    re, im = s.re.data, s.im.data
    mag = np.sqrt(re * re + im * im)
    with np.errstate(invalid="ignore", divide="ignore"):
        cr = np.where(mag > 0, re / mag, 0).astype(re.dtype)
        ci = np.where(mag > 0, im / mag, 0).astype(re.dtype)
    return _make(mag, (s.re, s.im), lambda g: (g * cr, g * ci))


# ---------------------------------------------------------------------------
# elementwise dispatcher with the names used in the module equations
# ---------------------------------------------------------------------------

_ELEMENTWISE = {
    "add": add, "mul": mul, "sigmoid": sigmoid, "relu": relu,
    "concat_c": lambda *xs: concat_c(xs), "split_c": split_c,
    "linear": linear, "mlp2": mlp2,
}


def elementwise(kind: str, *operands):
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ContractViolation(f"unknown elementwise kind {kind!r}") from None
    return fn(*operands)


# ---------------------------------------------------------------------------
# gradient audit
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-3, coords=None,
               rng: Optional[np.random.Generator] = None, retries: int = 3) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``f`` is evaluated in float64 so rounding does not swamp the difference
    quotient. ``coords`` optionally restricts the audit to a list of flat
    indices. When a coordinate looks like it straddles a relu or max kink
    (step-size or one-sided slopes disagree), the base point is jittered and
    the audit restarts.
    """
    if not 1e-4 <= eps <= 1e-2:
        raise ContractViolation(f"eps {eps} outside [1e-4, 1e-2]")
    rng = rng or np.random.default_rng(0)
    base = np.array(as_tensor(x).data, dtype=np.float64)
    idx = np.arange(base.size) if coords is None else np.asarray(coords, dtype=int)
    for attempt in range(retries + 1):
        xt = Tensor(base.copy(), requires_grad=True)
        y = f(xt)
        if y.data.size != 1:
            raise ContractViolation("grad_check needs a scalar-valued function")
        y.backward()
        ga = np.zeros_like(base) if xt.grad is None else xt.grad.reshape(base.shape)
        bad = np.flatnonzero(~np.isfinite(ga))
        if bad.size:
            raise GradientAuditError(f"non-finite analytic gradient at flat index {int(bad[0])}")

        def at(i, h):
            xp = base.copy().reshape(-1)
            xp[i] += h
            return f(Tensor(xp.reshape(base.shape))).item()

        worst, kink = 0.0, False
        flat = ga.reshape(-1)
        f0 = y.item()
        for i in idx:
            fp, fm = at(i, eps), at(i, -eps)
            num = (fp - fm) / (2 * eps)
            ana = flat[i]
            err = abs(ana - num) / max(1.0, abs(ana))
            if err > 1e-4 and attempt < retries:
                # a kink shows up as disagreement between step sizes or between the
                # two one-sided slopes; smooth curvature only costs a harmless retry
                half = (at(i, eps / 2) - at(i, -eps / 2)) / eps
                scale = max(1.0, abs(num))
                lopsided = abs((fp - f0) - (f0 - fm)) / eps > 0.1 * scale
                if abs(half - num) > 1e-4 * scale or lopsided:
                    kink = True
                    break
            worst = max(worst, err)
        if not kink:
            return worst
        base = base + rng.normal(scale=10 * eps, size=base.shape)
    return worst
