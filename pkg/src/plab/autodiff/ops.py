"""Differentiable operations over :class:`Tensor`.

Every op computes its forward value with numpy and, when a graph is active
and some input requires a gradient, records a closure mapping the output
gradient to input gradients.  Broadcasting is limited to scalar-tensor
products; anything else goes through an explicit reshape.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, current_graph


class UnsupportedOpError(KeyError):
    pass


def _emit(kind: str, inputs: Sequence[Tensor], out: np.ndarray, backward_fn) -> Tensor:
    requires_grad = any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, requires_grad)
    g = current_graph()
    if g is not None and requires_grad:
        g.record(kind, inputs, result, backward_fn)
    return result


def _check_same(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scalar_mul(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _emit("scalar_mul", (x,), x.data * c, lambda g: (g * c,))


def add_scalar(x, c: float) -> Tensor:
    x = as_tensor(x)
    return _emit("add_scalar", (x,), x.data + float(c), lambda g: (g,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0  # subgradient 0 at the kink
    return _emit("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise ValueError("log: input must be strictly positive")
    xd = x.data
    return _emit("log", (x,), np.log(xd), lambda g: (g / xd,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError from _emit
        out = np.exp(x.data)
    return _emit("exp", (x,), out, lambda g: (g * out,))


def cos(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _emit("cos", (x,), np.cos(xd), lambda g: (-g * np.sin(xd),))


def acos(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    if np.any(np.abs(xd) >= 1.0):
        raise ValueError("acos: input must lie strictly inside (-1, 1); clamp first")
    return _emit("acos", (x,), np.arccos(xd), lambda g: (-g / np.sqrt(1.0 - xd * xd),))


def clamp(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _emit("clamp", (x,), np.clip(x.data, lo, hi), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# shape and reductions


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape
    return _emit("reshape", (x,), x.data.reshape(shape).copy(), lambda g: (g.reshape(old),))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose: expected a 2-D tensor, got {x.shape}")
    return _emit("transpose", (x,), x.data.T.copy(), lambda g: (g.T,))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    nd = ts[0].ndim
    ax = axis % nd if nd else 0
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[d] != ts[0].shape[d] for d in range(nd) if d != ax):
            raise ShapeError(f"concat: cannot join {ts[0].shape} and {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=ax)
    return _emit("concat", ts, out, lambda g: tuple(np.split(g, splits, axis=ax)))


def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    shape = x.shape
    if axis is None:
        return _emit("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.full(shape, float(g)),))
    ax = axis % x.ndim
    out = x.data.sum(axis=ax)
    return _emit("sum", (x,), out, lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    return scalar_mul(sum(x), 1.0 / x.size)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _emit("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def logsumexp(x) -> Tensor:
    """Row-wise log-sum-exp over the last axis, shift-stabilised."""
    x = as_tensor(x)
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (np.log(s) + m)[..., 0]
    soft = e / s
    return _emit("logsumexp", (x,), out, lambda g: (g[..., None] * soft,))


def pick(x, index) -> Tensor:
    """Select ``x[i, index[i]]`` for each row of a 2-D tensor."""
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.intp)
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError(f"pick: need 2-D input and one index per row, got {x.shape} and {idx.shape}")
    if np.any(idx < 0) or np.any(idx >= x.shape[1]):
        raise IndexError("pick: index out of range")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def bw(g):
        dx = np.zeros(shape)
        dx[rows, idx] = g
        return (dx,)

    return _emit("pick", (x,), x.data[rows, idx].copy(), bw)


def index_put(x, index, values) -> Tensor:
    """Copy of 2-D ``x`` with ``out[i, index[i]] = values[i]``."""
    x, values = as_tensor(x), as_tensor(values)
    idx = np.asarray(index, dtype=np.intp)
    if x.ndim != 2 or idx.shape != (x.shape[0],) or values.shape != (x.shape[0],):
        raise ShapeError(f"index_put: shapes {x.shape}, {idx.shape}, {values.shape} do not agree")
    rows = np.arange(x.shape[0])
    out = x.data.copy()
    out[rows, idx] = values.data

    def bw(g):
        dx = g.copy()
        dx[rows, idx] = 0.0
        return dx, g[rows, idx].copy()

    return _emit("index_put", (x, values), out, bw)


def l2norm(x, scale: float = 1.0, eps: float = 1e-12) -> Tensor:
    """Rescale each vector along the last axis to L2 norm ``scale``."""
    x = as_tensor(x)
    norms = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if np.any(norms <= eps):
        raise DegenerateVectorError("l2norm: vector norm is (near) zero")
    u = x.data / norms

    def bw(g):
        dot = (g * u).sum(axis=-1, keepdims=True)
        return (scale * (g - u * dot) / norms,)

    return _emit("l2norm", (x,), scale * u, bw)


class DegenerateVectorError(ValueError):
    pass


# ---------------------------------------------------------------------------
# spatial ops; inputs are N x C x H x W, or C x H x W for a single sample


def _batched(kind: str, x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 4:
        return x.data, False
    if x.ndim == 3:
        return x.data[None], True
    raise ShapeError(f"{kind}: expected C x H x W or N x C x H x W input, got {x.shape}")


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, (int, np.integer)) else (int(v[0]), int(v[1]))


def _out_size(kind: str, n: int, k: int, s: int, p: int) -> int:
    o = (n + 2 * p - k) // s + 1
    if o < 1:
        raise ShapeError(f"{kind}: kernel {k} with padding {p} does not fit spatial dim {n}")
    return o


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` with filters ``w`` (C_out x C_in x k x k)."""
    x, w = as_tensor(x), as_tensor(w)
    xd, squeeze = _batched("conv2d", x)
    if w.ndim != 4:
        raise ShapeError(f"conv2d: filter must be C_out x C_in x kh x kw, got {w.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: stride must be >= 1 and padding >= 0 (got {stride}, {padding})")
    n, c, h, wd = xd.shape
    co, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels but filter expects C_in={ci}")
    ho = _out_size("conv2d", h, kh, stride, padding)
    wo = _out_size("conv2d", wd, kw, stride, padding)
    wdat = w.data
    x_needs = x.requires_grad

    if kh == 1 and kw == 1 and padding == 0:
        xs = xd[:, :, ::stride, ::stride]
        out = np.einsum("oc,nchw->nohw", wdat[:, :, 0, 0], xs, optimize=True)

        def bw(g):
            gb = g[None] if squeeze else g
            dw = np.einsum("nohw,nchw->oc", gb, xs, optimize=True)[:, :, None, None]
            dx = None
            if x_needs:
                dxs = np.einsum("oc,nohw->nchw", wdat[:, :, 0, 0], gb, optimize=True)
                if stride == 1:
                    dx = dxs
                else:
                    dx = np.zeros_like(xd)
                    dx[:, :, ::stride, ::stride] = dxs
                if squeeze:
                    dx = dx[0]
            return dx, dw
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
        wmat = wdat.reshape(co, -1)
        out = (cols @ wmat.T).reshape(n, ho, wo, co).transpose(0, 3, 1, 2)

        def bw(g):
            gb = g[None] if squeeze else g
            gmat = gb.transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
            dw = (gmat.T @ cols).reshape(w.shape)
            dx = None
            if x_needs:
                # one (C_in x C_out) @ (C_out x HoWo) product per filter tap
                gm = gb.reshape(n, co, ho * wo)
                wt = np.ascontiguousarray(wdat.transpose(2, 3, 1, 0))
                dxp = np.zeros(xp.shape)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                            (wt[i, j] @ gm).reshape(n, c, ho, wo)
                        )
                dx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
                if squeeze:
                    dx = dx[0]
            return dx, dw

    out = np.ascontiguousarray(out)
    if squeeze:
        out = out[0]
    return _emit("conv2d", (x, w), out, bw)


def _pool_windows(kind, xd, k, stride, padding, fill):
    n, c, h, wd = xd.shape
    ho = _out_size(kind, h, k, stride, padding)
    wo = _out_size(kind, wd, k, stride, padding)
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=fill) if padding else xd
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return xp, win, ho, wo


def maxpool2d(x, kernel: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Max pooling; ties resolve to the first window position in row-major order."""
    x = as_tensor(x)
    stride = kernel if stride is None else stride
    xd, squeeze = _batched("maxpool2d", x)
    if padding * 2 > kernel:
        raise ShapeError(f"maxpool2d: padding {padding} exceeds half the kernel {kernel}")
    xp, win, ho, wo = _pool_windows("maxpool2d", xd, kernel, stride, padding, -np.inf)
    flat = win.reshape(*win.shape[:4], kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    h, wd = xd.shape[2:]

    def bw(g):
        gb = g[None] if squeeze else g
        dxp = np.zeros(xp.shape)
        for i in range(kernel):
            for j in range(kernel):
                sel = arg == (i * kernel + j)
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gb * sel
        dx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
        return (dx[0] if squeeze else dx,)

    return _emit("maxpool2d", (x,), out[0] if squeeze else out, bw)


def avgpool2d(x, kernel: int, stride: int | None = None) -> Tensor:
    x = as_tensor(x)
    stride = kernel if stride is None else stride
    xd, squeeze = _batched("avgpool2d", x)
    xp, win, ho, wo = _pool_windows("avgpool2d", xd, kernel, stride, 0, 0.0)
    out = win.mean(axis=(-2, -1))
    area = float(kernel * kernel)

    def bw(g):
        gb = (g[None] if squeeze else g) / area
        dx = np.zeros(xd.shape)
        for i in range(kernel):
            for j in range(kernel):
                dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gb
        return (dx[0] if squeeze else dx,)

    return _emit("avgpool2d", (x,), out[0] if squeeze else out, bw)


def _adaptive_bins(n: int, out: int) -> list[tuple[int, int]]:
    return [((i * n) // out, -((-(i + 1) * n) // out)) for i in range(out)]


def adaptive_avgpool(x, output_size: int = 1) -> Tensor:
    """Average pool any spatial size down to ``output_size`` x ``output_size``."""
    x = as_tensor(x)
    xd, squeeze = _batched("adaptive_avgpool", x)
    n, c, h, wd = xd.shape
    if output_size < 1:
        raise ShapeError("adaptive_avgpool: output_size must be >= 1")
    rb, cb = _adaptive_bins(h, output_size), _adaptive_bins(wd, output_size)
    out = np.empty((n, c, output_size, output_size))
    for i, (r0, r1) in enumerate(rb):
        for j, (c0, c1) in enumerate(cb):
            out[:, :, i, j] = xd[:, :, r0:r1, c0:c1].mean(axis=(2, 3))

    def bw(g):
        gb = g[None] if squeeze else g
        dx = np.zeros(xd.shape)
        for i, (r0, r1) in enumerate(rb):
            for j, (c0, c1) in enumerate(cb):
                dx[:, :, r0:r1, c0:c1] += (gb[:, :, i, j] / ((r1 - r0) * (c1 - c0)))[:, :, None, None]
        return (dx[0] if squeeze else dx,)

    return _emit("adaptive_avgpool", (x,), out[0] if squeeze else out, bw)


# ---------------------------------------------------------------------------
# generic dispatch

OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scalar_mul": scalar_mul,
    "add_scalar": add_scalar,
    "relu": relu,
    "log": log,
    "exp": exp,
    "cos": cos,
    "acos": acos,
    "clamp": clamp,
    "reshape": reshape,
    "transpose": transpose,
    "concat": lambda *ts, **kw: concat(ts, **kw),
    "sum": sum,
    "matmul": matmul,
    "logsumexp": logsumexp,
    "pick": pick,
    "index_put": index_put,
    "l2norm": l2norm,
    "conv2d": conv2d,
    "maxpool2d": maxpool2d,
    "avgpool2d": avgpool2d,
    "adaptive_avgpool": adaptive_avgpool,
}


def forward_op(kind: str, inputs: Sequence, **params) -> Tensor:
    """Run the op named ``kind`` on ``inputs`` with keyword ``params``."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise UnsupportedOpError(f"unsupported op kind: {kind!r}") from None
    return fn(*inputs, **params)
