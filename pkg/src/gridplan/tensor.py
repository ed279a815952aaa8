"""Minimal reverse-mode autodiff on dense float32 arrays.

A computation is recorded on an explicit :class:`Tape`: every operation
executed while a tape is active appends one backward closure, and
``tape.backward(loss)`` replays the closures in exact reverse order of
recording, accumulating into ``.grad`` buffers with ``+=``.  With no tape
active the same operations run forward-only, which is the fast path used
for acting and evaluation.

The op set is exactly what the planning recurrences, policy/value heads
and the RMSProp update need.  There is no general broadcasting: the only
shape-bending ops are per-channel conv bias, scalar-parameter affine and
the explicit stack/gather ops below.  Arrays handed to an op must be
treated as immutable while the tape that saw them is alive.
"""

from __future__ import annotations

import numpy as np

from .actions import ACTION_OFFSETS, NEIGHBORHOOD_OFFSETS


class ShapeError(ValueError):
    """Raised when operand shapes cannot be reconciled."""


_DEFAULT_DTYPE = np.float32
_TAPES: list["Tape"] = []


class DiffArray:
    """Dense float array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def accum(self, g) -> None:
        if self.requires_grad:
            self.ensure_grad()
            self.grad += g

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        return f"DiffArray(shape={self.data.shape}, requires_grad={self.requires_grad})"


def constant(data, dtype=None) -> DiffArray:
    return DiffArray(data, requires_grad=False, dtype=dtype)


def param(data, dtype=None) -> DiffArray:
    return DiffArray(data, requires_grad=True, dtype=dtype)


class Tape:
    """Ordered record of operations; backward replays it exactly reversed.

    Single-threaded, one tape per computation.  Entering the context pushes
    the tape onto the active stack; ops record themselves on the innermost
    active tape only when some input requires a gradient.
    """

    def __init__(self):
        self.ops = []
        self.visited = 0

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPES.pop()
        assert popped is self

    def record(self, fn) -> None:
        self.ops.append(fn)

    def backward(self, loss: DiffArray) -> None:
        """Seed d(loss)/d(loss) = 1 and run every recorded op once, reversed."""
        if loss.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
        loss.ensure_grad()[...] = 1.0
        self.visited = 0
        for fn in reversed(self.ops):
            fn()
            self.visited += 1


def _record(data, inputs, backward) -> DiffArray:
    """Wrap a forward result; register `backward(gout)` if a tape is live."""
    live = bool(_TAPES) and any(x.requires_grad for x in inputs)
    out = DiffArray(data, requires_grad=live, dtype=data.dtype)
    if live:
        def step():
            if out.grad is not None:
                backward(out.grad)
        _TAPES[-1].record(step)
    return out


def _check_same_shape(opname: str, a: DiffArray, b: DiffArray) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{opname}: operand shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# elementwise


def add(a: DiffArray, b: DiffArray) -> DiffArray:
    _check_same_shape("add", a, b)

    def backward(g):
        a.accum(g)
        b.accum(g)

    return _record(a.data + b.data, (a, b), backward)


def sub(a: DiffArray, b: DiffArray) -> DiffArray:
    _check_same_shape("sub", a, b)

    def backward(g):
        a.accum(g)
        b.accum(-g)

    return _record(a.data - b.data, (a, b), backward)


def mul(a: DiffArray, b: DiffArray) -> DiffArray:
    _check_same_shape("mul", a, b)

    def backward(g):
        a.accum(g * b.data)
        b.accum(g * a.data)

    return _record(a.data * b.data, (a, b), backward)


def emax(a: DiffArray, b: DiffArray) -> DiffArray:
    """Elementwise max; the gradient routes to the argmax, ties to `a`."""
    _check_same_shape("max", a, b)
    take_a = a.data >= b.data

    def backward(g):
        a.accum(np.where(take_a, g, 0.0))
        b.accum(np.where(take_a, 0.0, g))

    return _record(np.where(take_a, a.data, b.data), (a, b), backward)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "max": emax}


def elementwise(op: str, a: DiffArray, b: DiffArray) -> DiffArray:
    if op not in _ELEMENTWISE:
        raise ValueError(f"elementwise: unknown op {op!r}")
    return _ELEMENTWISE[op](a, b)


def affine_scalar(x: DiffArray, mult: float, offset: float) -> DiffArray:
    """x * mult + offset with python-float constants."""

    def backward(g):
        x.accum(g * mult)

    return _record(x.data * mult + offset, (x,), backward)


def sigmoid(x: DiffArray) -> DiffArray:
    """Numerically stable logistic; saturates to exactly 0/1 at extreme inputs."""
    t = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + t), t / (1.0 + t))

    def backward(g):
        x.accum(g * out * (1.0 - out))

    return _record(out, (x,), backward)


def exp(x: DiffArray) -> DiffArray:
    out = np.exp(x.data)

    def backward(g):
        x.accum(g * out)

    return _record(out, (x,), backward)


# ---------------------------------------------------------------------------
# reductions / rearrangement


def amax(x: DiffArray, axis: int) -> DiffArray:
    """Max over one axis; the gradient routes to the first argmax entry."""
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        x.accum(gx)

    return _record(out, (x,), backward)


def channel_max(q: DiffArray) -> DiffArray:
    """Max over the channel axis of a [..., A, h, w] array."""
    if q.data.ndim < 3:
        raise ShapeError(f"channel_max: need at least 3 dims, got shape {q.data.shape}")
    return amax(q, axis=q.data.ndim - 3)


def shift_stack(x: DiffArray, fill: float = 0.0) -> DiffArray:
    """Stack the 9 neighborhood shifts of a [..., h, w] array to [9, ..., h, w].

    Entry k holds, at cell (i, j), the value of x at that cell's k-th
    neighborhood offset (self first, then the 8 actions); positions whose
    neighbor falls outside the grid get `fill`.
    """
    d = x.data
    if d.ndim < 2:
        raise ShapeError(f"shift_stack: need at least 2 dims, got shape {d.shape}")
    h, w = d.shape[-2:]
    out = np.full((len(NEIGHBORHOOD_OFFSETS),) + d.shape, fill, dtype=d.dtype)
    spans = []
    for k, (di, dj) in enumerate(NEIGHBORHOOD_OFFSETS):
        dst_r = slice(max(0, -di), h - max(0, di))
        dst_c = slice(max(0, -dj), w - max(0, dj))
        src_r = slice(max(0, di), h - max(0, -di))
        src_c = slice(max(0, dj), w - max(0, -dj))
        out[k][..., dst_r, dst_c] = d[..., src_r, src_c]
        spans.append((dst_r, dst_c, src_r, src_c))

    def backward(g):
        gx = np.zeros_like(d)
        for k, (dst_r, dst_c, src_r, src_c) in enumerate(spans):
            gx[..., src_r, src_c] += g[k][..., dst_r, dst_c]
        x.accum(gx)

    return _record(out, (x,), backward)


def tile_leading(x: DiffArray, n: int) -> DiffArray:
    """Repeat x along a new leading axis; the gradient sums back over it."""
    out = np.broadcast_to(x.data, (n,) + x.data.shape).copy()

    def backward(g):
        x.accum(g.sum(axis=0))

    return _record(out, (x,), backward)


def concat(parts, axis: int) -> DiffArray:
    parts = list(parts)
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def backward(g):
        offset = 0
        for p, size in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + size)
            p.accum(g[tuple(sl)])
            offset += size

    return _record(out, tuple(parts), backward)


def reshape(x: DiffArray, shape) -> DiffArray:
    shape = tuple(shape)
    out = x.data.reshape(shape)

    def backward(g):
        x.accum(g.reshape(x.data.shape))

    return _record(out, (x,), backward)


def take_channel(x: DiffArray, ch: int) -> DiffArray:
    """Drop the channel axis of [..., C, h, w], keeping channel `ch`."""
    if x.data.ndim < 3:
        raise ShapeError(f"take_channel: need at least 3 dims, got shape {x.data.shape}")
    axis = x.data.ndim - 3
    out = np.take(x.data, ch, axis=axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        sl = [slice(None)] * x.data.ndim
        sl[axis] = ch
        gx[tuple(sl)] = g
        x.accum(gx)

    return _record(out, (x,), backward)


# ---------------------------------------------------------------------------
# convolution


class ConvSpec:
    """Static description of a stride-1 2D convolution layer."""

    def __init__(self, in_channels: int, out_channels: int, kernel=(3, 3), padding: int = 0):
        if in_channels <= 0 or out_channels <= 0:
            raise ShapeError("ConvSpec: channel counts must be positive")
        if padding < 0:
            raise ShapeError("ConvSpec: padding must be non-negative")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = tuple(kernel)
        self.padding = padding

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels) + self.kernel

    def out_size(self, h: int, w: int):
        kh, kw = self.kernel
        ho = h + 2 * self.padding - kh + 1
        wo = w + 2 * self.padding - kw + 1
        if ho <= 0 or wo <= 0:
            raise ShapeError(
                f"ConvSpec: kernel {self.kernel} with padding {self.padding} "
                f"does not fit input {h}x{w}"
            )
        return ho, wo


def conv2d(x: DiffArray, weight: DiffArray, bias: DiffArray, padding: int = 0) -> DiffArray:
    """Stride-1 2D convolution of [C,H,W] or [B,C,H,W] with an [O,C,kh,kw] kernel."""
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d: input must be 3- or 4-dimensional, got shape {x.data.shape}")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4-dimensional, got shape {weight.data.shape}")
    b4, c_in, h, w = xd.shape
    c_out, c_w, kh, kw = weight.data.shape
    if c_in != c_w:
        raise ShapeError(f"conv2d: input has {c_in} channels but weight expects {c_w}")
    if bias.data.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.data.shape} != ({c_out},)")
    ho = h + 2 * padding - kh + 1
    wo = w + 2 * padding - kw + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} too large for padded input {h}x{w}")

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    out = np.einsum("bchwij,ocij->bohw", windows, weight.data, optimize=True)
    out += bias.data[None, :, None, None]

    def backward(g):
        g4 = g[None] if squeeze else g
        if bias.requires_grad:
            bias.accum(g4.sum(axis=(0, 2, 3)))
        if weight.requires_grad:
            weight.accum(np.einsum("bchwij,bohw->ocij", windows, g4, optimize=True))
        if x.requires_grad:
            gcols = np.einsum("bohw,ocij->bchwij", g4, weight.data, optimize=True)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + ho, j:j + wo] += gcols[:, :, :, :, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
            x.accum(gx[0] if squeeze else gx)

    return _record(out[0] if squeeze else out, (x, weight, bias), backward)


# ---------------------------------------------------------------------------
# gathers and heads


def gather_neighbors(v: DiffArray, positions) -> DiffArray:
    """Read a [B,h,w] value map at the 8 action neighbors of each position.

    positions is an int array [B,2] of (i,j) cells; out-of-grid neighbors
    read as 0 and receive no gradient.
    """
    if v.data.ndim != 3:
        raise ShapeError(f"gather_neighbors: value map must be [B,h,w], got {v.data.shape}")
    pos = np.asarray(positions, dtype=np.int64)
    b, h, w = v.data.shape
    if pos.shape != (b, 2):
        raise ShapeError(f"gather_neighbors: positions shape {pos.shape} != ({b}, 2)")
    bidx = np.arange(b)
    out = np.zeros((b, len(ACTION_OFFSETS)), dtype=v.data.dtype)
    hits = []
    for k, (di, dj) in enumerate(ACTION_OFFSETS):
        r = pos[:, 0] + di
        c = pos[:, 1] + dj
        ok = (r >= 0) & (r < h) & (c >= 0) & (c < w)
        out[ok, k] = v.data[bidx[ok], r[ok], c[ok]]
        hits.append((bidx[ok], r[ok], c[ok], ok))

    def backward(g):
        gv = np.zeros_like(v.data)
        for k, (bi, r, c, ok) in enumerate(hits):
            np.add.at(gv, (bi, r, c), g[ok, k])
        v.accum(gv)

    return _record(out, (v,), backward)


def gather_cell_vector(q: DiffArray, positions) -> DiffArray:
    """Read a [B,A,h,w] map at each batch position, returning [B,A]."""
    if q.data.ndim != 4:
        raise ShapeError(f"gather_cell_vector: map must be [B,A,h,w], got {q.data.shape}")
    pos = np.asarray(positions, dtype=np.int64)
    b = q.data.shape[0]
    bidx = np.arange(b)
    out = q.data[bidx, :, pos[:, 0], pos[:, 1]]

    def backward(g):
        gq = np.zeros_like(q.data)
        gq[bidx, :, pos[:, 0], pos[:, 1]] = g
        q.accum(gq)

    return _record(out, (q,), backward)


def affine_vec(x: DiffArray, w: DiffArray, b: DiffArray) -> DiffArray:
    """[B,n] @ [n] + scalar bias -> [B]."""
    if x.data.ndim != 2 or w.data.ndim != 1 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"affine_vec: shapes {x.data.shape} @ {w.data.shape} do not agree")
    if b.data.shape != (1,):
        raise ShapeError(f"affine_vec: bias shape {b.data.shape} != (1,)")
    out = x.data @ w.data + b.data[0]

    def backward(g):
        if w.requires_grad:
            w.accum(x.data.T @ g)
        if b.requires_grad:
            b.accum(np.array([g.sum()], dtype=g.dtype))
        if x.requires_grad:
            x.accum(np.outer(g, w.data))

    return _record(out, (x, w, b), backward)


def scalar_affine(x: DiffArray, s: DiffArray, b: DiffArray) -> DiffArray:
    """x * s + b with shape-(1,) parameters s and b."""
    if s.data.shape != (1,) or b.data.shape != (1,):
        raise ShapeError("scalar_affine: s and b must have shape (1,)")
    out = x.data * s.data[0] + b.data[0]

    def backward(g):
        if s.requires_grad:
            s.accum(np.array([(g * x.data).sum()], dtype=g.dtype))
        if b.requires_grad:
            b.accum(np.array([g.sum()], dtype=g.dtype))
        if x.requires_grad:
            x.accum(g * s.data[0])

    return _record(out, (x, s, b), backward)


def select_index(x: DiffArray, indices) -> DiffArray:
    """Pick one column per row of a [B,A] array, returning [B]."""
    if x.data.ndim != 2:
        raise ShapeError(f"select_index: need [B,A], got {x.data.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    bidx = np.arange(x.data.shape[0])
    out = x.data[bidx, idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (bidx, idx), g)
        x.accum(gx)

    return _record(out, (x,), backward)


def wsum(x: DiffArray, weights) -> DiffArray:
    """Weighted sum with a constant weight array; returns a shape-(1,) scalar."""
    w = np.asarray(weights, dtype=x.data.dtype)
    if w.shape != x.data.shape:
        raise ShapeError(f"wsum: weight shape {w.shape} != value shape {x.data.shape}")
    out = np.array([(x.data * w).sum()], dtype=x.data.dtype)

    def backward(g):
        x.accum(g[0] * w)

    return _record(out, (x,), backward)


def softmax_logp(logits: DiffArray) -> DiffArray:
    """Log softmax over the last axis, max-subtracted for stability."""
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def backward(g):
        sm = np.exp(out)
        logits.accum(g - sm * g.sum(axis=-1, keepdims=True))

    return _record(out, (logits,), backward)


# ---------------------------------------------------------------------------
# optimizer


def rmsprop_step(params, state: dict, lr: float, decay: float = 0.99, eps: float = 1e-8) -> None:
    """One RMSProp update over `params`; gradients are consumed and zeroed.

    state maps parameter index -> mean-square accumulator, created lazily.
    A parameter whose gradient buffer was never populated is a hard error.
    """
    for k, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"rmsprop_step: parameter {k} has no gradient")
        ms = state.get(k)
        if ms is None:
            ms = state[k] = np.zeros_like(p.data)
        g = p.grad
        ms *= decay
        ms += (1.0 - decay) * g * g
        p.data -= lr * g / (np.sqrt(ms) + eps)
        p.grad[...] = 0.0


class RmsProp:
    """Stateful wrapper around :func:`rmsprop_step` for a fixed parameter list."""

    def __init__(self, params, lr: float = 1e-3, decay: float = 0.99, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.decay = decay
        self.eps = eps
        self.state: dict = {}

    def step(self) -> None:
        rmsprop_step(self.params, self.state, self.lr, self.decay, self.eps)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f, x: DiffArray, step: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must be a deterministic scalar-valued function of `x`.  Coordinates
    where the one-sided difference quotients disagree (the perturbation
    straddles a max kink) are skipped.  Run with float64 arrays: float32
    forward error swamps the 1e-4 scale this is meant to resolve.
    """
    x.grad = None
    with Tape() as tape:
        y = f(x)
        if y.data.size != 1:
            raise ShapeError("grad_check: f must return a scalar")
        tape.backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None

    f0 = float(f(x).data[0])
    flat = x.data.reshape(-1)
    aflat = analytic.reshape(-1)
    worst = 0.0
    for c in range(flat.size):
        orig = flat[c]
        flat[c] = orig + step
        fp = float(f(x).data[0])
        flat[c] = orig - step
        fm = float(f(x).data[0])
        flat[c] = orig
        d_center = (fp - fm) / (2.0 * step)
        d_fwd = (fp - f0) / step
        d_bwd = (f0 - fm) / step
        # The one-sided quotients of a smooth function differ by ~step * f'';
        # a gap far beyond that means the perturbation straddles a max kink,
        # where the central difference is meaningless.  Scaling the gate with
        # the step keeps the curvature allowance constant, so shrinking the
        # step tightens kink detection without skipping honest coordinates.
        if abs(d_fwd - d_bwd) > 20.0 * step * max(abs(d_fwd), abs(d_bwd), 1.0):
            continue
        err = abs(aflat[c] - d_center) / max(abs(aflat[c]), abs(d_center), 1e-3)
        worst = max(worst, err)
    return worst
