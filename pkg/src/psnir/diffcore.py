"""Minimal reverse-mode autodiff over dense 4-D arrays.

Every value is a :class:`Tensor` with shape ``(B, D, H, W)``. Operations executed
while a :class:`Tape` is active are appended to it; ``tape.backward(loss)`` walks
the record in exact reverse order and returns gradients for every leaf that
requires them. Only the operations needed by the photometric-stereo networks and
their losses are provided.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand dimensions are incompatible."""

    def __init__(self, op, axis, got, expected):
        self.op = op
        self.axis = axis
        self.got = got
        self.expected = expected
        super().__init__(f"{op}: mismatch on axis '{axis}' (got {got}, expected {expected})")


class TapeError(RuntimeError):
    pass


AXES = ("batch", "channels", "height", "width")

_active_tapes: list["Tape"] = []


class Tensor:
    """A 4-D array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.ndim != 4:
            raise ValueError(f"Tensor must be 4-D (B, D, H, W), got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def item(self):
        if self.data.size != 1:
            raise ValueError("item() needs a single-element tensor")
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


class Tape:
    """Append-only record of differentiable operations.

    Use as a context manager; operations whose inputs require gradients are
    recorded on the innermost active tape.
    """

    def __init__(self):
        self.nodes = []
        self._closed = False

    def __enter__(self):
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes.remove(self)
        return False

    def record(self, out, inputs, backward_fn):
        if self._closed:
            raise TapeError("tape already consumed by backward()")
        self.nodes.append((out, inputs, backward_fn))

    def backward(self, loss, leaves=None):
        """Return ``{id(leaf): grad}`` and accumulate into ``leaf.grad``.

        ``leaves`` defaults to every requires-grad leaf seen on the tape.
        """
        if loss.data.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        produced = {id(out) for out, _, _ in self.nodes}
        if id(loss) not in produced:
            raise TapeError("loss was not produced on this tape")
        if leaves is None:
            seen = {}
            for _, inputs, _ in self.nodes:
                for t in inputs:
                    if t.requires_grad and id(t) not in produced:
                        seen.setdefault(id(t), t)
            leaves = list(seen.values())
        else:
            used = {id(t) for _, inputs, _ in self.nodes for t in inputs}
            for leaf in leaves:
                if id(leaf) not in used:
                    raise TapeError(f"leaf {leaf!r} is not on the tape")

        grads = {id(loss): np.ones_like(loss.data)}
        for out, inputs, backward_fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, backward_fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                if id(t) in grads:
                    grads[id(t)] = grads[id(t)] + gi
                else:
                    grads[id(t)] = gi
        self._closed = True

        result = {}
        for leaf in leaves:
            g = grads.get(id(leaf))
            if g is None:
                g = np.zeros_like(leaf.data)
            leaf.grad = g if leaf.grad is None else leaf.grad + g
            result[id(leaf)] = g
        return result


def _emit(data, inputs, backward_fn):
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs and _active_tapes:
        _active_tapes[-1].record(out, inputs, backward_fn)
    return out


def _as_tensor(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _broadcast_shape(op, a, b):
    out = []
    for axis, (x, y) in enumerate(zip(a.shape, b.shape)):
        if x != y and x != 1 and y != 1:
            raise ShapeError(op, AXES[axis], y, x)
        out.append(max(x, y))
    return tuple(out)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    b = _as_tensor(b, a)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    b = _as_tensor(b, a)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    b = _as_tensor(b, a)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _emit(ad * bd, (a, b), backward)


def scale(a, k):
    k = float(k)
    return _emit(a.data * a.dtype.type(k), (a,), lambda g: (g * g.dtype.type(k),))


def relu(x):
    pos = x.data > 0
    return _emit(np.where(pos, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * pos,))


def absolute(x):
    sign = np.sign(x.data)
    return _emit(np.abs(x.data), (x,), lambda g: (g * sign,))


def square(x):
    xd = x.data
    return _emit(xd * xd, (x,), lambda g: (2 * g * xd,))


def total(x):
    """Sum of all entries as a (1, 1, 1, 1) tensor."""
    shape = x.shape
    # fixed serial order: sum of a contiguous ravel is deterministic
    s = np.sum(x.data.ravel()).reshape(1, 1, 1, 1)
    return _emit(s, (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


# ---------------------------------------------------------------------------
# structural


def concat_channels(a, b):
    for axis in (0, 2, 3):
        if a.shape[axis] != b.shape[axis]:
            raise ShapeError("concat_channels", AXES[axis], b.shape[axis], a.shape[axis])
    da = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _emit(out, (a, b), lambda g: (g[:, :da], g[:, da:]))


def concat_batch(tensors):
    tensors = list(tensors)
    first = tensors[0]
    for t in tensors[1:]:
        for axis in (1, 2, 3):
            if t.shape[axis] != first.shape[axis]:
                raise ShapeError("concat_batch", AXES[axis], t.shape[axis], first.shape[axis])
    bounds = np.cumsum([0] + [t.shape[0] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=0)

    def backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _emit(out, tuple(tensors), backward)


def project_channels(x, matrix):
    """Contract the channel axis of a single-image ``x`` with constant matrices.

    ``x`` has shape (1, K, H, W) and ``matrix`` shape (B, C, K); the result has
    shape (B, C, H, W) with ``out[b, c] = sum_k matrix[b, c, k] * x[0, k]``.
    """
    matrix = np.asarray(matrix, dtype=x.dtype)
    if matrix.ndim != 3:
        raise ValueError("matrix must have shape (B, C, K)")
    if x.shape[0] != 1:
        raise ShapeError("project_channels", "batch", x.shape[0], 1)
    if matrix.shape[2] != x.shape[1]:
        raise ShapeError("project_channels", "channels", x.shape[1], matrix.shape[2])
    B, C, K = matrix.shape
    _, _, H, W = x.shape
    flat = x.data.reshape(K, H * W)
    out = (matrix.reshape(B * C, K) @ flat).reshape(B, C, H, W)

    def backward(g):
        gx = matrix.reshape(B * C, K).T @ g.reshape(B * C, H * W)
        return (gx.reshape(1, K, H, W),)

    return _emit(out, (x,), backward)


# ---------------------------------------------------------------------------
# network layers


_TAPS = [(dy, dx) for dy in range(3) for dx in range(3)]


def _gather_taps(a, flip=False):
    """(B, H, W, D) -> (B*H*W, 9*D) zero-padded neighbourhoods, tap-major.

    Tap (dy, dx) holds ``a[p + (dy-1, dx-1)]``, or ``a[p - (dy-1, dx-1)]``
    when ``flip`` is set.
    """
    B, H, W, D = a.shape
    padded = np.zeros((B, H + 2, W + 2, D), dtype=a.dtype)
    padded[:, 1:H + 1, 1:W + 1, :] = a
    cols = np.empty((B, H, W, 9, D), dtype=a.dtype)
    for tap, (dy, dx) in enumerate(_TAPS):
        if flip:
            dy, dx = 2 - dy, 2 - dx
        cols[:, :, :, tap, :] = padded[:, dy:dy + H, dx:dx + W, :]
    return cols.reshape(B * H * W, 9 * D)


def _scatter_taps(cols, shape, flip=False):
    """Adjoint of :func:`_gather_taps`: sum tap slices back onto the grid."""
    B, H, W, D = shape
    cols = cols.reshape(B, H, W, 9, D)
    padded = np.zeros((B, H + 2, W + 2, D), dtype=cols.dtype)
    for tap, (dy, dx) in enumerate(_TAPS):
        if flip:
            dy, dx = 2 - dy, 2 - dx
        padded[:, dy:dy + H, dx:dx + W, :] += cols[:, :, :, tap, :]
    return padded[:, 1:H + 1, 1:W + 1, :]


def _nchw(a_nhwc):
    # a view: storage stays channels-last, which the next conv reads for free
    return a_nhwc.transpose(0, 3, 1, 2)


def conv2d(x, weight, bias=None):
    """Stride-1 convolution; 3x3 kernels use zero padding 1, 1x1 kernels none.

    ``weight`` has shape (D_out, D_in, k, k) and ``bias`` shape (1, D_out, 1, 1).
    """
    d_out, d_in, k, k2 = weight.shape
    if k != k2 or k not in (1, 3):
        raise ValueError(f"conv2d supports 1x1 and 3x3 kernels, got {k}x{k2}")
    if x.shape[1] != d_in:
        raise ShapeError("conv2d", "channels", x.shape[1], d_in)
    if bias is not None and bias.shape != (1, d_out, 1, 1):
        raise ShapeError("conv2d", "channels", bias.shape[1], d_out)
    B, _, H, W = x.shape
    n = B * H * W
    x_nhwc = x.data.transpose(0, 2, 3, 1)
    xflat = np.ascontiguousarray(x_nhwc).reshape(n, d_in)
    # (tap, channel)-ordered kernel matrix, shape (d_out, k*k*d_in)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(d_out, k * k * d_in)
    # neighbourhoods are gathered on whichever side has fewer channels
    out_side = k == 3 and d_out < d_in
    if k == 1:
        cols = xflat
        out = cols @ wmat.T
    elif not out_side:
        cols = _gather_taps(xflat.reshape(B, H, W, d_in))
        out = cols @ wmat.T
    else:
        cols = None
        wt = weight.data.transpose(1, 2, 3, 0).reshape(d_in, 9 * d_out)
        out = _scatter_taps(xflat @ wt, (B, H, W, d_out), flip=True).reshape(n, d_out)
    if bias is not None:
        out = out + bias.data.reshape(1, d_out)
    out = _nchw(out.reshape(B, H, W, d_out))

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n, d_out)
        gx = gw = None
        if out_side:
            gcols = _gather_taps(gmat.reshape(B, H, W, d_out), flip=True)
            if weight.requires_grad:
                gw = (xflat.T @ gcols).reshape(d_in, 3, 3, d_out).transpose(3, 0, 1, 2)
            if x.requires_grad:
                wt = weight.data.transpose(1, 2, 3, 0).reshape(d_in, 9 * d_out)
                gx = _nchw((gcols @ wt.T).reshape(B, H, W, d_in))
        else:
            if weight.requires_grad:
                gw = (gmat.T @ cols).reshape(d_out, k, k, d_in).transpose(0, 3, 1, 2)
            if x.requires_grad:
                gcols = gmat @ wmat
                if k == 3:
                    gx = _scatter_taps(gcols, (B, H, W, d_in))
                else:
                    gx = gcols.reshape(B, H, W, d_in)
                gx = _nchw(gx)
        if gw is not None:
            gw = np.ascontiguousarray(gw)
        if bias is None:
            return gx, gw
        gb = gmat.sum(axis=0).reshape(1, d_out, 1, 1)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit(out, inputs, backward)


def batchnorm_train(x, gamma, beta, eps=1e-5):
    """Batch normalization with statistics of the current input only."""
    B, D, H, W = x.shape
    n = B * H * W
    if n < 2:
        raise ValueError("batchnorm_train needs at least 2 elements per channel")
    if gamma.shape != (1, D, 1, 1):
        raise ShapeError("batchnorm_train", "channels", gamma.shape[1], D)
    if beta.shape != (1, D, 1, 1):
        raise ShapeError("batchnorm_train", "channels", beta.shape[1], D)
    xd = x.data
    mu = xd.mean(axis=(0, 2, 3), keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
        gb = g.sum(axis=(0, 2, 3), keepdims=True)
        gx = None
        if x.requires_grad:
            gx = (gamma.data * inv / n) * (n * g - gb - xhat * gg)
        return gx, gg, gb

    return _emit(out, (x, gamma, beta), backward)


def l2_normalize_channels(x, eps=1e-12):
    """Map each per-pixel 3-vector ``v`` to ``v / (|v| + eps)``."""
    if x.shape[1] != 3:
        raise ShapeError("l2_normalize_channels", "channels", x.shape[1], 3)
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=1, keepdims=True))
    denom = norm + eps
    out = xd / denom

    def backward(g):
        dot = (xd * g).sum(axis=1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            radial = np.where(norm > 0, dot / (norm * denom * denom), 0)
        return (g / denom - xd * radial,)

    return _emit(out, (x,), backward)


# ---------------------------------------------------------------------------
# initialization and optimizer


def he_init(shape, rng_seed):
    """Normal(0, sqrt(2 / fan_in)) samples, fan_in = prod(shape[1:])."""
    fan_in = int(np.prod(shape[1:]))
    if fan_in <= 0:
        raise ValueError("fan_in must be positive")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Adam:
    """Adam with bias correction; ``lr`` may be changed between steps."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads=None):
        """Apply one update. ``grads`` is a list aligned with ``params`` or
        None to use each parameter's ``.grad``."""
        if grads is None:
            grads = [p.grad for p in self.params]
        if len(grads) != len(self.params):
            raise ValueError("one gradient per parameter required")
        for p, g in zip(self.params, grads):
            if g is not None and g.shape != p.data.shape:
                raise ShapeError("adam_step", "all", g.shape, p.data.shape)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                g = np.zeros_like(p.data)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            mhat = m / c1
            vhat = v / c2
            p.data = (p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype, copy=False)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
