"""
Small reverse-mode autodiff over numpy float64 arrays.

Only the operations needed by the edge network and the shape classifier are
provided. Every op returns a new immutable :class:`Tensor` that remembers its
parents, a backward rule, and a forward rule so a recorded graph can be
replayed. Layout is NCHW for image tensors.
"""

import numpy as np

from edgestorm.errors import GraphConsumed, NonFinite, RejectedInput

DTYPE = np.float64


def _freeze(a, copy=False):
    a = np.array(a, dtype=DTYPE, order="C", copy=copy or None)
    if not np.all(np.isfinite(a)):
        raise NonFinite("operation produced a non-finite value")
    a.flags.writeable = False
    return a


class Tensor:
    __slots__ = ("data", "requires_grad", "op", "parents", "_backward", "_forward", "grad")

    def __init__(self, data, requires_grad=False, op="leaf", parents=(), backward=None, forward=None):
        # leaves copy so freezing never touches the caller's array
        self.data = _freeze(data, copy=not parents)
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self._backward = backward
        self._forward = forward
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return not self.parents

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _make(op, out, parents, backward, forward):
    requires = any(p.requires_grad for p in parents)
    return Tensor(out, requires_grad=requires, op=op, parents=parents, backward=backward, forward=forward)


class ComputeGraph:
    """Topologically ordered view of everything that produced ``output``.

    A graph may run :meth:`backward` once; :meth:`replay` re-evaluates the
    recorded forward rules from the leaves.
    """

    def __init__(self, output):
        self.output = output
        self.nodes = _toposort(output)
        self.consumed = False

    @property
    def leaves(self):
        return [n for n in self.nodes if n.is_leaf]

    def replay(self):
        values = {}
        for node in self.nodes:
            if node.is_leaf:
                values[id(node)] = node.data
            else:
                values[id(node)] = node._forward(*(values[id(p)] for p in node.parents))
        return values[id(self.output)]

    def backward(self, seed=None):
        if self.consumed:
            raise GraphConsumed("backward already ran on this graph")
        self.consumed = True
        if seed is None:
            seed = np.ones(self.output.shape)
        seed = np.asarray(seed, dtype=DTYPE)
        if seed.shape != self.output.shape:
            raise RejectedInput(f"seed shape {seed.shape} != output shape {self.output.shape}")
        grads = {id(self.output): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None or not node.requires_grad:
                continue
            if node.is_leaf:
                node.grad = g
                continue
            for parent, pg in zip(node.parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
        return {n: n.grad for n in self.nodes if n.is_leaf and n.requires_grad}


def _toposort(output):
    order, seen = [], set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(graph, seed=None):
    """Run reverse mode over ``graph``; returns ``{leaf: gradient}``."""
    if isinstance(graph, Tensor):
        graph = ComputeGraph(graph)
    return graph.backward(seed)


def grad(output, wrt, seed=None):
    """Gradients of ``output`` with respect to each tensor in ``wrt``."""
    result = ComputeGraph(output).backward(seed)
    return [result.get(t, np.zeros(t.shape)) for t in wrt]


# -- elementwise -----------------------------------------------------------


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        np.add,
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        np.multiply,
    )


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x):
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return _make("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),), _sigmoid)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _make("relu", x.data * mask, (x,), lambda g: (g * mask,), lambda d: d * (d > 0))


def log(x):
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise RejectedInput("log of a non-positive value")
    return _make("log", np.log(x.data), (x,), lambda g: (g / x.data,), np.log)


def clip(x, lo, hi):
    """Clamp values; gradient is zero where the clamp is active."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(
        "clip",
        np.clip(x.data, lo, hi),
        (x,),
        lambda g: (g * inside,),
        lambda d: np.clip(d, lo, hi),
    )


def standardize(x, floor=8.0):
    """Per-sample zero mean, unit scale over all non-batch axes.

    The scale is sqrt(var + floor**2), so flat images are not blown up.
    """
    x = as_tensor(x)
    axes = tuple(range(1, x.data.ndim))

    def fwd(d):
        mu = d.mean(axis=axes, keepdims=True)
        return (d - mu) / np.sqrt(d.var(axis=axes, keepdims=True) + floor * floor)

    out = fwd(x.data)
    scale = np.sqrt(x.data.var(axis=axes, keepdims=True) + floor * floor)

    def bw(g):
        gm = g.mean(axis=axes, keepdims=True)
        gx = (g * out).mean(axis=axes, keepdims=True)
        return ((g - gm - out * gx) / scale,)

    return _make("standardize", out, (x,), bw, fwd)


# -- reductions and reshaping ----------------------------------------------


def sum(x, axis=None):
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make("sum", np.sum(x.data, axis=axis), (x,), bw, lambda d: np.sum(d, axis=axis))


def mean(x, axis=None):
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis), 1.0 / n)


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _make(
        "reshape",
        x.data.reshape(shape),
        (x,),
        lambda g: (g.reshape(old),),
        lambda d: d.reshape(shape),
    )


def concat(tensors, axis=1):
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(
        "concat",
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, sizes, axis=axis)),
        lambda *ds: np.concatenate(ds, axis=axis),
    )


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        "matmul",
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
        np.matmul,
    )


# -- convolution and pooling -------------------------------------------------


def _im2col(x, kh, kw, stride, pad):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, xp.shape, (n, ho, wo)


def _conv_forward(x, k, b, stride, pad):
    o, _, kh, kw = k.shape
    cols, xp_shape, (n, ho, wo) = _im2col(x, kh, kw, stride, pad)
    out = cols @ k.reshape(o, -1).T
    if b is not None:
        out += b
    return np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)), cols, xp_shape


def conv2d(x, kernel, bias=None, stride=1, pad=0):
    """Cross-correlation of an NCHW input with an OIkHkW kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise RejectedInput("conv2d expects 4-d input and kernel")
    if kernel.shape[1] != x.shape[1]:
        raise RejectedInput(f"kernel expects {kernel.shape[1]} channels, input has {x.shape[1]}")
    if stride < 1 or pad < 0:
        raise RejectedInput("stride must be positive and pad non-negative")
    o, c, kh, kw = kernel.shape
    ho = (x.shape[2] + 2 * pad - kh) // stride + 1
    wo = (x.shape[3] + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise RejectedInput("conv2d output would be empty")
    parents = (x, kernel) if bias is None else (x, kernel, as_tensor(bias))
    b = None if bias is None else parents[2].data
    out, cols, xp_shape = _conv_forward(x.data, kernel.data, b, stride, pad)

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gk = (gm.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            if stride == 1 and kh == kw and pad <= kh - 1:
                # transposed convolution: correlate with the flipped, channel-swapped kernel
                flipped = np.ascontiguousarray(kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
                gx = _conv_forward(g, flipped, None, 1, kh - 1 - pad)[0]
            else:
                gcols = (gm @ kernel.data.reshape(o, -1)).reshape(g.shape[0], ho, wo, c, kh, kw)
                gxp = np.zeros(xp_shape)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                            :, :, :, :, i, j
                        ].transpose(0, 3, 1, 2)
                gx = gxp[:, :, pad : pad + x.shape[2], pad : pad + x.shape[3]]
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2, 3))

    def fw(xd, kd, bd=None):
        return _conv_forward(xd, kd, bd, stride, pad)[0]

    return _make("conv2d", out, parents, bw, fw)


def _pool_windows(d):
    n, c, h, w = d.shape
    return d.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)


def max_pool(x):
    """2x2 max pooling, stride 2. Ties send the gradient to the first
    element of the window in row-major order."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise RejectedInput(f"max_pool needs even extents, got {h}x{w}")
    win = _pool_windows(x.data)
    arg = np.argmax(win, axis=-1)

    def bw(g):
        onehot = (np.arange(4) == arg[..., None]) * g[..., None]
        return (onehot.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _make("max_pool", win.max(axis=-1), (x,), bw, lambda d: _pool_windows(d).max(axis=-1))


def global_avg_pool(x):
    x = as_tensor(x)
    return mean(x, axis=(2, 3))


# -- resampling -----------------------------------------------------------------


def interp_matrix(n_in, n_out):
    """Linear interpolation weights (n_out x n_in), half-pixel centres."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m


def resize_bilinear(x, out_h, out_w):
    x = as_tensor(x)
    if out_h < 1 or out_w < 1:
        raise RejectedInput("resize target must be at least 1x1")
    ah = interp_matrix(x.shape[2], out_h)
    aw = interp_matrix(x.shape[3], out_w)

    def fw(d):
        return ah @ d @ aw.T

    return _make("resize", fw(x.data), (x,), lambda g: (ah.T @ g @ aw,), fw)


def bilinear_upsample(x, factor):
    if factor < 1:
        raise RejectedInput("upsample factor must be positive")
    x = as_tensor(x)
    if factor == 1:
        return x
    return resize_bilinear(x, x.shape[2] * factor, x.shape[3] * factor)


def pad_into(x, height, width, top, left):
    """Place ``x`` on a zero canvas of the given size at (top, left)."""
    x = as_tensor(x)
    h, w = x.shape[2:]
    if top < 0 or left < 0 or top + h > height or left + w > width:
        raise RejectedInput("padded placement falls outside the canvas")

    def fw(d):
        out = np.zeros(d.shape[:2] + (height, width))
        out[:, :, top : top + h, left : left + w] = d
        return out

    return _make("pad", fw(x.data), (x,), lambda g: (g[:, :, top : top + h, left : left + w],), fw)


# -- losses ---------------------------------------------------------------------


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Summed cross-entropy of integer ``labels`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=int)
    idx = np.arange(len(labels))

    def fw(d):
        z = d - d.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        return np.sum(lse - z[idx, labels])

    def bw(g):
        p = softmax(logits.data)
        p[idx, labels] -= 1.0
        return (g * p,)

    return _make("xent", fw(logits.data), (logits,), bw, fw)
