"""Reverse-mode automatic differentiation on a recorded op tape.

A Graph records one forward pass as a list of nodes (op kind, inputs,
output, backward closure) in execution order, which is already a
topological order. backward() walks the tape in reverse and accumulates
gradients additively into every tensor it reaches. A graph is single-use:
after backward() it refuses further recording or replay.

Values are float32 in training mode and float64 in verification mode;
ops never mix the two.
"""

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)

# Operator kinds recorded on the tape. The gradient test suite iterates
# over this tuple, so every op added here needs a finite-difference check.
OP_KINDS = (
    "add", "sub", "mul", "scale",
    "relu", "sigmoid", "log", "sqrt", "clip", "softmax",
    "conv2d", "max_pool2x2", "dense",
    "nearest_upsample2x", "resize_nearest",
    "flatten", "reshape", "concat",
    "sum", "mean",
)


class ShapeError(ValueError):
    """Operator inputs have incompatible shapes or dtypes."""


class GraphError(RuntimeError):
    """Graph misuse: replayed backward, recording after backward, foreign loss."""


class Tensor:
    """Shaped numeric array with an additive gradient accumulator.

    trainable marks parameters the optimizer may update; frozen keeps a
    trainable tensor out of updates without blocking gradient flow
    through it.
    """

    __slots__ = ("values", "grad", "trainable", "frozen", "name", "_velocity")

    def __init__(self, values, trainable=False, frozen=False, name=None):
        values = np.asarray(values)
        if values.dtype not in FLOAT_DTYPES:
            raise ShapeError(f"tensor dtype must be float32/float64, got {values.dtype}")
        self.values = values
        self.grad = None
        self.trainable = bool(trainable)
        self.frozen = bool(frozen)
        self.name = name
        self._velocity = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def size(self):
        return self.values.size

    def item(self):
        if self.values.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.values.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self):
        if self.grad is None:
            self.grad = np.zeros(self.values.shape, self.values.dtype)
        else:
            self.grad[...] = 0

    def __repr__(self):
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.values.shape}, dtype={self.values.dtype})"


class Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


def _accum(tensor, g):
    if tensor.grad is None:
        # own a fresh buffer; g may be a view into someone else's array
        tensor.grad = np.array(g, dtype=tensor.values.dtype)
    else:
        tensor.grad += g


def _same_dtype(op, *tensors):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ShapeError(f"{op}: mixed dtypes {dt} vs {t.dtype}")
    return dt


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape {a.shape} vs {b.shape}")


class Graph:
    """Tape for one forward pass. All ops are methods so every recorded
    node lands on exactly one graph."""

    def __init__(self):
        self.nodes = []
        self._produced = set()
        self._consumed = False

    def _record(self, op, inputs, values, backward):
        if self._consumed:
            raise GraphError(f"graph already consumed by backward(); cannot record '{op}'")
        out = Tensor(values)
        self.nodes.append(Node(op, tuple(inputs), out, backward))
        self._produced.add(id(out))
        return out

    # -- elementwise ---------------------------------------------------

    def add(self, a, b):
        _same_dtype("add", a, b)
        _same_shape("add", a, b)

        def backward(g):
            _accum(a, g)
            _accum(b, g)

        return self._record("add", (a, b), a.values + b.values, backward)

    def sub(self, a, b):
        _same_dtype("sub", a, b)
        _same_shape("sub", a, b)

        def backward(g):
            _accum(a, g)
            _accum(b, -g)

        return self._record("sub", (a, b), a.values - b.values, backward)

    def mul(self, a, b):
        _same_dtype("mul", a, b)
        _same_shape("mul", a, b)

        def backward(g):
            _accum(a, g * b.values)
            _accum(b, g * a.values)

        return self._record("mul", (a, b), a.values * b.values, backward)

    def scale(self, a, c):
        c = float(c)

        def backward(g):
            _accum(a, g * np.asarray(c, a.dtype))

        return self._record("scale", (a,), a.values * a.values.dtype.type(c), backward)

    def relu(self, a):
        def backward(g):
            _accum(a, g * (a.values > 0))

        return self._record("relu", (a,), np.maximum(a.values, 0), backward)

    def sigmoid(self, a):
        # Split by sign to avoid overflow in exp.
        x = a.values
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)

        def backward(g):
            _accum(a, g * y * (1.0 - y))

        return self._record("sigmoid", (a,), y, backward)

    def log(self, a):
        if np.any(a.values <= 0):
            raise ShapeError(f"log: non-positive input (min {a.values.min()})")

        def backward(g):
            _accum(a, g / a.values)

        return self._record("log", (a,), np.log(a.values), backward)

    def sqrt(self, a, eps=0.0):
        y = np.sqrt(a.values + a.values.dtype.type(eps))

        def backward(g):
            _accum(a, g * 0.5 / y)

        return self._record("sqrt", (a,), y, backward)

    def clip(self, a, lo, hi):
        if not lo < hi:
            raise ShapeError(f"clip: lo {lo} must be < hi {hi}")
        inside = (a.values > lo) & (a.values < hi)

        def backward(g):
            _accum(a, g * inside)

        return self._record("clip", (a,), np.clip(a.values, lo, hi), backward)

    def softmax(self, a, axis=-1):
        z = a.values - a.values.max(axis=axis, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            dot = (g * y).sum(axis=axis, keepdims=True)
            _accum(a, y * (g - dot))

        return self._record("softmax", (a,), y, backward)

    # -- structured / NN ------------------------------------------------

    def conv2d(self, x, w, b=None, stride=1, padding=0):
        """x: [B,C,H,W], w: [O,C,kh,kw], optional b: [O]."""
        inputs = (x, w) if b is None else (x, w, b)
        _same_dtype("conv2d", *inputs)
        if x.values.ndim != 4 or w.values.ndim != 4:
            raise ShapeError(f"conv2d: need 4-d input/kernel, got {x.shape} and {w.shape}")
        B, C, H, W = x.shape
        O, Ck, kh, kw = w.shape
        if Ck != C:
            raise ShapeError(f"conv2d: input channels {C} != kernel channels {Ck}")
        if b is not None and b.shape != (O,):
            raise ShapeError(f"conv2d: bias shape {b.shape} != ({O},)")
        if stride < 1 or padding < 0:
            raise ShapeError(f"conv2d: bad stride {stride} / padding {padding}")
        oh = (H + 2 * padding - kh) // stride + 1
        ow = (W + 2 * padding - kw) // stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"conv2d: kernel {kh}x{kw} too large for input {H}x{W} pad {padding}")

        if padding:
            xp = np.pad(x.values, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        else:
            xp = x.values
        # im2col with channels innermost: every slice touched below is then
        # contiguous along C, and forward + both gradients reduce to single
        # large matmuls against the same buffer.
        cols = np.empty((B, oh, ow, kh, kw, C), x.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, :, i, j, :] = xp[:, :, i:i + stride * oh:stride,
                                            j:j + stride * ow:stride].transpose(0, 2, 3, 1)
        x2 = cols.reshape(B * oh * ow, kh * kw * C)
        wr = np.ascontiguousarray(w.values.transpose(0, 2, 3, 1)).reshape(O, -1)
        out2 = x2 @ wr.T
        if b is not None:
            out2 += b.values
        out = np.ascontiguousarray(out2.reshape(B, oh, ow, O).transpose(0, 3, 1, 2))

        def backward(g):
            g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * oh * ow, O)
            _accum(w, (g2.T @ x2).reshape(O, kh, kw, C).transpose(0, 3, 1, 2))
            if b is not None:
                _accum(b, g2.sum(axis=0))
            dcols = (g2 @ wr).reshape(B, oh, ow, kh, kw, C)
            dxp_t = np.zeros((B, xp.shape[2], xp.shape[3], C), x.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp_t[:, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                        dcols[:, :, :, i, j, :]
            dxp = dxp_t.transpose(0, 3, 1, 2)
            if padding:
                dxp = dxp[:, :, padding:padding + H, padding:padding + W]
            _accum(x, dxp)

        return self._record("conv2d", inputs, out, backward)

    def max_pool2x2(self, x):
        """2x2 max pooling, stride 2, floor mode (odd trailing row/col dropped)."""
        if x.values.ndim != 4:
            raise ShapeError(f"max_pool2x2: need 4-d input, got {x.shape}")
        B, C, H, W = x.shape
        if H < 2 or W < 2:
            raise ShapeError(f"max_pool2x2: spatial dims {H}x{W} below 2x2")
        oh, ow = H // 2, W // 2
        win = x.values[:, :, :oh * 2, :ow * 2].reshape(B, C, oh, 2, ow, 2)
        win = win.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, oh, ow, 4)
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

        def backward(g):
            dwin = np.zeros((B, C, oh, ow, 4), x.dtype)
            np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
            dwin = dwin.reshape(B, C, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5)
            dx = np.zeros_like(x.values)
            dx[:, :, :oh * 2, :ow * 2] = dwin.reshape(B, C, oh * 2, ow * 2)
            _accum(x, dx)

        return self._record("max_pool2x2", (x,), out, backward)

    def dense(self, x, w, b=None):
        """Affine map: x [B,F] @ w [F,O] (+ b [O])."""
        inputs = (x, w) if b is None else (x, w, b)
        _same_dtype("dense", *inputs)
        if x.values.ndim != 2 or w.values.ndim != 2:
            raise ShapeError(f"dense: need 2-d input/weight, got {x.shape} and {w.shape}")
        if x.shape[1] != w.shape[0]:
            raise ShapeError(f"dense: input features {x.shape[1]} != weight rows {w.shape[0]}")
        if b is not None and b.shape != (w.shape[1],):
            raise ShapeError(f"dense: bias shape {b.shape} != ({w.shape[1]},)")
        out = x.values @ w.values
        if b is not None:
            out = out + b.values

        def backward(g):
            _accum(x, g @ w.values.T)
            _accum(w, x.values.T @ g)
            if b is not None:
                _accum(b, g.sum(axis=0))

        return self._record("dense", inputs, out, backward)

    def nearest_upsample2x(self, x):
        if x.values.ndim != 4:
            raise ShapeError(f"nearest_upsample2x: need 4-d input, got {x.shape}")
        B, C, H, W = x.shape
        out = np.repeat(np.repeat(x.values, 2, axis=2), 2, axis=3)

        def backward(g):
            _accum(x, g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)))

        return self._record("nearest_upsample2x", (x,), out, backward)

    def resize_nearest(self, x, out_hw):
        """Nearest-neighbor resize of [B,C,H,W] to an exact [oh,ow]."""
        if x.values.ndim != 4:
            raise ShapeError(f"resize_nearest: need 4-d input, got {x.shape}")
        B, C, H, W = x.shape
        oh, ow = out_hw
        if oh < 1 or ow < 1:
            raise ShapeError(f"resize_nearest: bad target size {out_hw}")
        # Separable one-hot gather matrices; the adjoint is their transpose.
        ri = np.minimum((np.arange(oh) + 0.5) * H / oh, H - 1).astype(np.int64)
        ci = np.minimum((np.arange(ow) + 0.5) * W / ow, W - 1).astype(np.int64)
        sr = np.zeros((oh, H), x.dtype)
        sr[np.arange(oh), ri] = 1
        sc = np.zeros((ow, W), x.dtype)
        sc[np.arange(ow), ci] = 1
        out = np.matmul(np.matmul(sr, x.values), sc.T)

        def backward(g):
            _accum(x, np.matmul(np.matmul(sr.T, g), sc))

        return self._record("resize_nearest", (x,), out, backward)

    def flatten(self, x):
        """Collapse all axes after the first (batch) axis."""
        if x.values.ndim < 2:
            raise ShapeError(f"flatten: need at least 2-d input, got {x.shape}")
        B = x.shape[0]
        out = x.values.reshape(B, -1)

        def backward(g):
            _accum(x, g.reshape(x.values.shape))

        return self._record("flatten", (x,), out, backward)

    def reshape(self, x, shape):
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != x.size:
            raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
        out = x.values.reshape(shape)

        def backward(g):
            _accum(x, g.reshape(x.values.shape))

        return self._record("reshape", (x,), out, backward)

    def concat(self, tensors, axis=0):
        tensors = tuple(tensors)
        if not tensors:
            raise ShapeError("concat: no inputs")
        _same_dtype("concat", *tensors)
        nd = tensors[0].values.ndim
        ax = axis % nd
        for t in tensors[1:]:
            if t.values.ndim != nd:
                raise ShapeError(f"concat: rank {t.values.ndim} vs {nd}")
            for d in range(nd):
                if d != ax and t.shape[d] != tensors[0].shape[d]:
                    raise ShapeError(
                        f"concat: axis {d} sizes {t.shape[d]} vs {tensors[0].shape[d]}")
        out = np.concatenate([t.values for t in tensors], axis=ax)
        splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

        def backward(g):
            for t, piece in zip(tensors, np.split(g, splits, axis=ax)):
                _accum(t, piece)

        return self._record("concat", tensors, out, backward)

    # -- reductions ------------------------------------------------------

    def sum(self, x, axis=None):
        axis = self._norm_axis(x, axis)
        out = x.values.sum(axis=axis)

        def backward(g):
            if axis is None:
                _accum(x, np.broadcast_to(g, x.values.shape).copy())
            else:
                _accum(x, np.broadcast_to(np.expand_dims(g, axis), x.values.shape).copy())

        return self._record("sum", (x,), out, backward)

    def mean(self, x, axis=None):
        axis = self._norm_axis(x, axis)
        out = x.values.mean(axis=axis)
        count = x.size if axis is None else x.size // max(out.size, 1)
        inv = x.values.dtype.type(1.0 / count)

        def backward(g):
            gg = g * inv
            if axis is None:
                _accum(x, np.broadcast_to(gg, x.values.shape).copy())
            else:
                _accum(x, np.broadcast_to(np.expand_dims(gg, axis), x.values.shape).copy())

        return self._record("mean", (x,), out, backward)

    @staticmethod
    def _norm_axis(x, axis):
        if axis is None:
            return None
        if isinstance(axis, int):
            axis = (axis,)
        return tuple(a % x.values.ndim for a in axis)

    # -- backward ---------------------------------------------------------

    def backward(self, loss):
        """Populate grads of every tensor upstream of a scalar loss."""
        if self._consumed:
            raise GraphError("graph already consumed; re-run the forward pass before backward()")
        if loss.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise GraphError("loss was not produced by this graph")
        self._consumed = True
        loss.grad = np.ones(loss.values.shape, loss.values.dtype)
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            node.backward(g)


def zero_grad(params):
    for p in params:
        p.zero_grad()


def sgd_step(params, lr, momentum=0.9):
    """Momentum SGD: v <- momentum*v + grad; p <- p - lr*v.

    Frozen parameters are skipped entirely (values and velocity stay
    bit-identical); gradients on them are left untouched.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if momentum < 0:
        raise ValueError(f"momentum must be non-negative, got {momentum}")
    for p in params:
        if not p.trainable or p.frozen:
            continue
        if p.grad is None:
            raise ValueError(f"sgd_step: parameter {p.name or '?'} has no gradient")
        if p._velocity is None:
            p._velocity = np.zeros_like(p.values)
        p._velocity *= p.values.dtype.type(momentum)
        p._velocity += p.grad
        p.values -= p.values.dtype.type(lr) * p._velocity
