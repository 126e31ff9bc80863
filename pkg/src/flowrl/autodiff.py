"""Reverse-mode automatic differentiation over dense float64 arrays.

Small tape-based engine: every primitive op records a node on the active
Tape, backward() walks the tape once in reverse creation order (creation
order is a topological order by construction) and accumulates vector-
Jacobian products into the leaves. Parameters lifted onto a tape receive
their gradients when backward() finishes.

All data is float64. Built for batch-vectorized use: each op works on a
whole (batch, dim) array, so graphs stay at a few hundred nodes per
training step.
"""

from __future__ import annotations

import logging

import numpy as np

logger = logging.getLogger(__name__)

_active_tape = None


class ShapeError(ValueError):
    pass


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


class Tensor:
    """A value in the computation graph.

    Leaves are either constants (requires_grad False) or parameter lifts.
    Interior nodes carry a _vjp closure that pushes the node's gradient
    into its parents' grad buffers.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp",
                 "_gborrow")

    def __init__(self, data, requires_grad=False, parents=(), vjp=None):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._vjp = vjp
        self._gborrow = False
        if requires_grad and _active_tape is not None and parents:
            _active_tape._nodes.append(self)

    @property
    def shape(self):
        return self.data.shape

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accum(self, g):
        # first contribution borrows the caller's array (vjps hand over
        # fresh buffers or views that are read-only from here on); a second
        # contribution reallocates so the borrowed buffer is never mutated
        if self.grad is None:
            self.grad = g
            self._gborrow = True
        elif self._gborrow:
            self.grad = self.grad + g
            self._gborrow = False
        else:
            self.grad += g

    # operator sugar; scalars are wrapped as constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


class Tape:
    """Ordered record of graph nodes plus the parameter leaves in use.

    Use as a context manager around one forward+backward pass; nesting is
    not supported (one execution context per tape).
    """

    def __init__(self):
        self._nodes = []
        self._param_leaves = []

    def __enter__(self):
        global _active_tape
        if _active_tape is not None:
            raise RuntimeError("a Tape is already active in this context")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _active_tape
        _active_tape = None
        return False

    def watch(self, param: "Parameter") -> Tensor:
        t = Tensor(param.value, requires_grad=True)
        self._param_leaves.append((param, t))
        return t

    def backward(self, loss: Tensor):
        """Backpropagate from a scalar loss; writes Parameter.grad and clears the tape."""
        if loss.data.shape != ():
            raise ShapeError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            if node.grad is not None and node._vjp is not None:
                node._vjp(node.grad)
        for param, leaf in self._param_leaves:
            if leaf.grad is not None:
                param.grad += leaf.grad
        self._nodes.clear()
        self._param_leaves.clear()


def active_tape():
    return _active_tape


class Parameter:
    """Named trainable array: value, gradient accumulator of the same shape."""

    __slots__ = ("value", "grad", "name")

    def __init__(self, value, name: str):
        self.value = _as_array(value).copy()
        self.grad = np.zeros_like(self.value)
        self.name = name

    def tensor(self, trainable: bool = True) -> Tensor:
        """Lift onto the active tape. Frozen lifts are plain constants:
        gradients still flow through downstream ops but are not accumulated
        into this parameter."""
        if trainable and _active_tape is not None:
            return _active_tape.watch(self)
        return Tensor(self.value)

    def zero_grad(self):
        self.grad[:] = 0.0

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.value.shape})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _rg(*ts):
    return any(t.requires_grad for t in ts)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_elementwise(a: Tensor, b: Tensor, opname: str):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(
            f"{opname}: shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from None


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_elementwise(a, b, "add")
    out = Tensor(a.data + b.data, requires_grad=_rg(a, b), parents=(a, b))

    def vjp(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    out._vjp = vjp
    return out


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_elementwise(a, b, "sub")
    out = Tensor(a.data - b.data, requires_grad=_rg(a, b), parents=(a, b))

    def vjp(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.data.shape))

    out._vjp = vjp
    return out


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_elementwise(a, b, "mul")
    out = Tensor(a.data * b.data, requires_grad=_rg(a, b), parents=(a, b))

    def vjp(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    out._vjp = vjp
    return out


def neg(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(-a.data, requires_grad=a.requires_grad, parents=(a,))

    def vjp(g):
        if a.requires_grad:
            a._accum(-g)

    out._vjp = vjp
    return out


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}"
        )
    out = Tensor(a.data @ b.data, requires_grad=_rg(a, b), parents=(a, b))

    def vjp(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    out._vjp = vjp
    return out


def tanh(a) -> Tensor:
    a = _wrap(a)
    y = np.tanh(a.data)
    out = Tensor(y, requires_grad=a.requires_grad, parents=(a,))

    def vjp(g):
        if a.requires_grad:
            a._accum(g * (1.0 - y * y))

    out._vjp = vjp
    return out


def atanh(a) -> Tensor:
    a = _wrap(a)
    if np.any(np.abs(a.data) >= 1.0):
        raise ValueError("atanh: inputs must lie strictly inside (-1, 1)")
    x = a.data
    out = Tensor(np.arctanh(x), requires_grad=a.requires_grad, parents=(a,))

    def vjp(g):
        if a.requires_grad:
            a._accum(g / (1.0 - x * x))

    out._vjp = vjp
    return out


def exp(a) -> Tensor:
    a = _wrap(a)
    y = np.exp(a.data)
    out = Tensor(y, requires_grad=a.requires_grad, parents=(a,))

    def vjp(g):
        if a.requires_grad:
            a._accum(g * y)

    out._vjp = vjp
    return out


def log(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data <= 0.0):
        raise ValueError("log: inputs must be strictly positive")
    x = a.data
    out = Tensor(np.log(x), requires_grad=a.requires_grad, parents=(a,))

    def vjp(g):
        if a.requires_grad:
            a._accum(g / x)

    out._vjp = vjp
    return out


def absolute(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    out = Tensor(np.abs(x), requires_grad=a.requires_grad, parents=(a,))

    def vjp(g):
        if a.requires_grad:
            a._accum(g * np.sign(x))

    out._vjp = vjp
    return out


def relu(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    out = Tensor(np.maximum(x, 0.0), requires_grad=a.requires_grad, parents=(a,))

    def vjp(g):
        if a.requires_grad:
            a._accum(g * (x > 0.0))

    out._vjp = vjp
    return out


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip into [lo, hi]; gradient is zero where the clip is active."""
    a = _wrap(a)
    x = a.data
    out = Tensor(np.clip(x, lo, hi), requires_grad=a.requires_grad, parents=(a,))

    def vjp(g):
        if a.requires_grad:
            a._accum(g * ((x > lo) & (x < hi)))

    out._vjp = vjp
    return out


def sum_all(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data.sum(), requires_grad=a.requires_grad, parents=(a,))

    def vjp(g):
        if a.requires_grad:
            a._accum(np.full_like(a.data, float(g)))

    out._vjp = vjp
    return out


def mean_all(a) -> Tensor:
    a = _wrap(a)
    n = a.data.size
    out = Tensor(a.data.mean(), requires_grad=a.requires_grad, parents=(a,))

    def vjp(g):
        if a.requires_grad:
            a._accum(np.full_like(a.data, float(g) / n))

    out._vjp = vjp
    return out


def sum_cols(a) -> Tensor:
    """Row-wise sum of a 2-D array: (n, d) -> (n,)."""
    a = _wrap(a)
    if a.data.ndim != 2:
        raise ShapeError(f"sum_cols expects a 2-D input, got shape {a.data.shape}")
    out = Tensor(a.data.sum(axis=1), requires_grad=a.requires_grad, parents=(a,))

    def vjp(g):
        if a.requires_grad:
            a._accum(np.repeat(g[:, None], a.data.shape[1], axis=1))

    out._vjp = vjp
    return out


def take_cols(a, idx) -> Tensor:
    """Select columns of a 2-D array by index; also serves as a fixed permutation."""
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.intp)
    if a.data.ndim != 2:
        raise ShapeError(f"take_cols expects a 2-D input, got shape {a.data.shape}")
    out = Tensor(a.data[:, idx], requires_grad=a.requires_grad, parents=(a,))

    def vjp(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, (slice(None), idx), g)
            a._accum(buf)

    out._vjp = vjp
    return out


def put_cols(a, idx, width: int) -> Tensor:
    """Scatter the columns of a into a zero (n, width) array at positions idx."""
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.intp)
    if a.data.ndim != 2 or a.data.shape[1] != idx.size:
        raise ShapeError(
            f"put_cols: input shape {a.data.shape} does not match {idx.size} indices"
        )
    buf = np.zeros((a.data.shape[0], width), dtype=np.float64)
    buf[:, idx] = a.data
    out = Tensor(buf, requires_grad=a.requires_grad, parents=(a,))

    def vjp(g):
        if a.requires_grad:
            a._accum(g[:, idx])

    out._vjp = vjp
    return out


def concat_cols(parts) -> Tensor:
    parts = [_wrap(p) for p in parts]
    for p in parts:
        if p.data.ndim != 2:
            raise ShapeError(f"concat_cols expects 2-D inputs, got shape {p.data.shape}")
    widths = [p.data.shape[1] for p in parts]
    out = Tensor(
        np.concatenate([p.data for p in parts], axis=1),
        requires_grad=_rg(*parts),
        parents=tuple(parts),
    )

    def vjp(g):
        ofs = 0
        for p, w in zip(parts, widths):
            if p.requires_grad:
                p._accum(g[:, ofs : ofs + w])
            ofs += w

    out._vjp = vjp
    return out


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data.reshape(shape), requires_grad=a.requires_grad, parents=(a,))

    def vjp(g):
        if a.requires_grad:
            a._accum(g.reshape(a.data.shape))

    out._vjp = vjp
    return out


def backward(loss: Tensor):
    """Backpropagate on the active tape (convenience wrapper)."""
    if _active_tape is None:
        raise RuntimeError("backward called with no active Tape")
    _active_tape.backward(loss)


class Adam:
    """Adam with decoupled weight decay over a fixed parameter list.

    Weight decay is applied to values directly, not folded into gradients.
    Steps with any non-finite gradient are skipped (and logged); gradients
    are always zeroed afterwards.
    """

    def __init__(self, params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.skipped = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]
        self._buf = [np.empty_like(p.value) for p in self.params]

    def step(self):
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                self.skipped += 1
                logger.warning(
                    "adam: non-finite gradient in %s, step skipped", p.name
                )
                for q in self.params:
                    q.zero_grad()
                return
        self.step_count += 1
        t = self.step_count
        b1c = 1.0 - self.beta1**t
        b2c = 1.0 - self.beta2**t
        # scratch-buffer updates; the operation order reproduces the
        # textbook m-hat/v-hat formulas bit for bit
        for p, m, v, buf in zip(self.params, self._m, self._v, self._buf):
            g = p.grad
            m *= self.beta1
            np.multiply(g, 1.0 - self.beta1, out=buf)
            m += buf
            v *= self.beta2
            np.multiply(g, 1.0 - self.beta2, out=buf)
            buf *= g
            v += buf
            if self.weight_decay:
                np.multiply(p.value, self.lr * self.weight_decay, out=buf)
                p.value -= buf
            np.divide(v, b2c, out=buf)
            np.sqrt(buf, out=buf)
            buf += self.eps
            mhat = m / b1c
            mhat *= self.lr
            mhat /= buf
            p.value -= mhat
            p.zero_grad()


def grad_check(loss_fn, params, step=1e-6, tolerance=1e-5):
    """Compare analytic gradients against central differences.

    loss_fn() must be deterministic and evaluate the loss from the current
    parameter values, building its graph on the active tape when one is
    present. Returns a report dict with per-parameter max relative errors
    (infinity-norm ratio) and a list of failures above tolerance. A
    non-finite loss is reported as a failure, not raised.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
        if not np.isfinite(loss.data):
            return {"errors": {}, "failures": ["non-finite loss"], "ok": False}
        tape.backward(loss)
    analytic = {p.name: p.grad.copy() for p in params}
    for p in params:
        p.zero_grad()

    errors = {}
    failures = []
    for p in params:
        numeric = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp = float(loss_fn().data)
            flat[i] = orig - step
            lm = float(loss_fn().data)
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                failures.append(f"{p.name}: non-finite loss during probing")
                lp = lm = 0.0
            num_flat[i] = (lp - lm) / (2.0 * step)
        a = analytic[p.name]
        scale = max(np.max(np.abs(a), initial=0.0),
                    np.max(np.abs(numeric), initial=0.0), 1e-12)
        err = float(np.max(np.abs(a - numeric), initial=0.0) / scale)
        errors[p.name] = err
        if err > tolerance:
            failures.append(f"{p.name}: relative error {err:.3e} > {tolerance:.1e}")
    return {"errors": errors, "failures": failures, "ok": not failures}
