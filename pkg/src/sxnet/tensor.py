"""Dense tensors with taped reverse-mode gradients.

Forward ops append backward closures to an explicit Tape which is replayed
in reverse. Gradients accumulate out of place into plain Tensors and in
place into Parameters, so a shared Parameter collects contributions from
every use: reuse within a layer stack and reuse across model instances of
different sequence lengths both land in the same buffer.

Passing ``tape=None`` to any op runs it forward-only (no closures, no grad
buffers), which is what evaluation and timing paths use.
"""

from __future__ import annotations

import math

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}


class ShapeError(ValueError):
    """Operands disagree on shape; raised at call time, never deferred."""


class GradCheckError(RuntimeError):
    """A finite-difference probe produced a non-finite loss."""


class Tensor:
    """Immutable-by-convention dense array plus its accumulated gradient."""

    __slots__ = ("data", "grad")

    def __init__(self, data: np.ndarray):
        self.data = data
        self.grad = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> str:
        return "f64" if self.data.dtype == np.float64 else "f32"

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.dtype})"


class Parameter(Tensor):
    """Named leaf tensor whose gradient buffer persists across steps."""

    __slots__ = ("name",)

    def __init__(self, name: str, data: np.ndarray):
        super().__init__(data)
        self.name = name
        self.grad = np.zeros_like(data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape})"


class Tape:
    """Ordered record of backward closures for one forward pass."""

    __slots__ = ("_ops",)

    def __init__(self):
        self._ops = []

    def record(self, backward_fn) -> None:
        self._ops.append(backward_fn)

    def __len__(self) -> int:
        return len(self._ops)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        loss.grad = np.ones_like(loss.data)
        for fn in reversed(self._ops):
            fn()


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # Parameters own their grad buffer, so in-place add is safe and cheap.
    # Plain tensors may hold aliases of upstream grads; rebinding out of
    # place keeps every aliased buffer intact.
    if isinstance(t, Parameter):
        t.grad += g
    elif t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# core ops


def affine(tape: Tape | None, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b over the trailing feature dimension of a 2-d batch."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError(f"affine: need 2-d operands, got {x.data.shape} and {w.data.shape}")
    if x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"affine: inner dims of {x.data.shape} and {w.data.shape} differ")
    if b.data.shape != (w.data.shape[1],):
        raise ShapeError(f"affine: bias {b.data.shape} does not match output width {w.data.shape[1]}")
    out = Tensor(x.data @ w.data + b.data)
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            _accumulate(x, g @ w.data.T)
            _accumulate(w, x.data.T @ g)
            _accumulate(b, g.sum(axis=0))
        tape.record(backward)
    return out


def sigmoid(tape: Tape | None, x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(y)
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            _accumulate(x, g * (y * (1.0 - y)))
        tape.record(backward)
    return out


def tanh(tape: Tape | None, x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y)
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            _accumulate(x, g * (1.0 - y * y))
        tape.record(backward)
    return out


def relu(tape: Tape | None, x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            _accumulate(x, g * (x.data > 0))
        tape.record(backward)
    return out


def add(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    out = Tensor(a.data + b.data)
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            _accumulate(a, g)
            _accumulate(b, g)
        tape.record(backward)
    return out


def sub(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    out = Tensor(a.data - b.data)
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            _accumulate(a, g)
            _accumulate(b, -g)
        tape.record(backward)
    return out


def mul(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    out = Tensor(a.data * b.data)
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            _accumulate(a, g * b.data)
            _accumulate(b, g * a.data)
        tape.record(backward)
    return out


def scale(tape: Tape | None, x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data * c)
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            _accumulate(x, g * c)
        tape.record(backward)
    return out


def one_minus(tape: Tape | None, x: Tensor) -> Tensor:
    out = Tensor(1.0 - x.data)
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            _accumulate(x, -g)
        tape.record(backward)
    return out


def scale_by(tape: Tape | None, x: Tensor, s: Tensor) -> Tensor:
    """Multiply a tensor by a scalar tensor (e.g. a learnable gate)."""
    if s.data.size != 1:
        raise ShapeError(f"scale_by: scale must be a scalar, got shape {s.data.shape}")
    out = Tensor(x.data * s.data.reshape(()))
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            _accumulate(s, np.asarray(np.sum(g * x.data), dtype=s.data.dtype).reshape(s.data.shape))
            _accumulate(x, g * s.data.reshape(()))
        tape.record(backward)
    return out


def concat_features(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the trailing feature axis; leading dims must match."""
    if a.data.shape[:-1] != b.data.shape[:-1]:
        raise ShapeError(f"concat_features: batch dims of {a.data.shape} and {b.data.shape} differ")
    p = a.data.shape[-1]
    out = Tensor(np.concatenate([a.data, b.data], axis=-1))
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            _accumulate(a, g[..., :p])
            _accumulate(b, g[..., p:])
        tape.record(backward)
    return out


def split_features(tape: Tape | None, x: Tensor, p: int) -> tuple[Tensor, Tensor]:
    """Exact inverse of concat_features at split point p."""
    if not 0 <= p <= x.data.shape[-1]:
        raise ShapeError(f"split_features: split {p} outside feature width {x.data.shape[-1]}")
    a = Tensor(x.data[..., :p])
    b = Tensor(x.data[..., p:])
    if tape is not None:
        def backward():
            ga, gb = a.grad, b.grad
            if ga is None and gb is None:
                return
            if ga is None:
                ga = np.zeros_like(a.data)
            if gb is None:
                gb = np.zeros_like(b.data)
            _accumulate(x, np.concatenate([ga, gb], axis=-1))
        tape.record(backward)
    return a, b


def gather_cells(tape: Tape | None, x: Tensor, index_map: np.ndarray) -> Tensor:
    """out[b, i, :] = x[b, index_map[i], :] for a permutation index_map."""
    if x.data.ndim != 3:
        raise ShapeError(f"gather_cells: need [batch, cells, features], got {x.data.shape}")
    idx = np.asarray(index_map)
    n = x.data.shape[1]
    if idx.shape != (n,) or not np.array_equal(np.sort(idx), np.arange(n)):
        raise ShapeError(f"gather_cells: index_map is not a permutation of 0..{n - 1}")
    out = Tensor(x.data[:, idx, :])
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            gx = np.empty_like(x.data)
            gx[:, idx, :] = g
            _accumulate(x, gx)
        tape.record(backward)
    return out


def reshape(tape: Tape | None, x: Tensor, shape: tuple) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            _accumulate(x, g.reshape(x.data.shape))
        tape.record(backward)
    return out


def total(tape: Tape | None, x: Tensor) -> Tensor:
    """Sum all elements to a scalar; the usual loss terminus for checks."""
    out = Tensor(np.asarray(x.data.sum(), dtype=x.data.dtype))
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            _accumulate(x, np.full_like(x.data, g.reshape(())))
        tape.record(backward)
    return out


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(loss_fn, params, h: float = 1e-5, floor: float = 1e-8):
    """Compare analytic gradients of loss_fn against central differences.

    loss_fn(tape) must rebuild the same deterministic loss from scratch on
    every call. It is invoked once with a recording tape for the analytic
    gradients and twice per parameter scalar without recording. Relative
    error uses |a - n| / max(|a|, |n|, floor); returns the overall worst
    error and a per-parameter map. Raise the floor when the loss itself is
    low precision (f32) and cannot resolve the smallest gradients.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    tape = Tape()
    loss = loss_fn(tape)
    if not math.isfinite(float(loss.data)):
        raise GradCheckError("loss is non-finite at the unperturbed point")
    tape.backward(loss)
    analytic = {p.name: np.array(p.grad, dtype=np.float64) for p in params}

    worst = {}
    for p in params:
        flat = p.data.reshape(-1)
        ana = analytic[p.name].reshape(-1)
        err = 0.0
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            lp = float(loss_fn(None).data)
            flat[i] = keep - h
            lm = float(loss_fn(None).data)
            flat[i] = keep
            if not (math.isfinite(lp) and math.isfinite(lm)):
                raise GradCheckError(f"non-finite loss perturbing {p.name}[{i}]")
            numeric = (lp - lm) / (2.0 * h)
            rel = abs(ana[i] - numeric) / max(abs(ana[i]), abs(numeric), floor)
            err = max(err, rel)
        worst[p.name] = err
    return (max(worst.values()) if worst else 0.0), worst
