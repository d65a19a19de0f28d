"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations the predictor needs are provided. Every operation checks
whether a :class:`Tape` is active on the current thread and whether any of its
inputs is tracked; if both hold, the output is tracked and a backward rule is
recorded. Outside a tape, operations are plain numpy arithmetic.

Example::

    x = Tensor([3.0], tracked=True)
    with Tape() as tape:
        loss = sum_(x * x)
    tape.backward(loss)   # x.grad == [6.0]
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, OracleFailure

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A float64 array, optionally tracked for differentiation."""

    __slots__ = ("data", "grad", "tracked")
    # make ``ndarray <op> Tensor`` dispatch to the Tensor's reflected operator
    __array_priority__ = 1000

    def __init__(self, data, tracked: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.tracked = tracked

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", tracked" if self.tracked else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Records tracked operations in execution order.

    Use as a context manager; operations executed inside the ``with`` block on
    the same thread are recorded. A tape is single-use per forward pass.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse across threads
            raise ContractError("tape exited out of order")

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        self._nodes.append(_Node(out, inputs, backward))
        self._produced.add(id(out))

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Propagate ``d loss`` back to every tracked leaf reached.

        Sets ``leaf.grad`` on each reached leaf and returns ``{leaf: grad}``.
        Contributions from a leaf used several times are summed.
        """
        if loss.data.size != 1:
            raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise ContractError("loss was not produced on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.tracked:
                    continue
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
                if key not in self._produced:
                    leaves[key] = inp

        result = {}
        for key, leaf in leaves.items():
            g = np.ascontiguousarray(grads[key], dtype=np.float64).reshape(leaf.shape)
            leaf.grad = g
            result[leaf] = g
        return result


def backward(loss: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    return tape.backward(loss)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], rule) -> Tensor:
    tape = active_tape()
    tracked = tape is not None and any(t.tracked for t in inputs)
    out = Tensor(data, tracked=tracked)
    if tracked:
        tape.record(out, inputs, rule)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _result(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def activation(x, kind: str) -> Tensor:
    """Elementwise ``relu`` or ``sigmoid``. relu'(0) is taken as 0."""
    x = _as_tensor(x)
    if kind == "relu":
        mask = x.data > 0
        return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))
    if kind == "sigmoid":
        s = _sigmoid(x.data)
        return _result(s, (x,), lambda g: (g * s * (1.0 - s),))
    raise ContractError(f"unknown activation {kind!r}")


def relu(x) -> Tensor:
    return activation(x, "relu")


def sigmoid(x) -> Tensor:
    return activation(x, "sigmoid")


# -- reductions and shape ----------------------------------------------------


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _result(out, (x,), rule)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence, axis: int) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in ts)
        raise DimensionError(f"cannot concatenate shapes {shapes} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _result(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not agree")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def _pad4(pad) -> tuple[int, int, int, int]:
    if len(pad) == 2:
        top, left = pad
        return int(top), 0, int(left), 0
    if len(pad) == 4:
        return tuple(int(p) for p in pad)
    raise ContractError(f"pad must be (top, left) or (top, bottom, left, right), got {pad}")


def conv2d(x, kernel, bias=None, pad=(0, 0)) -> Tensor:
    """Stride-1 zero-padded 2-D cross-correlation.

    Args:
        x: ``C_in x H x W`` or batched ``N x C_in x H x W``.
        kernel: ``C_out x C_in x kh x kw``.
        bias: ``C_out`` or None.
        pad: ``(top, left)`` or ``(top, bottom, left, right)`` cell counts.

    Returns:
        ``C_out x H' x W'`` (batched if ``x`` was), with
        ``H' = H + top + bottom - kh + 1`` and likewise for ``W'``.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    top, bottom, left, right = _pad4(pad)
    batched = x.ndim == 4
    if x.ndim not in (3, 4) or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 3-D/4-D input and 4-D kernel, got {x.shape} and {kernel.shape}")
    X = x.data if batched else x.data[None]
    n, c_in, h, w = X.shape
    c_out, k_in, kh, kw = kernel.shape
    if k_in != c_in:
        raise DimensionError(f"conv2d input {x.shape} has {c_in} channels, kernel {kernel.shape} expects {k_in}")
    hp, wp = h + top + bottom, w + left + right
    if kh > hp or kw > wp:
        raise DimensionError(f"kernel {kernel.shape} larger than padded input {(c_in, hp, wp)}")
    inputs = (x, kernel)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (c_out,):
            raise DimensionError(f"conv2d bias shape {bias.shape}, expected {(c_out,)}")
        inputs = (x, kernel, bias)

    xp = np.pad(X, ((0, 0), (0, 0), (top, bottom), (left, right)))
    ho, wo = hp - kh + 1, wp - kw + 1
    # im2col: rows are output positions, columns are (c_in, kh, kw) patches
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5)
    cols = cols.reshape(n * ho * wo, c_in * kh * kw)
    kmat = kernel.data.reshape(c_out, -1)
    out = (cols @ kmat.T).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    if not batched:
        out = out[0]

    def rule(g):
        G = g if batched else g[None]
        g2 = G.transpose(0, 2, 3, 1).reshape(-1, c_out)
        dk = (g2.T @ cols).reshape(kernel.shape)
        dcols = (g2 @ kmat).reshape(n, ho, wo, c_in, kh, kw)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + ho, j : j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, top : top + h, left : left + w]
        if not batched:
            dx = dx[0]
        grads = [dx, dk]
        if bias is not None:
            grads.append(G.sum(axis=(0, 2, 3)))
        return grads

    return _result(np.ascontiguousarray(out), inputs, rule)


# -- pooling -----------------------------------------------------------------


def _check_mode(mode: str) -> None:
    if mode not in ("avg", "max"):
        raise ContractError(f"pool mode must be 'avg' or 'max', got {mode!r}")


def pool_spatial(x, mode: str) -> Tensor:
    """Global pooling over the last two (H, W) axes: ``C x H x W -> C``.

    Leading batch axes are carried through. Max ties route the gradient to
    the first maximal cell in row-major order.
    """
    x = _as_tensor(x)
    _check_mode(mode)
    if x.ndim < 3:
        raise DimensionError(f"pool_spatial expects at least C x H x W, got {x.shape}")
    lead = x.shape[:-2]
    hw = x.shape[-2] * x.shape[-1]
    flat = x.data.reshape(*lead, hw)
    if mode == "avg":
        return _result(
            flat.sum(axis=-1) / hw,
            (x,),
            lambda g: (np.broadcast_to((g / hw)[..., None], flat.shape).reshape(x.shape),),
        )
    idx = np.argmax(flat, axis=-1)[..., None]
    out = np.take_along_axis(flat, idx, axis=-1)[..., 0]

    def rule(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, idx, g[..., None], axis=-1)
        return (dflat.reshape(x.shape),)

    return _result(out, (x,), rule)


def pool_channel(x, mode: str) -> Tensor:
    """Per-position pooling across channels: ``C x H x W -> 1 x H x W``."""
    x = _as_tensor(x)
    _check_mode(mode)
    if x.ndim < 3:
        raise DimensionError(f"pool_channel expects at least C x H x W, got {x.shape}")
    c = x.shape[-3]
    if mode == "avg":
        return _result(
            x.data.sum(axis=-3, keepdims=True) / c,
            (x,),
            lambda g: (np.broadcast_to(g / c, x.shape),),
        )
    idx = np.argmax(x.data, axis=-3)[..., None, :, :]
    out = np.take_along_axis(x.data, idx, axis=-3)

    def rule(g):
        dx = np.zeros_like(x.data)
        np.put_along_axis(dx, idx, g, axis=-3)
        return (dx,)

    return _result(out, (x,), rule)


# -- finite-difference oracle ------------------------------------------------


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    coords: Iterable[tuple[int, int]] | None = None,
) -> float:
    """Largest relative error between backward gradients and central differences.

    ``fn(*inputs)`` must return a scalar tensor. ``coords`` restricts the check
    to ``(input_index, flat_index)`` pairs; by default every coordinate of
    every input is checked. Relative error uses the denominator
    ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    inputs = list(inputs)
    saved_flags = [t.tracked for t in inputs]
    for t in inputs:
        t.data = np.array(t.data, dtype=np.float64)
        t.tracked = True
    try:
        with Tape() as tape:
            out = fn(*inputs)
        found = tape.backward(out) if out.tracked else {}
        analytic = [found.get(t, np.zeros_like(t.data)).reshape(-1) for t in inputs]

        if coords is None:
            coords = [(i, k) for i, t in enumerate(inputs) for k in range(t.size)]
        worst = 0.0
        for i, k in coords:
            t = inputs[i]
            orig = t.data.flat[k]
            t.data.flat[k] = orig + step
            f_plus = fn(*inputs).item()
            t.data.flat[k] = orig - step
            f_minus = fn(*inputs).item()
            t.data.flat[k] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise OracleFailure(f"non-finite function value at input {i}, coordinate {k}")
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = analytic[i][k]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
        return worst
    finally:
        for t, flag in zip(inputs, saved_flags):
            t.tracked = flag
