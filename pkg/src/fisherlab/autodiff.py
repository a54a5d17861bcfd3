"""Dense reverse-mode differentiation for small classifiers.

A :class:`Tape` records numpy operations as they are executed and replays
them backwards. Tapes are built fresh for every evaluation, so nothing
survives between calls. The backward pass can optionally keep the batch axis
on parameter gradients, which yields per-example gradients in one sweep: the
loss is a weighted sum of per-example terms and no op mixes examples, so the
per-example pieces never need to be disentangled.

All arithmetic is float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up in an input, a loss or a gradient."""


class LayoutMismatchError(ValueError):
    """Raised when two parameter vectors do not share a layout."""


def check_finite(array: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"non-finite value in {what}")
    return array


def as_tensor(values, what: str = "input") -> np.ndarray:
    """Convert to a contiguous float64 array, rejecting NaN/Inf."""
    arr = np.ascontiguousarray(values, dtype=np.float64)
    return check_finite(arr, what)


# ---------------------------------------------------------------------------
# Parameter vectors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamSlot:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


Layout = tuple[ParamSlot, ...]


def make_layout(shapes: Iterable[tuple[str, Sequence[int]]]) -> Layout:
    slots = []
    offset = 0
    for name, shape in shapes:
        slot = ParamSlot(name, tuple(int(s) for s in shape), offset)
        slots.append(slot)
        offset += slot.size
    return tuple(slots)


def flat_layout(n: int, name: str = "theta") -> Layout:
    return make_layout([(name, (n,))])


def layout_size(layout: Layout) -> int:
    return sum(slot.size for slot in layout)


class ParamVector:
    """Flat float64 parameters plus the (name, shape, offset) layout."""

    __slots__ = ("data", "layout")

    def __init__(self, data, layout: Layout | None = None):
        data = np.ascontiguousarray(data, dtype=np.float64).reshape(-1)
        if layout is None:
            layout = flat_layout(data.size)
        if layout_size(layout) != data.size:
            raise LayoutMismatchError(
                f"layout covers {layout_size(layout)} entries, data has {data.size}"
            )
        self.data = data
        self.layout = layout

    @classmethod
    def zeros(cls, layout: Layout) -> "ParamVector":
        return cls(np.zeros(layout_size(layout)), layout)

    def __len__(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        names = ", ".join(s.name for s in self.layout)
        return f"ParamVector(P={self.data.size}, [{names}])"

    def view(self, name: str) -> np.ndarray:
        for slot in self.layout:
            if slot.name == name:
                return self.data[slot.offset : slot.offset + slot.size].reshape(slot.shape)
        raise KeyError(name)

    def arrays(self) -> list[np.ndarray]:
        return [
            self.data[s.offset : s.offset + s.size].reshape(s.shape) for s in self.layout
        ]

    def copy(self) -> "ParamVector":
        return ParamVector(self.data.copy(), self.layout)

    def with_data(self, data) -> "ParamVector":
        return ParamVector(data, self.layout)

    def check_layout(self, other: "ParamVector | Layout") -> None:
        layout = other.layout if isinstance(other, ParamVector) else other
        if layout != self.layout:
            raise LayoutMismatchError("parameter layouts differ")

    def norm(self) -> float:
        return float(np.sqrt(np.dot(self.data, self.data)))


def flatten_arrays(arrays: Sequence[np.ndarray], layout: Layout) -> ParamVector:
    out = np.empty(layout_size(layout))
    for slot, arr in zip(layout, arrays):
        out[slot.offset : slot.offset + slot.size] = np.reshape(arr, -1)
    return ParamVector(out, layout)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


class Var:
    __slots__ = ("value", "parents", "vjp", "aux")

    def __init__(self, value: np.ndarray, parents: tuple["Var", ...] = (), vjp=None):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.aux = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


class Tape:
    """Records ops in execution order.

    Ops assume activations carry a leading batch axis and that the second
    operand of ``matmul``, ``add_bias``, ``conv2d`` and ``add_channel_bias``
    is an unbatched parameter. In per-example mode those ops return
    parameter gradients with a leading batch axis.
    """

    def __init__(self):
        self.nodes: list[Var] = []

    def _push(self, value, parents, vjp) -> Var:
        node = Var(value, parents, vjp)
        self.nodes.append(node)
        return node

    def leaf(self, value: np.ndarray) -> Var:
        return self._push(value, (), None)

    # -- ops ---------------------------------------------------------------

    def matmul(self, x: Var, w: Var) -> Var:
        xv, wv = x.value, w.value

        def vjp(g, per_example):
            gx = g @ wv.T
            if per_example:
                gw = xv[:, :, None] * g[:, None, :]
            else:
                gw = xv.T @ g
            return gx, gw

        return self._push(xv @ wv, (x, w), vjp)

    def add_bias(self, h: Var, b: Var) -> Var:
        def vjp(g, per_example):
            return g, (g if per_example else g.sum(axis=0))

        return self._push(h.value + b.value, (h, b), vjp)

    def relu(self, x: Var) -> Var:
        mask = x.value > 0

        def vjp(g, per_example):
            return (g * mask,)

        return self._push(np.where(mask, x.value, 0.0), (x,), vjp)

    def tanh(self, x: Var) -> Var:
        y = np.tanh(x.value)

        def vjp(g, per_example):
            return (g * (1.0 - y * y),)

        return self._push(y, (x,), vjp)

    def reshape(self, x: Var, shape: tuple[int, ...]) -> Var:
        in_shape = x.value.shape

        def vjp(g, per_example):
            return (g.reshape(in_shape),)

        return self._push(x.value.reshape(shape), (x,), vjp)

    def conv2d(self, x: Var, w: Var) -> Var:
        """3x3-style 'same' convolution, stride 1; w has shape (out, in, k, k)."""
        xv, wv = x.value, w.value
        n, cin, h, wd = xv.shape
        cout, _, k, _ = wv.shape
        pad = k // 2
        xp = np.pad(xv, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
        # (n, cin, h, w, k, k) -> (n, h*w, cin*k*k)
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, h * wd, cin * k * k)
        wmat = wv.reshape(cout, -1)
        out = (cols @ wmat.T).transpose(0, 2, 1).reshape(n, cout, h, wd)

        def vjp(g, per_example):
            gmat = g.reshape(n, cout, h * wd).transpose(0, 2, 1)
            if per_example:
                gw = np.einsum("blo,blk->bok", gmat, cols).reshape((n,) + wv.shape)
            else:
                gw = np.einsum("blo,blk->ok", gmat, cols).reshape(wv.shape)
            dcols = (gmat @ wmat).reshape(n, h, wd, cin, k, k)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i : i + h, j : j + wd] += dcols[:, :, :, :, i, j].transpose(
                        0, 3, 1, 2
                    )
            return dxp[:, :, pad : pad + h, pad : pad + wd], gw

        return self._push(out, (x, w), vjp)

    def add_channel_bias(self, h: Var, b: Var) -> Var:
        def vjp(g, per_example):
            return g, (g.sum(axis=(2, 3)) if per_example else g.sum(axis=(0, 2, 3)))

        return self._push(h.value + b.value[None, :, None, None], (h, b), vjp)

    def maxpool2(self, x: Var) -> Var:
        xv = x.value
        n, c, h, w = xv.shape
        blocks = (
            xv.reshape(n, c, h // 2, 2, w // 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h // 2, w // 2, 4)
        )
        arg = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

        def vjp(g, per_example):
            gb = np.zeros_like(blocks)
            np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
            gx = (
                gb.reshape(n, c, h // 2, w // 2, 2, 2)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(n, c, h, w)
            )
            return (gx,)

        return self._push(out, (x,), vjp)

    def softmax_xent(self, logits: Var, targets: np.ndarray, weights: np.ndarray) -> Var:
        """Scalar sum_i weights[i] * CE(logits[i], targets[i]).

        ``targets`` is either an integer label vector or a row-stochastic
        matrix of soft targets.
        """
        z = logits.value
        zmax = z.max(axis=1, keepdims=True)
        shifted = z - zmax
        expz = np.exp(shifted)
        denom = expz.sum(axis=1, keepdims=True)
        logp = shifted - np.log(denom)
        probs = expz / denom
        if targets.ndim == 1:
            rows = np.arange(z.shape[0])
            per_example = -logp[rows, targets]
            onehot = np.zeros_like(z)
            onehot[rows, targets] = 1.0
        else:
            per_example = -(targets * logp).sum(axis=1)
            onehot = targets
        loss = np.dot(weights, per_example)

        def vjp(g, _per_example):
            return (g * weights[:, None] * (probs - onehot),)

        node = self._push(np.asarray(loss), (logits,), vjp)
        node.aux = per_example
        return node

    # -- backward ----------------------------------------------------------

    def backward(self, out: Var, wrt: Sequence[Var], per_example: bool = False) -> list:
        grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.value)}
        wanted = {id(v) for v in wrt}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None) if id(node) not in wanted else grads.get(id(node))
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g, per_example)):
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return [grads.get(id(v)) for v in wrt]




# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------


class GradOracle:
    """Maps theta to (loss, mean gradient) for some fixed bound data.

    Subclasses implement ``__call__``; ``loss`` may be overridden with a
    cheaper forward-only path.
    """

    layout: Layout

    def __call__(self, theta: ParamVector) -> tuple[float, ParamVector]:
        raise NotImplementedError

    def loss(self, theta: ParamVector) -> float:
        return self(theta)[0]


class FunctionOracle(GradOracle):
    """Oracle from plain numpy callables on the flat parameter array."""

    def __init__(
        self,
        loss_fn: Callable[[np.ndarray], float],
        grad_fn: Callable[[np.ndarray], np.ndarray],
        layout: Layout,
    ):
        self.loss_fn = loss_fn
        self.grad_fn = grad_fn
        self.layout = layout

    def __call__(self, theta):
        theta.check_layout(self.layout)
        loss = float(self.loss_fn(theta.data))
        grad = np.asarray(self.grad_fn(theta.data), dtype=np.float64)
        check_finite(np.asarray(loss), "loss")
        check_finite(grad, "gradient")
        return loss, ParamVector(grad, self.layout)

    def loss(self, theta):
        theta.check_layout(self.layout)
        return float(self.loss_fn(theta.data))


def value_and_param_grad(oracle: GradOracle, theta: ParamVector) -> tuple[float, ParamVector]:
    theta.check_layout(oracle.layout)
    loss, grad = oracle(theta)
    grad.check_layout(theta)
    return loss, grad


def per_example_param_grads(oracle, theta: ParamVector) -> np.ndarray:
    """B x P matrix whose row i is the gradient of example i's loss."""
    theta.check_layout(oracle.layout)
    return oracle.per_example(theta)


def finite_diff_grad(oracle: GradOracle, theta: ParamVector, step: float = 1e-5) -> ParamVector:
    """Central differences, one coordinate at a time (2P loss evaluations)."""
    if step <= 0:
        raise ValueError("step must be positive")
    theta.check_layout(oracle.layout)
    base = theta.data
    out = np.empty_like(base)
    work = base.copy()
    for i in range(base.size):
        orig = work[i]
        work[i] = orig + step
        f_plus = oracle.loss(ParamVector(work, theta.layout))
        work[i] = orig - step
        f_minus = oracle.loss(ParamVector(work, theta.layout))
        work[i] = orig
        out[i] = (f_plus - f_minus) / (2.0 * step)
    return ParamVector(out, theta.layout)


def finite_diff_input_grad(
    loss_fn: Callable[[np.ndarray], np.ndarray], inputs: np.ndarray, step: float = 1e-5
) -> np.ndarray:
    """Central differences of a per-example loss vector w.r.t. each input entry.

    ``loss_fn`` maps a batch of inputs to the vector of per-example losses;
    entry (i, j) of the result is d loss_i / d x_ij.
    """
    x = np.array(inputs, dtype=np.float64)
    flat = x.reshape(x.shape[0], -1)
    out = np.empty_like(flat)
    for j in range(flat.shape[1]):
        orig = flat[:, j].copy()
        flat[:, j] = orig + step
        plus = loss_fn(flat.reshape(x.shape))
        flat[:, j] = orig - step
        minus = loss_fn(flat.reshape(x.shape))
        flat[:, j] = orig
        out[:, j] = (plus - minus) / (2.0 * step)
    return out.reshape(x.shape)


def max_relative_error(approx, exact) -> float:
    """max|a - b| scaled by the larger of the two infinity norms."""
    a = np.asarray(getattr(approx, "data", approx), dtype=np.float64)
    b = np.asarray(getattr(exact, "data", exact), dtype=np.float64)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(a - b)) / scale)
