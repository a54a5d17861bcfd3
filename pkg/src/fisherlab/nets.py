"""Model specifications, initialization, logits and cross-entropy."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    GradOracle,
    Layout,
    ParamVector,
    Tape,
    Var,
    as_tensor,
    check_finite,
    make_layout,
)

KINDS = ("linear", "mlp", "conv")
ACTIVATIONS = ("relu", "tanh")


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    ``linear`` is a single dense layer to the logits (multinomial logistic
    regression). ``mlp`` stacks ``hidden`` dense layers. ``conv`` is the fixed
    conv-act-pool-conv-act-pool-dense stack with 3x3 kernels and 2x2 max
    pooling; ``channels`` gives the two conv widths and inputs are (C, H, W)
    with H and W divisible by 4.
    """

    kind: str
    input_shape: tuple[int, ...]
    n_classes: int
    hidden: tuple[int, ...] = ()
    activation: str = "relu"
    channels: tuple[int, int] = (8, 16)
    kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(s) for s in self.hidden))
        object.__setattr__(self, "channels", tuple(int(s) for s in self.channels))
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.kind == "mlp" and not self.hidden:
            raise ValueError("an MLP needs at least one hidden layer")
        if self.kind == "linear" and self.hidden:
            raise ValueError("a linear model has no hidden layers")
        if self.kind == "conv":
            if len(self.input_shape) != 3:
                raise ValueError("conv input_shape must be (channels, height, width)")
            if self.input_shape[1] % 4 or self.input_shape[2] % 4:
                raise ValueError("conv input height/width must be divisible by 4")
            if len(self.channels) != 2:
                raise ValueError("conv needs exactly two channel counts")

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_shape))

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        c = self.n_classes
        shapes: list[tuple[str, tuple[int, ...]]] = []
        if self.kind == "conv":
            cin, h, w = self.input_shape
            c1, c2 = self.channels
            k = self.kernel
            shapes += [("conv0.weight", (c1, cin, k, k)), ("conv0.bias", (c1,))]
            shapes += [("conv1.weight", (c2, c1, k, k)), ("conv1.bias", (c2,))]
            flat = c2 * (h // 4) * (w // 4)
            shapes += [("out.weight", (flat, c)), ("out.bias", (c,))]
            return shapes
        widths = (self.input_size,) + self.hidden
        for i in range(len(self.hidden)):
            shapes += [(f"fc{i}.weight", (widths[i], widths[i + 1])), (f"fc{i}.bias", (widths[i + 1],))]
        shapes += [("out.weight", (widths[-1], c)), ("out.bias", (c,))]
        return shapes

    @property
    def layout(self) -> Layout:
        return make_layout(self.param_shapes())

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.param_shapes())


def init_params(spec: ModelSpec, scheme: str = "he", seed: int = 0, scale: float = 1.0) -> ParamVector:
    """Draw initial parameters.

    ``he``: N(0, 2/fan_in) weights, zero biases. ``lecun``: N(0, 1/fan_in).
    ``zeros``: everything zero. ``scale`` multiplies the weight std.
    """
    layout = spec.layout
    theta = ParamVector.zeros(layout)
    if scheme == "zeros":
        return theta
    if scheme not in ("he", "lecun"):
        raise ValueError(f"unknown init scheme {scheme!r}")
    gain = 2.0 if scheme == "he" else 1.0
    rng = np.random.default_rng(seed)
    for slot in layout:
        if slot.name.endswith(".bias"):
            continue
        if len(slot.shape) == 4:  # conv (out, in, k, k)
            fan_in = slot.shape[1] * slot.shape[2] * slot.shape[3]
        else:
            fan_in = slot.shape[0]
        std = scale * np.sqrt(gain / fan_in)
        theta.view(slot.name)[...] = rng.normal(0.0, std, size=slot.shape)
    return theta


def _prepare_inputs(spec: ModelSpec, inputs) -> np.ndarray:
    x = as_tensor(inputs, "inputs")
    if x.ndim < 1 or x.shape[0] == 0:
        raise ShapeError("empty batch")
    per_example = int(np.prod(x.shape[1:]))
    if per_example != spec.input_size:
        raise ShapeError(
            f"inputs carry {per_example} features per example, model expects {spec.input_shape}"
        )
    if spec.kind == "conv":
        return x.reshape((x.shape[0],) + spec.input_shape)
    return x.reshape(x.shape[0], -1)


def build_logits(tape: Tape, spec: ModelSpec, params: list[Var], x: Var) -> Var:
    act = tape.relu if spec.activation == "relu" else tape.tanh
    if spec.kind == "conv":
        w0, b0, w1, b1, wo, bo = params
        h = tape.maxpool2(act(tape.add_channel_bias(tape.conv2d(x, w0), b0)))
        h = tape.maxpool2(act(tape.add_channel_bias(tape.conv2d(h, w1), b1)))
        h = tape.reshape(h, (h.shape[0], -1))
        return tape.add_bias(tape.matmul(h, wo), bo)
    h = x
    n_hidden = len(spec.hidden)
    for i in range(n_hidden):
        h = act(tape.add_bias(tape.matmul(h, params[2 * i]), params[2 * i + 1]))
    return tape.add_bias(tape.matmul(h, params[-2]), params[-1])


def forward_logits(spec: ModelSpec, theta: ParamVector, inputs) -> np.ndarray:
    theta.check_layout(spec.layout)
    x = _prepare_inputs(spec, inputs)
    tape = Tape()
    params = [tape.leaf(a) for a in theta.arrays()]
    logits = build_logits(tape, spec, params, tape.leaf(x)).value
    return check_finite(logits, "logits")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(labels, n_rows: int, n_classes: int) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.ndim == 2:
        if arr.shape != (n_rows, n_classes):
            raise ShapeError("soft target matrix has the wrong shape")
        return arr.astype(np.float64)
    arr = arr.astype(np.int64)
    if arr.shape != (n_rows,):
        raise ShapeError("label vector length does not match the batch")
    if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
        raise ValueError("label out of range")
    return arr


def per_example_cross_entropy(logits, labels) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    y = _check_labels(labels, z.shape[0], z.shape[1])
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    if y.ndim == 2:
        return -(y * logp).sum(axis=1)
    return -logp[np.arange(z.shape[0]), y]


def softmax_cross_entropy(logits, labels) -> float:
    """Mean cross-entropy; ``labels`` may be integer classes or soft targets."""
    return float(per_example_cross_entropy(logits, labels).mean())


def predict_and_accuracy(logits, labels) -> tuple[np.ndarray, float]:
    z = np.asarray(logits)
    preds = np.argmax(z, axis=1)  # first maximum wins ties
    y = np.asarray(labels)
    if y.ndim == 2:
        y = np.argmax(y, axis=1)
    return preds, float(np.mean(preds == y)) if len(y) else 0.0


# ---------------------------------------------------------------------------
# Gradients through the model
# ---------------------------------------------------------------------------


def _run(spec, theta, x, targets, weights, per_example=False, want_input=False):
    tape = Tape()
    params = [tape.leaf(a) for a in theta.arrays()]
    xv = tape.leaf(x)
    logits = build_logits(tape, spec, params, xv)
    check_finite(logits.value, "logits")
    loss = tape.softmax_xent(logits, targets, weights)
    wrt = params + [xv] if want_input else params
    grads = tape.backward(loss, wrt, per_example=per_example)
    return loss, logits.value, grads


@dataclass
class ModelOracle(GradOracle):
    """Binds a model, inputs and (frozen) targets.

    The bound objective is ``sum_i weights[i] * loss_i``; the default weights
    1/B give the mean loss. ``targets`` are integer labels or soft targets.
    """

    spec: ModelSpec
    inputs: np.ndarray
    targets: np.ndarray
    weights: np.ndarray | None = None
    layout: Layout = field(init=False)

    def __post_init__(self):
        self.inputs = _prepare_inputs(self.spec, self.inputs)
        n = self.inputs.shape[0]
        self.targets = _check_labels(self.targets, n, self.spec.n_classes)
        if self.weights is None:
            self.weights = np.full(n, 1.0 / n)
        else:
            self.weights = as_tensor(self.weights, "weights")
        self.layout = self.spec.layout

    @property
    def n_examples(self) -> int:
        return self.inputs.shape[0]

    def __call__(self, theta):
        theta.check_layout(self.layout)
        loss, _, grads = _run(self.spec, theta, self.inputs, self.targets, self.weights)
        value = float(loss.value)
        check_finite(np.asarray(value), "loss")
        flat = np.concatenate([g.reshape(-1) for g in grads])
        check_finite(flat, "gradient")
        return value, ParamVector(flat, self.layout)

    def loss(self, theta):
        theta.check_layout(self.layout)
        logits = forward_logits(self.spec, theta, self.inputs)
        value = float(np.dot(self.weights, per_example_cross_entropy(logits, self.targets)))
        check_finite(np.asarray(value), "loss")
        return value

    def per_example(self, theta, chunk: int = 1024) -> np.ndarray:
        """Rows are gradients of each example's own (unweighted) loss."""
        theta.check_layout(self.layout)
        n = self.n_examples
        out = np.empty((n, theta.data.size))
        for start in range(0, n, chunk):
            stop = min(n, start + chunk)
            _, _, grads = _run(
                self.spec,
                theta,
                self.inputs[start:stop],
                self.targets[start:stop],
                np.ones(stop - start),
                per_example=True,
            )
            col = 0
            for g in grads:
                width = g[0].size
                out[start:stop, col : col + width] = g.reshape(stop - start, -1)
                col += width
        return check_finite(out, "per-example gradients")


def value_and_input_grad(spec: ModelSpec, theta: ParamVector, inputs, labels) -> tuple[float, np.ndarray]:
    """Mean loss and the per-example input gradients d loss_i / d x_i."""
    theta.check_layout(spec.layout)
    raw = as_tensor(inputs, "inputs")
    x = _prepare_inputs(spec, raw)
    y = _check_labels(labels, x.shape[0], spec.n_classes)
    loss, _, grads = _run(spec, theta, x, y, np.ones(x.shape[0]), want_input=True)
    gx = check_finite(grads[-1], "input gradient")
    value = float(loss.value) / x.shape[0]
    check_finite(np.asarray(value), "loss")
    return value, gx.reshape(raw.shape)
