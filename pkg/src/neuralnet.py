#!/usr/bin/env python3
"""
HierLoc neural network engine
Dense layers, inverted dropout, standard/LSTM cells, MSE, Adam and hand-written
backpropagation (including backpropagation through time) with a
finite-difference gradient checker.

Row-vector convention throughout: a layer computes activation(x @ W + b) for a
batch x of shape (rows, in).
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from tensor_core import (
    DTYPE,
    HierLocError,
    InitError,
    Matrix,
    SeededRng,
    ShapeError,
    as_matrix,
    glorot_uniform_init,
    matmul,
    shape_str,
)

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "tanh", "linear")
RNN_KINDS = ("standard", "lstm")
MODES = ("train", "eval")

Params = Dict[str, np.ndarray]
State = Tuple[np.ndarray, np.ndarray]


class TapeError(HierLocError, RuntimeError):
    pass


class GradientError(HierLocError, FloatingPointError):
    pass


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


def _accumulate(total: Params, new: Params) -> Params:
    for path, grad in new.items():
        if path in total:
            total[path] = total[path] + grad
        else:
            total[path] = grad
    return total


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activate(a: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(a, 0.0)
    if activation == "tanh":
        return np.tanh(a)
    if activation == "linear":
        return a
    raise InitError(f"unknown activation {activation!r}; expected one of {ACTIVATIONS}")


def activation_grad(a: np.ndarray, y: np.ndarray, dy: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return dy * (a > 0.0)
    if activation == "tanh":
        return dy * (1.0 - y * y)
    return dy


class GradientTape:
    """Forward intermediates keyed by layer path, plus the closure that replays them backwards"""

    def __init__(self):
        self._records: Dict[str, Any] = {}
        self._backward_fn: Optional[Callable[[float], Params]] = None

    def save(self, key: str, value: Any) -> None:
        self._records[key] = value

    def load(self, key: str) -> Any:
        try:
            return self._records[key]
        except KeyError:
            raise TapeError(f"no forward record for '{key}'; run a forward pass before backward") from None

    def bind(self, backward_fn: Callable[[float], Params]) -> None:
        self._backward_fn = backward_fn

    @property
    def has_forward(self) -> bool:
        return self._backward_fn is not None

    def reset(self) -> None:
        self._records.clear()
        self._backward_fn = None


def backward(tape: GradientTape, loss_grad: float = 1.0) -> Params:
    """Exact analytic gradients of the recorded scalar loss for every parameter path"""
    if not tape.has_forward:
        raise TapeError("backward called without a completed forward pass on this tape")
    return tape._backward_fn(loss_grad)


# ---------------------------------------------------------------- dense


@dataclass
class DenseLayer:
    weights: Matrix
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        self.weights = as_matrix(self.weights, "weights")
        self.bias = np.ascontiguousarray(self.bias, dtype=DTYPE).reshape(-1)
        if self.activation not in ACTIVATIONS:
            raise InitError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")
        if self.bias.shape[0] != self.weights.shape[1]:
            raise ShapeError(
                f"bias length {self.bias.shape[0]} does not match weights {shape_str(self.weights.shape)}"
            )

    @classmethod
    def create(cls, fan_in: int, fan_out: int, activation: str, rng: SeededRng) -> "DenseLayer":
        return cls(glorot_uniform_init(fan_in, fan_out, rng), np.zeros(fan_out, dtype=DTYPE), activation)

    @property
    def input_width(self) -> int:
        return self.weights.shape[0]

    @property
    def output_width(self) -> int:
        return self.weights.shape[1]


def dense_forward(layer: DenseLayer, x: Matrix, tape: Optional[GradientTape] = None, key: str = "dense") -> Matrix:
    if x.ndim != 2 or x.shape[1] != layer.input_width:
        raise ShapeError(
            f"dense layer '{key}' expects input width {layer.input_width}, got {shape_str(x.shape)}"
        )
    a = matmul(x, layer.weights) + layer.bias
    y = activate(a, layer.activation)
    if tape is not None:
        tape.save(key, (x, a, y))
    return y


def dense_backward(layer: DenseLayer, dy: Matrix, tape: GradientTape, key: str = "dense") -> Tuple[Matrix, Params]:
    x, a, y = tape.load(key)
    da = activation_grad(a, y, dy, layer.activation)
    grads = {"weights": x.T @ da, "bias": da.sum(axis=0)}
    return da @ layer.weights.T, grads


# ---------------------------------------------------------------- dropout


@dataclass(frozen=True)
class DropoutSpec:
    rate: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise InitError(f"dropout rate must lie in [0, 1), got {self.rate}")


def dropout_forward(
    spec: DropoutSpec,
    x: Matrix,
    mode: str,
    rng: Optional[SeededRng] = None,
    tape: Optional[GradientTape] = None,
    key: str = "dropout",
) -> Matrix:
    """Inverted dropout: identity in eval mode, survivors scaled by 1/(1-rate) in train mode"""
    _check_mode(mode)
    mask = None
    if mode == "train" and spec.rate > 0.0:
        if rng is None:
            raise InitError(f"dropout '{key}' needs a random stream in train mode")
        mask = (rng.random(x.shape) >= spec.rate) / (1.0 - spec.rate)
        y = x * mask
    else:
        y = x
    if tape is not None:
        tape.save(key, mask)
    return y


def dropout_backward(dy: Matrix, tape: GradientTape, key: str = "dropout") -> Matrix:
    mask = tape.load(key)
    return dy if mask is None else dy * mask


# ---------------------------------------------------------------- dense block

Step = Union[DenseLayer, DropoutSpec]


@dataclass
class DenseBlock:
    """Ordered dense layers with dropout interleaved where declared"""

    steps: List[Step]

    @classmethod
    def create(
        cls,
        input_width: int,
        widths: Sequence[int],
        activations: Sequence[str],
        rng: SeededRng,
        dropout_after: float = 0.0,
        dropout_before: float = 0.0,
        dropout_last: bool = True,
    ) -> "DenseBlock":
        steps: List[Step] = []
        if dropout_before > 0.0:
            steps.append(DropoutSpec(dropout_before))
        fan_in = input_width
        for i, (width, act) in enumerate(zip(widths, activations)):
            steps.append(DenseLayer.create(fan_in, width, act, rng))
            last = i == len(widths) - 1
            if dropout_after > 0.0 and (dropout_last or not last):
                steps.append(DropoutSpec(dropout_after))
            fan_in = width
        return cls(steps)

    @property
    def layers(self) -> List[DenseLayer]:
        return [s for s in self.steps if isinstance(s, DenseLayer)]

    @property
    def input_width(self) -> int:
        return self.layers[0].input_width

    @property
    def output_width(self) -> int:
        return self.layers[-1].output_width

    def parameters(self, prefix: str = "") -> Params:
        params: Params = {}
        for i, layer in enumerate(self.layers):
            params[f"{prefix}{i}.weights"] = layer.weights
            params[f"{prefix}{i}.bias"] = layer.bias
        return params

    def forward(
        self,
        x: Matrix,
        mode: str = "eval",
        rng: Optional[SeededRng] = None,
        tape: Optional[GradientTape] = None,
        key: str = "block",
    ) -> Matrix:
        for j, step in enumerate(self.steps):
            if isinstance(step, DenseLayer):
                x = dense_forward(step, x, tape, f"{key}.{j}")
            else:
                x = dropout_forward(step, x, mode, rng, tape, f"{key}.{j}")
        return x

    def backward(self, dy: Matrix, tape: GradientTape, key: str = "block", prefix: str = "") -> Tuple[Matrix, Params]:
        grads: Params = {}
        dense_index = len(self.layers)
        for j in reversed(range(len(self.steps))):
            step = self.steps[j]
            if isinstance(step, DenseLayer):
                dense_index -= 1
                dy, g = dense_backward(step, dy, tape, f"{key}.{j}")
                grads[f"{prefix}{dense_index}.weights"] = g["weights"]
                grads[f"{prefix}{dense_index}.bias"] = g["bias"]
            else:
                dy = dropout_backward(dy, tape, f"{key}.{j}")
        return dy, grads

    def loss(self, inputs: Matrix, target: Matrix, tape: Optional[GradientTape] = None) -> float:
        pred = self.forward(inputs, "eval", None, tape, "block")
        value = mse_loss(pred, target)
        if tape is not None:
            tape.bind(lambda scale: self.backward(mse_grad(pred, target) * scale, tape, "block")[1])
        return value


# ---------------------------------------------------------------- recurrent cells


@dataclass
class RnnCell:
    kind: str
    input_weights: Matrix
    recurrent_weights: Matrix
    biases: np.ndarray
    hidden_size: int

    def __post_init__(self):
        if self.kind not in RNN_KINDS:
            raise InitError(f"unknown rnn kind {self.kind!r}; expected one of {RNN_KINDS}")
        self.input_weights = as_matrix(self.input_weights, "input_weights")
        self.recurrent_weights = as_matrix(self.recurrent_weights, "recurrent_weights")
        self.biases = np.ascontiguousarray(self.biases, dtype=DTYPE).reshape(-1)
        width = self.gate_count * self.hidden_size
        if (
            self.input_weights.shape[1] != width
            or self.recurrent_weights.shape != (self.hidden_size, width)
            or self.biases.shape[0] != width
        ):
            raise ShapeError(
                f"{self.kind} cell of hidden size {self.hidden_size} needs gate width {width}; got "
                f"W {shape_str(self.input_weights.shape)}, U {shape_str(self.recurrent_weights.shape)}, "
                f"b {self.biases.shape[0]}"
            )

    @property
    def gate_count(self) -> int:
        return 4 if self.kind == "lstm" else 1

    @property
    def input_size(self) -> int:
        return self.input_weights.shape[0]

    @classmethod
    def create(cls, kind: str, input_size: int, hidden_size: int, rng: SeededRng) -> "RnnCell":
        gates = 4 if kind == "lstm" else 1
        width = gates * hidden_size
        return cls(
            kind,
            glorot_uniform_init(input_size, width, rng),
            glorot_uniform_init(hidden_size, width, rng),
            np.zeros(width, dtype=DTYPE),
            hidden_size,
        )

    def parameters(self, prefix: str = "") -> Params:
        return {
            f"{prefix}input_weights": self.input_weights,
            f"{prefix}recurrent_weights": self.recurrent_weights,
            f"{prefix}biases": self.biases,
        }

    def initial_state(self, rows: int) -> State:
        return np.zeros((rows, self.hidden_size), dtype=DTYPE), np.zeros((rows, self.hidden_size), dtype=DTYPE)


def rnn_step(
    cell: RnnCell,
    x: np.ndarray,
    state: State,
    tape: Optional[GradientTape] = None,
    key: str = "cell",
) -> Tuple[np.ndarray, State]:
    """One recurrence step; accepts a single vector or a batch of row vectors"""
    vector = np.ndim(x) == 1
    x2 = as_matrix(x, "x")
    h = as_matrix(state[0], "h")
    c = as_matrix(state[1], "c")
    if x2.shape[1] != cell.input_size or h.shape != (x2.shape[0], cell.hidden_size) or c.shape != h.shape:
        raise ShapeError(
            f"{cell.kind} cell '{key}' expects x (*, {cell.input_size}) and state (*, {cell.hidden_size}); "
            f"got x {shape_str(x2.shape)}, h {shape_str(h.shape)}, c {shape_str(c.shape)}"
        )
    z = matmul(x2, cell.input_weights) + matmul(h, cell.recurrent_weights) + cell.biases
    if cell.kind == "standard":
        h_next = np.maximum(z, 0.0)
        c_next = c
        cache = (x2, h, c, z)
    else:
        n = cell.hidden_size
        i = sigmoid(z[:, :n])
        f = sigmoid(z[:, n:2 * n])
        o = sigmoid(z[:, 2 * n:3 * n])
        g = np.tanh(z[:, 3 * n:])
        c_next = f * c + i * g
        tanh_c = np.tanh(c_next)
        h_next = o * tanh_c
        cache = (x2, h, c, (i, f, o, g, tanh_c))
    if tape is not None:
        tape.save(key, cache)
    if vector:
        return h_next[0], (h_next[0], c_next[0])
    return h_next, (h_next, c_next)


def rnn_step_backward(
    cell: RnnCell,
    dh_next: Matrix,
    dc_next: Matrix,
    tape: GradientTape,
    key: str = "cell",
) -> Tuple[Matrix, Matrix, Matrix, Params]:
    """Returns (dx, dh_prev, dc_prev, parameter grads) for one recorded step"""
    x, h, c, extra = tape.load(key)
    if cell.kind == "standard":
        dz = dh_next * (extra > 0.0)
        dc_prev = dc_next
    else:
        i, f, o, g, tanh_c = extra
        do = dh_next * tanh_c
        dc = dc_next + dh_next * o * (1.0 - tanh_c * tanh_c)
        di = dc * g
        dg = dc * i
        df = dc * c
        dc_prev = dc * f
        dz = np.concatenate(
            [di * i * (1.0 - i), df * f * (1.0 - f), do * o * (1.0 - o), dg * (1.0 - g * g)],
            axis=1,
        )
    grads = {
        "input_weights": x.T @ dz,
        "recurrent_weights": h.T @ dz,
        "biases": dz.sum(axis=0),
    }
    return dz @ cell.input_weights.T, dz @ cell.recurrent_weights.T, dc_prev, grads


@dataclass
class RnnStack:
    """Stacked cells; the output of layer l is the input of layer l+1 at the same step"""

    cells: List[RnnCell]

    @classmethod
    def create(cls, kind: str, input_size: int, hidden_size: int, layers: int, rng: SeededRng) -> "RnnStack":
        cells = []
        for layer in range(layers):
            cells.append(RnnCell.create(kind, input_size if layer == 0 else hidden_size, hidden_size, rng))
        return cls(cells)

    @property
    def hidden_size(self) -> int:
        return self.cells[-1].hidden_size

    def parameters(self, prefix: str = "") -> Params:
        params: Params = {}
        for layer, cell in enumerate(self.cells):
            params.update(cell.parameters(f"{prefix}{layer}."))
        return params

    def initial_states(self, rows: int) -> List[State]:
        return [cell.initial_state(rows) for cell in self.cells]

    def step(
        self, x: Matrix, states: List[State], tape: Optional[GradientTape] = None, key: str = "rnn"
    ) -> Tuple[Matrix, List[State]]:
        new_states = []
        out = x
        for layer, cell in enumerate(self.cells):
            out, state = rnn_step(cell, out, states[layer], tape, f"{key}.{layer}")
            new_states.append(state)
        return out, new_states

    def step_backward(
        self,
        d_top: Matrix,
        d_states_next: List[State],
        tape: GradientTape,
        key: str = "rnn",
        prefix: str = "",
    ) -> Tuple[Matrix, List[State], Params]:
        """d_states_next holds the gradients reaching this step's emitted states from the following step"""
        grads: Params = {}
        d_prev: List[State] = [None] * len(self.cells)
        d_out = d_top
        for layer in reversed(range(len(self.cells))):
            dh = d_states_next[layer][0] + d_out
            dc = d_states_next[layer][1]
            dx, dh_prev, dc_prev, g = rnn_step_backward(self.cells[layer], dh, dc, tape, f"{key}.{layer}")
            for name, value in g.items():
                grads[f"{prefix}{layer}.{name}"] = value
            d_prev[layer] = (dh_prev, dc_prev)
            d_out = dx
        return d_out, d_prev, grads

    def zero_state_grads(self, rows: int) -> List[State]:
        return [cell.initial_state(rows) for cell in self.cells]

    def loss(self, inputs: Sequence[Matrix], target: Sequence[Matrix], tape: Optional[GradientTape] = None) -> float:
        """Sum over steps of MSE between the top hidden state and that step's target"""
        rows = inputs[0].shape[0]
        states = self.initial_states(rows)
        outputs = []
        for t, x in enumerate(inputs):
            out, states = self.step(x, states, tape, f"rnn.t{t}")
            outputs.append(out)
        value = sum(mse_loss(out, tgt) for out, tgt in zip(outputs, target))

        def replay(scale: float) -> Params:
            grads: Params = {}
            d_states = self.zero_state_grads(rows)
            for t in reversed(range(len(inputs))):
                d_top = mse_grad(outputs[t], target[t]) * scale
                _, d_states, g = self.step_backward(d_top, d_states, tape, f"rnn.t{t}")
                _accumulate(grads, g)
            return grads

        if tape is not None:
            tape.bind(replay)
        return float(value)


# ---------------------------------------------------------------- loss


def mse_loss(pred: Matrix, target: Matrix) -> float:
    pred = np.asarray(pred, dtype=DTYPE)
    target = np.asarray(target, dtype=DTYPE)
    if pred.shape != target.shape:
        raise ShapeError(f"mse needs identical shapes, got {shape_str(pred.shape)} and {shape_str(target.shape)}")
    diff = pred - target
    return float(np.mean(diff * diff))


def mse_grad(pred: Matrix, target: Matrix) -> Matrix:
    return 2.0 * (pred - target) / pred.size


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)


def adam_update(state: AdamState, params: Params, grads: Params) -> Params:
    """One bias-corrected Adam step applied in place to every parameter that has a gradient"""
    for path in sorted(grads):
        if path not in params:
            raise ShapeError(f"gradient for unknown parameter '{path}'")
        if grads[path].shape != params[path].shape:
            raise ShapeError(
                f"gradient for '{path}' has shape {shape_str(grads[path].shape)}, "
                f"parameter has {shape_str(params[path].shape)}"
            )
        if not np.all(np.isfinite(grads[path])):
            raise GradientError(f"non-finite gradient for parameter '{path}'")

    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for path in sorted(grads):
        g = grads[path]
        if path not in state.m:
            state.m[path] = np.zeros_like(params[path])
            state.v[path] = np.zeros_like(params[path])
        m = state.m[path]
        v = state.v[path]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[path] -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return params


def snapshot(params: Params) -> Params:
    return {path: value.copy() for path, value in params.items()}


def restore(params: Params, saved: Params) -> None:
    for path, value in saved.items():
        np.copyto(params[path], value)


# ---------------------------------------------------------------- gradient check


class Network(Protocol):
    def parameters(self) -> Params: ...

    def loss(self, inputs: Any, target: Any, tape: Optional[GradientTape] = None) -> float: ...


def analytic_gradients(network: Network, inputs: Any, target: Any) -> Params:
    tape = GradientTape()
    network.loss(inputs, target, tape)
    return backward(tape)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def offset_biases(params: Params, rng: SeededRng, low: float = 0.05, high: float = 0.5) -> Params:
    """Draw every bias from U(low, high) so no ReLU pre-activation sits exactly on the kink"""
    for path, value in params.items():
        if path.rsplit(".", 1)[-1] in ("bias", "biases"):
            value[...] = rng.uniform(low, high, value.shape)
    return params


def gradient_check(network: Network, inputs: Any, target: Any, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients over trainable entries"""
    grads = analytic_gradients(network, inputs, target)
    frozen = tuple(getattr(network, "frozen", ()))
    worst = 0.0
    for path, param in network.parameters().items():
        if frozen and path.startswith(frozen):
            continue
        analytic = grads.get(path, np.zeros_like(param))
        for idx in np.ndindex(param.shape):
            original = param[idx]
            param[idx] = original + h
            plus = network.loss(inputs, target)
            param[idx] = original - h
            minus = network.loss(inputs, target)
            param[idx] = original
            numeric = (plus - minus) / (2.0 * h)
            worst = max(worst, relative_error(float(analytic[idx]), numeric))
    logger.debug(f"gradient check max relative error {worst:.3e}")
    return worst
