#!/usr/bin/env python3
"""
HierLoc neural network engine tests
Forward kernels, dropout, recurrent cells, Adam and gradient checks
"""

import sys
from pathlib import Path

# Add src to path
sys.path.insert(0, str(Path(__file__).parent / 'src'))

try:
    import numpy as np
    from tensor_core import InitError, SeededRng, ShapeError
    from neuralnet import (
        AdamState,
        DenseBlock,
        DenseLayer,
        DropoutSpec,
        GradientError,
        GradientTape,
        RnnCell,
        RnnStack,
        TapeError,
        adam_update,
        analytic_gradients,
        backward,
        dense_forward,
        dropout_forward,
        gradient_check,
        mse_grad,
        mse_loss,
        offset_biases,
        relative_error,
        restore,
        rnn_step,
        sigmoid,
        snapshot,
    )
except ImportError as e:
    print(f"❌ Import error: {e}")
    print("Make sure you're running from the project root and dependencies are installed")
    sys.exit(1)

TOLERANCE = 1e-4


def test_dense_forward_relu():
    layer = DenseLayer(np.eye(2), np.zeros(2), "relu")
    assert np.array_equal(dense_forward(layer, np.array([[1.0, -2.0]])), [[1.0, 0.0]])
    linear = DenseLayer(np.array([[1.0], [2.0]]), np.array([0.5]), "linear")
    assert np.allclose(dense_forward(linear, np.array([[1.0, 1.0]])), [[3.5]])


def test_dense_forward_rejects_wrong_width():
    layer = DenseLayer.create(3, 2, "tanh", SeededRng(0))
    try:
        dense_forward(layer, np.zeros((4, 5)))
    except ShapeError as e:
        assert "4x5" in str(e)
    else:
        raise AssertionError("wrong input width was accepted")


def test_unknown_activation():
    try:
        DenseLayer(np.eye(2), np.zeros(2), "swish")
    except InitError:
        return
    raise AssertionError("unknown activation was accepted")


def test_sigmoid_is_stable():
    out = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    assert np.all(np.isfinite(out))
    assert np.allclose(out, [0.0, 0.5, 1.0])


def test_dropout_eval_is_identity():
    x = np.arange(12.0).reshape(3, 4)
    assert np.array_equal(dropout_forward(DropoutSpec(0.5), x, "eval"), x)
    assert np.array_equal(dropout_forward(DropoutSpec(0.0), x, "train", SeededRng(0)), x)


def test_dropout_train_scales_survivors():
    x = np.ones((200, 50))
    y = dropout_forward(DropoutSpec(0.2), x, "train", SeededRng(3))
    survivors = y[y != 0.0]
    assert np.allclose(survivors, 1.0 / 0.8)
    dropped = 1.0 - survivors.size / y.size
    assert abs(dropped - 0.2) < 0.02


def test_dropout_rate_bounds():
    for bad in (-0.1, 1.0):
        try:
            DropoutSpec(bad)
        except InitError:
            continue
        raise AssertionError(f"dropout rate {bad} was accepted")


def test_lstm_step_with_zero_weights():
    """All gates at 0.5 and g = 0: c' = 0.5 c, h' = 0.5 tanh(c')"""
    cell = RnnCell("lstm", np.zeros((1, 4)), np.zeros((1, 4)), np.zeros(4), 1)
    h, (h2, c) = rnn_step(cell, np.array([0.7]), (np.zeros(1), np.ones(1)))
    assert abs(c[0] - 0.5) < 1e-12
    assert abs(h[0] - 0.231059) < 1e-6
    assert np.array_equal(h, h2)


def test_standard_step():
    cell = RnnCell("standard", np.array([[1.0, -1.0]]), np.eye(2), np.array([0.0, 0.5]), 2)
    h, (_, c) = rnn_step(cell, np.array([2.0]), (np.array([1.0, 1.0]), np.array([3.0, 4.0])))
    assert np.allclose(h, [3.0, 0.0])
    # the standard cell carries c through unchanged
    assert np.array_equal(c, [3.0, 4.0])


def test_rnn_step_shape_mismatch():
    cell = RnnCell.create("lstm", 3, 2, SeededRng(0))
    try:
        rnn_step(cell, np.zeros(4), cell.initial_state(1))
    except ShapeError:
        return
    raise AssertionError("wrong input size was accepted")


def test_mse():
    pred = np.array([[1.0, 2.0]])
    target = np.array([[0.0, 0.0]])
    assert mse_loss(pred, target) == 2.5
    assert np.allclose(mse_grad(pred, target), [[1.0, 2.0]])


def test_adam_first_step():
    params = {"w": np.array([1.0])}
    adam_update(AdamState(), params, {"w": np.array([0.5])})
    assert abs(params["w"][0] - 0.999) < 1e-7


def test_adam_rejects_nan_gradient():
    params = {"layer.weights": np.array([1.0, 2.0]), "layer.bias": np.array([0.0])}
    state = AdamState()
    try:
        adam_update(state, params, {"layer.weights": np.array([np.nan, 0.0]), "layer.bias": np.array([1.0])})
    except GradientError as e:
        assert "layer.weights" in str(e)
    else:
        raise AssertionError("NaN gradient was accepted")
    assert np.array_equal(params["layer.weights"], [1.0, 2.0])
    assert params["layer.bias"][0] == 0.0
    assert state.t == 0


def test_backward_without_forward():
    try:
        backward(GradientTape())
    except TapeError:
        return
    raise AssertionError("backward without forward was accepted")


def test_snapshot_restore():
    block = DenseBlock.create(3, [2], ["tanh"], SeededRng(0))
    params = block.parameters()
    saved = snapshot(params)
    for value in params.values():
        value += 1.0
    restore(params, saved)
    for path, value in block.parameters().items():
        assert np.array_equal(value, saved[path])


def test_gradient_check_dense():
    rng = SeededRng(11)
    x = rng.uniform(-1.0, 1.0, (4, 5))
    for act in ("relu", "tanh", "linear"):
        block = DenseBlock.create(5, [4, 3], [act, act], rng.child(act))
        offset_biases(block.parameters(), rng.child(f"{act}-bias"))
        error = gradient_check(block, x, rng.uniform(-1.0, 1.0, (4, 3)))
        assert error <= TOLERANCE, f"{act}: {error:.3e}"


def test_gradient_check_two_step_unroll():
    rng = SeededRng(12)
    for kind in ("standard", "lstm"):
        stack = RnnStack.create(kind, 3, 4, 2, rng.child(kind))
        offset_biases(stack.parameters(), rng.child(f"{kind}-bias"))
        inputs = [rng.uniform(-1.0, 1.0, (2, 3)) for _ in range(2)]
        targets = [rng.uniform(-1.0, 1.0, (2, 4)) for _ in range(2)]
        error = gradient_check(stack, inputs, targets)
        assert error <= TOLERANCE, f"{kind}: {error:.3e}"


class _Quadratic:
    """loss = scale * sum(w^2), with a backward that optionally drops the gradient"""

    def __init__(self, scale: float, broken: bool, frozen=()):
        self.w = np.array([5.0, -8.0])
        self.v = np.array([0.5])
        self.scale = scale
        self.broken = broken
        self.frozen = frozen

    def parameters(self):
        return {"w": self.w, "v": self.v}

    def loss(self, inputs, target, tape=None):
        if tape is not None:
            tape.bind(lambda g: {
                "w": np.zeros(2) if self.broken else 2.0 * self.scale * g * self.w,
                "v": 2.0 * self.scale * g * self.v,
            })
        return float(self.scale * (np.sum(self.w ** 2) + np.sum(self.v ** 2)))


def test_gradient_check_catches_tiny_wrong_gradients():
    assert gradient_check(_Quadratic(1e-9, broken=False), None, None) <= TOLERANCE
    assert gradient_check(_Quadratic(1e-9, broken=True), None, None) > 0.5
    assert relative_error(0.0, 2e-8) == 1.0
    assert abs(relative_error(0.0, 1e-9) - 0.1) < 1e-12


def test_gradient_check_skips_frozen_entries():
    network = _Quadratic(1.0, broken=True, frozen=("w",))
    assert gradient_check(network, None, None) <= TOLERANCE
    assert np.array_equal(analytic_gradients(network, None, None)["w"], np.zeros(2))


def test_lstm_hidden_state_is_bounded():
    rng = SeededRng(5)
    cell = RnnCell.create("lstm", 6, 4, rng)
    for value in cell.parameters().values():
        value *= 25.0
    state = cell.initial_state(8)
    for _ in range(2):
        h, state = rnn_step(cell, rng.uniform(-50.0, 50.0, (8, 6)), state)
        assert np.all(np.abs(h) < 1.0)


def test_dropout_preserves_mean():
    x = np.full((400, 250), 2.0)
    y = dropout_forward(DropoutSpec(0.5), x, "train", SeededRng(8))
    assert abs(y.mean() - 2.0) < 0.05


def test_adam_zero_gradient_is_a_no_op():
    params = {"w": np.array([0.3, -1.2]), "b": np.array([4.0])}
    state = AdamState()
    for _ in range(3):
        adam_update(state, params, {"w": np.zeros(2), "b": np.zeros(1)})
    assert np.array_equal(params["w"], [0.3, -1.2]) and params["b"][0] == 4.0


def test_block_parameter_paths():
    block = DenseBlock.create(4, [3, 2], ["relu", "linear"], SeededRng(0), dropout_after=0.2, dropout_last=False)
    assert list(block.parameters("common.")) == [
        "common.0.weights", "common.0.bias", "common.1.weights", "common.1.bias",
    ]
    assert sum(isinstance(s, DropoutSpec) for s in block.steps) == 1


TESTS = [obj for name, obj in list(globals().items()) if name.startswith("test_") and callable(obj)]


def main():
    """Run all tests"""
    print("🧠 HierLoc neural network tests\n")
    failed = 0
    for test in TESTS:
        try:
            test()
            print(f"✅ {test.__name__}")
        except Exception as e:
            failed += 1
            print(f"❌ {test.__name__}: {e!r}")
    print("\n" + "=" * 50)
    print("🎉 All neural network tests passed!" if not failed else f"❌ {failed} test(s) failed")
    return 0 if not failed else 1


if __name__ == "__main__":
    sys.exit(main())
