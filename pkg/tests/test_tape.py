import numpy as np
import pytest

from invda.core import GradientTape, TapeError, backward, finite_difference_gradient
from invda.core import ops
from invda.core.fd import relative_gradient_error


def test_product_rule():
    tape = GradientTape()
    x = tape.leaf(np.asarray(2.0))
    y = tape.leaf(np.asarray(3.0))
    f = ops.mul(x, y)
    gx, gy = backward(tape, f)
    assert gx == pytest.approx(3.0)
    assert gy == pytest.approx(2.0)


def test_silu_gradient_at_zero():
    # d/dx silu(x) = sigmoid(x) (1 + x (1 - sigmoid(x))) = 1/2 at x = 0
    tape = GradientTape()
    x = tape.leaf(np.asarray(0.0))
    (g,) = backward(tape, ops.silu(x))
    assert g == pytest.approx(0.5, abs=1e-12)


def test_consumers_accumulate():
    # f = x*x + x -> df/dx = 2x + 1
    tape = GradientTape()
    x = tape.leaf(np.asarray(3.0))
    f = ops.add(ops.mul(x, x), x)
    (g,) = backward(tape, f)
    assert g == pytest.approx(7.0)


def test_non_scalar_output_rejected():
    tape = GradientTape()
    x = tape.leaf(np.ones(4))
    y = ops.mul(x, x)
    with pytest.raises(TapeError):
        backward(tape, y)


def test_single_sweep_contract():
    tape = GradientTape()
    x = tape.leaf(np.asarray(1.0))
    f = ops.mul(x, x)
    backward(tape, f)
    with pytest.raises(TapeError):
        backward(tape, f)
    with pytest.raises(TapeError):
        tape.leaf(np.asarray(2.0))


def test_unused_leaf_gets_zero():
    tape = GradientTape()
    x = tape.leaf(np.asarray(1.0))
    z = tape.leaf(np.ones(3))
    f = ops.mul(x, x)
    gx, gz = backward(tape, f)
    assert gx == pytest.approx(2.0)
    np.testing.assert_array_equal(gz, np.zeros(3))


def test_mixed_tapes_rejected():
    t1, t2 = GradientTape(), GradientTape()
    x = t1.leaf(np.asarray(1.0))
    y = t2.leaf(np.asarray(2.0))
    with pytest.raises(TapeError):
        ops.mul(x, y)


# ---------------------------------------------------------------------------
# randomized composite programs vs the finite-difference oracle
# ---------------------------------------------------------------------------

def _random_program(rng, depth):
    """A random composite of primitives with <= depth stages, as a closure
    usable both on Vars and raw arrays."""
    stages = []
    for _ in range(depth):
        stages.append(rng.choice(["add", "mul", "silu", "roll", "upsample",
                                  "sub", "scale", "neg"]))
    consts = [rng.normal(size=(4, 6)) for _ in range(depth)]

    def run(x):
        h = x
        for op, c in zip(stages, consts):
            if op == "add":
                h = ops.add(h, c)
            elif op == "sub":
                h = ops.sub(c, h)
            elif op == "mul":
                h = ops.mul(h, c)
            elif op == "silu":
                h = ops.silu(h)
            elif op == "roll":
                h = ops.roll(h, 1, 1)
            elif op == "neg":
                h = ops.neg(h)
            elif op == "scale":
                h = ops.scale(h, 0.7)
            elif op == "upsample":
                h = ops.subsample(ops.upsample2(h, 1), (2,), (1,))
        return ops.mean(ops.silu(h))

    return run


@pytest.mark.parametrize("seed", range(12))
def test_random_composites_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    depth = int(rng.integers(1, 7))
    program = _random_program(rng, depth)
    x0 = rng.normal(size=(4, 6))

    tape = GradientTape()
    xv = tape.leaf(x0)
    (g,) = backward(tape, program(xv))

    g_fd = finite_difference_gradient(lambda z: float(ops.value_of(program(z))), x0)
    assert relative_gradient_error(g, g_fd) < 1e-5


def test_matmul_gradient():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(5, 4))
    x0 = rng.normal(size=4)

    def f(x):
        return ops.sum_sq(ops.matmul(a, x))

    tape = GradientTape()
    xv = tape.leaf(x0)
    (g,) = backward(tape, f(xv))
    np.testing.assert_allclose(g, 2.0 * a.T @ (a @ x0), rtol=1e-12)


def test_custom_vjp_node():
    # custom rule for y = 3x, checked through the sweep
    def triple(x):
        return ops.custom(3.0 * ops.value_of(x), (x,), lambda g: (3.0 * g,))

    tape = GradientTape()
    x = tape.leaf(np.arange(3.0))
    (g,) = backward(tape, ops.total(triple(x)))
    np.testing.assert_array_equal(g, 3.0 * np.ones(3))
