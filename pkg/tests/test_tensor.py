import math

import numpy as np
import pytest
import torch

from styldiff import tensor as T
from styldiff.tensor import AdamState, ParamSet, Tape, adam_step


def f64(*xs):
    return torch.tensor(xs, dtype=torch.float64)


def central_diff(fn, x, h=1e-5):
    """Numerical gradient of scalar fn at x, coordinate by coordinate."""
    g = torch.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.numel()):
        e = torch.zeros_like(flat)
        e[i] = h
        g.view(-1)[i] = (fn((flat + e).view_as(x)) - fn((flat - e).view_as(x))) / (2 * h)
    return g


def test_grad_of_square_sum():
    p = ParamSet({"p": f64(1, 2, 3)})
    with Tape(p) as tape:
        g = tape.grad((tape.params["p"] * tape.params["p"]).sum())
    assert g["p"].tolist() == [2.0, 4.0, 6.0]


def test_grad_constant_loss_is_zero():
    p = ParamSet({"a": f64(1, 2), "b": f64(3)})
    with Tape(p) as tape:
        loss = torch.tensor(5.0, dtype=torch.float64) + 0 * tape.params["a"].sum()
        g = tape.grad(loss)
    assert torch.equal(g["a"], torch.zeros(2, dtype=torch.float64))
    assert torch.equal(g["b"], torch.zeros(1, dtype=torch.float64))


def test_grad_strict_mode_rejects_unused():
    p = ParamSet({"a": f64(1, 2), "b": f64(3)})
    with Tape(p) as tape:
        loss = tape.params["a"].sum()
        with pytest.raises(ValueError, match="not on the recorded path"):
            tape.grad(loss, strict=True)


def test_grad_rejects_non_scalar():
    p = ParamSet({"a": f64(1, 2)})
    with Tape(p) as tape:
        with pytest.raises(ValueError, match="scalar"):
            tape.grad(tape.params["a"] * 2)


def test_no_recording_outside_tape():
    p = ParamSet({"a": f64(1, 2)})
    assert not p["a"].requires_grad
    with Tape(p) as tape:
        assert tape.params["a"].requires_grad
    assert not p["a"].requires_grad


def test_paramset_names_unique_and_ordered():
    with pytest.raises(KeyError):
        ParamSet([("a", f64(1)), ("a", f64(2))])
    p = ParamSet([("z", f64(1)), ("a", f64(2))])
    assert list(p) == ["z", "a"]


def test_adam_zero_gradient_leaves_params():
    p = ParamSet({"w": f64(0.5, -1.0)})
    p2, st = adam_step(p, {"w": torch.zeros(2, dtype=torch.float64)}, AdamState(), 0.1)
    assert torch.equal(p2["w"], p["w"])
    assert st.step == 1


def test_adam_first_step_hand_value():
    # m = 0.1, v = 0.001; bias-corrected m_hat = 1, v_hat = 1 -> p = -0.1 / (1 + 1e-8)
    p = ParamSet({"p": f64(0.0)})
    p2, _ = adam_step(p, {"p": f64(1.0)}, AdamState(), 0.1)
    assert p2["p"].item() == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-12)


def test_adam_two_steps_monotone():
    p = ParamSet({"p": f64(0.0)})
    st = AdamState()
    vals = [0.0]
    for _ in range(2):
        p, st = adam_step(p, {"p": f64(1.0)}, st, 0.1)
        vals.append(p["p"].item())
    assert vals[0] > vals[1] > vals[2]
    assert st.step == 2


def test_adam_lr_zero_is_identity():
    rng = np.random.default_rng(3)
    p = ParamSet({"w": torch.from_numpy(rng.standard_normal((3, 4)))})
    st = AdamState()
    for _ in range(5):
        p2, st = adam_step(p, {"w": torch.from_numpy(rng.standard_normal((3, 4)))}, st, 0.0)
        assert torch.equal(p2["w"], p["w"])


def test_adam_rejects_shape_mismatch_and_nonfinite():
    p = ParamSet({"w": f64(1, 2)})
    with pytest.raises(ValueError, match="shape"):
        adam_step(p, {"w": f64(1, 2, 3)}, AdamState(), 0.1)
    with pytest.raises(T.NonFiniteError):
        adam_step(p, {"w": f64(1, math.nan)}, AdamState(), 0.1)


def test_adam_matches_scalar_reference():
    """Reference Adam written out with floats."""
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.05
    grads = [0.3, -1.2, 0.7, 0.0, 2.5]
    p, m, v = 1.0, 0.0, 0.0
    ref = []
    for k, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= lr * (m / (1 - b1 ** k)) / (math.sqrt(v / (1 - b2 ** k)) + eps)
        ref.append(p)
    ps = ParamSet({"p": f64(1.0)})
    st = AdamState()
    for g, r in zip(grads, ref):
        ps, st = adam_step(ps, {"p": f64(g)}, st, lr)
        assert ps["p"].item() == pytest.approx(r, rel=1e-12)


PRIMS = {
    "add": lambda a, b: T.add(a, b).sum(),
    "sub": lambda a, b: (T.sub(a, b) ** 2).sum(),
    "mul": lambda a, b: T.mul(a, b).sum(),
    "matmul": lambda a, b: T.matmul(a.reshape(3, 4), b.reshape(4, 3)).sum(),
    "mean_abs": lambda a, b: T.mean(T.abs_(a - b)),
    "sqrt": lambda a, b: T.sum_(T.sqrt(a * a + 1.0)),
    "leaky": lambda a, b: T.sum_(T.leaky_relu(a, 0.2) * b),
    "clamp": lambda a, b: T.sum_(T.clamp(a, -0.5, 0.5) * b),
    "cosine": lambda a, b: T.cosine_similarity(a, b),
}


@pytest.mark.parametrize("name", sorted(PRIMS))
def test_primitive_gradients_match_finite_differences(name):
    rng = np.random.default_rng(abs(hash(name)) % 2 ** 32)
    a = torch.from_numpy(rng.standard_normal(12))
    b = torch.from_numpy(rng.standard_normal(12))
    fn = PRIMS[name]
    p = ParamSet({"a": a, "b": b})
    with Tape(p) as tape:
        g = tape.grad(fn(tape.params["a"], tape.params["b"]))
    num_a = central_diff(lambda x: fn(x, b), a)
    num_b = central_diff(lambda x: fn(a, x), b)
    for an, num in ((g["a"], num_a), (g["b"], num_b)):
        err = (an - num).abs().max() / max(float(num.abs().max()), 1e-12)
        assert err <= 1e-6


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (2, 0)])
def test_conv_gradients_match_finite_differences(stride, padding):
    rng = np.random.default_rng(stride * 10 + padding)
    x = torch.from_numpy(rng.standard_normal((1, 2, 5, 5)))
    w = torch.from_numpy(rng.standard_normal((3, 2, 3, 3)))
    wt = torch.from_numpy(rng.standard_normal((3, 2, 4, 4)))

    def f_conv(xx, ww):
        return (T.conv2d(xx, ww, stride=stride, padding=padding) ** 2).sum()

    def f_convt(xx, ww):
        return (T.conv_transpose2d(T.conv2d(xx, w, stride=stride, padding=padding), ww,
                                   stride=2, padding=1) ** 2).sum()

    for fn, weight in ((f_conv, w), (f_convt, wt)):
        p = ParamSet({"x": x, "w": weight})
        with Tape(p) as tape:
            g = tape.grad(fn(tape.params["x"], tape.params["w"]))
        for key, num in (("x", central_diff(lambda v: fn(v, weight), x)),
                         ("w", central_diff(lambda v: fn(x, v), weight))):
            err = (g[key] - num).abs().max() / float(num.abs().max())
            assert err <= 1e-6


def test_nonfinite_surfaces_as_error():
    with pytest.raises(T.NonFiniteError):
        T.mul(f64(1e308), f64(1e308))
    with pytest.raises(T.NonFiniteError):
        T.sqrt(f64(-1.0))
    with pytest.raises(ValueError, match="zero-norm"):
        T.cosine_similarity(f64(0, 0), f64(1, 2))


def test_broadcast_limited_to_scalars():
    with pytest.raises(ValueError, match="shape mismatch"):
        T.add(torch.ones(2, 3), torch.ones(3))
    assert torch.equal(T.mul(torch.ones(3), torch.tensor(2.0)), torch.full((3,), 2.0))


def test_operations_are_pure():
    a = torch.from_numpy(np.random.default_rng(0).standard_normal((2, 3, 6, 6)))
    w = torch.from_numpy(np.random.default_rng(1).standard_normal((4, 3, 3, 3)))
    r1 = T.conv2d(a, w, padding=1)
    r2 = T.conv2d(a, w, padding=1)
    assert torch.equal(r1, r2)
