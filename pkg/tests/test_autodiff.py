import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from nbfrec.autodiff import (
    Adam,
    MlpSpec,
    ParamStore,
    TapeError,
    adam_step,
    backward,
    grad_check,
    init_mlp,
    layer_norm,
    mlp_apply,
)

f64 = torch.float64


def store_from(**arrays) -> ParamStore:
    return ParamStore({k: torch.tensor(v, dtype=f64, requires_grad=True) for k, v in arrays.items()})


def test_identity_layer():
    p = store_from(**{"m.0.weight": np.eye(2), "m.0.bias": np.zeros(2)})
    out = mlp_apply(MlpSpec((2, 2)), p, torch.tensor([[1.0, 2.0]], dtype=f64), "m")
    assert out.tolist() == [[1.0, 2.0]]


def test_zero_weights_give_bias():
    p = store_from(**{"m.0.weight": np.zeros((3, 2)), "m.0.bias": [1.0, -2.0, 0.5]})
    out = mlp_apply(MlpSpec((2, 3)), p, torch.randn(4, 2, dtype=f64), "m")
    assert torch.equal(out, torch.tensor([[1.0, -2.0, 0.5]] * 4, dtype=f64))


def test_two_layer_relu_hand_values():
    W0, b0 = np.array([[1.0, 2.0], [-1.0, 1.0]]), np.array([0.5, 0.0])
    W1, b1 = np.array([[2.0, -3.0], [1.0, 1.0]]), np.array([0.0, 1.0])
    p = store_from(**{"m.0.weight": W0, "m.0.bias": b0, "m.1.weight": W1, "m.1.bias": b1})
    x = np.array([1.0, -1.0])
    # hand evaluation: W0 x + b0 = [-0.5, -2] -> relu -> [0, 0] -> W1 . + b1 = [0, 1]
    expect = W1 @ np.maximum(W0 @ x + b0, 0) + b1
    assert expect.tolist() == [0.0, 1.0]
    out = mlp_apply(MlpSpec((2, 2, 2)), p, torch.tensor(x, dtype=f64), "m")
    assert out.tolist() == expect.tolist()


def test_width_mismatch_raises():
    p = ParamStore()
    init_mlp(p, MlpSpec((3, 2)), "m", torch.Generator().manual_seed(0))
    with pytest.raises(ValueError, match="width"):
        mlp_apply(MlpSpec((3, 2)), p, torch.zeros(1, 4, dtype=f64), "m")


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 999))
def test_identity_activation_is_linear(din, dout, a, b, seed):
    gen = torch.Generator().manual_seed(seed)
    spec = MlpSpec((din, 5, dout), activation="identity")
    p = ParamStore()
    init_mlp(p, spec, "m", gen)
    x, y = torch.randn(3, din, generator=gen, dtype=f64), torch.randn(3, din, generator=gen, dtype=f64)
    with torch.no_grad():
        lhs = mlp_apply(spec, p, a * x + b * y, "m")
        rhs = a * mlp_apply(spec, p, x, "m") + b * mlp_apply(spec, p, y, "m")
    assert torch.allclose(lhs, rhs, atol=1e-9, rtol=0)


def test_layer_norm_examples():
    one, zero = torch.ones(4, dtype=f64), torch.zeros(4, dtype=f64)
    assert layer_norm(torch.full((1, 4), 3.0, dtype=f64), one, zero).abs().max() <= 1e-6
    out = layer_norm(torch.tensor([[1.0, -1.0]], dtype=f64), torch.ones(2, dtype=f64), torch.zeros(2, dtype=f64), eps=1e-12)
    assert torch.allclose(out, torch.tensor([[1.0, -1.0]], dtype=f64), atol=1e-9)
    beta = torch.tensor([0.1, 0.2, 0.3, 0.4], dtype=f64)
    out = layer_norm(torch.randn(5, 4, dtype=f64), zero, beta)
    assert torch.equal(out, beta.expand(5, 4))


def test_square_gradient():
    p = store_from(w=3.0)
    backward(p["w"] * p["w"], p)
    assert p.grad("w").item() == 6.0


def test_unreached_parameter_gets_zero_gradient():
    p = store_from(w=2.0, unused=[1.0, 2.0])
    backward(p["w"] ** 3, p)
    assert p.grad("w").item() == 12.0
    assert p.grad("unused").tolist() == [0.0, 0.0]


def test_backward_twice_raises():
    p = store_from(w=1.0)
    loss = p["w"] * 2
    backward(loss, p)
    with pytest.raises(TapeError):
        backward(loss, p)


def test_mlp_sigmoid_nll_matches_finite_differences():
    gen = torch.Generator().manual_seed(0)
    spec = MlpSpec((4, 6, 1))
    p = ParamStore()
    init_mlp(p, spec, "m", gen)
    with torch.no_grad():
        p["m.0.bias"].copy_(0.1 * torch.randn(6, generator=gen, dtype=f64))
    x = torch.randn(10, 4, generator=gen, dtype=f64)
    y = (torch.rand(10, generator=gen, dtype=f64) < 0.5).to(f64)

    def loss():
        s = mlp_apply(spec, p, x, "m").squeeze(-1)
        return torch.nn.functional.binary_cross_entropy_with_logits(s, y)

    report = grad_check(loss, p, eps=1e-5)
    assert report.max_rel_error <= 1e-4, report


def test_grad_check_quadratic_is_exact():
    p = store_from(w=[0.5, -1.5, 2.0])
    report = grad_check(lambda: (p["w"] ** 2).sum() + 3 * p["w"].sum(), p)
    assert report.max_rel_error <= 1e-10


def test_grad_check_flags_wrong_gradient():
    p = store_from(w=[1.0, 2.0])

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return (x**2).sum()

        @staticmethod
        def backward(ctx, g):
            return torch.ones(2, dtype=f64) * g

    assert grad_check(lambda: Wrong.apply(p["w"]), p).max_rel_error > 0.1


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 16), st.integers(1, 16), st.integers(0, 999))
def test_layer_norm_gradients(rows, width, seed):
    gen = torch.Generator().manual_seed(seed)
    p = ParamStore({
        "x": torch.randn(rows, max(width, 2), generator=gen, dtype=f64),
        "g": torch.randn(max(width, 2), generator=gen, dtype=f64),
        "b": torch.randn(max(width, 2), generator=gen, dtype=f64),
    })
    c = torch.randn(rows, max(width, 2), generator=gen, dtype=f64)
    report = grad_check(lambda: (layer_norm(p["x"], p["g"], p["b"]) * c).sum(), p)
    assert report.max_rel_error <= 1e-4


def test_adam_first_step_moves_by_lr():
    p = store_from(w=1.0)
    p["w"].grad = torch.tensor(1.0, dtype=f64)
    before = p["w"].item()
    adam_step(p, lr=0.1, t=1)
    assert abs((p["w"].item() - before) + 0.1) <= 1e-6


def test_adam_wrapper_matches_functional_step():
    a, b = store_from(w=[1.0, 2.0], v=[0.5]), store_from(w=[1.0, 2.0], v=[0.5])
    opt = Adam(a, lr=0.05)
    state = None
    for t in range(1, 6):
        for s in (a, b):
            s.zero_grad()
            backward((s["w"] ** 2).sum() + torch.sin(s["v"]).sum(), s)
        opt.step()
        state = adam_step(b, lr=0.05, state=state, t=t)
    for name in ("w", "v"):
        assert torch.allclose(a[name], b[name], atol=1e-12)
    assert opt.t == 5


def test_adam_zero_gradient_does_not_move():
    p = store_from(w=[1.0, 2.0], z=[3.0])
    backward((p["w"] ** 2).sum(), p)
    Adam(p, lr=0.1).step()
    assert p["z"].tolist() == [3.0]
    assert p["w"].tolist() != [1.0, 2.0]


def test_adam_state_round_trip():
    p = store_from(w=[1.0, -1.0])
    opt = Adam(p, lr=0.1)
    backward((p["w"] ** 2).sum(), p)
    opt.step()
    saved = opt.state_tensors()
    q = store_from(w=p["w"].detach().numpy().copy())
    opt2 = Adam(q, lr=0.1)
    opt2.load_state_tensors(saved)
    for s, o in ((p, opt), (q, opt2)):
        s.zero_grad()
        backward((s["w"] ** 2).sum(), s)
        o.step()
    assert torch.equal(p["w"], q["w"])


def test_forward_is_deterministic():
    gen = torch.Generator().manual_seed(3)
    spec = MlpSpec((5, 7, 2))
    p = ParamStore()
    init_mlp(p, spec, "m", gen)
    x = torch.randn(9, 5, generator=gen, dtype=f64)
    assert torch.equal(mlp_apply(spec, p, x, "m"), mlp_apply(spec, p, x, "m"))


def test_init_is_seeded_kaiming_uniform():
    spec = MlpSpec((50, 20))
    a, b = ParamStore(), ParamStore()
    init_mlp(a, spec, "m", torch.Generator().manual_seed(1))
    init_mlp(b, spec, "m", torch.Generator().manual_seed(1))
    assert torch.equal(a["m.0.weight"], b["m.0.weight"])
    assert a["m.0.weight"].abs().max() <= np.sqrt(6 / 50)
    assert a["m.0.bias"].abs().sum() == 0
