import io

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tabdiff import numerics as nx
from tabdiff.errors import AutodiffError, CacheFormatError, NumericOverflowError, ShapeError


def _rand(shape, seed, lo=-2.0, hi=2.0):
    g = nx.generator(seed)
    return torch.from_numpy(g.uniform(lo, hi, size=shape)).double().requires_grad_(True)


# (name, function of tensors, input shapes)
GRAD_CASES = [
    ("matmul", nx.matmul, [(2, 3, 4), (2, 4, 5)]),
    ("conv2d", lambda x, w, b: nx.conv2d(x, w, b, stride=2, padding=1), [(2, 3, 6, 6), (4, 3, 3, 3), (4,)]),
    ("transposed_conv2d", lambda x, w, b: nx.transposed_conv2d(x, w, b, stride=2, padding=1),
     [(1, 3, 3, 3), (3, 2, 4, 4), (2,)]),
    ("add", nx.add, [(3, 4), (3, 4)]),
    ("mul", nx.mul, [(3, 4), (3, 4)]),
    ("scalar_scale", lambda x: nx.scalar_scale(x, -1.7), [(5,)]),
    ("gelu", nx.gelu, [(4, 5)]),
    ("silu", nx.silu, [(4, 5)]),
    ("layer_norm", lambda x, w, b: nx.layer_norm(x, 1e-5, w, b), [(3, 6), (6,), (6,)]),
    ("softmax", lambda x: nx.softmax(x, axis=-1), [(3, 5)]),
    ("reshape", lambda x: nx.reshape(x, (6, 2)), [(3, 4)]),
    ("transpose", lambda x: nx.transpose(x, (2, 0, 1)), [(2, 3, 4)]),
    ("slice", lambda x: nx.narrow(x, 1, 1, 3), [(2, 4)]),
    ("concat", lambda a, b: nx.concat([a, b], axis=1), [(2, 3), (2, 2)]),
    ("mean", lambda x: nx.reduce_mean(x, axis=1), [(3, 4)]),
    ("sum", lambda x: nx.reduce_sum(x), [(3, 4)]),
    ("mse_loss", nx.mse_loss, [(3, 4), (3, 4)]),
    ("expand", lambda x: nx.expand(x, (3, 4)), [(1, 4)]),
    ("exp", nx.exp, [(3, 4)]),
    ("tanh", nx.tanh, [(3, 4)]),
    ("clamp", lambda x: nx.clamp(x, -10.0, 10.0), [(3, 4)]),
]


@pytest.mark.parametrize("name,fn,shapes", GRAD_CASES, ids=[c[0] for c in GRAD_CASES])
@pytest.mark.parametrize("seed", range(5))
def test_primitive_gradients_match_finite_differences(name, fn, shapes, seed):
    inputs = [_rand(s, nx.derive_seed(seed, name, i)) for i, s in enumerate(shapes)]
    assert torch.autograd.gradcheck(fn, inputs, eps=1e-5, atol=1e-6, rtol=1e-4)


def test_every_primitive_has_a_gradient_case():
    assert set(nx.PRIMITIVES) == {c[0] for c in GRAD_CASES}


def test_no_implicit_broadcasting():
    with pytest.raises(ShapeError, match="add"):
        nx.add(torch.ones(3, 4), torch.ones(4))
    with pytest.raises(ShapeError, match="matmul"):
        nx.matmul(torch.ones(2, 3), torch.ones(4, 2))
    with pytest.raises(ShapeError):
        nx.expand(torch.ones(2, 4), (3, 4))


def test_matmul_example():
    a = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
    b = torch.tensor([[0.0, 1.0], [1.0, 0.0]])
    assert torch.equal(nx.matmul(a, b), torch.tensor([[2.0, 1.0], [4.0, 3.0]]))


def test_non_finite_output_raises():
    with pytest.raises(NumericOverflowError, match="exp"):
        nx.exp(torch.tensor([1000.0]))


def test_tape_records_in_execution_order():
    x = nx.tensor([1.0, 2.0], requires_grad=True)
    with nx.Tape() as tape:
        y = nx.mul(x, x)
        nx.reduce_sum(nx.silu(y))
    assert tape.ops() == ["mul", "silu", "sum"]
    leaves = tape.leaves()
    assert len(leaves) == 1 and leaves[0] is x


def test_constants_are_not_recorded():
    with nx.Tape() as tape:
        nx.add(torch.ones(2), torch.ones(2))
    assert len(tape) == 0


def test_backward_sets_gradients():
    x = nx.tensor([1.0, -2.0, 3.0], requires_grad=True)
    with nx.Tape():
        loss = nx.reduce_sum(nx.mul(x, x))
        nx.backward(loss)
    assert torch.allclose(x.grad, 2 * x.detach())


def test_unreached_leaf_gets_zero_gradient():
    x = nx.tensor([1.0, 2.0], requires_grad=True)
    unused = nx.tensor([5.0], requires_grad=True)
    with nx.Tape():
        loss = nx.reduce_sum(x)
        nx.backward(loss, params=[unused])
    assert torch.equal(unused.grad, torch.zeros(1))


def test_gradients_accumulate():
    x = nx.tensor([1.0, 2.0], requires_grad=True)
    for _ in range(2):
        with nx.Tape():
            nx.backward(nx.reduce_sum(nx.scalar_scale(x, 3.0)))
    assert torch.allclose(x.grad, torch.full((2,), 6.0))
    nx.zero_grad([x])
    assert x.grad is None


def test_backward_preconditions():
    x = nx.tensor([1.0, 2.0], requires_grad=True)
    with nx.Tape():
        y = nx.mul(x, x)
        with pytest.raises(AutodiffError, match="scalar"):
            nx.backward(y)
    with pytest.raises(AutodiffError, match="tape"):
        nx.backward(nx.reduce_sum(y))


def test_adam_matches_torch_reference():
    w0 = nx.random_normal((4, 3), seed=1)
    ours = w0.clone().requires_grad_(True)
    ref = w0.clone().requires_grad_(True)
    state = nx.AdamState.for_params([ours], lr=1e-2)
    opt = torch.optim.Adam([ref], lr=1e-2, betas=(0.9, 0.999), eps=1e-8)
    target = nx.random_normal((4, 3), seed=2)
    for _ in range(10):
        with nx.Tape():
            nx.backward(nx.mse_loss(ours, target))
        nx.adam_step([ours], [ours.grad], state)
        nx.zero_grad([ours])
        opt.zero_grad()
        torch.nn.functional.mse_loss(ref, target).backward()
        opt.step()
    assert state.step == 10
    assert torch.allclose(ours, ref, atol=1e-6)


def test_adam_first_step_moves_by_lr():
    p = torch.zeros(3, requires_grad=True)
    g = torch.tensor([0.5, -3.0, 1e-3])
    state = nx.AdamState.for_params([p], lr=0.1)
    nx.adam_step([p], [g], state)
    assert torch.allclose(p.detach(), -0.1 * torch.sign(g), atol=1e-4)


def test_adam_rejects_mismatched_lists():
    p = torch.zeros(3, requires_grad=True)
    state = nx.AdamState.for_params([p])
    with pytest.raises(ShapeError):
        nx.adam_step([p], [torch.zeros(2)], state)


def test_adam_state_survives_serialization():
    p = torch.zeros(2, 2, requires_grad=True)
    state = nx.AdamState.for_params([p], lr=3e-4)
    nx.adam_step([p], [torch.ones(2, 2)], state)
    back = nx.AdamState.from_tensors(nx.read_tensors(io.BytesIO(nx.tensors_to_bytes(state.tensors()))), state.hyper())
    assert back.step == 1 and back.lr == 3e-4
    assert torch.equal(back.m[0], state.m[0]) and torch.equal(back.v[0], state.v[0])


@given(seed=st.integers(min_value=0, max_value=2**64 - 1), key=st.text(max_size=8))
@settings(max_examples=50, deadline=None)
def test_derive_seed_is_a_pure_function(seed, key):
    assert nx.derive_seed(seed, key, 3) == nx.derive_seed(seed, key, 3)
    assert 0 <= nx.derive_seed(seed, key) < 2**64


def test_derived_streams_differ():
    seeds = {nx.derive_seed(7, "eps", i) for i in range(100)}
    assert len(seeds) == 100
    assert nx.derive_seed(7, "t", 0) != nx.derive_seed(7, "eps", 0)


def test_random_normal_is_reproducible():
    a = nx.random_normal((1000,), seed=11)
    assert torch.equal(a, nx.random_normal((1000,), seed=11))
    assert not torch.equal(a, nx.random_normal((1000,), seed=12))
    assert abs(float(a.mean())) < 0.15 and abs(float(a.std()) - 1) < 0.1


def test_random_integers_inclusive_bounds():
    draws = nx.random_integers(1, 3, 3000, seed=5)
    assert set(np.unique(draws)) == {1, 2, 3}


def test_seed_range_checked():
    with pytest.raises(ValueError):
        nx.generator(-1)
    with pytest.raises(ValueError):
        nx.derive_seed(2**64)


def test_float64_mode():
    assert nx.tensor([1.0]).dtype == torch.float32
    with nx.float64_mode():
        assert nx.tensor([1.0]).dtype == torch.float64
        assert nx.random_normal((2,), 0).dtype == torch.float64
    assert nx.default_dtype() == torch.float32


def test_parameter_container(tmp_path):
    tensors = {"w": nx.random_normal((2, 3), 0), "s": torch.tensor(0.25, dtype=torch.float64),
               "widths": torch.tensor([8, 16], dtype=torch.int64)}
    path = tmp_path / "p.tdw"
    nx.save_tensors(path, tensors)
    assert path.read_bytes()[:4] == b"TDW1"
    back = nx.load_tensors(path)
    assert list(back) == ["w", "s", "widths"]
    for k in tensors:
        assert back[k].dtype == tensors[k].dtype and torch.equal(back[k], tensors[k])


def test_parameter_container_rejects_corruption():
    raw = nx.tensors_to_bytes({"w": torch.ones(4)})
    with pytest.raises(CacheFormatError, match="magic"):
        nx.read_tensors(io.BytesIO(b"XXXX" + raw[4:]))
    with pytest.raises(CacheFormatError, match="truncated"):
        nx.read_tensors(io.BytesIO(raw[:-3]))
    with pytest.raises(CacheFormatError, match="trailing"):
        nx.read_tensors(io.BytesIO(raw + b"\0"))


def test_conv2d_by_hand():
    out = nx.conv2d(torch.ones(1, 1, 4, 4), torch.ones(1, 1, 3, 3), padding=1)
    assert out[0, 0, 1, 1] == 9 and out[0, 0, 0, 0] == 4 and out[0, 0, 0, 1] == 6


def test_layer_norm_standardizes():
    y = nx.layer_norm(torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64))
    assert abs(float(y.mean())) < 1e-12
    assert float(y.var(unbiased=False)) == pytest.approx(1.0, abs=1e-4)


def test_adam_update_tends_to_lr_under_constant_gradient():
    p = torch.zeros(1, dtype=torch.float64, requires_grad=True)
    state = nx.AdamState.for_params([p], lr=1e-4)
    nx.adam_step([p], [torch.zeros(1, dtype=torch.float64)], state)
    assert float(p) == 0.0
    prev = float(p)
    for _ in range(2000):
        nx.adam_step([p], [torch.full((1,), 0.3, dtype=torch.float64)], state)
        step, prev = prev - float(p), float(p)
    assert step == pytest.approx(1e-4, rel=1e-3)


def test_random_normal_moments_at_a_million_draws():
    x = nx.random_normal((1_000_000,), seed=3).double()
    assert abs(float(x.mean())) < 0.01
    assert abs(float(x.var()) - 1.0) < 0.02


@given(a=st.integers(1, 4), b=st.integers(1, 4), c=st.integers(2, 4), cut=st.integers(1, 3), seed=st.integers(0, 99))
@settings(max_examples=30, deadline=None)
def test_structural_primitives_invert_exactly(a, b, c, cut, seed):
    x = nx.random_normal((a, b, c), seed)
    assert torch.equal(nx.reshape(nx.reshape(x, (a * b * c,)), (a, b, c)), x)
    assert torch.equal(nx.transpose(nx.transpose(x, (2, 0, 1)), (1, 2, 0)), x)
    cut = min(cut, c - 1)
    assert torch.equal(nx.concat([nx.narrow(x, 2, 0, cut), nx.narrow(x, 2, cut, c)], axis=2), x)


def test_chain_rule_through_three_primitives():
    # loss = sum(tanh(W @ x)): dL/dW = (1 - tanh²(Wx)) xᵀ, dL/dx = Wᵀ (1 - tanh²(Wx))
    with nx.float64_mode():
        w = nx.tensor([[0.5, -1.0, 0.25], [1.5, 0.2, -0.7]], requires_grad=True)
        x = nx.tensor([[1.0], [-0.5], [2.0]], requires_grad=True)
        with nx.Tape():
            nx.backward(nx.reduce_sum(nx.tanh(nx.matmul(w, x))))
    wd, xd = w.detach().numpy(), x.detach().numpy()
    d = 1.0 - np.tanh(wd @ xd) ** 2
    assert np.allclose(w.grad.numpy(), d @ xd.T, rtol=1e-12, atol=0)
    assert np.allclose(x.grad.numpy(), wd.T @ d, rtol=1e-12, atol=0)
