import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cfa.losses import cross_entropy, cwmse, cwmse_weights, total_loss


def fd_grad(fn, t, step=1e-6):
    g = torch.zeros_like(t)
    flat, out = t.view(-1), g.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        hi = fn()
        flat[i] = orig - step
        lo = fn()
        flat[i] = orig
        out[i] = (hi - lo) / (2 * step)
    return g


def np_cwmse(f, ft):
    """Loop-based reference used as an independent oracle."""
    b, c, h, w = f.shape
    total = 0.0
    for i in range(b):
        dev = [float(((f[i, j] - ft[i, j]) ** 2).sum()) for j in range(c)]
        s = sum(dev)
        weights = [c * d / s for d in dev] if s > 0 else [1.0] * c
        total += sum(wj * dj for wj, dj in zip(weights, dev))
    return total / (b * c * h * w)


def test_cross_entropy_uniform():
    loss = cross_entropy(torch.zeros(3, 10), torch.tensor([0, 4, 9]))
    assert loss.item() == pytest.approx(math.log(10), abs=1e-6)
    assert round(loss.item(), 6) == 2.302585


def test_cross_entropy_hand_value():
    loss = cross_entropy(torch.tensor([[1.0, 0.0]], dtype=torch.float64), torch.tensor([0]))
    assert loss.item() == pytest.approx(math.log1p(math.exp(-1)), rel=1e-12)
    assert round(loss.item(), 6) == 0.313262


def test_cross_entropy_limit():
    loss = cross_entropy(torch.tensor([[60.0, 0.0, 0.0]], dtype=torch.float64), torch.tensor([0]))
    assert loss.item() < 1e-20


def test_cross_entropy_errors():
    with pytest.raises(ValueError, match="range"):
        cross_entropy(torch.zeros(1, 3), torch.tensor([3]))
    with pytest.raises(ValueError, match="non-finite"):
        cross_entropy(torch.tensor([[float("nan"), 0.0]]), torch.tensor([0]))


def test_weights_hand_value():
    f = torch.tensor([[[[math.sqrt(3.0)]], [[1.0]]]], dtype=torch.float64)
    w = cwmse_weights(f, torch.zeros_like(f))
    np.testing.assert_allclose(w.numpy(), [[1.5, 0.5]], rtol=1e-12)


def test_weights_equal_and_degenerate():
    f = torch.ones(2, 4, 3, 3)
    np.testing.assert_array_equal(cwmse_weights(f, torch.zeros_like(f)).numpy(), 1.0)
    np.testing.assert_array_equal(cwmse_weights(f, f.clone()).numpy(), 1.0)


def test_cwmse_hand_value():
    f = torch.tensor([[[[1.0]], [[0.0]]]])
    ft = torch.zeros_like(f)
    np.testing.assert_allclose(cwmse_weights(f, ft).numpy(), [[2.0, 0.0]])
    assert cwmse(f, ft).item() == pytest.approx(1.0)
    assert cwmse(f, ft, weighted=False).item() == pytest.approx(0.5)
    assert cwmse(f, f).item() == 0.0


def test_shape_mismatch():
    with pytest.raises(ValueError):
        cwmse(torch.zeros(1, 2, 3, 3), torch.zeros(1, 2, 3, 4))
    with pytest.raises(ValueError):
        cwmse_weights(torch.zeros(1, 2, 3, 3), torch.zeros(1, 3, 3, 3))


def test_total_loss_arithmetic():
    logits = torch.zeros(1, 10)
    f = torch.tensor([[[[1.0]], [[0.0]]]])
    out = total_loss(logits, logits, torch.tensor([3]), f, torch.zeros_like(f), lam=1.0)
    assert out.total.item() == pytest.approx(3.302585, abs=1e-6)
    zero = total_loss(logits, torch.randn(1, 10), torch.tensor([3]), f, torch.zeros_like(f), lam=0.0)
    assert zero.total.item() == pytest.approx(0.5 * (zero.ce_original + zero.ce_variant).item())
    with pytest.raises(ValueError):
        total_loss(logits, logits, torch.tensor([3]), f, f, lam=-1.0)


def test_default_lambda_is_one():
    import inspect

    assert inspect.signature(total_loss).parameters["lam"].default == 1.0


feature_pairs = st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(1, 3)).flatmap(
    lambda s: st.tuples(
        arrays(np.float64, (s[0], s[1], s[2], s[2]), elements=st.floats(-2, 2)),
        arrays(np.float64, (s[0], s[1], s[2], s[2]), elements=st.floats(-2, 2)),
    )
)


@settings(max_examples=60, deadline=None)
@given(feature_pairs)
def test_weight_rows_average_one(pair):
    f, ft = map(torch.from_numpy, pair)
    w = cwmse_weights(f, ft)
    assert bool((w >= 0).all())
    np.testing.assert_allclose(w.mean(dim=1).numpy(), 1.0, atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(feature_pairs)
def test_cwmse_matches_reference_and_is_nonnegative(pair):
    f, ft = pair
    got = cwmse(torch.from_numpy(f), torch.from_numpy(ft)).item()
    assert got >= 0
    assert got == pytest.approx(np_cwmse(f, ft), rel=1e-9, abs=1e-12)
    if np.all(f == ft):
        assert got == 0
    elif np.abs(f - ft).max() > 1e-100:  # below this the squares underflow
        assert got > 0


@settings(max_examples=40, deadline=None)
@given(feature_pairs, st.randoms())
def test_channel_permutation_symmetry(pair, rnd):
    f, ft = map(torch.from_numpy, pair)
    perm = list(range(f.shape[1]))
    rnd.shuffle(perm)
    assert cwmse(f[:, perm], ft[:, perm]).item() == pytest.approx(cwmse(f, ft).item(), rel=1e-12, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.floats(0.1, 2.0))
def test_uniform_deviation_equals_mse(b, c, delta):
    f = torch.zeros(b, c, 2, 2, dtype=torch.float64)
    ft = f + delta
    assert cwmse(f, ft).item() == pytest.approx(cwmse(f, ft, weighted=False).item(), rel=1e-12)


def _problem(seed):
    g = torch.Generator().manual_seed(seed)
    kw = dict(generator=g, dtype=torch.float64)
    return (torch.randn(3, 4, **kw), torch.randn(3, 4, **kw), torch.tensor([0, 3, 1]),
            torch.randn(3, 5, 2, 2, **kw), torch.randn(3, 5, 2, 2, **kw))


@pytest.mark.parametrize("seed", range(3))
def test_total_loss_gradient_frozen_weights(seed):
    lx, lv, y, f, ft = _problem(seed)
    w = cwmse_weights(f, ft)  # frozen weights define the surrogate being differentiated
    tensors = [t.requires_grad_() for t in (lx, lv, f, ft)]
    total_loss(lx, lv, y, f, ft).total.backward()
    analytic = [t.grad.clone() for t in tensors]

    def value():
        with torch.no_grad():
            return total_loss(lx, lv, y, f, ft, weights=w).total.item()

    with torch.no_grad():
        for t, g in zip(tensors, analytic):
            fd = fd_grad(value, t.data)
            assert (g - fd).abs().max() / fd.abs().max() < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_total_loss_gradient_differentiable_weights(seed):
    lx, lv, y, f, ft = _problem(seed)
    f.requires_grad_()
    ft.requires_grad_()
    total_loss(lx, lv, y, f, ft, detach_weights=False).total.backward()

    def value():
        with torch.no_grad():
            return total_loss(lx, lv, y, f, ft, detach_weights=False).total.item()

    with torch.no_grad():
        for t in (f, ft):
            fd = fd_grad(value, t.data)
            assert (t.grad - fd).abs().max() / fd.abs().max() < 1e-4


def test_frozen_and_differentiable_gradients_differ():
    _, _, _, f, ft = _problem(9)
    a = f.clone().requires_grad_()
    cwmse(a, ft).backward()
    b = f.clone().requires_grad_()
    cwmse(b, ft, detach_weights=False).backward()
    assert not torch.allclose(a.grad, b.grad)
