import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from dpcl.config import EncoderConfig
from dpcl.encoder import (Encoder, FeatureStack, NonFiniteError, build_encoder, encode, gradients,
                          init_momentum_encoder, momentum_update, param_distance, to_tensor)

TINY = EncoderConfig(stem_width=4, stem_stride=1, widths=(4, 6, 8), strides=(2, 1, 2), taps=(2, 4), proj_dim=4)


def test_two_tap_shape_arithmetic(rng):
    enc = build_encoder(EncoderConfig(taps=(2, 3)), rng)
    out = encode(enc, rng.uniform(size=(64, 64, 3)).astype(np.float32))
    assert isinstance(out, FeatureStack)
    assert tuple(out.values.shape) == (64, 16, 16)
    assert out.source_levels == (2, 3) and out.spatial_scale == 4


def test_default_three_taps(rng):
    enc = build_encoder(EncoderConfig(), rng)
    x = to_tensor(rng.uniform(size=(2, 64, 64, 3)))
    assert tuple(enc(x).shape) == (2, 96, 16, 16)
    assert enc.out_dim == 96 and enc.total_stride == 16


def test_single_level_has_dim_d(rng):
    enc = build_encoder(EncoderConfig(taps=(4,)), rng)
    out = encode(enc, np.zeros((64, 64, 3), np.float32))
    assert out.values.shape[0] == 32
    assert tuple(out.values.shape[1:]) == (4, 4)


def test_zero_trunk_gives_zero_features(rng):
    enc = build_encoder(EncoderConfig(), rng)
    with torch.no_grad():
        for p in enc.parameters():
            p.zero_()
    out = encode(enc, np.zeros((64, 64, 3), np.float32))
    assert torch.count_nonzero(out.values) == 0


def test_stride_violation_raises(rng):
    enc = build_encoder(EncoderConfig(), rng)
    with pytest.raises(ValueError):
        encode(enc, np.zeros((40, 40, 3), np.float32))


def test_reset_parameters_deterministic_and_bounded():
    a = build_encoder(TINY, np.random.default_rng(5), torch.float64)
    b = build_encoder(TINY, np.random.default_rng(5), torch.float64)
    assert param_distance(a, b) == 0.0
    for m in a.modules():
        if isinstance(m, torch.nn.Conv2d):
            bound = np.sqrt(6.0 / m.weight[0].numel())
            assert m.weight.abs().max() <= bound
            assert torch.count_nonzero(m.bias) == 0


def test_momentum_init_copies_without_aliasing(rng):
    enc = build_encoder(TINY, rng, torch.float64)
    twin = init_momentum_encoder(enc)
    assert param_distance(enc, twin) == 0.0
    x = rng.uniform(size=(8, 8, 3))
    assert torch.equal(encode(enc, x).values, encode(twin, x).values)
    with torch.no_grad():
        next(enc.parameters()).add_(1.0)
    assert param_distance(enc, twin) > 0
    assert all(not p.requires_grad for p in twin.parameters())
    for p, q in zip(enc.parameters(), twin.parameters()):
        assert p.data_ptr() != q.data_ptr()


def _scalar_pair(a, b):
    ta = Encoder(TINY).double()
    tb = Encoder(TINY).double()
    with torch.no_grad():
        for p in ta.parameters():
            p.fill_(a)
        for p in tb.parameters():
            p.fill_(b)
    return ta, tb


def test_momentum_update_scalar_example():
    twin, enc = _scalar_pair(0.0, 1.0)
    momentum_update(twin, enc, 0.999)
    for p in twin.parameters():
        assert torch.allclose(p, torch.full_like(p, 0.001), rtol=0, atol=1e-15)


def test_momentum_zero_copies(rng):
    enc = build_encoder(TINY, rng, torch.float64)
    twin = build_encoder(TINY, np.random.default_rng(99), torch.float64)
    momentum_update(twin, enc, 0.0)
    assert param_distance(enc, twin) == 0.0


@pytest.mark.parametrize("m", [-0.1, 1.0, 1.5])
def test_momentum_rejects_bad_coefficient(m, rng):
    enc = build_encoder(TINY, rng)
    with pytest.raises(ValueError):
        momentum_update(init_momentum_encoder(enc), enc, m)


def test_momentum_rejects_shape_mismatch(rng):
    a = build_encoder(TINY, rng)
    b = build_encoder(EncoderConfig(stem_width=4, stem_stride=1, widths=(4, 6, 10), strides=(2, 1, 2),
                                    taps=(2, 4), proj_dim=4), rng)
    with pytest.raises(ValueError):
        momentum_update(b, a, 0.5)


@given(m=st.floats(0.0, 0.999), k=st.integers(1, 50), seed=st.integers(0, 1000))
def test_ema_geometric_decay(m, k, seed):
    r = np.random.default_rng(seed)
    enc = build_encoder(TINY, r, torch.float64)
    twin = build_encoder(TINY, r, torch.float64)
    d0 = param_distance(enc, twin)
    for _ in range(k):
        momentum_update(twin, enc, m)
    expected = m**k * d0
    assert abs(param_distance(enc, twin) - expected) <= 1e-10 * max(d0, 1e-300) + 1e-300


def test_gradients_of_constant_are_zero(rng):
    enc = build_encoder(TINY, rng, torch.float64)
    g = gradients(enc, torch.tensor(3.0, dtype=torch.float64))
    assert all(torch.count_nonzero(v) == 0 for v in g.values())
    assert set(g) == {n for n, _ in enc.named_parameters()}


def test_gradients_of_parameter_sum_are_ones(rng):
    enc = build_encoder(TINY, rng, torch.float64)
    loss = sum(p.sum() for p in enc.parameters())
    for v in gradients(enc, loss).values():
        assert torch.equal(v, torch.ones_like(v))


def test_gradients_reject_non_finite(rng):
    enc = build_encoder(TINY, rng, torch.float64)
    with pytest.raises(NonFiniteError):
        gradients(enc, next(enc.parameters()).sum() * float("nan"))


def test_gradients_match_finite_differences_on_features(rng):
    enc = build_encoder(TINY, rng, torch.float64)
    x = to_tensor(rng.uniform(size=(1, 8, 8, 3)), torch.float64)
    target = torch.from_numpy(rng.normal(size=(1, 8, 4, 4)))

    def loss_fn():
        return ((enc(x) - target) ** 2).sum()

    g = gradients(enc, loss_fn())
    h = 1e-5
    worst = 0.0
    with torch.no_grad():
        for name, p in enc.named_parameters():
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = loss_fn().item()
                flat[i] = old - h
                down = loss_fn().item()
                flat[i] = old
                num = (up - down) / (2 * h)
                a = g[name].reshape(-1)[i].item()
                worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-6))
    assert worst < 1e-3
