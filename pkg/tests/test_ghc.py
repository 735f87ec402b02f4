import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vwn import numcore as nc
from vwn.ghc import (
    GhcConfig,
    GhcParams,
    SlotState,
    depth_connection,
    dynamic_coefficients,
    ghc_apply,
    init_A_static,
    init_B_static,
    width_connection,
)

from .conftest import check_grads


def randomize(p: GhcParams, rng, scale=0.5):
    for t in p.tensors():
        t.data = t.data + scale * rng.normal(size=t.shape)
    return p


def state(rng, lead, cfg):
    return SlotState(nc.Tensor(rng.normal(size=lead + (cfg.n, cfg.d_b))))


# --- scalar-loop oracle of the per-token formulas ---------------------------


def oracle_coefficients(p: GhcParams, H):
    cfg = p.config
    n, m, d = cfg.n, cfg.m, cfg.d_b
    tau = math.sqrt(cfg.D / cfg.m)
    g = p.norm_scale.data
    Hn = [[0.0] * d for _ in range(n)]
    for i in range(n):
        ms = sum(H[i][k] ** 2 for k in range(d)) / d
        for k in range(d):
            Hn[i][k] = H[i][k] / math.sqrt(ms + 1e-6) * g[k]
    A = [[0.0] * (m + n) for _ in range(n)]
    for i in range(n):
        for j in range(m + n):
            z = sum(Hn[i][k] * p.W_alpha.data[k, j] for k in range(d)) / tau
            A[i][j] = p.S_alpha.data[i, j] * math.tanh(z) + p.A_static.data[i, j]
    B = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            z = sum(Hn[j][k] * p.W_beta.data[k, i] for k in range(d)) / tau
            B[i][j] = p.S_beta.data[i, j] * math.tanh(z) + p.B_static.data[i, j]
    return A, B


def oracle_width(A, H, m):
    n, d = len(H), len(H[0])
    mixed = [[sum(A[i][c] * H[i][k] for i in range(n)) for k in range(d)] for c in range(len(A[0]))]
    backbone = [v for row in mixed[:m] for v in row]
    return backbone, mixed[m:]


# --- config and init -------------------------------------------------------


def test_config_derived_quantities():
    cfg = GhcConfig(D=64, m=2, n=3)
    assert cfg.d_b == 32 and cfg.r == Fraction(3, 2) and cfg.D_wide == 96
    assert cfg.d_b * cfg.n == cfg.D_wide and cfg.d_b * cfg.m == cfg.D
    assert cfg.tau_squared == 32
    assert cfg.tau**2 == pytest.approx(32, rel=1e-15)


@pytest.mark.parametrize("D, m, n", [(8, 3, 3), (8, 2, 1), (8, 0, 2)])
def test_config_rejects(D, m, n):
    with pytest.raises(nc.ConfigError):
        GhcConfig(D=D, m=m, n=n)


@pytest.mark.parametrize("m, n, expected", [
    (2, 3, [[1, 0, 1], [0, 1, 0]]),
    (1, 1, [[1]]),
    (2, 4, [[1, 0, 1, 0], [0, 1, 0, 1]]),
])
def test_init_B(m, n, expected):
    assert init_B_static(m, n).data.tolist() == expected


@pytest.mark.parametrize("m, n, expected", [
    (2, 3, [[1, 0, 1, 0, 0], [0, 1, 0, 1, 0], [0, 0, 0, 0, 1]]),
    (1, 1, [[1, 1]]),
    (2, 2, [[1, 0, 1, 0], [0, 1, 0, 1]]),
])
def test_init_A(m, n, expected):
    assert init_A_static(m, n).data.tolist() == expected


def test_param_init_and_decay_tags():
    p = GhcParams.init(GhcConfig(D=8, m=2, n=3), prefix="layer0.attn.ghc")
    assert not p.W_alpha.data.any() and not p.W_beta.data.any()
    assert (p.S_alpha.data == 1).all() and (p.S_beta.data == 1).all()
    assert not p.A_static.decay and not p.B_static.decay
    assert all(t.decay for t in (p.W_alpha, p.W_beta, p.S_alpha, p.S_beta, p.norm_scale))
    assert p.A_static.name == "layer0.attn.ghc.A"
    assert p.W_alpha.shape == (4, 5) and p.W_beta.shape == (4, 2)


def test_slot_flatten_roundtrip(rng):
    x = nc.Tensor(rng.normal(size=(5, 12)))
    s = SlotState.from_flat(x, 3)
    assert s.slots.shape == (5, 3, 4)
    np.testing.assert_array_equal(s.flatten().data, x.data)
    np.testing.assert_array_equal(s.slots.data[2, 1], x.data[2, 4:8])


# --- dynamic coefficients ---------------------------------------------------


def test_dynamic_at_init_equals_static(rng):
    cfg = GhcConfig(D=8, m=2, n=3)
    p = GhcParams.init(cfg)
    a, b = dynamic_coefficients(p, state(rng, (4,), cfg))
    np.testing.assert_array_equal(a.data, np.broadcast_to(p.A_static.data, a.shape))
    np.testing.assert_array_equal(b.data, np.broadcast_to(p.B_static.data, b.shape))


def test_zero_state_gives_static(rng):
    cfg = GhcConfig(D=8, m=2, n=3)
    p = randomize(GhcParams.init(cfg), rng)
    a, b = dynamic_coefficients(p, SlotState(nc.Tensor(np.zeros((2, 3, 4)))))
    np.testing.assert_array_equal(a.data[0], p.A_static.data)
    np.testing.assert_array_equal(b.data[1], p.B_static.data)


def test_static_mode_refuses_dynamic(rng):
    cfg = GhcConfig(D=8, m=2, n=3, dynamic=False)
    with pytest.raises(nc.ContractError):
        dynamic_coefficients(GhcParams.init(cfg), state(rng, (1,), cfg))


@pytest.mark.parametrize("seed", range(5))
def test_dynamic_matches_scalar_oracle(seed):
    rng = np.random.default_rng(seed)
    cfg = GhcConfig(D=8, m=2, n=3)
    p = randomize(GhcParams.init(cfg), rng)
    s = state(rng, (3,), cfg)
    a, b = dynamic_coefficients(p, s)
    for t in range(3):
        A, B = oracle_coefficients(p, s.slots.data[t].tolist())
        np.testing.assert_allclose(a.data[t], A, rtol=0, atol=1e-12)
        np.testing.assert_allclose(b.data[t], B, rtol=0, atol=1e-12)


# --- width / depth connections ---------------------------------------------


def test_width_at_init_selects_first_m_slots(rng):
    cfg = GhcConfig(D=8, m=2, n=3)
    s = state(rng, (2,), cfg)
    bb, carry, _ = width_connection(GhcParams.init(cfg), s)
    np.testing.assert_array_equal(bb.data, s.slots.data[:, :2].reshape(2, 8))
    np.testing.assert_array_equal(carry.data, s.slots.data)


def test_width_m_n_one(rng):
    cfg = GhcConfig(D=6, m=1, n=1)
    s = state(rng, (3,), cfg)
    bb, carry, _ = width_connection(GhcParams.init(cfg), s)
    np.testing.assert_array_equal(bb.data, s.slots.data[:, 0])
    np.testing.assert_array_equal(carry.data, s.slots.data)


def test_width_static_random_matches_oracle(rng):
    cfg = GhcConfig(D=4, m=2, n=3, dynamic=False)
    p = GhcParams.init(cfg)
    p.A_static.data = rng.normal(size=(3, 5))
    s = state(rng, (1,), cfg)
    bb, carry, _ = width_connection(p, s)
    want_bb, want_carry = oracle_width(p.A_static.data.tolist(), s.slots.data[0].tolist(), 2)
    np.testing.assert_allclose(bb.data[0], want_bb, atol=1e-12)
    np.testing.assert_allclose(carry.data[0], want_carry, atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_dynamic_width_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    cfg = GhcConfig(D=8, m=2, n=3)
    p = randomize(GhcParams.init(cfg), rng)
    s = state(rng, (2,), cfg)
    bb, carry, _ = width_connection(p, s)
    for t in range(2):
        H = s.slots.data[t].tolist()
        A, _ = oracle_coefficients(p, H)
        want_bb, want_carry = oracle_width(A, H, 2)
        np.testing.assert_allclose(bb.data[t], want_bb, atol=1e-12)
        np.testing.assert_allclose(carry.data[t], want_carry, atol=1e-12)


def test_depth_at_init_writes_cyclically(rng):
    cfg = GhcConfig(D=8, m=2, n=3)
    carry = nc.Tensor(rng.normal(size=(1, 3, 4)))
    z = rng.normal(size=(1, 8))
    out = depth_connection(init_B_static(2, 3), nc.Tensor(z), carry, cfg).slots.data[0]
    z0, z1 = z[0, :4], z[0, 4:]
    np.testing.assert_allclose(out, carry.data[0] + np.stack([z0, z1, z0]), atol=1e-15)


def test_depth_zero_write_is_skip(rng):
    cfg = GhcConfig(D=8, m=2, n=3)
    carry = nc.Tensor(rng.normal(size=(2, 3, 4)))
    out = depth_connection(nc.Tensor(np.zeros((2, 3))), nc.Tensor(rng.normal(size=(2, 8))), carry, cfg)
    np.testing.assert_array_equal(out.slots.data, carry.data)


def test_depth_shape_errors(rng):
    cfg = GhcConfig(D=8, m=2, n=3)
    carry = nc.Tensor(np.zeros((2, 3, 4)))
    with pytest.raises(nc.ShapeError):
        depth_connection(init_B_static(2, 3), nc.Tensor(np.zeros((2, 6))), carry, cfg)
    with pytest.raises(nc.ShapeError):
        depth_connection(nc.Tensor(np.zeros((3, 2))), nc.Tensor(np.zeros((2, 8))), carry, cfg)
    with pytest.raises(nc.ShapeError):
        width_connection(GhcParams.init(cfg), SlotState(nc.Tensor(np.zeros((2, 4, 4)))))


# --- composition -----------------------------------------------------------


@pytest.mark.parametrize("m", [1, 2, 4])
@pytest.mark.parametrize("dynamic", [False, True])
def test_square_init_is_residual(rng, m, dynamic):
    cfg = GhcConfig(D=8, m=m, n=m, dynamic=dynamic)
    W = rng.normal(size=(8, 8))

    def f(x):
        return nc.gelu(nc.matmul(x, nc.Tensor(W)))

    s = state(rng, (3,), cfg)
    out = ghc_apply(GhcParams.init(cfg), s, f)
    expected = s.flatten().data + f(s.flatten()).data
    np.testing.assert_allclose(out.flatten().data, expected, rtol=0, atol=1e-12)


@given(st.integers(0, 2**31 - 1), st.sampled_from([(2, 3), (2, 4), (1, 3), (4, 6)]))
@settings(max_examples=20, deadline=None)
def test_dynamic_at_init_bitwise_equals_static(seed, mn):
    rng = np.random.default_rng(seed)
    m, n = mn
    dyn, sta = GhcConfig(D=8, m=m, n=n), GhcConfig(D=8, m=m, n=n, dynamic=False)
    s = state(rng, (2, 3), dyn)
    W = nc.Tensor(rng.normal(size=(8, 8)))
    f = lambda x: nc.matmul(x, W)  # noqa: E731
    a = ghc_apply(GhcParams.init(dyn), s, f).slots.data
    b = ghc_apply(GhcParams.init(sta), s, f).slots.data
    assert np.array_equal(a, b)


def test_identity_sublayer_zero_write(rng):
    cfg = GhcConfig(D=8, m=2, n=3, dynamic=False)
    p = GhcParams.init(cfg)
    p.A_static.data = rng.normal(size=(3, 5))
    p.B_static.data = np.zeros((2, 3))
    s = state(rng, (2,), cfg)
    out = ghc_apply(p, s, lambda x: x)
    hat = p.A_static.data[:, 2:]
    np.testing.assert_allclose(out.slots.data, np.einsum("ic,tid->tcd", hat, s.slots.data), atol=1e-12)


def test_apply_equals_manual_chain(rng):
    cfg = GhcConfig(D=8, m=2, n=3)
    p = randomize(GhcParams.init(cfg), rng)
    s = state(rng, (4,), cfg)
    W = nc.Tensor(rng.normal(size=(8, 8)))
    f = lambda x: nc.safe_tanh(nc.matmul(x, W))  # noqa: E731
    bb, carry, b_eff = width_connection(p, s)
    manual = depth_connection(b_eff, f(bb), carry, cfg).slots.data
    np.testing.assert_array_equal(ghc_apply(p, s, f).slots.data, manual)


@given(
    st.sampled_from([1, 2, 4, 8]),
    st.sampled_from([Fraction(1), Fraction(3, 2), Fraction(2), Fraction(4), Fraction(8)]),
    st.sampled_from([8, 16, 64]),
)
@settings(max_examples=60, deadline=None)
def test_shape_algebra(m, r, D):
    n = r * m
    if n.denominator != 1 or D % m:
        return
    cfg = GhcConfig(D=D, m=m, n=int(n), dynamic=False)
    s = SlotState(nc.Tensor(np.ones((2, cfg.n, cfg.d_b))))
    bb, carry, _ = width_connection(GhcParams.init(cfg), s)
    assert bb.shape == (2, D)
    assert carry.shape[-2] * carry.shape[-1] == cfg.D_wide == int(r * D)


def test_linearity_for_fixed_coefficients(rng):
    cfg = GhcConfig(D=8, m=2, n=3, dynamic=False)
    p = GhcParams.init(cfg)
    p.A_static.data = rng.normal(size=(3, 5))
    s1, s2 = state(rng, (2,), cfg), state(rng, (2,), cfg)
    a, b = 1.3, -0.7
    mix = SlotState(nc.Tensor(a * s1.slots.data + b * s2.slots.data))
    out = [width_connection(p, s) for s in (s1, s2, mix)]
    for k in (0, 1):
        np.testing.assert_allclose(out[2][k].data, a * out[0][k].data + b * out[1][k].data, atol=1e-12)
    B = nc.Tensor(rng.normal(size=(2, 3)))
    z1, z2 = rng.normal(size=(2, 8)), rng.normal(size=(2, 8))
    d = [depth_connection(B, nc.Tensor(z), c, cfg).slots.data
         for z, c in ((z1, s1.slots), (z2, s2.slots), (a * z1 + b * z2, mix.slots))]
    np.testing.assert_allclose(d[2], a * d[0] + b * d[1], atol=1e-12)


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("dynamic", [False, True])
def test_every_parameter_gets_checked_gradient(seed, dynamic):
    rng = np.random.default_rng(seed)
    cfg = GhcConfig(D=8, m=2, n=3, dynamic=dynamic)
    p = randomize(GhcParams.init(cfg), rng)
    s = nc.Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    W = nc.Tensor(rng.normal(size=(8, 8)))
    weights = nc.Tensor(rng.normal(size=(2, 3, 4)))

    def loss():
        out = ghc_apply(p, SlotState(s), lambda x: nc.gelu(nc.matmul(x, W)))
        return nc.total_sum(nc.elementwise_mul(out.slots, weights))

    check_grads(loss, p.active_tensors() + [s])
    for t in p.active_tensors():
        assert np.abs(t.grad).max() > 0, t.name
