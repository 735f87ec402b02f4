import math

import numpy as np
import pytest

from vwn import numcore as nc
from vwn.ghc import SlotState
from vwn.model import (
    VwnModelConfig,
    embed,
    expected_parameter_count,
    forward_backbone,
    init_model,
    load_checkpoint,
    mtp_forward,
    mtp_mix,
    next2_loss,
    ntp_logits,
    read_checkpoint,
    reduce,
    save_checkpoint,
    total_loss,
)

from . import oracles


def tiny(**kw) -> VwnModelConfig:
    base = dict(vocab_size=11, D=8, L=2, heads=2, ffn_mult=2, m=2, n=3, max_seq_len=8)
    base.update(kw)
    return VwnModelConfig(**base)


def jitter(model, rng, scale=0.3):
    for p in model.parameters():
        p.data += scale * rng.normal(size=p.shape)
    return model


# --- config ----------------------------------------------------------------


def test_config_validation():
    with pytest.raises(nc.ConfigError):
        tiny(heads=3)
    with pytest.raises(nc.ConfigError):
        tiny(m=3)
    with pytest.raises(nc.ConfigError):
        tiny(n=1)
    with pytest.raises(nc.ConfigError):
        tiny(mtp_loss_weight=-1.0)


def test_group_norm_auto_disabled_for_fractional_r():
    with pytest.warns(UserWarning, match="group norm"):
        cfg = VwnModelConfig(vocab_size=8, D=8, L=1, heads=2, m=2, n=3, use_group_norm_before_reduce=True)
    assert not cfg.use_group_norm_before_reduce
    assert VwnModelConfig(vocab_size=8, D=8, L=1, heads=2, m=2, n=4).use_group_norm_before_reduce


def test_config_dict_roundtrip():
    cfg = tiny(mtp_enabled=True)
    assert VwnModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(nc.ConfigError):
        VwnModelConfig.from_dict({"bogus": 1})


# --- embedding -------------------------------------------------------------


def test_embed_splits_rows_into_slots():
    model = init_model(VwnModelConfig(vocab_size=4, D=4, L=0, heads=1, m=2, n=3, max_seq_len=4))
    model["embed.pos"].data[:] = 0.0
    row = model["embed.E_wide"].data[0]
    slots = embed(model, [0]).slots.data[0]
    np.testing.assert_array_equal(slots, [row[0:2], row[2:4], row[4:6]])


def test_embed_expand_identity_padding(rng):
    cfg = VwnModelConfig(vocab_size=5, D=4, L=0, heads=1, m=2, n=4, use_expand_projection=True, max_seq_len=4)
    model = init_model(cfg)
    model["embed.pos"].data[:] = 0.0
    slots = embed(model, [3, 1]).slots.data
    base = model["embed.E_base"].data[[3, 1]]
    np.testing.assert_array_equal(slots[:, :2].reshape(2, 4), base)
    assert not slots[:, 2:].any()


def test_embed_one_hot_locates_index():
    cfg = VwnModelConfig(vocab_size=6, D=2, L=0, heads=1, m=1, n=3, max_seq_len=4)
    model = init_model(cfg)
    model["embed.E_wide"].data[:] = np.eye(6)
    model["embed.pos"].data[:] = 0.0
    for tok in range(6):
        slots = embed(model, [tok]).slots.data[0]
        assert np.argwhere(slots == 1.0).tolist() == [[tok // 2, tok % 2]]


def test_positions_enter_first_m_slots_only():
    cfg = tiny(L=0)
    model = init_model(cfg)
    model["embed.E_wide"].data[:] = 0.0
    slots = embed(model, [1, 2, 3]).slots.data
    np.testing.assert_array_equal(slots[:, :2].reshape(3, 8), model["embed.pos"].data[:3])
    assert not slots[:, 2:].any()


def test_embed_rejects_bad_ids_and_length():
    model = init_model(tiny())
    with pytest.raises(nc.InputError):
        embed(model, [11])
    with pytest.raises(nc.InputError):
        embed(model, list(range(9)))


# --- backbone --------------------------------------------------------------


def test_empty_stack_reduces_embedding(rng):
    model = jitter(init_model(tiny(L=0, n=4)), rng)
    tok = rng.integers(0, 11, size=5)
    _, h = forward_backbone(model, tok)
    np.testing.assert_array_equal(h.data, reduce(model, embed(model, tok)).data)


def test_backbone_shape_and_finite(rng):
    model = jitter(init_model(tiny()), rng)
    state, h = forward_backbone(model, rng.integers(0, 11, size=(2, 6)))
    assert h.shape == (2, 6, 8) and state.slots.shape == (2, 6, 3, 4)
    assert np.isfinite(h.data).all()


@pytest.mark.parametrize("seed", range(3))
def test_residual_equivalence(seed):
    rng = np.random.default_rng(seed)
    cfg = VwnModelConfig(vocab_size=13, D=8, L=3, heads=2, ffn_mult=2, m=1, n=1, dynamic=False,
                         use_group_norm_before_reduce=False, max_seq_len=8)
    model = jitter(init_model(cfg, seed=seed), rng)
    for l in range(cfg.L):
        for kind in ("attn", "ffn"):
            model[f"layer{l}.{kind}.ghc.A"].data[:] = [[1.0, 1.0]]
            model[f"layer{l}.{kind}.ghc.B"].data[:] = [[1.0]]
    model["reduce.W"].data[:] = np.eye(8)
    tok = rng.integers(0, 13, size=7)
    want = oracles.residual_transformer_logits({k: v.data for k, v in model.params.items()}, tok, cfg.L, 2)
    np.testing.assert_allclose(ntp_logits(model, tok).data, want, rtol=0, atol=1e-10)


def test_untrained_loss_near_log_vocab(rng):
    model = init_model(VwnModelConfig(vocab_size=64, D=16, L=2, heads=2, m=2, n=4, max_seq_len=16))
    loss = total_loss(model, rng.integers(0, 64, size=(2, 16)))[0].item()
    assert abs(loss - math.log(64)) < 0.2 * math.log(64)


def test_forced_logits_give_small_loss():
    cfg = VwnModelConfig(vocab_size=2, D=2, L=0, heads=1, m=1, n=1, max_seq_len=4, use_group_norm_before_reduce=False)
    model = init_model(cfg)
    model["embed.E_wide"].data[:] = [[10.0, 0.0], [0.0, 10.0]]
    model["embed.pos"].data[:] = 0.0
    model["reduce.W"].data[:] = np.eye(2)
    # logits favour repeating the current token; a constant sequence is then near certain
    model["unembed.W"].data[:] = [[50.0, -50.0], [-50.0, 50.0]]
    assert total_loss(model, [1, 1, 1, 1])[1].item() < 1e-3


def test_loss_is_deterministic(rng):
    tok = rng.integers(0, 11, size=(2, 6))
    a = total_loss(init_model(tiny(mtp_enabled=True), seed=5), tok)[0].item()
    b = total_loss(init_model(tiny(mtp_enabled=True), seed=5), tok)[0].item()
    assert a == b


def test_causality(rng):
    model = jitter(init_model(tiny()), rng)
    tok = rng.integers(0, 11, size=8)
    base = ntp_logits(model, tok).data
    for t in range(7):
        changed = tok.copy()
        changed[t + 1 :] = (changed[t + 1 :] + 3) % 11
        np.testing.assert_array_equal(ntp_logits(model, changed).data[: t + 1], base[: t + 1])


def test_non_finite_reports_layer(rng):
    model = init_model(tiny())
    model["layer1.ffn.W1"].data[0, 0] = np.inf
    with np.errstate(invalid="ignore"), pytest.raises(nc.NonFiniteError, match="layer 1"):
        ntp_logits(model, [1, 2, 3])


def test_group_norm_placement(rng):
    cfg = tiny(n=4, use_group_norm_before_reduce=True)
    model = jitter(init_model(cfg), rng)
    state, _ = forward_backbone(model, rng.integers(0, 11, size=6))
    flat = nc.group_norm(state.flatten(), cfg.D_wide // cfg.D).data.reshape(6, 2, 8)
    assert np.abs(flat.mean(axis=-1)).max() < 1e-10
    np.testing.assert_allclose(flat.var(axis=-1), 1.0, atol=1e-6)


# --- parameter accounting --------------------------------------------------


@pytest.mark.parametrize("kw", [
    {}, {"mtp_enabled": True}, {"n": 4}, {"n": 4, "use_expand_projection": True},
    {"m": 1, "n": 1, "use_group_norm_before_reduce": False}, {"L": 0},
])
def test_parameter_count(kw):
    cfg = tiny(**kw)
    model = init_model(cfg)
    walked = sum(int(np.prod(t.shape)) for t in model.params.values())
    assert walked == expected_parameter_count(cfg)


def test_parameter_names_and_decay():
    model = init_model(tiny(mtp_enabled=True))
    for l in range(2):
        for kind in ("attn", "ffn"):
            for p in ("A", "B", "W_alpha", "W_beta", "S_alpha", "S_beta", "norm_scale"):
                assert f"layer{l}.{kind}.ghc.{p}" in model.params
            assert not model[f"layer{l}.{kind}.ghc.A"].decay
    assert "mtp.M" in model.params and model["mtp.M"].shape == (8, 4)


# --- MTP -------------------------------------------------------------------


def _mtp_model(rng):
    model = jitter(init_model(tiny(mtp_enabled=True)), rng)
    model["mtp.hidden_norm"].data[:] = 1.0
    model["mtp.emb_norm"].data[:] = 1.0
    return model


def test_mtp_selectors(rng):
    model = _mtp_model(rng)
    h = SlotState(nc.Tensor(rng.normal(size=(4, 3, 4))))
    e = SlotState(nc.Tensor(rng.normal(size=(4, 3, 4))))
    g = np.ones(4)
    model["mtp.M"].data[:] = np.vstack([np.eye(4), np.zeros((4, 4))])
    np.testing.assert_allclose(mtp_mix(model, h, e).slots.data, oracles.rms(h.slots.data, g), atol=1e-15)
    model["mtp.M"].data[:] = np.vstack([np.zeros((4, 4)), np.eye(4)])
    np.testing.assert_allclose(mtp_mix(model, h, e).slots.data, oracles.rms(e.slots.data, g), atol=1e-15)


def test_mtp_mix_scalar_oracle(rng):
    model = _mtp_model(rng)
    h, e = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    out = mtp_mix(model, SlotState(nc.Tensor(h)), SlotState(nc.Tensor(e))).slots.data
    g = np.ones(4)
    want = oracles.block_mix(oracles.rms(h, g).tolist(), oracles.rms(e, g).tolist(), model["mtp.M"].data.tolist())
    np.testing.assert_allclose(out, want, atol=1e-12)


def test_mtp_logits_shape_and_disabled(rng):
    model = _mtp_model(rng)
    tok = rng.integers(0, 11, size=(2, 6))
    emb = embed(model, tok)
    h, _ = forward_backbone(model, tok)
    assert mtp_forward(model, h, emb).shape == (2, 5, 11)
    plain = init_model(tiny())
    with pytest.raises(nc.ContractError):
        mtp_forward(plain, h, emb)


def test_total_loss_combinations(rng):
    tok = rng.integers(0, 11, size=(2, 6))
    plain = init_model(tiny())
    loss, ntp, mtp = total_loss(plain, tok)
    assert mtp is None and loss.item() == ntp.item()

    model = init_model(tiny(mtp_enabled=True, mtp_loss_weight=1.0))
    loss, ntp, mtp = total_loss(model, tok)
    assert loss.item() > max(ntp.item(), mtp.item()) > 0
    assert loss.item() == pytest.approx(ntp.item() + mtp.item(), abs=1e-14)


def test_zero_weight_matches_ntp_gradients(rng):
    tok = rng.integers(0, 11, size=(2, 6))
    model = jitter(init_model(tiny(mtp_enabled=True, mtp_loss_weight=0.0)), rng)
    nc.backward(total_loss(model, tok)[0])
    full = {k: (v.grad.copy() if v.grad is not None else None) for k, v in model.params.items()}
    model.zero_grad()
    nc.backward(total_loss(model, tok)[1])
    for k, v in model.params.items():
        if k.startswith("mtp."):
            continue
        np.testing.assert_allclose(full[k], v.grad, atol=1e-12, err_msg=k)


def test_next2_uses_shifted_ntp_without_mtp(rng):
    model = jitter(init_model(tiny()), rng)
    tok = rng.integers(0, 11, size=(1, 6))
    logits = ntp_logits(model, tok).data[0]
    lp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    want = -np.mean([lp[t + 1, tok[0, t + 2]] for t in range(4)])
    assert next2_loss(model, tok) == pytest.approx(want, abs=1e-12)


# --- checkpoints -----------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path, rng):
    model = jitter(init_model(tiny(mtp_enabled=True)), rng)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, extra={"note": "x"})
    header, arrays = read_checkpoint(path)
    assert header["format_version"] == 1 and header["extra"] == {"note": "x"}
    loaded = load_checkpoint(path)
    assert loaded.config == model.config
    for k, v in model.params.items():
        assert np.array_equal(loaded[k].data, v.data)
        assert loaded[k].decay == v.decay
    tok = rng.integers(0, 11, size=(2, 5))
    assert total_loss(loaded, tok)[0].item() == total_loss(model, tok)[0].item()


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(nc.InputError):
        read_checkpoint(path)
