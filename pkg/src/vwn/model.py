"""Virtual Width Network: over-width embedding, GHC-wrapped blocks, reduce, MTP head."""

from __future__ import annotations

import dataclasses
import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .ghc import GhcConfig, GhcParams, SlotState, ghc_apply
from .numcore import ConfigError, ContractError, InputError, NonFiniteError, Tensor


@dataclass
class VwnModelConfig:
    vocab_size: int = 64
    D: int = 64
    L: int = 4
    heads: int = 4
    ffn_mult: int = 4
    m: int = 2
    n: int = 3
    use_expand_projection: bool = False
    use_group_norm_before_reduce: bool = True
    mtp_enabled: bool = False
    mtp_loss_weight: float = 0.3
    max_seq_len: int = 64
    dynamic: bool = True
    init_std: float = 0.02

    def __post_init__(self) -> None:
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be at least 2")
        if self.D < 1 or self.heads < 1 or self.D % self.heads:
            raise ConfigError(f"D={self.D} must be a positive multiple of heads={self.heads}")
        if self.L < 0 or self.ffn_mult < 1 or self.max_seq_len < 2:
            raise ConfigError("L >= 0, ffn_mult >= 1 and max_seq_len >= 2 are required")
        if self.mtp_loss_weight < 0:
            raise ConfigError("mtp_loss_weight must be nonnegative")
        self.ghc_config()  # validates m, n against D
        if self.use_group_norm_before_reduce and self.D_wide % self.D:
            warnings.warn(
                f"group norm before reduce disabled: r = {self.n}/{self.m} is not an integer",
                stacklevel=2,
            )
            self.use_group_norm_before_reduce = False

    @property
    def d_b(self) -> int:
        return self.D // self.m

    @property
    def D_wide(self) -> int:
        return self.n * self.d_b

    @property
    def ffn_dim(self) -> int:
        return self.ffn_mult * self.D

    def ghc_config(self) -> GhcConfig:
        return GhcConfig(self.D, self.m, self.n, self.dynamic)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> VwnModelConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return cls(**d)


# ---------------------------------------------------------------------------
# Backbone sublayers


@dataclass
class Attention:
    norm: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int

    def __call__(self, x: Tensor) -> Tensor:
        # x: (B, T, D), pre-norm causal multi-head attention
        B, T, D = x.shape
        hd = D // self.heads
        h = nc.rms_norm(x, self.norm)

        def split(w: Tensor, axes) -> Tensor:
            return nc.permute(nc.reshape(nc.matmul(h, w), (B, T, self.heads, hd)), axes)

        q = split(self.wq, (0, 2, 1, 3))
        kt = split(self.wk, (0, 2, 3, 1))
        v = split(self.wv, (0, 2, 1, 3))
        att = nc.softmax_last_dim(nc.scale(nc.matmul(q, kt), 1.0 / math.sqrt(hd)), causal=True)
        y = nc.reshape(nc.permute(nc.matmul(att, v), (0, 2, 1, 3)), (B, T, D))
        return nc.matmul(y, self.wo)

    def tensors(self) -> list[Tensor]:
        return [self.norm, self.wq, self.wk, self.wv, self.wo]


@dataclass
class FeedForward:
    norm: Tensor
    w1: Tensor
    w2: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return nc.matmul(nc.gelu(nc.matmul(nc.rms_norm(x, self.norm), self.w1)), self.w2)

    def tensors(self) -> list[Tensor]:
        return [self.norm, self.w1, self.w2]


@dataclass
class Block:
    attn: Attention
    ffn: FeedForward
    attn_ghc: GhcParams
    ffn_ghc: GhcParams

    def __call__(self, state: SlotState) -> SlotState:
        state = ghc_apply(self.attn_ghc, state, self.attn)
        return ghc_apply(self.ffn_ghc, state, self.ffn)


# ---------------------------------------------------------------------------
# Model


@dataclass
class VwnModel:
    config: VwnModelConfig
    params: dict[str, Tensor]
    blocks: list[Block]
    mtp_block: Block | None = None
    # not a parameter: zero padding that places position embeddings in the first m slots
    _pos_pad: Tensor | None = field(default=None, repr=False)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]


def _build_block(cfg: VwnModelConfig, prefix: str, rng: np.random.Generator, params: dict[str, Tensor]) -> Block:
    D, F, std = cfg.D, cfg.ffn_dim, cfg.init_std
    out_std = std / math.sqrt(2 * max(cfg.L, 1))

    def add(name: str, data, decay: bool = True) -> Tensor:
        t = Tensor(data, requires_grad=True, name=f"{prefix}.{name}", decay=decay)
        params[t.name] = t
        return t

    attn = Attention(
        norm=add("attn.norm_scale", np.ones(D), decay=False),
        wq=add("attn.Wq", rng.normal(0, std, (D, D))),
        wk=add("attn.Wk", rng.normal(0, std, (D, D))),
        wv=add("attn.Wv", rng.normal(0, std, (D, D))),
        wo=add("attn.Wo", rng.normal(0, out_std, (D, D))),
        heads=cfg.heads,
    )
    ffn = FeedForward(
        norm=add("ffn.norm_scale", np.ones(D), decay=False),
        w1=add("ffn.W1", rng.normal(0, std, (D, F))),
        w2=add("ffn.W2", rng.normal(0, out_std, (F, D))),
    )
    ghcs = []
    for kind in ("attn", "ffn"):
        g = GhcParams.init(cfg.ghc_config(), prefix=f"{prefix}.{kind}.ghc")
        for t in g.tensors():
            params[t.name] = t
        ghcs.append(g)
    return Block(attn, ffn, ghcs[0], ghcs[1])


def init_model(cfg: VwnModelConfig, seed: int = 0) -> VwnModel:
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    D, Dw, V, std = cfg.D, cfg.D_wide, cfg.vocab_size, cfg.init_std

    def add(name: str, data, decay: bool = True) -> Tensor:
        t = Tensor(data, requires_grad=True, name=name, decay=decay)
        params[name] = t
        return t

    if cfg.use_expand_projection:
        add("embed.E_base", rng.normal(0, std, (V, D)))
        w = np.zeros((D, Dw))
        w[:, :D] = np.eye(D)
        add("embed.W_expand", w)
    else:
        add("embed.E_wide", rng.normal(0, std, (V, Dw)))
    add("embed.pos", rng.normal(0, std, (cfg.max_seq_len, D)))

    blocks = [_build_block(cfg, f"layer{l}", rng, params) for l in range(cfg.L)]

    if cfg.use_group_norm_before_reduce:
        add("reduce.gn_scale", np.ones(Dw), decay=False)
        add("reduce.gn_bias", np.zeros(Dw), decay=False)
    add("reduce.W", rng.normal(0, std, (Dw, D)))
    add("final_norm.scale", np.ones(D), decay=False)
    add("unembed.W", rng.normal(0, std, (D, V)))

    mtp_block = None
    if cfg.mtp_enabled:
        d_b = cfg.d_b
        add("mtp.hidden_norm", np.ones(d_b), decay=False)
        add("mtp.emb_norm", np.ones(d_b), decay=False)
        add("mtp.M", rng.normal(0, 1.0 / math.sqrt(2 * d_b), (2 * d_b, d_b)))
        mtp_block = _build_block(cfg, "mtp.block", rng, params)

    pad = None
    if Dw > D:
        pad = Tensor(np.zeros((cfg.max_seq_len, Dw - D)))
    return VwnModel(cfg, params, blocks, mtp_block, pad)


def expected_parameter_count(cfg: VwnModelConfig) -> int:
    """Closed-form parameter count implied by the config."""
    D, Dw, V, F = cfg.D, cfg.D_wide, cfg.vocab_size, cfg.ffn_dim
    m, n, d_b = cfg.m, cfg.n, cfg.d_b
    emb = V * D + D * Dw if cfg.use_expand_projection else V * Dw
    emb += cfg.max_seq_len * D
    ghc = n * (m + n) + m * n + d_b * (m + n) + d_b * m + n * (m + n) + m * n + d_b
    block = (4 * D * D + D) + (2 * D * F + D) + 2 * ghc
    head = Dw * D + D + D * V + (2 * Dw if cfg.use_group_norm_before_reduce else 0)
    mtp = 2 * d_b + 2 * d_b * d_b + block if cfg.mtp_enabled else 0
    return emb + cfg.L * block + head + mtp


# ---------------------------------------------------------------------------
# Forward


def _as_batch(tokens) -> tuple[np.ndarray, bool]:
    tok = np.asarray(tokens, dtype=np.int64)
    if tok.ndim == 1:
        return tok[None, :], True
    if tok.ndim != 2:
        raise InputError(f"tokens must be 1-D or 2-D, got shape {tok.shape}")
    return tok, False


def embed(model: VwnModel, tokens) -> SlotState:
    """Over-width token embeddings (plus positions in the first m slots) as n slots."""
    cfg = model.config
    tok, single = _as_batch(tokens)
    T = tok.shape[1]
    if T > cfg.max_seq_len:
        raise InputError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
    if tok.size and (tok.min() < 0 or tok.max() >= cfg.vocab_size):
        raise InputError(f"token id out of range [0, {cfg.vocab_size})")
    if cfg.use_expand_projection:
        e = nc.matmul(nc.embedding_lookup(model["embed.E_base"], tok), model["embed.W_expand"])
    else:
        e = nc.embedding_lookup(model["embed.E_wide"], tok)
    pos = nc.slice_rows(model["embed.pos"], 0, T)
    if model._pos_pad is not None:
        pos = nc.concat_last_dim([pos, nc.slice_rows(model._pos_pad, 0, T)])
    e = nc.add(e, pos)
    if single:
        e = nc.reshape(e, e.shape[1:])
    return SlotState.from_flat(e, cfg.n)


def _run_blocks(blocks: list[Block], state: SlotState, label: str) -> SlotState:
    single = state.slots.ndim == 3
    if single:
        state = SlotState(nc.reshape(state.slots, (1,) + state.slots.shape))
    for l, block in enumerate(blocks):
        try:
            state = block(state)
        except NonFiniteError as exc:
            raise NonFiniteError(f"{label} layer {l}: {exc}") from None
    if single:
        state = SlotState(nc.reshape(state.slots, state.slots.shape[1:]))
    return state


def reduce(model: VwnModel, state: SlotState) -> Tensor:
    """Group-normalize (when enabled) and project the over-width state back to D."""
    cfg = model.config
    flat = state.flatten()
    if cfg.use_group_norm_before_reduce:
        flat = nc.group_norm(
            flat, cfg.D_wide // cfg.D, (model["reduce.gn_scale"], model["reduce.gn_bias"])
        )
    return nc.matmul(flat, model["reduce.W"])


def unembed(model: VwnModel, h_reduced: Tensor) -> Tensor:
    return nc.matmul(nc.rms_norm(h_reduced, model["final_norm.scale"]), model["unembed.W"])


def forward_backbone(model: VwnModel, tokens) -> tuple[SlotState, Tensor]:
    state = _run_blocks(model.blocks, embed(model, tokens), "backbone")
    return state, reduce(model, state)


def ntp_logits(model: VwnModel, tokens) -> Tensor:
    _, h = forward_backbone(model, tokens)
    return unembed(model, h)


def mtp_mix(model: VwnModel, hidden: SlotState, next_emb: SlotState) -> SlotState:
    """Shared block-linear fusion: per slot, ``[norm(h_i) | norm(e_i)] @ M``."""
    h = nc.rms_norm(hidden.slots, model["mtp.hidden_norm"])
    e = nc.rms_norm(next_emb.slots, model["mtp.emb_norm"])
    return SlotState(nc.matmul(nc.concat_last_dim([h, e]), model["mtp.M"]))


def _shift(state: SlotState, start: int, stop: int) -> SlotState:
    # slice token positions; the token axis sits just before the slot axes
    return SlotState(nc.slice_axis(state.slots, -3, start, stop))


def mtp_forward(model: VwnModel, h_final: SlotState, emb: SlotState) -> Tensor:
    """Logits for token t+2 at each position t < T-1.

    ``emb`` is the over-width embedding of the same token sequence; position t
    uses ``h_final[t]`` and ``emb[t+1]``.
    """
    if not model.config.mtp_enabled or model.mtp_block is None:
        raise ContractError("mtp_forward called on a model without an MTP head")
    T = h_final.slots.shape[-3]
    mixed = mtp_mix(model, _shift(h_final, 0, T - 1), _shift(emb, 1, T))
    state = _run_blocks([model.mtp_block], mixed, "mtp")
    return unembed(model, reduce(model, state))


def total_loss(model: VwnModel, tokens) -> tuple[Tensor, Tensor, Tensor | None]:
    """``(loss, ntp_loss, mtp_loss)``; ``mtp_loss`` is None when MTP is off."""
    cfg = model.config
    tok, _ = _as_batch(tokens)
    T = tok.shape[1]
    emb = embed(model, tok)
    h_final = _run_blocks(model.blocks, emb, "backbone")
    logits = unembed(model, reduce(model, h_final))
    ntp = nc.cross_entropy(nc.slice_axis(logits, 1, 0, T - 1), tok[:, 1:])
    if not cfg.mtp_enabled:
        return ntp, ntp, None
    if T < 3:
        raise InputError("MTP needs sequences of at least 3 tokens")
    mlogits = mtp_forward(model, h_final, emb)
    mtp = nc.cross_entropy(nc.slice_axis(mlogits, 1, 0, T - 2), tok[:, 2:])
    return nc.add(ntp, nc.scale(mtp, cfg.mtp_loss_weight)), ntp, mtp


def next2_loss(model: VwnModel, tokens) -> float:
    """Cross-entropy of token t+2 given tokens up to t+1, without gradients.

    Uses the MTP head when present; otherwise the next-token head evaluated
    one position later, which conditions on the same tokens.
    """
    tok, _ = _as_batch(tokens)
    T = tok.shape[1]
    with nc.no_grad():
        if model.config.mtp_enabled:
            _, _, mtp = total_loss(model, tok)
            return mtp.item()
        logits = ntp_logits(model, tok)
        return nc.cross_entropy(nc.slice_axis(logits, 1, 1, T - 1), tok[:, 2:]).item()


# ---------------------------------------------------------------------------
# Checkpoints
#
# Layout (little-endian):
#   8 bytes  magic b"VWNCKPT\0"
#   4 bytes  uint32 format version
#   8 bytes  uint64 header length H
#   H bytes  UTF-8 JSON header {"format_version", "config", "tensors": [...], "extra"}
#   payload  float64 '<f8' tensors concatenated in header order

CHECKPOINT_MAGIC = b"VWNCKPT\0"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: VwnModel, extra: dict | None = None) -> None:
    entries, offset = [], 0
    for name, t in model.params.items():
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "decay": t.decay})
        offset += t.size * 8
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "tensors": entries,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for t in model.params.values():
            f.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise InputError(f"{path}: not a VWN checkpoint")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CHECKPOINT_VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[20 : 20 + hlen].decode("utf-8"))
    base = 20 + hlen
    arrays = {}
    for e in header["tensors"]:
        count = math.prod(e["shape"])
        start = base + e["offset"]
        arrays[e["name"]] = (
            np.frombuffer(raw[start : start + 8 * count], dtype="<f8").astype(np.float64).reshape(e["shape"])
        )
    return header, arrays


def load_checkpoint(path) -> VwnModel:
    header, arrays = read_checkpoint(path)
    model = init_model(VwnModelConfig.from_dict(header["config"]))
    if set(arrays) != set(model.params):
        raise InputError(f"{path}: tensor names do not match the recorded config")
    for name, arr in arrays.items():
        target = model.params[name]
        if target.shape != arr.shape:
            raise InputError(f"{path}: {name} has shape {arr.shape}, expected {target.shape}")
        target.data[...] = arr
    return model
