"""Depth connectivity of stacked static GHCs.

A stack of static GHCs is a linear recurrence over slot matrices; unrolling it
writes layer ``l``'s state as a sum of earlier backbone writes, each carried
forward by the product of the intermediate carry operators ``Âᵀ``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .ghc import GhcConfig, GhcParams, SlotState, dynamic_coefficients, ghc_apply
from .numcore import ContractError, Tensor, no_grad

GATE_TOL = 1e-3
FULL_STRENGTH_TOL = 1e-3


def _static_blocks(p: GhcParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(Å n×m, Â n×n, B m×n) as arrays."""
    if p.config.dynamic:
        raise ContractError("connectivity analysis needs static GHC parameters")
    m = p.config.m
    a = p.A_static.data
    return a[:, :m], a[:, m:], p.B_static.data


def unroll_forward(
    ghc_stack: Sequence[GhcParams],
    sublayers: Sequence[Callable[[Tensor], Tensor]],
    state0: SlotState,
) -> SlotState:
    """Evaluate the stack through the explicit unrolled sum instead of the recurrence.

    The state entering layer ``s`` (needed as the sublayer input) is itself
    produced by the explicit sum over the first ``s - 1`` layers.
    """
    if len(ghc_stack) != len(sublayers):
        raise ValueError("need one sublayer per GHC")
    blocks = [_static_blocks(p) for p in ghc_stack]
    h0 = state0.slots.data
    lead = h0.shape[:-2]
    states = [h0]
    writes: list[np.ndarray] = []
    with no_grad():
        for s, (a_read, _, b) in enumerate(blocks):
            cfg = ghc_stack[s].config
            x = np.matmul(a_read.T, states[s]).reshape(lead + (cfg.D,))
            z = sublayers[s](Tensor(x)).data.reshape(lead + (cfg.m, cfg.d_b))
            writes.append(np.matmul(b.T, z))
            # explicit sum for the state after layer s+1
            l = s + 1
            total = np.zeros_like(h0)
            for t in range(l):
                total = total + _apply_carries(blocks, l, t, writes[l - t - 1])
            total = total + _apply_carries(blocks, l, l, h0)
            states.append(total)
    return SlotState(Tensor(states[-1]))


def _apply_carries(blocks, l: int, count: int, x: np.ndarray) -> np.ndarray:
    # prod_{i=0}^{count-1} Â_{l-i}ᵀ applied to x; the empty product is the identity
    for i in reversed(range(count)):
        x = np.matmul(blocks[l - i - 1][1].T, x)
    return x


def recurrent_forward(ghc_stack, sublayers, state0: SlotState) -> SlotState:
    state = state0
    with no_grad():
        for p, f in zip(ghc_stack, sublayers):
            state = ghc_apply(p, state, f)
    return state


# ---------------------------------------------------------------------------
# Spectral quantities


def operator_norm(mat: np.ndarray, iters: int = 50, tol: float = 1e-10, seed: int = 0) -> float:
    """Largest singular value by power iteration on ``MᵀM``."""
    mat = np.asarray(mat, dtype=np.float64)
    if not mat.any():
        return 0.0
    gram = mat.T @ mat
    v = np.random.default_rng(seed).normal(size=gram.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = gram @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        new = float(v @ gram @ v)
        if abs(new - lam) <= tol * max(abs(new), 1.0):
            lam = new
            break
        lam = new
    return float(np.sqrt(max(lam, 0.0)))


def spectral_radius(mat: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(np.asarray(mat, dtype=np.float64)))))


def is_binary_gate(mat: np.ndarray, tol: float = GATE_TOL) -> bool:
    """Every entry within ``tol`` of 0 or 1."""
    mat = np.asarray(mat)
    return bool(np.all(np.minimum(np.abs(mat), np.abs(mat - 1.0)) <= tol))


@dataclass
class SourceContribution:
    layer_index: int  # 0 is the embedding state; k >= 1 is the write of GHC k
    contribution_norm: float
    spectral_radius: float | None  # of layer k's carry; None for the embedding
    classification: str  # "window" or "attenuated"


@dataclass
class UnrollReport:
    contributions: list[SourceContribution]
    carry_radius: list[float]
    routing: list[str]  # per GHC: "hard" for binary gates, else "soft"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer_index", "contribution_norm", "spectral_radius", "classification"])
        for c in self.contributions:
            radius = "" if c.spectral_radius is None else repr(c.spectral_radius)
            w.writerow([c.layer_index, repr(c.contribution_norm), radius, c.classification])
        return buf.getvalue()


def attenuation_profile(ghc_stack: Sequence[GhcParams]) -> UnrollReport:
    """Operator norm of the carry product each earlier source passes through to reach the top."""
    blocks = [_static_blocks(p) for p in ghc_stack]
    L = len(blocks)
    n = blocks[0][1].shape[0] if blocks else 0
    radii = [spectral_radius(hat.T) for _, hat, _ in blocks]
    routing = []
    for (_, hat, b), rho in zip(blocks, radii):
        hard = is_binary_gate(hat) and is_binary_gate(b) and rho >= 1.0 - GATE_TOL
        routing.append("hard" if hard else "soft")

    contributions = []
    prod = np.eye(n)
    norms = [0.0] * (L + 1)
    # walk down from the top: sources above t contribute carries t+1..L
    for t in range(L, -1, -1):
        norms[t] = operator_norm(prod)
        if t > 0:
            prod = prod @ blocks[t - 1][1].T
    for t in range(L + 1):
        cls = "window" if norms[t] >= 1.0 - FULL_STRENGTH_TOL else "attenuated"
        contributions.append(SourceContribution(t, norms[t], radii[t - 1] if t else None, cls))
    return UnrollReport(contributions, radii, routing)


def slot_budget(config: GhcConfig) -> dict:
    """How the width budget ``r = n/m`` splits into remembered layers and per-layer fidelity."""
    return {
        "m": config.m,
        "n": config.n,
        "r": Fraction(config.n, config.m),
        "d_b": config.d_b,
        "nominal_window": config.n,
        "fidelity": Fraction(config.d_b, config.D),
    }


def dynamic_carry_statistics(model, tokens) -> list[dict]:
    """Empirical per-GHC statistics of the input-dependent carry on a probe batch.

    For each GHC in the backbone, the per-token spectral radius of ``Â_effᵀ``
    is summarized (mean/min/max). Labelled empirical: the unrolled sum only
    holds for fixed matrices.
    """
    from .model import embed

    stats = []
    with no_grad():
        state = embed(model, tokens)
        if state.slots.ndim == 3:
            state = SlotState(Tensor(state.slots.data[None]))
        for l, block in enumerate(model.blocks):
            for kind, params, sub in (("attn", block.attn_ghc, block.attn), ("ffn", block.ffn_ghc, block.ffn)):
                cfg = params.config
                if cfg.dynamic:
                    a_eff, _ = dynamic_coefficients(params, state)
                    hats = a_eff.data[..., cfg.m :].reshape(-1, cfg.n, cfg.n)
                else:
                    hats = params.A_static.data[None, :, cfg.m :]
                rho = np.abs(np.linalg.eigvals(np.swapaxes(hats, -1, -2))).max(axis=-1)
                stats.append({
                    "layer": l,
                    "sublayer": kind,
                    "radius_mean": float(rho.mean()),
                    "radius_min": float(rho.min()),
                    "radius_max": float(rho.max()),
                    "empirical": True,
                })
                state = ghc_apply(params, state, sub)
    return stats
