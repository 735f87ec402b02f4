"""Generalized Hyper-Connections: static and dynamic routing between slots and backbone.

Orientation: a token's over-width state is an ``n × d_b`` matrix whose rows are
slots. The width connection computes ``A_effᵀ · H`` (``(m+n) × d_b``); its first
``m`` rows, concatenated, feed the backbone and the remaining ``n`` rows are the
carry. The depth connection writes ``B_effᵀ · Z + carry`` where ``Z`` is the
backbone output viewed as ``m × d_b``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

import numpy as np

from .numcore import (
    ConfigError,
    ContractError,
    ShapeError,
    Tensor,
    add,
    elementwise_mul,
    matmul,
    reshape,
    rms_norm,
    safe_tanh,
    scale,
    slice_rows,
    transpose_last_two,
)

Sublayer = Callable[[Tensor], Tensor]


@dataclass(frozen=True)
class GhcConfig:
    D: int
    m: int
    n: int
    dynamic: bool = True

    def __post_init__(self) -> None:
        if self.D < 1 or self.m < 1 or self.n < 1:
            raise ConfigError(f"GHC geometry must be positive, got D={self.D} m={self.m} n={self.n}")
        if self.D % self.m:
            raise ConfigError(f"D={self.D} is not divisible by m={self.m}")
        if self.n < self.m:
            raise ConfigError(f"need n >= m, got m={self.m} n={self.n}")

    @property
    def d_b(self) -> int:
        return self.D // self.m

    @property
    def r(self) -> Fraction:
        return Fraction(self.n, self.m)

    @property
    def D_wide(self) -> int:
        return self.n * self.d_b

    @property
    def tau_squared(self) -> Fraction:
        """Exact; ``tau`` itself is a float and squares back only to rounding."""
        return Fraction(self.D, self.m)

    @property
    def tau(self) -> float:
        return math.sqrt(self.D / self.m)


def init_B_static(m: int, n: int) -> Tensor:
    """Cyclic write pattern: ``B[i, j] = 1`` iff ``i == j mod m``."""
    if not n >= m >= 1:
        raise ConfigError(f"need n >= m >= 1, got m={m} n={n}")
    b = np.zeros((m, n))
    for j in range(n):
        b[j % m, j] = 1.0
    return Tensor(b)


def init_A_static(m: int, n: int) -> Tensor:
    """``[I_m | I_m | 0]`` on the first m rows, ``[0 | 0 | I_{n-m}]`` below."""
    if not n >= m >= 1:
        raise ConfigError(f"need n >= m >= 1, got m={m} n={n}")
    a = np.zeros((n, m + n))
    a[:m, :m] = np.eye(m)
    a[:m, m : 2 * m] = np.eye(m)
    a[m:, 2 * m :] = np.eye(n - m)
    return Tensor(a)


PARAM_NAMES = ("A", "B", "W_alpha", "W_beta", "S_alpha", "S_beta", "norm_scale")


@dataclass
class GhcParams:
    config: GhcConfig
    A_static: Tensor
    B_static: Tensor
    W_alpha: Tensor
    W_beta: Tensor
    S_alpha: Tensor
    S_beta: Tensor
    norm_scale: Tensor

    @classmethod
    def init(cls, config: GhcConfig, prefix: str = "ghc") -> GhcParams:
        m, n, d_b = config.m, config.n, config.d_b

        def param(name: str, data, decay: bool) -> Tensor:
            return Tensor(data, requires_grad=True, name=f"{prefix}.{name}", decay=decay)

        # static routing is decay-exempt; the dynamic generators are not
        return cls(
            config=config,
            A_static=param("A", init_A_static(m, n).data, decay=False),
            B_static=param("B", init_B_static(m, n).data, decay=False),
            W_alpha=param("W_alpha", np.zeros((d_b, m + n)), decay=True),
            W_beta=param("W_beta", np.zeros((d_b, m)), decay=True),
            S_alpha=param("S_alpha", np.ones((n, m + n)), decay=True),
            S_beta=param("S_beta", np.ones((m, n)), decay=True),
            norm_scale=param("norm_scale", np.ones(d_b), decay=True),
        )

    def tensors(self) -> list[Tensor]:
        """Parameters in ``PARAM_NAMES`` order; static mode uses only A and B."""
        return [self.A_static, self.B_static, self.W_alpha, self.W_beta,
                self.S_alpha, self.S_beta, self.norm_scale]

    def active_tensors(self) -> list[Tensor]:
        if self.config.dynamic:
            return self.tensors()
        return [self.A_static, self.B_static]


@dataclass
class SlotState:
    """Over-width hidden state: ``slots`` has shape ``(..., n, d_b)``."""

    slots: Tensor

    @classmethod
    def from_flat(cls, x: Tensor, n: int) -> SlotState:
        width = x.shape[-1]
        if width % n:
            raise ShapeError(f"over-width vector of size {width} does not split into {n} slots")
        return cls(reshape(x, x.shape[:-1] + (n, width // n)))

    @property
    def n(self) -> int:
        return self.slots.shape[-2]

    @property
    def d_b(self) -> int:
        return self.slots.shape[-1]

    @property
    def lead(self) -> tuple[int, ...]:
        return self.slots.shape[:-2]

    def flatten(self) -> Tensor:
        return reshape(self.slots, self.lead + (self.n * self.d_b,))


def _check_state(config: GhcConfig, state: SlotState) -> None:
    if state.slots.ndim < 2 or state.n != config.n or state.d_b != config.d_b:
        raise ShapeError(
            f"slot state {state.slots.shape} does not match (n={config.n}, d_b={config.d_b})"
        )


def dynamic_coefficients(params: GhcParams, state: SlotState) -> tuple[Tensor, Tensor]:
    """Per-token ``A_eff`` ``(..., n, m+n)`` and ``B_eff`` ``(..., m, n)``."""
    cfg = params.config
    if not cfg.dynamic:
        raise ContractError("dynamic_coefficients called on a static GHC")
    _check_state(cfg, state)
    normed = rms_norm(state.slots, params.norm_scale)
    inv_tau = 1.0 / cfg.tau
    a_dyn = safe_tanh(scale(matmul(normed, params.W_alpha), inv_tau))
    b_dyn = transpose_last_two(safe_tanh(scale(matmul(normed, params.W_beta), inv_tau)))
    a_eff = add(elementwise_mul(params.S_alpha, a_dyn), params.A_static)
    b_eff = add(elementwise_mul(params.S_beta, b_dyn), params.B_static)
    return a_eff, b_eff


def width_connection(params: GhcParams, state: SlotState) -> tuple[Tensor, Tensor, Tensor]:
    """Read step: returns ``(backbone_in (..., D), carry (..., n, d_b), B_eff)``."""
    cfg = params.config
    _check_state(cfg, state)
    if cfg.dynamic:
        a_eff, b_eff = dynamic_coefficients(params, state)
    else:
        a_eff, b_eff = params.A_static, params.B_static
    mixed = matmul(transpose_last_two(a_eff), state.slots)
    backbone_in = reshape(slice_rows(mixed, 0, cfg.m), state.lead + (cfg.D,))
    carry = slice_rows(mixed, cfg.m, cfg.m + cfg.n)
    return backbone_in, carry, b_eff


def depth_connection(b_eff: Tensor, module_out: Tensor, carry: Tensor, config: GhcConfig) -> SlotState:
    """Write step: ``B_effᵀ · reshape(module_out, m × d_b) + carry``."""
    if module_out.shape[-1] != config.D or module_out.shape[:-1] != carry.shape[:-2]:
        raise ShapeError(
            f"depth_connection: module output {module_out.shape} vs carry {carry.shape} (D={config.D})"
        )
    if b_eff.shape[-2:] != (config.m, config.n):
        raise ShapeError(f"depth_connection: B_eff {b_eff.shape} is not (..., {config.m}, {config.n})")
    z = reshape(module_out, module_out.shape[:-1] + (config.m, config.d_b))
    written = matmul(transpose_last_two(b_eff), z)
    return SlotState(add(written, carry))


def ghc_apply(params: GhcParams, state: SlotState, sublayer: Sublayer) -> SlotState:
    backbone_in, carry, b_eff = width_connection(params, state)
    return depth_connection(b_eff, sublayer(backbone_in), carry, params.config)
