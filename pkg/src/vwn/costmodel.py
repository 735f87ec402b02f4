"""Analytic per-token FLOP and activation-memory costs of one GHC.

All quantities are exact multiples of the backbone width D, kept as Fractions.
Convention: 2 FLOPs per multiply-accumulate, normalization at 4 FLOPs per
element, activations stored at 2 bytes per element.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .ghc import GhcConfig, GhcParams, SlotState, depth_connection, dynamic_coefficients, width_connection
from .numcore import ConfigError, ContractError, Tensor, flop_counter, no_grad

BASELINE_ACTIVATION_BYTES = 34  # per token per vanilla layer, in units of D


@dataclass(frozen=True)
class CostReport:
    m: int
    n: int
    flops_norm: Fraction
    flops_dynamic: Fraction
    flops_width: Fraction
    flops_depth: Fraction
    eta: Fraction | None = None
    mem_extra_bytes: Fraction | None = None
    baseline_mem: int = BASELINE_ACTIVATION_BYTES

    @property
    def flops_read(self) -> Fraction:
        """Normalization + dynamic coefficients + width connection."""
        return self.flops_norm + self.flops_dynamic + self.flops_width

    @property
    def flops_total(self) -> Fraction:
        return self.flops_read + self.flops_depth

    @property
    def overhead_ratio(self) -> Fraction | None:
        if self.mem_extra_bytes is None:
            return None
        return self.mem_extra_bytes / self.baseline_mem

    def rows(self, D: int | None = None) -> list[tuple[str, str]]:
        """(label, value) pairs; absolute values when D is given."""
        def fmt(v: Fraction) -> str:
            if D is None:
                return f"{_fmt_fraction(v)}D"
            return _fmt_fraction(v * D)

        out = [
            ("flops_norm", fmt(self.flops_norm)),
            ("flops_dynamic", fmt(self.flops_dynamic)),
            ("flops_width", fmt(self.flops_width)),
            ("flops_depth", fmt(self.flops_depth)),
            ("flops_read_total", fmt(self.flops_read)),
        ]
        if self.mem_extra_bytes is not None:
            out += [
                ("eta", _fmt_fraction(self.eta)),
                ("mem_extra_bytes", fmt(self.mem_extra_bytes)),
                ("baseline_mem_bytes", fmt(Fraction(self.baseline_mem))),
                ("overhead_ratio", f"{float(self.overhead_ratio):.4f}"),
            ]
        return out


def _fmt_fraction(v: Fraction) -> str:
    return str(v.numerator) if v.denominator == 1 else f"{float(v):g}"


def _check(m: int, n: int) -> None:
    if not n >= m >= 1:
        raise ConfigError(f"need n >= m >= 1, got m={m} n={n}")


def ghc_flops(m: int, n: int) -> CostReport:
    _check(m, n)
    ratio = Fraction(n, m)
    return CostReport(
        m=m,
        n=n,
        flops_norm=4 * ratio,
        flops_dynamic=2 * (2 * m + n) * ratio,
        flops_width=2 * (m + n) * ratio,
        flops_depth=Fraction(2 * n),
    )


def ghc_memory(m: int, n: int, eta) -> tuple[Fraction, Fraction]:
    """Extra activation bytes per layer (multiple of D) and its ratio to 34D."""
    _check(m, n)
    eta = Fraction(eta).limit_denominator(10**6)
    if not 0 <= eta <= 1:
        raise ConfigError(f"eta must lie in [0, 1], got {eta}")
    extra = 4 * eta * Fraction(n, m)
    return extra, extra / BASELINE_ACTIVATION_BYTES


def cost_report(m: int, n: int, eta=Fraction(1, 2)) -> CostReport:
    flops = ghc_flops(m, n)
    eta = Fraction(eta).limit_denominator(10**6)
    extra, _ = ghc_memory(m, n, eta)
    return CostReport(
        m, n, flops.flops_norm, flops.flops_dynamic, flops.flops_width, flops.flops_depth,
        eta=eta, mem_extra_bytes=extra,
    )


def validate_against_counter(m: int, n: int, D: int, seed: int = 0) -> dict:
    """Count matmul FLOPs of one dynamic GHC pass on a single token.

    Returns counted and closed-form values for the dynamic, width and depth
    terms. Normalization is formula-only since the counter sees matmuls.
    """
    if not flop_counter.enabled:
        raise ContractError("validate_against_counter needs FLOP counting enabled (flop_counter.counting())")
    cfg = GhcConfig(D, m, n, dynamic=True)
    rng = np.random.default_rng(seed)
    params = GhcParams.init(cfg)
    params.W_alpha.data[...] = rng.normal(size=params.W_alpha.shape)
    params.W_beta.data[...] = rng.normal(size=params.W_beta.shape)
    state = SlotState(Tensor(rng.normal(size=(1, n, cfg.d_b))))
    module_out = Tensor(rng.normal(size=(1, D)))

    saved = flop_counter.count
    with no_grad():
        flop_counter.reset()
        dynamic_coefficients(params, state)
        counted_dynamic = flop_counter.count
        flop_counter.reset()
        backbone_in, carry, b_eff = width_connection(params, state)
        counted_width = flop_counter.count - counted_dynamic
        flop_counter.reset()
        depth_connection(b_eff, module_out, carry, cfg)
        counted_depth = flop_counter.count
    flop_counter.count = saved

    report = ghc_flops(m, n)
    expected = {
        "dynamic": report.flops_dynamic * D,
        "width": report.flops_width * D,
        "depth": report.flops_depth * D,
    }
    counted = {"dynamic": counted_dynamic, "width": counted_width, "depth": counted_depth}
    return {
        "m": m,
        "n": n,
        "D": D,
        "counted": counted,
        "expected": {k: int(v) for k, v in expected.items()},
        "ok": all(counted[k] == expected[k] for k in counted),
    }
