"""Whole-model finite-difference gradient check."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import numcore as nc
from ..model import VwnModelConfig, init_model, total_loss

TOLERANCE = 1e-4


def micro_config(**overrides) -> VwnModelConfig:
    """The smallest config that exercises every parameter family, MTP included."""
    base = dict(vocab_size=11, D=8, L=2, heads=2, ffn_mult=2, m=2, n=3, mtp_enabled=True,
                mtp_loss_weight=0.5, max_seq_len=8, use_group_norm_before_reduce=False)
    base.update(overrides)
    return VwnModelConfig(**base)


@dataclass
class GradcheckReport:
    errors: dict[str, float]
    tolerance: float = TOLERANCE

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    @property
    def passed(self) -> bool:
        return self.worst[1] < self.tolerance

    def lines(self) -> list[str]:
        name, err = self.worst
        out = [f"{n}\t{e:.3e}" for n, e in self.errors.items()]
        out.append(f"worst\t{name}\t{err:.3e}\t{'PASS' if self.passed else 'FAIL'} (tol {self.tolerance:g})")
        return out


def model_gradcheck(
    cfg: VwnModelConfig | None = None,
    seed: int = 0,
    seq_len: int = 5,
    batch: int = 2,
    perturb: float = 0.3,
    h: float = 1e-5,
) -> GradcheckReport:
    """Compare tape gradients of ``total_loss`` with central differences for every tensor.

    Parameters are jittered first so zero-initialized generators and identity
    blocks do not hide errors behind structurally vanishing gradients.
    """
    cfg = cfg or micro_config()
    model = init_model(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for p in model.parameters():
        p.data += perturb * rng.standard_normal(p.shape)
    tokens = rng.integers(0, cfg.vocab_size, size=(batch, seq_len))

    model.zero_grad()
    loss, _, _ = total_loss(model, tokens)
    nc.backward(loss)
    analytic = {name: (p.grad if p.grad is not None else np.zeros(p.shape)).copy()
                for name, p in model.params.items()}

    def f():
        return total_loss(model, tokens)[0]

    errors = {name: nc.gradcheck_error(analytic[name], nc.finite_difference_grad(f, p, h))
              for name, p in model.params.items()}
    return GradcheckReport(errors)
