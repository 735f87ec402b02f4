"""Matched width sweeps and log-linear scaling fits."""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from ..numcore import ConfigError
from .train import SweepRecord, TrainConfig, records_to_csv, train

log = logging.getLogger(__name__)

FIT_SCHEMA = "vwn.fit/1"
FINAL_SCHEMA = "vwn.final/1"


@dataclass
class ScalingFit:
    """``loss = slope * log2(r) + intercept``; ``r_squared`` is None for a single point."""

    slope: float | None
    intercept: float
    r_squared: float | None
    points: int


def fit_log_linear(r_values: Sequence, losses: Sequence[float]) -> ScalingFit:
    x = np.log2(np.array([float(Fraction(r)) for r in r_values]))
    y = np.asarray(losses, dtype=np.float64)
    if x.size != y.size or x.size == 0:
        raise ValueError("need matching, non-empty r and loss lists")
    if np.unique(x).size < 2:
        return ScalingFit(None, float(y.mean()), None, int(x.size))
    design = np.stack([x, np.ones_like(x)], axis=1)
    (slope, intercept), *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    ss_res = float((resid**2).sum())
    r2 = 1.0 if ss_tot == 0.0 else min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    return ScalingFit(float(slope), float(intercept), r2, int(x.size))


def parse_ratio(text) -> Fraction:
    """``"1.5"``, ``"3/2"`` or a number to an exact Fraction."""
    if isinstance(text, Fraction):
        return text
    return Fraction(str(text).strip())


def token_efficiency(baseline: list[SweepRecord], arm: list[SweepRecord]) -> float | None:
    """Baseline tokens / arm tokens needed to reach the baseline's final loss.

    The arm's crossing point is found by linear interpolation on its
    loss-vs-tokens curve; None if the arm never reaches that loss.
    """
    if not baseline or not arm:
        return None
    target = baseline[-1].ntp_loss
    pts = [(rec.tokens_seen, rec.ntp_loss) for rec in arm]
    for (t0, l0), (t1, l1) in zip(pts, pts[1:]):
        if l0 > target >= l1:
            t = t0 + (t1 - t0) * (l0 - target) / (l0 - l1)
            return baseline[-1].tokens_seen / t if t > 0 else None
    return None


@dataclass
class Arm:
    label: str
    config: TrainConfig


@dataclass
class SweepResult:
    arms: list[str]
    records: dict[tuple[str, int], list[SweepRecord]] = field(default_factory=dict)
    fits: dict[int, ScalingFit] = field(default_factory=dict)  # per seed
    mean_fit: ScalingFit | None = None
    r_of: dict[str, Fraction] = field(default_factory=dict)

    def final_losses(self, seed: int, key: str = "ntp_loss") -> dict[str, float]:
        return {a: getattr(self.records[(a, seed)][-1], key) for a in self.arms if (a, seed) in self.records}

    @property
    def seeds(self) -> list[int]:
        return sorted({s for _, s in self.records})

    def all_records(self) -> list[SweepRecord]:
        return [rec for a in self.arms for s in self.seeds for rec in self.records.get((a, s), [])]


def _run(cfg: TrainConfig) -> list[SweepRecord]:
    return train(cfg).records


def check_matched(arms: Iterable[Arm]) -> str:
    """All arms must agree on everything except (m, n); returns the shared hash."""
    hashes = {a.config.matched_hash() for a in arms}
    if len(hashes) != 1:
        raise ConfigError("sweep arms differ in more than (m, n)")
    return hashes.pop()


def run_arms(arms: list[Arm], seeds: Sequence[int], workers: int = 1) -> dict[tuple[str, int], list[SweepRecord]]:
    check_matched(arms)
    jobs = [(a.label, s, _with_seed(a.config, s)) for a in arms for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            outs = list(pool.map(_run, [cfg for _, _, cfg in jobs]))
    else:
        outs = []
        for label, s, cfg in jobs:
            log.info("training arm %s seed %d", label, s)
            outs.append(_run(cfg))
    return {(label, s): recs for (label, s, _), recs in zip(jobs, outs)}


def _with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    import dataclasses

    return dataclasses.replace(cfg, seed=seed)


def r_arms(base: TrainConfig, r_list: Sequence, fixed_m: int, residual_arm: bool = False) -> list[Arm]:
    arms = []
    for r in r_list:
        r = parse_ratio(r)
        n = r * fixed_m
        if n.denominator != 1:
            raise ConfigError(f"r={r} with m={fixed_m} gives non-integral n={n}")
        gn = base.model.use_group_norm_before_reduce and r.denominator == 1
        arms.append(Arm(f"r={r}", base.with_geometry(fixed_m, int(n), use_group_norm_before_reduce=gn)))
    if residual_arm:
        arms.append(Arm("residual", base.with_geometry(1, 1, dynamic=False, use_group_norm_before_reduce=False)))
    return arms


def sweep_r(
    base: TrainConfig,
    r_list: Sequence,
    fixed_m: int,
    seeds: Sequence[int],
    residual_arm: bool = False,
    workers: int = 1,
) -> SweepResult:
    """Train arms that differ only in ``n = r * m``; fit final loss against log2(r)."""
    arms = r_arms(base, r_list, fixed_m, residual_arm)
    if residual_arm:
        # residual arm changes `dynamic`; it is matched on everything else
        check_matched(arms[:-1])
        records = run_arms(arms[:-1], seeds, workers)
        records.update(_run_unmatched(arms[-1], seeds))
    else:
        records = run_arms(arms, seeds, workers)
    result = SweepResult([a.label for a in arms], records)
    result.r_of = {a.label: Fraction(a.config.model.n, a.config.model.m) for a in arms if a.label != "residual"}
    fit_labels = [a for a in result.arms if a in result.r_of]
    rs = [result.r_of[a] for a in fit_labels]
    for s in seeds:
        finals = result.final_losses(s)
        result.fits[s] = fit_log_linear(rs, [finals[a] for a in fit_labels])
    mean_losses = [float(np.mean([result.final_losses(s)[a] for s in seeds])) for a in fit_labels]
    result.mean_fit = fit_log_linear(rs, mean_losses)
    return result


def _run_unmatched(arm: Arm, seeds):
    return {(arm.label, s): _run(_with_seed(arm.config, s)) for s in seeds}


def sweep_m(base: TrainConfig, m_list: Sequence[int], fixed_r, seeds: Sequence[int], workers: int = 1) -> SweepResult:
    """Train arms at a fixed width factor that differ in the fraction rate m."""
    r = parse_ratio(fixed_r)
    arms = []
    for m in m_list:
        n = r * m
        if n.denominator != 1:
            raise ConfigError(f"r={r} with m={m} gives non-integral n={n}")
        gn = base.model.use_group_norm_before_reduce and r.denominator == 1
        arms.append(Arm(f"m={m}", base.with_geometry(int(m), int(n), use_group_norm_before_reduce=gn)))
    result = SweepResult([a.label for a in arms], run_arms(arms, seeds, workers))
    result.r_of = {a.label: r for a in arms}
    return result


# ---------------------------------------------------------------------------
# CSV outputs


def sweep_records_csv(result: SweepResult) -> str:
    return records_to_csv(result.all_records())


def final_losses_csv(result: SweepResult) -> str:
    buf = io.StringIO()
    buf.write(f"# schema: {FINAL_SCHEMA}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["arm", "r", "m", "n", "seed", "tokens_seen", "ntp_loss", "mtp_loss", "next2_loss"])
    for a in result.arms:
        for s in result.seeds:
            recs = result.records.get((a, s))
            if not recs:
                continue
            last = recs[-1]
            w.writerow([a, str(last.r), last.m, last.n, s, last.tokens_seen, repr(last.ntp_loss),
                        "" if last.mtp_loss is None else repr(last.mtp_loss), repr(last.next2_loss)])
    return buf.getvalue()


def fits_csv(result: SweepResult) -> str:
    buf = io.StringIO()
    buf.write(f"# schema: {FIT_SCHEMA}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "slope", "intercept", "r_squared", "points"])

    def row(tag, fit: ScalingFit):
        w.writerow([tag, "" if fit.slope is None else repr(fit.slope), repr(fit.intercept),
                    "" if fit.r_squared is None else repr(fit.r_squared), fit.points])

    for s, fit in sorted(result.fits.items()):
        row(s, fit)
    if result.mean_fit is not None:
        row("mean", result.mean_fit)
    return buf.getvalue()


def efficiency_rows(result: SweepResult, baseline_label: str) -> list[tuple[str, int, float | None]]:
    rows = []
    for s in result.seeds:
        base = result.records.get((baseline_label, s))
        for a in result.arms:
            if a == baseline_label:
                continue
            rows.append((a, s, token_efficiency(base, result.records.get((a, s), []))))
    return rows
