"""Deterministic training loop with an AdamW-style optimizer."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .. import numcore as nc
from ..model import VwnModel, VwnModelConfig, init_model, next2_loss, total_loss
from ..numcore import ConfigError, NonFiniteError
from .data import BatchSampler, gen_markov_corpus, load_byte_corpus

log = logging.getLogger(__name__)

RECORDS_SCHEMA = "vwn.records/1"
RECORD_COLUMNS = ("r", "m", "n", "seed", "step", "tokens_seen", "ntp_loss", "mtp_loss", "next2_loss")


@dataclass
class CorpusConfig:
    kind: str = "markov"  # "markov" or "bytes"
    vocab_size: int = 64
    order: int = 2
    concentration: float = 0.3
    bigram_mix: float = 0.0
    length: int = 1_000_000
    seed: int = 0
    path: str | None = None
    eval_fraction: float = 0.05


@dataclass
class TrainConfig:
    model: VwnModelConfig = field(default_factory=VwnModelConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    steps: int = 100
    batch_size: int = 16
    seq_len: int = 32
    learning_rate: float = 3e-4
    weight_decay: float = 0.1
    betas: tuple[float, float] = (0.9, 0.95)
    adam_eps: float = 1e-8
    seed: int = 0
    eval_every: int = 50
    eval_batches: int = 4

    def __post_init__(self) -> None:
        if isinstance(self.model, dict):
            self.model = VwnModelConfig.from_dict(self.model)
        if isinstance(self.corpus, dict):
            self.corpus = CorpusConfig(**self.corpus)
        self.betas = tuple(self.betas)
        if self.steps < 0 or self.batch_size < 1 or self.seq_len < 3 or self.eval_every < 1:
            raise ConfigError("steps >= 0, batch_size >= 1, seq_len >= 3 and eval_every >= 1 are required")
        if self.seq_len > self.model.max_seq_len:
            raise ConfigError(f"seq_len {self.seq_len} exceeds model max_seq_len {self.model.max_seq_len}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> TrainConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def with_geometry(self, m: int, n: int, **model_overrides) -> TrainConfig:
        model = dataclasses.replace(self.model, m=m, n=n, **model_overrides)
        return dataclasses.replace(self, model=model)

    def matched_hash(self) -> str:
        """Hash of everything except the (m, n) geometry of the arm."""
        d = self.to_dict()
        for key in ("m", "n", "use_group_norm_before_reduce"):
            d["model"].pop(key)
        d.pop("seed")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


@dataclass
class SweepRecord:
    r: Fraction
    m: int
    n: int
    seed: int
    step: int
    tokens_seen: int
    ntp_loss: float
    mtp_loss: float | None
    next2_loss: float
    wall_seconds: float = 0.0


@dataclass
class TrainResult:
    config: TrainConfig
    records: list[SweepRecord]
    model: VwnModel
    entropy_floor: float | None = None


class AdamW:
    """Adam with decoupled weight decay; parameters tagged ``decay=False`` are exempt."""

    def __init__(self, params, lr: float, betas=(0.9, 0.95), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if p.decay and self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def build_corpus(cfg: CorpusConfig, vocab_size: int) -> tuple[np.ndarray, float | None]:
    if cfg.kind == "markov":
        if cfg.vocab_size != vocab_size:
            raise ConfigError(f"corpus vocab {cfg.vocab_size} != model vocab {vocab_size}")
        corpus = gen_markov_corpus(cfg.vocab_size, cfg.order, cfg.seed, cfg.length, cfg.concentration,
                                   bigram_mix=cfg.bigram_mix)
        return corpus.tokens, corpus.entropy_rate()
    if cfg.kind == "bytes":
        if not cfg.path:
            raise ConfigError("byte corpus needs a path")
        if vocab_size != 256:
            raise ConfigError("byte corpus needs vocab_size 256")
        return load_byte_corpus(cfg.path), None
    raise ConfigError(f"unknown corpus kind {cfg.kind!r}")


_CORPUS_CACHE: dict[str, tuple[np.ndarray, float | None]] = {}


def _cached_corpus(cfg: CorpusConfig, vocab_size: int):
    key = json.dumps(dataclasses.asdict(cfg), sort_keys=True) + f"|{vocab_size}"
    if key not in _CORPUS_CACHE:
        _CORPUS_CACHE.clear()
        _CORPUS_CACHE[key] = build_corpus(cfg, vocab_size)
    return _CORPUS_CACHE[key]


def split_corpus(tokens: np.ndarray, eval_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    cut = int(tokens.size * (1.0 - eval_fraction))
    return tokens[:cut], tokens[cut:]


def evaluate(model: VwnModel, batches: list[np.ndarray]) -> tuple[float, float | None, float]:
    """Mean (ntp_loss, mtp_loss, next2_loss) over fixed evaluation batches."""
    ntp, mtp, nxt2 = [], [], []
    with nc.no_grad():
        for b in batches:
            _, lt, lm = total_loss(model, b)
            ntp.append(lt.item())
            if lm is not None:
                mtp.append(lm.item())
            nxt2.append(next2_loss(model, b))
    return float(np.mean(ntp)), (float(np.mean(mtp)) if mtp else None), float(np.mean(nxt2))


def train(config: TrainConfig) -> TrainResult:
    """Train from scratch; the config (including its seed) fully determines the result."""
    mcfg = config.model
    tokens, floor = _cached_corpus(config.corpus, mcfg.vocab_size)
    train_tok, eval_tok = split_corpus(tokens, config.corpus.eval_fraction)
    model = init_model(mcfg, seed=config.seed)
    records: list[SweepRecord] = []
    if config.steps == 0:
        return TrainResult(config, records, model, floor)

    sampler = BatchSampler(train_tok, config.seq_len, config.batch_size, seed=config.seed + 1)
    eval_sampler = BatchSampler(eval_tok, config.seq_len, config.batch_size, seed=12345)
    eval_set = [eval_sampler.next() for _ in range(config.eval_batches)]
    opt = AdamW(model.parameters(), config.learning_rate, config.betas, config.adam_eps, config.weight_decay)
    r = Fraction(mcfg.n, mcfg.m)
    tokens_per_step = config.batch_size * config.seq_len
    start = time.perf_counter()

    def emit(step: int) -> None:
        ntp, mtp, nxt2 = evaluate(model, eval_set)
        records.append(SweepRecord(r, mcfg.m, mcfg.n, config.seed, step, step * tokens_per_step,
                                   ntp, mtp, nxt2, time.perf_counter() - start))
        log.info("step %d ntp %.4f mtp %s", step, ntp, "-" if mtp is None else f"{mtp:.4f}")

    emit(0)
    for step in range(1, config.steps + 1):
        batch = sampler.next()
        try:
            loss, _, _ = total_loss(model, batch)
            if not np.isfinite(loss.item()):
                raise NonFiniteError("loss is not finite")
            nc.backward(loss)
        except NonFiniteError as exc:
            nc.current_tape().clear()
            raise NonFiniteError(
                f"non-finite loss at step {step}: {exc}; config={json.dumps(config.to_dict(), sort_keys=True)}"
            ) from None
        opt.step()
        opt.zero_grad()
        if step % config.eval_every == 0 or step == config.steps:
            emit(step)
    return TrainResult(config, records, model, floor)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, Fraction):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def records_to_csv(records: list[SweepRecord]) -> str:
    """Versioned CSV; wall-clock time is left out so output is reproducible byte for byte."""
    buf = io.StringIO()
    buf.write(f"# schema: {RECORDS_SCHEMA}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_COLUMNS)
    for rec in records:
        w.writerow([_fmt(getattr(rec, c)) for c in RECORD_COLUMNS])
    return buf.getvalue()


def read_records_csv(path) -> list[SweepRecord]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    out = []
    for row in csv.DictReader(lines):
        out.append(SweepRecord(
            r=Fraction(row["r"]),
            m=int(row["m"]),
            n=int(row["n"]),
            seed=int(row["seed"]),
            step=int(row["step"]),
            tokens_seen=int(row["tokens_seen"]),
            ntp_loss=float(row["ntp_loss"]),
            mtp_loss=float(row["mtp_loss"]) if row["mtp_loss"] else None,
            next2_loss=float(row["next2_loss"]),
        ))
    return out
