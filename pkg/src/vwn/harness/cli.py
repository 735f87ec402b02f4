"""Command-line entry point: ``vwn <subcommand>``.

Outputs land in ``--out``, else ``$VWN_OUT_DIR``, else ``./vwn_out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from fractions import Fraction
from pathlib import Path

import numpy as np

from .. import connectivity, costmodel
from ..ghc import GhcConfig, GhcParams
from ..model import load_checkpoint, save_checkpoint
from ..numcore import ConfigError, ContractError, flop_counter
from .train import TrainConfig, read_records_csv, records_to_csv, train

OUT_ENV = "VWN_OUT_DIR"
log = logging.getLogger("vwn")


def out_dir(args) -> Path:
    path = Path(args.out or os.environ.get(OUT_ENV) or "vwn_out")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_config(args) -> TrainConfig:
    cfg = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "steps", None) is not None:
        cfg.steps = args.steps
    return cfg


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _write(path: Path, text: str) -> Path:
    path.write_text(text)
    print(f"wrote {path}")
    return path


def cmd_train(args) -> int:
    from . import plots

    cfg = _load_config(args)
    out = out_dir(args)
    res = train(cfg)
    _write(out / "train_records.csv", records_to_csv(res.records))
    (out / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    save_checkpoint(out / "model.ckpt", res.model, extra={"train_config": cfg.to_dict()})
    print(f"wrote {out / 'model.ckpt'}")
    if res.records:
        _announce(plots.plot_loss_curves(res.records, out / "train_loss.svg"))
        last = res.records[-1]
        floor = "" if res.entropy_floor is None else f" (entropy floor {res.entropy_floor:.4f})"
        print(f"final ntp_loss {last.ntp_loss:.4f}{floor}")
    return 0


def _announce(path: Path) -> None:
    print(f"wrote {path}")


def _sweep_outputs(result, out: Path, prefix: str) -> None:
    from . import plots
    from .sweep import final_losses_csv, fits_csv, sweep_records_csv

    _write(out / f"{prefix}_records.csv", sweep_records_csv(result))
    _write(out / f"{prefix}_final.csv", final_losses_csv(result))
    _announce(plots.plot_loss_curves(result.all_records(), out / f"{prefix}_loss.svg"))
    if result.fits:
        _write(out / f"{prefix}_fit.csv", fits_csv(result))


def cmd_sweep_r(args) -> int:
    from . import plots
    from .sweep import efficiency_rows, sweep_r

    cfg = _load_config(args)
    out = out_dir(args)
    r_list = [t.strip() for t in args.r.split(",")]
    result = sweep_r(cfg, r_list, args.m, _ints(args.seeds), residual_arm=args.residual, workers=args.workers)
    _sweep_outputs(result, out, "sweep_r")
    labels = [a for a in result.arms if a in result.r_of]
    means = [float(np.mean([result.final_losses(s)[a] for s in result.seeds])) for a in labels]
    _announce(plots.plot_scaling_fit([result.r_of[a] for a in labels], means, result.mean_fit, out / "sweep_r_fit.svg"))
    rows = ["arm,seed,token_efficiency"] + [
        f"{a},{s},{'' if e is None else repr(e)}" for a, s, e in efficiency_rows(result, labels[0])
    ]
    _write(out / "sweep_r_efficiency.csv", "\n".join(rows) + "\n")
    for s, fit in sorted(result.fits.items()):
        print(f"seed {s}: slope {fit.slope} intercept {fit.intercept:.4f}")
    return 0


def cmd_sweep_m(args) -> int:
    from .sweep import sweep_m

    cfg = _load_config(args)
    out = out_dir(args)
    result = sweep_m(cfg, _ints(args.m_list), args.r, _ints(args.seeds), workers=args.workers)
    _sweep_outputs(result, out, "sweep_m")
    for s in result.seeds:
        print(f"seed {s}: " + ", ".join(f"{a} {v:.4f}" for a, v in result.final_losses(s).items()))
    return 0


def cmd_cost(args) -> int:
    eta = Fraction(args.eta)
    report = costmodel.cost_report(args.m, args.n, eta)
    rows = report.rows(args.D)
    width = max(len(k) for k, _ in rows)
    for k, v in rows:
        print(f"{k:<{width}}  {v}")
    if args.validate:
        if args.D is None:
            raise ConfigError("--validate needs --D")
        with flop_counter.counting():
            check = costmodel.validate_against_counter(args.m, args.n, args.D)
        print(f"counter check: {'ok' if check['ok'] else 'MISMATCH'} {check['counted']}")
    if args.csv:
        header = ",".join(["m", "n", "D"] + [k for k, _ in rows])
        line = ",".join([str(args.m), str(args.n), str(args.D)] + [v for _, v in rows])
        _write(out_dir(args) / args.csv, header + "\n" + line + "\n")
    return 0


def _static_stack(args) -> list[GhcParams]:
    cfg = GhcConfig(args.D, args.m, args.n, dynamic=False)
    stack = []
    for l in range(args.L):
        p = GhcParams.init(cfg, prefix=f"ghc{l}")
        if args.carry_scale is not None:
            p.A_static.data[:, cfg.m :] = args.carry_scale * np.eye(cfg.n)
        stack.append(p)
    return stack


def cmd_unroll(args) -> int:
    from . import plots

    out = out_dir(args)
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
        ghcs = [g for b in model.blocks for g in (b.attn_ghc, b.ffn_ghc)]
        if model.config.dynamic:
            rng = np.random.default_rng(args.probe_seed)
            probe = rng.integers(0, model.config.vocab_size, size=(4, min(16, model.config.max_seq_len)))
            stats = connectivity.dynamic_carry_statistics(model, probe)
            keys = list(stats[0])
            lines = [",".join(keys)] + [",".join(str(s[k]) for k in keys) for s in stats]
            _write(out / "unroll_dynamic.csv", "\n".join(lines) + "\n")
            print("dynamic coefficients: statistics are empirical over a probe batch")
            return 0
    else:
        ghcs = _static_stack(args)
    report = connectivity.attenuation_profile(ghcs)
    text = report.to_csv()
    sys.stdout.write(text)
    _write(out / "unroll.csv", text)
    _announce(plots.plot_attenuation(report, out / "unroll.svg"))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import micro_config, model_gradcheck

    cfg = micro_config()
    if args.config:
        cfg = TrainConfig.from_json(args.config).model
    report = model_gradcheck(cfg, seed=args.seed or 0)
    print("\n".join(report.lines()))
    return 0 if report.passed else 1


def cmd_plot(args) -> int:
    from . import plots

    records = read_records_csv(args.records)
    target = Path(args.output) if args.output else out_dir(args) / (Path(args.records).stem + ".svg")
    _announce(plots.plot_loss_curves(records, target, metric=args.metric))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vwn", description="Virtual-width network experiments.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./vwn_out)")
        if config:
            p.add_argument("--config", help="TrainConfig JSON")
            p.add_argument("--seed", type=int)
        return p

    p = common(sub.add_parser("train", help="train one model"))
    p.add_argument("--steps", type=int)
    p.set_defaults(fn=cmd_train)

    p = common(sub.add_parser("sweep-r", help="vary r = n/m at fixed m"))
    p.add_argument("--r", default="1,3/2,2,4", help="comma-separated ratios, e.g. 1,3/2,2,4")
    p.add_argument("--m", type=int, default=2)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--steps", type=int)
    p.add_argument("--residual", action="store_true", help="add a GHC-free residual arm")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_sweep_r)

    p = common(sub.add_parser("sweep-m", help="vary m at fixed r"))
    p.add_argument("--m-list", default="1,2,4")
    p.add_argument("--r", default="2")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--steps", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_sweep_m)

    p = common(sub.add_parser("cost", help="analytic per-token GHC cost"), config=False)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--D", type=int)
    p.add_argument("--eta", default="1/2")
    p.add_argument("--validate", action="store_true", help="cross-check against the FLOP counter (needs --D)")
    p.add_argument("--csv", help="also write a CSV row to this file name")
    p.set_defaults(fn=cmd_cost)

    p = common(sub.add_parser("unroll", help="depth-connectivity attenuation report"), config=False)
    p.add_argument("--checkpoint")
    p.add_argument("--m", type=int, default=2)
    p.add_argument("--n", type=int, default=3)
    p.add_argument("--D", type=int, default=8)
    p.add_argument("--L", type=int, default=4)
    p.add_argument("--carry-scale", type=float, help="replace each carry block with c*I")
    p.add_argument("--probe-seed", type=int, default=0)
    p.set_defaults(fn=cmd_unroll)

    p = common(sub.add_parser("gradcheck", help="finite-difference check of the whole model"))
    p.set_defaults(fn=cmd_gradcheck)

    p = common(sub.add_parser("plot", help="SVG loss curves from a records CSV"), config=False)
    p.add_argument("records")
    p.add_argument("-o", "--output")
    p.add_argument("--metric", default="ntp_loss", choices=["ntp_loss", "mtp_loss", "next2_loss"])
    p.set_defaults(fn=cmd_plot)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore", UserWarning)
    try:
        return args.fn(args)
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
