"""Command-line entry point: ``geohand {synth,train,eval,gradcheck,export,ablate}``."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import config as config_mod
from .checkpoint import Checkpoint
from .config import ConfigError
from .data import Dataset, synth_generate


def _config(args) -> config_mod.Config:
    cfg = config_mod.parse(Path(args.config).read_text()) if args.config else config_mod.Config()
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        cfg.set(key.strip(), value)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    cfg.validate()
    return cfg


def _dataset(args, cfg) -> Dataset:
    if getattr(args, "data", None):
        return Dataset.load(args.data)
    return synth_generate(cfg)


def cmd_synth(args) -> int:
    cfg = _config(args)
    n = args.samples if args.samples is not None else cfg.data.samples
    ds = synth_generate(cfg, n=n)
    path = Path(cfg.out_dir) / args.name
    ds.save(path)
    print(f"wrote {len(ds)} samples to {path}")
    return 0


def _train_and_save(cfg, ds, out: Path, quiet: bool) -> Checkpoint:
    from .train import train
    every = max(1, cfg.optim.epochs // 20)

    def progress(row):
        if not quiet and row["step"] % every == 0:
            print(f"step {row['step']}: total={row['total']:.5f} sigma_g={row['sigma_g']}")
    res = train(cfg, ds, log_path=out / "train_log.csv", progress=progress)
    res.checkpoint.save(out / "checkpoint.ghck")
    (out / "config.txt").write_text(config_mod.dumps(cfg))
    print(f"trained {len(res.log)} steps in {res.seconds:.1f}s; loss {res.initial_loss:.5f} -> "
          f"{res.final_loss:.5f}; checkpoint {out / 'checkpoint.ghck'}")
    return res.checkpoint


def cmd_train(args) -> int:
    from .train import apply_ablation
    cfg = _config(args)
    for spec in args.ablate or []:
        cfg = apply_ablation(cfg, spec)
    _train_and_save(cfg, _dataset(args, cfg), Path(cfg.out_dir), args.quiet)
    return 0


def cmd_eval(args) -> int:
    from .train import evaluate, model_from_checkpoint
    ckpt = Checkpoint.load(args.checkpoint)
    model, cfg = model_from_checkpoint(ckpt)
    if args.out is not None:
        cfg.out_dir = args.out
    ds = Dataset.load(args.data) if args.data else synth_generate(cfg, seed=args.seed)
    out = Path(cfg.out_dir) / "metrics.csv"
    res = evaluate(model, ds, kqir_steps=args.kqir_steps, out_path=out)
    sys.stdout.write(res.csv())
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import REGISTRY, report, run_checks
    names = [k for k in REGISTRY if not args.only or any(s in k for s in args.only)]
    results = run_checks(names, seed=args.seed or 0)
    print(report(results))
    return 0 if all(r.passed for r in results) else 1


def cmd_export(args) -> int:
    from .export import export_sample
    from .train import model_from_checkpoint
    model, cfg = model_from_checkpoint(Checkpoint.load(args.checkpoint))
    ds = Dataset.load(args.data) if args.data else synth_generate(cfg)
    out = Path(args.out or cfg.out_dir)
    obj, svg = export_sample(model, ds, args.index, out)
    print(f"wrote {obj} and {svg}")
    return 0


def cmd_ablate(args) -> int:
    from .train import apply_ablation, evaluate, model_from_checkpoint
    base = _config(args)
    ds = _dataset(args, base)
    root = Path(base.out_dir)
    for spec in args.ablate:
        cfg = apply_ablation(base, spec)
        out = root / spec.replace("=", "_")
        cfg.out_dir = str(out)
        ckpt = _train_and_save(cfg, ds, out, args.quiet)
        model, _ = model_from_checkpoint(ckpt)
        res = evaluate(model, ds, out_path=out / "metrics.csv")
        print(f"[{spec}] MPJPE={res.metrics['MPJPE']:.3f} PA-MPJPE={res.metrics['PA-MPJPE']:.3f} "
              f"coarse MPJPE={res.coarse['MPJPE']:.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat 'section.key = value' config file")
    common.add_argument("--seed", type=int, help="run seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    p = argparse.ArgumentParser(prog="geohand", parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--samples", type=int)
    s.add_argument("--name", default="dataset.ghds")
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train and write a checkpoint + log")
    s.add_argument("--data", help="dataset file (default: generate from the config)")
    s.add_argument("--ablate", action="append", metavar="SPEC")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint, write metrics.csv")
    s.add_argument("checkpoint")
    s.add_argument("--data")
    s.add_argument("--kqir-steps", type=int, dest="kqir_steps")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("gradcheck", parents=[common], help="run the gradient check suite")
    s.add_argument("--only", action="append", metavar="SUBSTRING")
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("export", parents=[common], help="write OBJ mesh and SVG skeleton for one sample")
    s.add_argument("checkpoint")
    s.add_argument("--data")
    s.add_argument("--index", type=int, default=0)
    s.set_defaults(fn=cmd_export)

    s = sub.add_parser("ablate", parents=[common], help="train + evaluate one run per ablation")
    s.add_argument("--data")
    s.add_argument("--ablate", action="append", required=True, metavar="SPEC",
                   help="gate_off | no_adapter | kqir_steps=K | drop_loss=<term>")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ValueError, IndexError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
