"""Command-line surface.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure (non-finite loss or a failed gradient check).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from pointseq.config import load_config
from pointseq.errors import ConfigError, DataError, NumericError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pointseq",
        description="Self-supervised pretraining for point cloud sequences")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a labeled synthetic dataset")
    gen.add_argument("--classes", type=int, default=8)
    gen.add_argument("--per-class", type=int, required=True)
    gen.add_argument("--out", required=True)
    gen.add_argument("--frames", type=int, default=24)
    gen.add_argument("--points", type=int, default=256)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--noise", type=float, default=0.01)
    gen.add_argument("--val-fraction", type=float, default=0.2)

    pre = sub.add_parser("pretrain", help="run self-supervised pretraining")
    pre.add_argument("--config", required=True)
    pre.add_argument("--data", required=True)
    pre.add_argument("--out", required=True)
    pre.add_argument("--log-every", type=int, default=10)

    probe = sub.add_parser("probe", help="linear evaluation of a checkpoint")
    probe.add_argument("--ckpt", required=True)
    probe.add_argument("--data", required=True)
    probe.add_argument("--epochs", type=int, default=60)

    abl = sub.add_parser("ablate", help="pretrain + probe per toggle combo")
    abl.add_argument("--config", required=True)
    abl.add_argument("--toggles", required=True,
                     help="semicolon-separated combos of comma-separated tokens, "
                          "e.g. 'local;local,global;local,global,recon,hard'")
    abl.add_argument("--data", required=True)
    abl.add_argument("--out", required=True)
    abl.add_argument("--probe-epochs", type=int, default=60)

    grad = sub.add_parser("gradcheck", help="finite-difference check of all losses")
    grad.add_argument("--seed", type=int, default=0)

    insp = sub.add_parser("inspect-ckpt", help="print checkpoint metadata")
    insp.add_argument("path")

    return parser


def _resolve_manifest(data_dir: str, seed: int):
    from pointseq.data import build_manifest, load_manifest

    data_path = Path(data_dir)
    if not data_path.is_dir():
        raise DataError(f"not a directory: {data_path}")
    manifest_path = data_path / "manifest.json"
    if manifest_path.exists():
        return load_manifest(manifest_path)
    return build_manifest(data_path, seed=seed)


def _cmd_gen_data(args) -> int:
    from pointseq.data import generate_dataset

    manifest = generate_dataset(args.out, args.classes, args.per_class,
                                T=args.frames, N=args.points, seed=args.seed,
                                noise_sigma=args.noise, val_fraction=args.val_fraction)
    n_train = sum(e["split"] == "train" for e in manifest)
    print(f"wrote {len(manifest)} sequences to {args.out} "
          f"({n_train} train / {len(manifest) - n_train} val)")
    return 0


def _cmd_pretrain(args) -> int:
    from pointseq.training import pretrain

    cfg = load_config(args.config)
    manifest = _resolve_manifest(args.data, cfg.seed)
    ckpt, rows = pretrain(cfg, manifest, args.out, log_every=args.log_every)
    last = rows[-1].split(",") if rows else None
    if last:
        print(f"finished {ckpt.step} steps, final L_total={last[4]}")
    print(f"checkpoint: {Path(args.out) / 'ckpt-final.cpr'}")
    return 0


def _cmd_probe(args) -> int:
    from pointseq.training import linear_probe, load_run_checkpoint

    ckpt, cfg = load_run_checkpoint(args.ckpt)
    manifest = _resolve_manifest(args.data, cfg.seed)
    accuracy = linear_probe(ckpt.params, cfg, manifest, epochs=args.epochs, seed=cfg.seed)
    print(f"val_accuracy {accuracy:.4f}")
    return 0


def _cmd_ablate(args) -> int:
    from pointseq.training import ablate

    cfg = load_config(args.config)
    manifest = _resolve_manifest(args.data, cfg.seed)
    ablate(cfg, args.toggles, manifest, args.out, probe_epochs=args.probe_epochs)
    print(f"results: {Path(args.out) / 'ablate.csv'}")
    return 0


def _cmd_gradcheck(args) -> int:
    from pointseq.training import gradcheck_main, gradient_check_report

    return gradcheck_main(gradient_check_report(seed=args.seed))


def _cmd_inspect(args) -> int:
    from pointseq.data import load_checkpoint

    ckpt = load_checkpoint(args.path)
    print(f"version: {ckpt.version}")
    print(f"step: {ckpt.step}")
    print("config: " + json.dumps(ckpt.config, sort_keys=True))
    total = 0
    for name, value, trainable in ckpt.params.items():
        flag = "" if trainable else " (frozen)"
        print(f"  {name}: {value.shape}{flag}")
        total += value.size
    print(f"parameters: {len(ckpt.params.names())} tensors, {total} scalars")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "pretrain": _cmd_pretrain,
    "probe": _cmd_probe,
    "ablate": _cmd_ablate,
    "gradcheck": _cmd_gradcheck,
    "inspect-ckpt": _cmd_inspect,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return 3
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
