"""Command-line surface.

Subcommands: pretrain, probe, analyze-attn, analyze-spectrum, gradcheck,
gen-data. Exit codes: 0 success, 1 contract/data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .errors import LcmaeError


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lcmae", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    pt = sub.add_parser("pretrain", help="run pre-training")
    pt.add_argument("--config", help="key=value config file")
    pt.add_argument("--override", action="append", default=[],
                    metavar="KEY=VALUE", help="dotted-path config override")
    pt.add_argument("--data", required=True, help="LCIMG1 dataset file")
    pt.add_argument("--out", required=True, help="output checkpoint path")
    pt.add_argument("--log", help="CSV log path (step,lr,l_mim,l_gg,total)")
    pt.add_argument("--quiet", action="store_true")

    pr = sub.add_parser("probe", help="linear-probe a checkpoint")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--data", required=True, help="labeled LCIMG1 dataset")
    pr.add_argument("--epochs", type=int, default=60)
    pr.add_argument("--seed", type=int, default=0)

    aa = sub.add_parser("analyze-attn", help="attention maps for a query patch")
    aa.add_argument("--checkpoint", required=True)
    aa.add_argument("--data", required=True)
    aa.add_argument("--index", type=int, default=0, help="image index in the dataset")
    aa.add_argument("--query", default="0",
                    help="grid index N, or random:SEED for a seeded pick")
    aa.add_argument("--layer", type=int, default=-1)
    aa.add_argument("--out-prefix", required=True,
                    help="writes <prefix>_head<h>.pgm and <prefix>.csv")

    sp = sub.add_parser("analyze-spectrum", help="log-SV gap curves between two checkpoints")
    sp.add_argument("--checkpoint-a", required=True)
    sp.add_argument("--checkpoint-b", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--layer", type=int, default=-1,
                    help="encoder block index; -1 = last")
    sp.add_argument("--out", required=True, help="CSV path (rank,log_gap)")

    gc = sub.add_parser("gradcheck", help="run the finite-difference oracle suite")
    gc.add_argument("--tolerance", type=float, default=1e-4)

    gd = sub.add_parser("gen-data", help="generate the synthetic dataset")
    gd.add_argument("--count", type=int, default=4096)
    gd.add_argument("--size", type=int, default=32)
    gd.add_argument("--classes", type=int, default=8)
    gd.add_argument("--seed", type=int, default=0)
    gd.add_argument("--out", required=True)
    return p


def _cmd_pretrain(args) -> int:
    from .checkpoint import save_checkpoint
    from .config import apply_overrides, parse_config
    from .data import load_dataset
    from .trainer import TrainConfig, pretrain

    cfg = TrainConfig()
    if args.config:
        with open(args.config) as f:
            cfg = parse_config(f.read(), base=cfg)
    apply_overrides(cfg, args.override)
    ds = load_dataset(args.data)
    log, state = pretrain(cfg, ds.images, progress=not args.quiet)
    save_checkpoint(state, args.out, step=log[-1].step if log else 0)
    if args.log:
        with open(args.log, "w") as f:
            f.write("step,lr,l_mim,l_gg,total\n")
            for row in log:
                f.write(row.as_csv() + "\n")
    if not args.quiet:
        print(f"wrote checkpoint to {args.out}")
    return 0


def _cmd_probe(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import load_dataset
    from .errors import DataError
    from .trainer import ProbeConfig, linear_probe

    state, _, _ = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    if ds.labels is None:
        raise DataError(f"{args.data} has no labels; probing needs them")
    acc = linear_probe(state, ds.images, ds.labels,
                       ProbeConfig(epochs=args.epochs, seed=args.seed))
    print(f"top1_accuracy {acc:.4f}")
    return 0


def _cmd_analyze_attn(args) -> int:
    from .analysis import attention_maps, write_attention_csv, write_pgm
    from .checkpoint import load_checkpoint
    from .data import load_dataset

    state, _, _ = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    image = ds.images[args.index]
    if args.query.startswith("random:"):
        seed = int(args.query.split(":", 1)[1])
        query = int(np.random.default_rng(seed).integers(0, state.vit.n_tokens))
    else:
        query = int(args.query)
    result = attention_maps(state, image, query, layer=args.layer)
    for h in range(result.maps.shape[0]):
        write_pgm(f"{args.out_prefix}_head{h}.pgm", result.maps[h])
    write_attention_csv(f"{args.out_prefix}.csv", result)
    print(f"query {query} layer {result.layer}: wrote "
          f"{result.maps.shape[0]} maps to {args.out_prefix}_head*.pgm")
    return 0


def _cmd_analyze_spectrum(args) -> int:
    from .analysis import sv_gap_curve, write_gap_csv
    from .checkpoint import load_checkpoint
    from .data import load_dataset

    state_a, _, _ = load_checkpoint(args.checkpoint_a)
    state_b, _, _ = load_checkpoint(args.checkpoint_b)
    ds = load_dataset(args.data)
    layer = args.layer if args.layer >= 0 else state_a.vit.depth - 1
    curve = sv_gap_curve(state_a, state_b, ds.images, layer)
    write_gap_csv(args.out, curve)
    print(f"layer {layer}: mean log gap {curve.mean():+.4f} over {len(curve)} ranks")
    return 0


def _cmd_gradcheck(args) -> int:
    from .oracles import run_gradcheck_suite

    worst, report = run_gradcheck_suite()
    for name, err in report:
        print(f"{name:40s} {err:.3e}")
    print(f"worst relative error: {worst:.3e}")
    if worst > args.tolerance:
        print(f"FAIL: exceeds tolerance {args.tolerance:g}", file=sys.stderr)
        return 1
    return 0


def _cmd_gen_data(args) -> int:
    from .data import generate_synthetic, save_dataset

    ds = generate_synthetic(args.count, size=args.size, n_classes=args.classes,
                            seed=args.seed)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} images ({args.size}x{args.size}, "
          f"{args.classes} classes) to {args.out}")
    return 0


_COMMANDS = {
    "pretrain": _cmd_pretrain,
    "probe": _cmd_probe,
    "analyze-attn": _cmd_analyze_attn,
    "analyze-spectrum": _cmd_analyze_spectrum,
    "gradcheck": _cmd_gradcheck,
    "gen-data": _cmd_gen_data,
}


def cli_dispatch(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        return _COMMANDS[args.command](args)
    except (LcmaeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
