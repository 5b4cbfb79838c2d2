"""Command-line interface: synth, train, eval, ablate, describe, gradcheck, plot."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation, plots, trainer, verification
from .config import TrainConfig, read_train_config, scale_config
from .data import export_dataset, load_dataset, synth_generate
from .network import format_shape_table, shape_table

log = logging.getLogger(__name__)

LAYOUTS = ("synthetic", "sysu-like", "regdb-like")


def _add_common(p: argparse.ArgumentParser, preset: bool = True) -> None:
    # every subcommand accepts --config and --seed
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None, help="flat key=value train-config file")
    if preset:
        p.add_argument("--preset", choices=("paper", "tiny"), default=None)


def _train_config(args: argparse.Namespace) -> TrainConfig:
    overrides: dict = {}
    for key in ("seed", "preset", "epochs", "ids_per_batch", "imgs_per_id"):
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    for item in getattr(args, "set", None) or []:
        key, _, value = item.partition("=")
        if not value:
            raise ValueError(f"--set expects key=value, got {item!r}")
        field_types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
        if key not in field_types:
            raise ValueError(f"unknown config key {key!r}")
        cast = {"int": int, "float": float, "bool": lambda v: v.lower() in ("1", "true", "yes"), "str": str}
        overrides[key] = cast[field_types[key]](value)
    if args.config:
        return read_train_config(args.config, overrides)
    base = dataclasses.asdict(TrainConfig())
    base.update(overrides)
    return TrainConfig(**base)


def _file_config(args: argparse.Namespace) -> TrainConfig | None:
    return read_train_config(args.config) if getattr(args, "config", None) else None


def cmd_synth(args: argparse.Namespace) -> int:
    base = _file_config(args)
    preset = args.preset or (base.preset if base else "tiny")
    seed = args.seed if args.seed is not None else (base.seed if base else 0)
    cfg = scale_config(preset)
    ds = synth_generate(args.ids, args.imgs_per_modality, cfg, seed)
    export_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples ({args.ids} identities) to {args.out}")
    return 0


def cmd_describe(args: argparse.Namespace) -> int:
    base = _file_config(args)
    preset = args.preset or (base.preset if base else "paper")
    num_ids = args.num_identities or (395 if preset == "paper" else 20)
    cfg = scale_config(preset, num_identities=num_ids)
    rows = shape_table(cfg, args.ids_per_batch, args.imgs_per_id)
    print(format_shape_table(rows))
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _train_config(args)
    ds = load_dataset(args.dataset, args.layout)
    result = trainer.train(cfg, ds, args.out)
    print(f"trained {cfg.epochs} epochs; metrics at {result.metrics_path}, "
          f"checkpoint at {result.checkpoint_dir}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    model, scale_cfg, _, _ = trainer.load_checkpoint(args.checkpoint)
    ds = load_dataset(args.dataset, args.layout)
    protocol = evaluation.RetrievalProtocol(
        args.protocol, gallery_shots=args.gallery_shots, repetitions=args.repetitions,
    )
    base = _file_config(args)
    seed = args.seed if args.seed is not None else (base.seed if base else 0)
    result = evaluation.run_protocol(model, ds, protocol, seed, scale_cfg, args.features)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = evaluation.results_csv_lines(
        [(args.protocol, args.features, result, protocol.repetitions, seed)]
    )
    (out / "results.csv").write_text("\n".join(lines) + "\n")
    cmc_lines = ["rank,rate"] + [f"{r + 1},{float(v)!r}" for r, v in enumerate(result.cmc)]
    (out / f"cmc_{args.protocol}_{args.features}.csv").write_text("\n".join(cmc_lines) + "\n")
    print(f"{args.protocol} [{args.features}] rank-1 {result.cmc[0]:.4f} "
          f"mAP {result.mean_ap:.4f} over {result.num_queries_evaluated} queries")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _train_config(args)
    if args.dataset:
        full = load_dataset(args.dataset, args.layout)
        ids = full.identities()
        cut = max(2, (2 * len(ids)) // 3)
        train_ds = full.subset(ids[:cut], recompute_stats=True)
        eval_ds = full.subset(ids[cut:])
        eval_ds.stats = train_ds.stats
    else:
        train_ds, eval_ds = trainer.synthetic_benchmark(
            preset=cfg.preset, seed=cfg.seed if cfg.seed else 77,
        )
    rows = trainer.ablate(cfg, train_ds, eval_ds, args.out)
    print(trainer.ABLATION_HEADER)
    for row in rows:
        print(row.csv())
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    start = args.seed or 0
    ok, rows = verification.run_suite(range(start, start + args.seeds), tol=args.tol)
    width = max(len(name) for name, _ in rows)
    for name, err in rows:
        status = "ok" if err <= args.tol else "FAIL"
        print(f"{name:<{width}}  {err:.3e}  {status}")
    print(f"{'all checks passed' if ok else 'GRADIENT CHECKS FAILED'} "
          f"({args.seeds} seeds, tol {args.tol:g})")
    return 0 if ok else 1


def cmd_plot(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    made = []
    if args.metrics:
        plots.plot_loss_curves(args.metrics, out / "loss_curves.png")
        made.append("loss_curves.png")
    if args.cmc:
        plots.plot_cmc_curve(args.cmc, out / "cmc_curve.png")
        made.append("cmc_curve.png")
    if not made:
        raise ValueError("nothing to plot: pass --metrics and/or --cmc")
    print(f"wrote {', '.join(made)} to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmpreid", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate and export a synthetic dataset")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--ids", type=int, default=20)
    p.add_argument("--imgs-per-modality", type=int, default=10)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("describe", help="print the forward-pass shape table")
    _add_common(p)
    p.add_argument("--ids-per-batch", type=int, default=8)
    p.add_argument("--imgs-per-id", type=int, default=4)
    p.add_argument("--num-identities", type=int, default=None)
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("train", help="train on a dataset directory")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--layout", choices=LAYOUTS, default="synthetic")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--ids-per-batch", type=int, default=None, dest="ids_per_batch")
    p.add_argument("--imgs-per-id", type=int, default=None, dest="imgs_per_id")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any train-config field")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint under a retrieval protocol")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--layout", choices=LAYOUTS, default="synthetic")
    p.add_argument("--protocol", choices=evaluation.PROTOCOL_NAMES, default="synthetic")
    p.add_argument("--features", choices=evaluation.FEATURE_SETS, default="f_ALL")
    p.add_argument("--gallery-shots", type=int, default=1)
    p.add_argument("--repetitions", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the four-configuration ablation grid")
    _add_common(p)
    p.add_argument("--dataset", default=None)
    p.add_argument("--layout", choices=LAYOUTS, default="synthetic")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="run the gradient verification suite")
    _add_common(p, preset=False)
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("plot", help="render loss and CMC curves from CSVs")
    _add_common(p, preset=False)
    p.add_argument("--metrics", default=None)
    p.add_argument("--cmc", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except Exception as e:  # runtime failures exit 1, usage errors exited 2 above
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
