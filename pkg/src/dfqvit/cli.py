"""Command-line entry point: ``dfqvit {train,quantize,eval,landscape,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path


from .data import make_shapes_dataset
from .datagen import init_batch, refine
from .errors import ConfigError, ContractError, DimensionError, NumericalError, ParameterError, TrainingError
from .losses import ContrastiveConfig
from .pipeline import RunConfig, evaluate, landscape_grid, run, write_landscape
from .quant import (QuantizedModel, QuantScheme, footprint_from_records, report_footprint,
                    scheme_from_json)
from .vit import ViTConfig, ViTModel, load_checkpoint, save_checkpoint, train_toy

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("dfqvit")


def _add_vit_args(p):
    g = p.add_argument_group("model")
    for f in fields(ViTConfig):
        g.add_argument(f"--{f.name.replace('_', '-')}", type=type(f.default), default=f.default)


def _add_run_args(p):
    g = p.add_argument_group("run (overrides --config)")
    for f in fields(RunConfig):
        flag = f"--{f.name.replace('_', '-')}"
        if f.name == "seed":
            continue
        if f.name == "bit_range":
            g.add_argument(flag, type=int, nargs=2, default=None, metavar=("LO", "HI"))
        elif f.name == "dump_images":
            g.add_argument(flag, action="store_true", default=None)
        elif f.name in ("fixed_bits",):
            g.add_argument(flag, type=int, default=None)
        elif f.name == "max_avg_bits":
            g.add_argument(flag, type=float, default=None)
        else:
            g.add_argument(flag, type=type(f.default), default=None)


def _load_scheme(path) -> QuantScheme:
    return scheme_from_json(Path(path).read_text())


def cmd_train(args) -> int:
    cfg = ViTConfig(**{f.name: getattr(args, f.name) for f in fields(ViTConfig)})
    train = make_shapes_dataset(args.train_size, cfg.image_size, cfg.channels, seed=args.data_seed,
                                num_classes=cfg.num_classes)
    held = make_shapes_dataset(args.eval_size, cfg.image_size, cfg.channels, seed=args.eval_seed,
                               num_classes=cfg.num_classes)
    model = train_toy(ViTModel.init(cfg, seed=args.seed), train, epochs=args.epochs, lr=args.lr,
                      seed=args.seed)
    save_checkpoint(model, args.out)
    print(json.dumps({"checkpoint": str(args.out), "train_accuracy": model.train_accuracy,
                      "heldout_accuracy": evaluate(model, held)}, indent=1))
    return EXIT_OK


def cmd_quantize(args) -> int:
    base = asdict(RunConfig.from_json(args.config)) if args.config else {}
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            base[f.name] = v
    base["seed"] = args.seed
    config = RunConfig.from_dict(base)
    report = run(config)
    print(report.to_json())
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    cfg = model.config
    data = make_shapes_dataset(args.eval_size, cfg.image_size, cfg.channels, seed=args.eval_seed,
                               num_classes=cfg.num_classes)
    out = {"fp_accuracy": evaluate(model, data)}
    if args.scheme:
        out["quantized_accuracy"] = evaluate(QuantizedModel(model, _load_scheme(args.scheme)), data)
    print(json.dumps(out, indent=1))
    return EXIT_OK


def cmd_landscape(args) -> int:
    model = load_checkpoint(args.checkpoint)
    scheme = _load_scheme(args.scheme)
    ccfg = ContrastiveConfig(tau=args.tau)
    batch = init_batch(args.batch_size, model.config, args.batch_seed)
    if args.generation_iters:
        batch = refine(batch, model, QuantizedModel(model, scheme), args.generation_iters,
                       args.lr_gen, ccfg)
    coords, grid = landscape_grid(model, scheme, batch, args.steps, args.radius, args.seed, ccfg)
    write_landscape(coords, grid, args.out)
    print(json.dumps({"grid": str(args.out), "center": float(grid[len(coords) // 2, len(coords) // 2]),
                      "min": float(grid.min()), "max": float(grid.max())}, indent=1))
    return EXIT_OK


def cmd_report(args) -> int:
    recs = json.loads(Path(args.scheme).read_text())
    if all("params" in r and "macs" in r for r in recs):
        fp = footprint_from_records(recs)
    elif args.checkpoint:
        fp = report_footprint(load_checkpoint(args.checkpoint), scheme_from_json(json.dumps(recs)))
    else:
        raise ConfigError("scheme lacks params/macs fields; pass --checkpoint")
    print(json.dumps(fp, indent=1))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dfqvit", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the toy full-precision ViT")
    _add_vit_args(p)
    p.add_argument("--out", default="fp.ckpt")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--train-size", type=int, default=512)
    p.add_argument("--eval-size", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data-seed", type=int, default=1)
    p.add_argument("--eval-seed", type=int, default=RunConfig.eval_seed)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("quantize", help="run data generation and quantization search")
    p.add_argument("--config", help="JSON file with RunConfig fields")
    p.add_argument("--seed", type=int, required=True)
    _add_run_args(p)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("eval", help="held-out accuracy of a checkpoint (and optional scheme)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scheme")
    p.add_argument("--eval-size", type=int, default=RunConfig.eval_size)
    p.add_argument("--eval-seed", type=int, default=RunConfig.eval_seed)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("landscape", help="export a fitness grid over weight/pixel perturbations")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scheme", required=True)
    p.add_argument("--out", default="landscape.csv")
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--radius", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=RunConfig.batch_size)
    p.add_argument("--generation-iters", type=int, default=0)
    p.add_argument("--lr-gen", type=float, default=RunConfig.lr_gen)
    p.add_argument("--tau", type=float, default=RunConfig.tau)
    p.set_defaults(func=cmd_landscape)

    p = sub.add_parser("report", help="recompute size/BOPS from a scheme file")
    p.add_argument("--scheme", required=True)
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (NumericalError, TrainingError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ContractError, ParameterError, DimensionError, FileNotFoundError,
            json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
