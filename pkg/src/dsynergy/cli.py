"""Command-line entry point: ``dsynergy <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data or format error. Every command
accepts ``--seed``; when it is omitted the ``DS_SEED`` environment variable
is used, then 0.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from .c2f import C2fConfig, block_param_count
from .checks import OP_CASES, gradient_suite
from .dso import Region, RegionConfig, channel_stats, classify_regions, surface_csv, surface_grid
from .gating import added_param_count, dsg_channels
from .io import FormatError, load_bundle, load_tensor, save_bundle
from .toy import (
    ABLATION_AXES,
    ToyConfig,
    ablate,
    ablation_csv,
    evaluate,
    gen_dataset,
    init_model,
    load_dataset,
    save_dataset,
    train,
)


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def parse_range(text: str) -> tuple[float, float, int]:
    """``min:max:steps`` -> (min, max, steps); requires min < max and steps >= 2."""
    parts = text.split(":")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"range {text!r} is not min:max:steps")
    try:
        lo, hi, steps = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise argparse.ArgumentTypeError(f"range {text!r} is not min:max:steps") from None
    if not lo < hi:
        raise argparse.ArgumentTypeError(f"range {text!r}: min must be below max")
    if steps < 2:
        raise argparse.ArgumentTypeError(f"range {text!r}: need at least 2 steps")
    return lo, hi, steps


def _csv_list(kind):
    def parse(text):
        try:
            return [kind(v) for v in text.split(",") if v]
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad list {text!r}") from None

    return parse


def _add_region_flags(p):
    p.add_argument("--band-ratio", type=float, default=0.2, help="half-width of the diagonal band (default: %(default)s)")
    p.add_argument("--phi-threshold", type=float, default=1.0, help="phi splitting mixed from background (default: %(default)s)")


def _add_model_flags(p):
    p.add_argument("--no-dsg", action="store_true", help="disable the channel gate (default: enabled)")
    p.add_argument("--no-msg", action="store_true", help="disable the depth-group gate (default: enabled)")
    p.add_argument("--groups", type=int, default=3, help="MSG group count (default: %(default)s)")
    p.add_argument("--alpha", type=float, default=1.9, help="temperature span (default: %(default)s)")
    p.add_argument("--beta", type=float, default=0.1, help="temperature floor (default: %(default)s)")
    p.add_argument("--operator", choices=("dso", "mean", "max"), default="dso", help="gate statistic (default: %(default)s)")
    p.add_argument("--logit-source", choices=("noise", "scale"), default="noise",
                   help="what the scale branch adds to the MSG logits (default: %(default)s)")


def _add_data_flags(p, count=2048):
    p.add_argument("--data", type=Path, help="dataset directory (default: generate from --seed)")
    p.add_argument("--count", type=int, default=count, help="samples to generate without --data (default: %(default)s)")


def _add_train_flags(p):
    p.add_argument("--epochs", type=int, default=20, help="(default: %(default)s)")
    p.add_argument("--lr", type=float, default=0.05, help="(default: %(default)s)")
    p.add_argument("--batch-size", type=int, default=32, help="(default: %(default)s)")
    p.add_argument("--val-count", type=int, default=512, help="validation samples (default: %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dsynergy", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help):
        p = sub.add_parser(name, help=help, description=help)
        p.add_argument("--seed", type=int, default=None, help="random seed (default: $DS_SEED, else 0)")
        return p

    p = command("surface", "emit the phi(mu, d) surface with region labels as CSV")
    p.add_argument("--mu", type=parse_range, default=(0.0, 3.0, 61), help="min:max:steps (default: 0:3:61)")
    p.add_argument("--d", type=parse_range, default=(0.0, 3.0, 61), help="min:max:steps (default: 0:3:61)")
    p.add_argument("--out", type=Path, default=None, help="output CSV (default: stdout)")
    _add_region_flags(p)

    p = command("stats", "per-channel mu, max, d, phi and region of a DST1 tensor")
    p.add_argument("--input", type=Path, required=True, help="DST1 tensor file")
    p.add_argument("--out", type=Path, default=None, help="output CSV (default: stdout)")
    _add_region_flags(p)

    p = command("gradcheck", "finite-difference check of every backward pass")
    p.add_argument("--trials", type=int, default=20, help="random draws per case (default: %(default)s)")
    p.add_argument("--step", type=float, default=None, help="relative step (default: 1e-4 per op, 1e-3 for c2f_block)")
    p.add_argument("--tol", type=float, default=1e-5, help="max relative error (default: %(default)s)")
    p.add_argument("--order", type=int, choices=(2, 4), default=4, help="stencil order (default: %(default)s)")
    p.add_argument("--cases", type=_csv_list(str), default=None,
                   help=f"comma list from {','.join([*OP_CASES, 'c2f_block'])} (default: all)")

    p = command("gen-data", "write a synthetic four-class dataset")
    p.add_argument("--count", type=int, default=2048, help="(default: %(default)s)")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = command("train", "train the toy classifier and write metrics")
    _add_data_flags(p)
    _add_train_flags(p)
    _add_model_flags(p)
    p.add_argument("--metrics-out", type=Path, default=None, help="metrics CSV (default: stdout)")
    p.add_argument("--params-out", type=Path, default=None, help="parameter bundle directory (default: none)")

    p = command("eval", "accuracy and confusion counts of a parameter bundle")
    p.add_argument("--params", type=Path, default=None, help="bundle from train --params-out (default: fresh init from --seed)")
    _add_data_flags(p, count=512)
    _add_model_flags(p)
    p.add_argument("--out", type=Path, default=None, help="confusion CSV (default: stdout)")

    p = command("ablate", "one training run per value of a single knob")
    p.add_argument("--axis", choices=ABLATION_AXES, required=True)
    p.add_argument("--values", type=_csv_list(str), required=True, help="comma-separated values")
    _add_data_flags(p)
    _add_train_flags(p)
    _add_model_flags(p)
    p.add_argument("--out", type=Path, default=None, help="output CSV (default: stdout)")

    p = command("params", "added parameter counts of the two gates")
    p.add_argument("--channels", type=int, default=64, help="C, width of the statistic map (default: %(default)s)")
    p.add_argument("--bottlenecks", type=int, default=2, help="n (default: %(default)s)")
    p.add_argument("--groups", type=int, default=3, help="G (default: %(default)s)")
    return parser


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("DS_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"DS_SEED={env!r} is not an integer") from None


def _emit(text: str, path: Path | None) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        path.write_text(text, encoding="utf-8")


def _toy_config(args) -> ToyConfig:
    return ToyConfig(
        use_dsg=not args.no_dsg, use_msg=not args.no_msg, groups=args.groups,
        alpha=args.alpha, beta=args.beta, operator=args.operator, logit_source=args.logit_source,
    )


def _dataset(args, seed):
    if args.data is not None:
        try:
            return load_dataset(args.data)
        except (OSError, KeyError, ValueError) as exc:
            raise DataError(f"cannot read dataset {args.data}: {exc}") from exc
    return gen_dataset(seed, args.count)


def _validation(args, seed):
    # a second stream of the same seed, disjoint from the training draw
    return gen_dataset([seed, 1], args.val_count)


# -------------------------------------------------------------- commands


def cmd_surface(args, seed):
    cfg = RegionConfig(args.band_ratio, args.phi_threshold)
    _emit(surface_csv(*surface_grid(args.mu, args.d, cfg=cfg)), args.out)


def cmd_stats(args, seed):
    try:
        x = load_tensor(args.input)
    except OSError as exc:
        raise DataError(str(exc)) from exc
    stats = channel_stats(x)
    labels = classify_regions(stats, RegionConfig(args.band_ratio, args.phi_threshold))
    rows = ["batch,channel,mu,m,d,phi,label"]
    B, C = labels.shape
    for b in range(B):
        for c in range(C):
            vals = [float(getattr(stats, f)[b, c, 0, 0]) for f in ("mu", "m", "d", "phi")]
            rows.append(",".join([str(b), str(c), *(repr(v) for v in vals), Region(labels[b, c]).label]))
    _emit("\n".join(rows) + "\n", args.out)


def cmd_gradcheck(args, seed):
    names = args.cases
    known = [*OP_CASES, "c2f_block"]
    if names:
        bad = [n for n in names if n not in known]
        if bad:
            raise UsageError(f"unknown gradcheck cases: {', '.join(bad)}")
    ok = True
    for name, rep in gradient_suite(seed, args.trials, args.step, args.tol, args.order, names):
        ok &= rep.passed
        print(f"{'PASS' if rep.passed else 'FAIL'} {name:<24} max_rel_err={rep.max_rel_err:.3e} {rep.worst}")
    return 0 if ok else 2


def cmd_gen_data(args, seed):
    save_dataset(gen_dataset(seed, args.count), args.out)


def cmd_train(args, seed):
    cfg = _toy_config(args)
    data = _dataset(args, seed)
    res = train(cfg, data, epochs=args.epochs, lr=args.lr, seed=seed,
                val=_validation(args, seed), batch_size=args.batch_size)
    _emit(res.metrics.to_csv(), args.metrics_out)
    if args.params_out is not None:
        save_bundle(res.params, args.params_out)
        (args.params_out / "config.json").write_text(json.dumps(
            {"model": cfg.__dict__, "seed": seed, "digest": res.metrics.config_digest}, sort_keys=True, indent=1
        ) + "\n", encoding="utf-8")


def cmd_eval(args, seed):
    cfg = _toy_config(args)
    if args.params is not None:
        try:
            meta = json.loads((args.params / "config.json").read_text(encoding="utf-8"))
            cfg = ToyConfig(**meta["model"])
            params = load_bundle(args.params)
        except (OSError, KeyError, ValueError, TypeError) as exc:
            raise DataError(f"cannot read parameter bundle {args.params}: {exc}") from exc
        shapes = {k: v.shape for k, v in init_model(cfg, np.random.default_rng(0)).items()}
        if set(shapes) != set(params):
            raise DataError("parameter bundle does not match its config")
        params = {k: params[k].reshape(shapes[k]) for k in shapes}
    else:
        params = init_model(cfg, np.random.default_rng(seed))
    data = _dataset(args, seed)
    res = evaluate(params, data, cfg)
    rows = [f"# accuracy={res.accuracy!r}", "true," + ",".join(f"pred_{n}" for n in ("background", "small", "large", "mixed"))]
    for i, name in enumerate(("background", "small", "large", "mixed")):
        rows.append(name + "," + ",".join(str(int(v)) for v in res.confusion[i]))
    _emit("\n".join(rows) + "\n", args.out)


def cmd_ablate(args, seed):
    base = _toy_config(args)
    values = args.values
    if not values:
        raise UsageError("--values is empty")
    try:
        if args.axis == "groups":
            [int(v) for v in values]
        elif args.axis == "alpha":
            [float(v) for v in values]
        elif any(v not in ("dso", "mean", "max") for v in values):
            raise ValueError(values)
    except ValueError:
        raise UsageError(f"bad values for axis {args.axis}: {','.join(values)}") from None
    rows = ablate(args.axis, values, base, _dataset(args, seed), _validation(args, seed),
                  epochs=args.epochs, lr=args.lr, seed=seed, batch_size=args.batch_size)
    _emit(ablation_csv(rows), args.out)


def cmd_params(args, seed):
    C, n, G = args.channels, args.bottlenecks, args.groups
    if C < 2 or n < 1 or G < 2:
        raise UsageError("need --channels >= 2, --bottlenecks >= 1, --groups >= 2")
    added = added_param_count(C, n, G)
    print(f"dsg={added['dsg']} msg={added['msg']}")


COMMANDS = {
    "surface": cmd_surface,
    "stats": cmd_stats,
    "gradcheck": cmd_gradcheck,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "params": cmd_params,
}


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        seed = _seed(args)
        return COMMANDS[args.command](args, seed) or 0
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (DataError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        # configuration rejected by the library (bad group count, alpha, ...)
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
