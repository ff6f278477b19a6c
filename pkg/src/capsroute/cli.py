"""Command-line entry point.

    capsroute train     --data-dir DIR [--procedure similarity] [--epochs 3] ...
    capsroute eval      --checkpoint DIR --data-dir DIR
    capsroute toy       [--lambda1 100 --lambda2 0]
    capsroute gradcheck [--procedure similarity] [--precision 64]
    capsroute shapes    [--dataset smallnorb]

Settings come from, in increasing priority: built-in defaults, the section
named after the subcommand in ``--config`` (INI), ``--set key=value`` and
the dedicated flags. The resolved settings are printed as an INI section
that can be fed back through ``--config``.

Exit codes: 0 success, 1 verification failure, 2 usage error.
"""

import argparse
import ast
import configparser
import io
import logging
import os
import sys
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .capsnet import NetworkConfig, shape_trace
from .data import gen_toy_votes, load_mnist, load_smallnorb, preprocess, random_subset
from .gradcheck import network_gradcheck, parameter_class
from .memory import tune_allocator
from .similarity import solve_toy
from .train import CheckpointError, TrainConfig, TrainingAborted, evaluate, load_checkpoint, train

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class EvalConfig:
    checkpoint: str = ""
    dataset: str = "mnist"
    data_dir: str = ""
    test_subset: int = 0
    batch_size: int = 64
    seed: int = 0
    precision: int = 32


@dataclass
class ToyConfig:
    seed: int = 0
    lambda1: str = "100,0.01,1,1"
    lambda2: str = "0,0,1,1000"
    n: int = 100
    scale: float = 4.0
    normalize: bool = False
    iterations: int = 100
    out_dir: str = "runs/toy"


@dataclass
class GradcheckConfig:
    procedure: str = "both"
    seed: int = 0
    iterations: int = 3
    precision: int = 64
    tolerance: float = 1e-4
    max_coords: int = 6


@dataclass
class ShapesConfig:
    dataset: str = "smallnorb"
    procedure: str = "similarity"
    architecture: str = "full"
    batch_size: int = 1
    seed: int = 0
    iterations: int = 3


SCHEMAS = {
    "train": TrainConfig,
    "eval": EvalConfig,
    "toy": ToyConfig,
    "gradcheck": GradcheckConfig,
    "shapes": ShapesConfig,
}

# flags mapped onto config keys, per subcommand
FLAGS = {
    "seed": int, "dataset": str, "data_dir": str, "procedure": str, "iterations": int,
    "epochs": int, "batch_size": int, "precision": int, "out_dir": str, "checkpoint": str,
    "lambda1": str, "lambda2": str,
}


# ---------------------------------------------------------------------------
# settings
# ---------------------------------------------------------------------------

def _coerce(key, raw, default):
    if isinstance(raw, str):
        text = raw.strip()
    else:
        return raw
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(ast.literal_eval(text))
    except (ValueError, SyntaxError):
        raise UsageError(f"bad value for {key}: {raw!r}") from None
    return text


def resolve(command, config_path=None, overrides=(), flags=None):
    """Merge defaults, config file, ``key=value`` overrides and flags."""
    schema = SCHEMAS[command]
    defaults = {f.name: f.default for f in fields(schema)}
    values = dict(defaults)

    def put(key, raw, origin):
        if key not in defaults:
            raise UsageError(f"unknown key {key!r} for '{command}' ({origin}); "
                             f"valid keys: {', '.join(defaults)}")
        values[key] = _coerce(key, raw, defaults[key])

    if config_path:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(config_path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}") from None
        except configparser.Error as exc:
            raise UsageError(f"malformed config {config_path}: {exc}") from None
        for section in parser.sections():
            if section not in SCHEMAS:
                raise UsageError(f"unknown section [{section}] in {config_path}")
        if parser.has_section(command):
            for key, raw in parser.items(command):
                put(key, raw, config_path)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        put(key.strip(), raw, "--set")
    for key, val in (flags or {}).items():
        if val is not None:
            put(key, val, f"--{key.replace('_', '-')}")
    try:
        return schema(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _format(val):
    if isinstance(val, bool):
        return "true" if val else "false"
    if isinstance(val, float):
        return repr(val)
    return str(val)


def dump_config(command, cfg):
    """INI text for ``cfg``; reading it back with ``resolve`` gives ``cfg``."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser[command] = {f.name: _format(getattr(cfg, f.name)) for f in fields(cfg)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _require_data(cfg):
    if not cfg.data_dir:
        raise UsageError("a dataset directory is required (--data-dir)")
    if not os.path.isdir(cfg.data_dir):
        raise UsageError(f"dataset directory {cfg.data_dir!r} does not exist")


def cmd_train(cfg, out):
    _require_data(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "config.ini"), "w") as fh:
        fh.write(dump_config("train", cfg))
    try:
        result = train(cfg)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=out)
        return EXIT_FAIL
    print(f"best validation accuracy {result.best_val_acc:.4f} at epoch {result.best_epoch}", file=out)
    print(f"test accuracy of best checkpoint {result.test.accuracy:.4f} "
          f"({result.test.count} examples)", file=out)
    print(f"metrics: {result.metrics}", file=out)
    print(f"checkpoint: {result.checkpoint}", file=out)
    return EXIT_OK


def cmd_eval(cfg, out):
    _require_data(cfg)
    if not cfg.checkpoint:
        raise UsageError("--checkpoint is required")
    if cfg.dataset == "mnist":
        _, test = load_mnist(cfg.data_dir)
        raw = False
    elif cfg.dataset == "smallnorb":
        _, test = load_smallnorb(cfg.data_dir)
        raw = True
    else:
        raise UsageError(f"unknown dataset {cfg.dataset!r}")
    test = test.subset(random_subset(len(test), cfg.test_subset or None, cfg.seed + 1))
    with T.precision(cfg.precision):
        try:
            model = load_checkpoint(cfg.checkpoint)
        except (CheckpointError, T.ShapeError) as exc:
            raise UsageError(f"cannot load checkpoint: {exc}") from None
        transform = (lambda x: preprocess(x, "eval")) if raw else None
        result = evaluate(model, test, cfg.batch_size, transform)
    print(f"accuracy {result.accuracy:.4f} on {result.count} examples", file=out)
    print("confusion (rows: true class, columns: prediction)", file=out)
    for row in result.confusion:
        print("\t".join(str(v) for v in row), file=out)
    return EXIT_OK


def _grid(cfg):
    def floats(text, key):
        try:
            return [float(v) for v in str(text).split(",") if v.strip()]
        except ValueError:
            raise UsageError(f"{key} must be a comma-separated list of numbers") from None
    l1, l2 = floats(cfg.lambda1, "lambda1"), floats(cfg.lambda2, "lambda2")
    if len(l1) != len(l2) or not l1:
        raise UsageError("lambda1 and lambda2 need the same, nonzero number of entries")
    if any(v < 0 for v in l1 + l2) or any(a + b <= 0 for a, b in zip(l1, l2)):
        raise UsageError("lambdas must be nonnegative with a positive sum")
    return list(zip(l1, l2))


def cmd_toy(cfg, out):
    grid = _grid(cfg)
    cloud = gen_toy_votes(cfg.seed, n=cfg.n, scale=cfg.scale, normalize=cfg.normalize)
    results = solve_toy(cloud.votes, cloud.activations, grid, iterations=cfg.iterations)
    os.makedirs(cfg.out_dir, exist_ok=True)
    votes_path = os.path.join(cfg.out_dir, "toy_votes.tsv")
    summary_path = os.path.join(cfg.out_dir, "toy_summary.tsv")
    with open(votes_path, "w") as fh:
        cols = ["x", "y", "activation", "cluster"] + [f"c[{r.lambda1:g},{r.lambda2:g}]" for r in results]
        fh.write("\t".join(cols) + "\n")
        for i, ((x, y), a, k) in enumerate(zip(cloud.votes, cloud.activations, cloud.clusters)):
            cs = [repr(float(r.compatibility[i])) for r in results]
            fh.write("\t".join([repr(float(x)), repr(float(y)), repr(float(a)), str(k)] + cs) + "\n")
    n = len(cloud.votes)
    mean = cloud.votes.mean(0)
    a_norm = cloud.activations / cloud.activations.sum()
    header = ["lambda1", "lambda2", "mu_x", "mu_y", "iterations", "max_dev_uniform",
              "max_dev_activations", "mu_dev_mean", "mass_cluster0", "mass_cluster1"]
    rows = []
    for r in results:
        c = r.compatibility
        rows.append([r.lambda1, r.lambda2, r.pose[0], r.pose[1], r.iterations,
                     float(np.abs(c - 1.0 / n).max()), float(np.abs(c - a_norm).max()),
                     float(np.abs(r.pose - mean).max()),
                     float(c[cloud.clusters == 0].sum()), float(c[cloud.clusters == 1].sum())])
    with open(summary_path, "w") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(str(v) if isinstance(v, int) else repr(float(v)) for v in row) + "\n")
    print("\t".join(header), file=out)
    for row in rows:
        print("\t".join(str(v) if isinstance(v, int) else f"{v:.6g}" for v in row), file=out)
    print(f"votes: {votes_path}\nsummary: {summary_path}", file=out)
    return EXIT_OK


def cmd_gradcheck(cfg, out):
    if cfg.precision != 64:
        print("warning: finite differences at 32-bit are unreliable", file=out)
    procs = ("similarity", "connectionist") if cfg.procedure == "both" else (cfg.procedure,)
    for p in procs:
        if p not in ("similarity", "connectionist"):
            raise UsageError(f"unknown routing procedure {p!r}")
    ok = True
    with T.precision(cfg.precision):
        for p in procs:
            report = network_gradcheck(p, seed=cfg.seed, iterations=cfg.iterations,
                                       tolerance=cfg.tolerance, max_coords=cfg.max_coords)
            print(f"[{p}]", file=out)
            print(report.table(), file=out)
            classes = sorted({parameter_class(r.name) for r in report.rows})
            verdict = "PASS" if report.passed else "FAIL"
            print(f"{p}: {verdict}, max relative error {report.max_rel_error:.3e} "
                  f"(tolerance {cfg.tolerance:g}); classes: {', '.join(classes)}", file=out)
            ok &= report.passed
    return EXIT_OK if ok else EXIT_FAIL


def cmd_shapes(cfg, out):
    if cfg.dataset not in ("smallnorb", "mnist"):
        raise UsageError(f"unknown dataset {cfg.dataset!r}")
    if cfg.architecture not in ("full", "reduced"):
        raise UsageError(f"architecture must be 'full' or 'reduced', got {cfg.architecture!r}")
    classes = 5 if cfg.dataset == "smallnorb" else 10
    make = NetworkConfig if cfg.architecture == "full" else NetworkConfig.reduced
    try:
        net_cfg = make(procedure=cfg.procedure, num_classes=classes, iterations=cfg.iterations, seed=cfg.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    shapes, net = shape_trace(net_cfg, batch=cfg.batch_size, seed=cfg.seed)
    print(f"{'layer':<24}output shape", file=out)
    for name, shape in shapes:
        print(f"{name:<24}{'x'.join(str(d) for d in shape)}", file=out)
    print(f"parameters excluding routing: {net.count_parameters()}", file=out)
    print(f"parameters including routing: {net.count_parameters(include_routing=True)}", file=out)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "toy": cmd_toy, "gradcheck": cmd_gradcheck,
            "shapes": cmd_shapes}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="capsroute", description="Capsule routing experiments.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "train": "train a capsule network and keep the best checkpoint",
        "eval": "evaluate a checkpoint on a test set",
        "toy": "run the two-cluster routing toy over a lambda grid",
        "gradcheck": "finite-difference check of every parameter class",
        "shapes": "print the layer-by-layer output shapes",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name], description=helps[name])
        p.add_argument("--config", help="INI file; the section named after the command is used")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one setting (repeatable)")
        p.add_argument("--print-config", action="store_true", help="print resolved settings and exit")
        keys = {f.name for f in fields(SCHEMAS[name])}
        for key, typ in FLAGS.items():
            if key in keys:
                kw = {"type": typ, "default": None}
                if key == "procedure":
                    kw["choices"] = (["similarity", "connectionist"] + (["both"] if name == "gradcheck" else []))
                if key == "precision":
                    kw["choices"] = [32, 64]
                if key == "dataset":
                    kw["choices"] = ["mnist", "smallnorb"]
                p.add_argument(f"--{key.replace('_', '-')}", dest=key, **kw)
    return parser


def run(argv=None, out=None):
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    keys = {f.name for f in fields(SCHEMAS[args.command])}
    flags = {k: getattr(args, k) for k in FLAGS if k in keys}
    try:
        cfg = resolve(args.command, args.config, args.set, flags)
        print(dump_config(args.command, cfg), file=out, end="")
        if args.print_config:
            return EXIT_OK
        tune_allocator()
        return COMMANDS[args.command](cfg, out)
    except UsageError as exc:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(f"capsroute {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
