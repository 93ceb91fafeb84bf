"""Command-line front end: train, eval, gradcheck, inspect, compare.

Exit codes: 0 success, 2 input error (bad flags, missing or corrupt files),
3 numerical failure (non-finite loss, failed gradient check).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import data as D
from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .errors import GCGReluError, NumericalError
from .gcnet import GCNet, build_smallnet, build_toy, param_count
from .grelu import GReluParams
from .gradcheck import check_layer, check_network, network_kink_distance
from .layers import BatchNorm, Conv2d, GReLU, Linear
from .trainer import TrainConfig, evaluate, train

logger = logging.getLogger("gcgrelu")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
MODELS = ("smallnet-gc-grelu", "smallnet-conv-relu", "toy")
TOY_WIDTHS = (3, 4)
TOY_CLASSES = 4


class InputError(Exception):
    """Bad user input detected by the CLI itself."""


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _milestones(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated epochs, got {text!r}") from None


def _add_data_args(p):
    p.add_argument("--dataset", choices=("mnist", "synth"), default=None,
                   help="default: mnist for smallnet models, synth for toy")
    p.add_argument("--data-dir", default=None, help="MNIST IDX directory (env GRELU_DATA_DIR)")
    p.add_argument("--train-limit", type=int, default=None,
                   help="use only the first N training samples (quick mode)")
    p.add_argument("--test-limit", type=int, default=None, help="use only the first N test samples")
    p.add_argument("--synth-classes", type=int, default=TOY_CLASSES, help="synthetic class count (1-10)")
    p.add_argument("--synth-per-class", type=int, default=250, help="synthetic training samples per class")


def _add_train_args(p):
    d = TrainConfig()
    p.add_argument("--out-dir", default="runs/latest", help="where metrics, checkpoint and figures go")
    p.add_argument("--seed", type=int, default=0, help="initialization and shuffling seed")
    p.add_argument("--deterministic", action="store_true",
                   help="zero the timing column so equal seeds give identical CSVs")
    p.add_argument("--strict-paper", action="store_true", help="classifier without bias")
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--lr", type=float, default=d.lr, help="initial learning rate")
    p.add_argument("--lr-milestones", type=_milestones, default=d.lr_milestones,
                   help="comma-separated epochs where the rate is multiplied by --lr-gamma")
    p.add_argument("--lr-gamma", type=float, default=d.lr_gamma)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--freeze-epochs", type=int, default=d.freeze_epochs,
                   help="epochs with GReLU slopes and endpoints held fixed")
    p.add_argument("--weight-decay", type=float, default=d.weight_decay, help="L2 decay on non-GReLU parameters")
    p.add_argument("--momentum", type=float, default=d.momentum, help="SGD momentum (default: plain SGD)")
    p.add_argument("--eval-every", type=int, default=d.eval_every, help="epochs between evaluations and checkpoints")
    p.add_argument("--no-plot", action="store_true", help="skip the PNG figures")
    _add_data_args(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gcgrelu", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="INFO", help="DEBUG, INFO, WARNING or ERROR")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--log-level", default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train one model")
    p.add_argument("--model", choices=MODELS, default="smallnet-gc-grelu")
    _add_train_args(p)

    p = sub.add_parser("compare", parents=[common], help="train both SmallNet variants with matched settings")
    _add_train_args(p)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    _add_data_args(p)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the analytic gradients")
    p.add_argument("--target", choices=("network", "grelu", "conv", "batchnorm", "linear"),
                   default="network")
    p.add_argument("--tolerance", type=float, default=None,
                   help="default 1e-5 for the network, 1e-6 for single layers")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", default=None, help="also write the report as CSV")

    p = sub.add_parser("inspect", parents=[common], help="print a checkpoint's manifest and GReLU parameters")
    p.add_argument("checkpoint")
    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _dataset_kind(args, model: str) -> str:
    return args.dataset or ("synth" if model == "toy" else "mnist")


def load_data(args, model: str) -> tuple[D.Dataset, D.Dataset]:
    kind = _dataset_kind(args, model)
    if kind == "synth":
        seed = getattr(args, "seed", 0)
        train_set = D.synth_blobs(args.synth_classes, args.synth_per_class, seed=seed)
        test_set = D.synth_blobs(args.synth_classes, max(args.synth_per_class // 4, 1),
                                 seed=seed + 10_000, split="test")
    else:
        data_dir = args.data_dir or os.environ.get("GRELU_DATA_DIR")
        if not data_dir:
            raise InputError("no MNIST directory given (--data-dir or GRELU_DATA_DIR)\n" + D.FETCH_HINT)
        train_set, test_set = D.load_mnist(data_dir)
    if args.train_limit is not None:
        train_set = train_set.subset(args.train_limit)
    if args.test_limit is not None:
        test_set = test_set.subset(args.test_limit)
    return train_set, test_set


def build_model(model: str, seed: int, strict: bool, classes: int = 10,
                in_size: int = 28) -> GCNet:
    bias = not strict
    if model == "smallnet-gc-grelu":
        return build_smallnet("grelu", "gc", bias=bias, seed=seed)
    if model == "smallnet-conv-relu":
        return build_smallnet("relu", "conventional", bias=bias, seed=seed)
    return build_toy(TOY_WIDTHS, classes=classes, bias=bias, seed=seed)


def train_config(args) -> TrainConfig:
    return TrainConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                       freeze_epochs=args.freeze_epochs, weight_decay=args.weight_decay,
                       seed=args.seed, eval_every=args.eval_every, momentum=args.momentum,
                       lr_milestones=tuple(args.lr_milestones), lr_gamma=args.lr_gamma,
                       deterministic=args.deterministic)


def format_grelu(net: GCNet) -> str:
    lines = []
    for name, layer in net.named_layers():
        if isinstance(layer, GReLU):
            for c, p in enumerate(layer.sets):
                tag = f"{name}[{c}]" if layer.per_channel else name
                lines.append(f"{tag}: n={p.n} ({p.size} scalars)")
                lines.append("  endpoints " + " ".join(f"{v:+.6f}" for v in p.endpoints))
                lines.append("  slopes    " + " ".join(f"{v:+.6f}" for v in p.slopes))
    return "\n".join(lines)


def format_trajectory(records) -> str:
    if not records or not records[0].grelu:
        return ""
    lines = ["GReLU trajectory (endpoints | slopes per recorded epoch):"]
    for s, first in enumerate(records[0].grelu):
        lines.append(f"  {first['layer']}")
        for rec in records:
            g = rec.grelu[s]
            lines.append(f"    epoch {rec.epoch:>3}: "
                         + " ".join(f"{v:+.4f}" for v in g["endpoints"]) + " | "
                         + " ".join(f"{v:+.4f}" for v in g["slopes"]))
    return "\n".join(lines)


def run_training(args, model: str, out_dir: str, train_set, test_set) -> tuple[GCNet, list, str]:
    classes = int(max(train_set.labels.max(initial=0), test_set.labels.max(initial=0))) + 1
    net = build_model(model, args.seed, args.strict_paper, classes=max(classes, 2))
    if model != "toy" and classes > net.classes:
        raise InputError(f"{model} has {net.classes} outputs but the data has {classes} classes")
    config = train_config(args)
    os.makedirs(out_dir, exist_ok=True)
    logger.info("%s: %d train / %d test samples, %d parameters", model, len(train_set),
                len(test_set), param_count(net).total)
    net, records = train(net, train_set, test_set, config, out_dir=out_dir)
    save_checkpoint(net, os.path.join(out_dir, "checkpoint.bin"),
                    {"epoch": config.epochs, "seed": config.seed, "model": model})
    report = param_count(net)
    final = records[-1] if records else None
    lines = [f"model            {model}",
             f"seed             {args.seed}",
             f"epochs           {config.epochs}",
             f"train samples    {len(train_set)}",
             f"final test error {final.test_error_rate:.4%}" if final else "final test error n/a",
             f"final train err  {final.train_error_rate:.4%}" if final else "",
             f"parameters       {report.total}",
             "", report.format(), ""]
    lines.append(format_trajectory(records))
    summary = "\n".join(lines).rstrip() + "\n"
    with open(os.path.join(out_dir, "summary.txt"), "w") as f:
        f.write(summary)
    plotting = None if args.no_plot else _plotting()
    if plotting is not None:
        plotting.plot_error_curves(os.path.join(out_dir, "metrics.csv"),
                                   os.path.join(out_dir, "error_curves.png"), model)
        plotting.plot_grelu_trajectories(os.path.join(out_dir, "metrics.jsonl"),
                                         os.path.join(out_dir, "grelu_trajectory.png"))
    return net, records, summary


def _plotting():
    """The plotting module, or None (with a warning) when matplotlib is missing."""
    try:
        import matplotlib  # noqa: F401
    except ImportError:
        logger.warning("matplotlib not installed; skipping figures (pip install 'artifact[plot]')")
        return None
    from . import plotting
    return plotting


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    train_set, test_set = load_data(args, args.model)
    _, _, summary = run_training(args, args.model, args.out_dir, train_set, test_set)
    print(summary, end="")
    return EXIT_OK


def cmd_compare(args) -> int:
    model = "smallnet-gc-grelu"
    train_set, test_set = load_data(args, model)
    results = {}
    for key, name in (("gc", "smallnet-gc-grelu"), ("conv", "smallnet-conv-relu")):
        net, records, summary = run_training(args, name, os.path.join(args.out_dir, key),
                                             train_set, test_set)
        results[key] = (param_count(net).total, records)
        print(summary)
    gc_count, gc_recs = results["gc"]
    conv_count, conv_recs = results["conv"]
    path = os.path.join(args.out_dir, "compare.csv")
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "gc_err", "conv_err"])
        for a, b in zip(gc_recs, conv_recs):
            w.writerow([a.epoch, f"{a.test_error_rate:.6f}", f"{b.test_error_rate:.6f}"])
    ratio = abs(gc_count - conv_count) / max(gc_count, conv_count)
    verdict = {"gc_params": gc_count, "conv_params": conv_count,
               "param_gap": round(ratio, 6),
               "gc_final_err": gc_recs[-1].test_error_rate if gc_recs else None,
               "conv_final_err": conv_recs[-1].test_error_rate if conv_recs else None}
    with open(os.path.join(args.out_dir, "compare.json"), "w") as f:
        json.dump(verdict, f, indent=2, sort_keys=True)
    print(f"parameters: gc {gc_count}, conv {conv_count} ({ratio:.1%} apart)")
    if gc_recs and conv_recs:
        print(f"final test error: gc {gc_recs[-1].test_error_rate:.4%}, "
              f"conv {conv_recs[-1].test_error_rate:.4%}")
    plotting = None if args.no_plot else _plotting()
    if plotting is not None:
        plotting.plot_compare(path, os.path.join(args.out_dir, "compare.png"))
    return EXIT_OK


def cmd_eval(args) -> int:
    net, meta = load_checkpoint(args.checkpoint)
    model = meta.get("model", net.arch.get("name", "toy"))
    if args.dataset is None and net.arch.get("name") == "toy":
        args.dataset = "synth"
    _, test_set = load_data(args, model)
    err, loss = evaluate(net, test_set)
    print(f"{args.checkpoint}: test error {err:.4%}, mean loss {loss:.6f} on {len(test_set)} samples")
    return EXIT_OK


def _layer_target(target: str, rng):
    if target == "grelu":
        return GReLU(GReluParams.default()), lambda r: r.uniform(-1.5, 1.5, (3, 4))
    if target == "conv":
        return Conv2d(2, 3, rng=rng), lambda r: r.standard_normal((1, 2, 5, 5))
    if target == "batchnorm":
        layer = BatchNorm(3)
        layer.params["gamma"][:] = rng.uniform(0.5, 2.0, 3)
        layer.params["beta"][:] = rng.standard_normal(3)
        return layer, lambda r: r.standard_normal((4, 3, 2, 2))
    return Linear(4, 3, rng=rng), lambda r: r.standard_normal((3, 4))


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    if args.target == "network":
        tol = args.tolerance or 1e-5
        net = build_toy(TOY_WIDTHS, TOY_CLASSES, seed=args.seed)
        for _ in range(1000):
            x = rng.standard_normal((4, 1, 8, 8))
            if network_kink_distance(net, x) > 1e-3:
                break
        else:
            raise InputError("could not sample an input away from all kinks")
        report = check_network(net, x, rng.integers(0, TOY_CLASSES, 4), tol, include_input=True)
    else:
        tol = args.tolerance or 1e-6
        layer, sampler = _layer_target(args.target, rng)
        report = check_layer(layer, sampler, tol, seed=args.seed)
    print(report.format())
    if args.csv:
        report.write_csv(args.csv)
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_inspect(args) -> int:
    manifest, arrays = read_checkpoint(args.checkpoint)
    net, meta = load_checkpoint(args.checkpoint)
    print(f"checkpoint {args.checkpoint}")
    print(f"architecture {json.dumps(net.arch, sort_keys=True)}")
    if meta:
        print(f"meta {json.dumps(meta, sort_keys=True)}")
    print("manifest:")
    for e in manifest["entries"]:
        flag = "" if e["trainable"] else " (buffer)"
        print(f"  {e['layer']:<24}{e['type']:<12}{e['name']:<14}{str(tuple(e['shape'])):<16}{flag}")
    print()
    print(param_count(net).format())
    grelu = format_grelu(net)
    if grelu:
        print()
        print(grelu)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "compare": cmd_compare, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "inspect": cmd_inspect}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, GCGReluError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
