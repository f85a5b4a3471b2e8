"""Command-line entry point: ``bnet <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime error. Diagnostics go to
stderr; data goes to files under ``--out`` or to stdout.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import count_flops, enhancement_heatmap, grad_check
from .checkpoint import load_checkpoint
from .data import render_object_image, synth_dataset
from .model import build_mini_resnet, build_resnet_shape_graph, parse_norm_choice
from .train import (TrainConfig, curves_csv, evaluate, load_dataset, load_trained_network,
                    train)

NORM_CHOICES = ["bn", "bnet1", "bnet3", "bnet5", "bnet7", "bnet3d2", "gn", "gnet3", "bnconv"]
GRADCHECK_TOL = 1e-6


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON training config")
    p.add_argument("--data", help="CIFAR-10 binary directory")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--arch", choices=["mini", "resnet18", "resnet50"])
    p.add_argument("--norm", choices=NORM_CHOICES)
    p.add_argument("--positions", help="plug-in slots, e.g. c or abc")
    p.add_argument("--layer", help="norm layer name for heatmaps")
    p.add_argument("--image", help=".npy image (c, h, w) for heatmaps")
    p.add_argument("--input", type=int, help="input resolution")
    p.add_argument("--dtype", choices=["f32", "f64"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--emit-curves", action="store_true", help="write curves.csv next to metrics")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bnet", description="BNET training and analysis tools")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    common = _common()
    for name, help_ in [("train", "train a mini network"),
                        ("eval", "evaluate a trained checkpoint"),
                        ("count", "parameter and FLOP counts"),
                        ("gradcheck", "finite-difference gradient check"),
                        ("heatmap", "enhancement heatmap of a BNET layer"),
                        ("synth-data", "write the synthetic dataset")]:
        sub.add_parser(name, parents=[common], help=help_)
    return parser


def _config(args) -> TrainConfig:
    if args.config:
        if not Path(args.config).is_file():
            raise UsageError(f"config file not found: {args.config}")
        cfg = TrainConfig.from_json(args.config)
    else:
        cfg = TrainConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.norm:
        changes["norm"] = args.norm
    if args.positions:
        changes["positions"] = args.positions
    if args.dtype:
        changes["dtype"] = args.dtype
    if args.epochs is not None:
        changes["epochs"] = args.epochs
    if args.data:
        changes.update(dataset="cifar10", data_path=args.data)
    if args.arch and args.arch != "mini":
        raise UsageError("only --arch mini can be trained")
    return cfg.replace(**changes) if changes else cfg


def _run_dir(args, cfg_name="config.json") -> tuple[TrainConfig, Path]:
    if not args.out:
        raise UsageError("--out <dir> of a training run is required")
    out = Path(args.out)
    if args.config:
        cfg = TrainConfig.from_json(args.config)
    elif (out / cfg_name).is_file():
        cfg = TrainConfig.from_json(out / cfg_name)
    else:
        raise UsageError(f"no config.json in {out}; pass --config")
    if not (out / "checkpoint.bin").is_file():
        raise UsageError(f"no checkpoint.bin in {out}")
    return cfg, out


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out or "out")
    result = train(cfg, out_dir=out)
    if args.emit_curves:
        (out / "curves.csv").write_text(curves_csv(result.rows))
    last = result.rows[-1]
    print(f"epoch {last['epoch']} {last['split']} loss {last['loss']!r} top1 {last['top1']!r}")
    return 0


def cmd_eval(args) -> int:
    cfg, out = _run_dir(args)
    data = load_dataset(cfg)
    ckpt = load_checkpoint(out / "checkpoint.bin", np.dtype("f4" if cfg.dtype == "f32" else "f8"))
    net = load_trained_network(cfg, ckpt, data.num_classes, data.x_train.shape[2])
    loss, top1 = evaluate(net, data.x_test, data.y_test, cfg.batch_size)
    print("loss,top1")
    print(f"{loss!r},{top1!r}")
    return 0


def cmd_count(args) -> int:
    arch = args.arch or "resnet50"
    kind, extra = parse_norm_choice(args.norm or "bn")
    positions = args.positions or "c"
    if arch == "mini":
        graph = build_mini_resnet(norm_kind=kind, positions=positions, input_hw=args.input or 32,
                                  extra_conv=extra)
    else:
        graph = build_resnet_shape_graph(int(arch[6:]), kind, positions, input_hw=args.input or 224,
                                         extra_conv=extra)
    rep = count_flops(graph)
    rep.arch = f"{arch}+{args.norm or 'bn'}"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "cost.csv").write_text(rep.to_csv())
        (out / "cost.txt").write_text(rep.table() + "\n")
    print(rep.summary())
    print(f"params {rep.params_m:.1f} M")
    print(f"GFLOPs {rep.gflops:.2f}")
    return 0


def cmd_gradcheck(args) -> int:
    if (args.arch or "mini") != "mini":
        raise UsageError("gradcheck supports --arch mini only")
    if (args.dtype or "f64") != "f64":
        raise UsageError("gradcheck needs --dtype f64")
    from .model import Network
    kind, extra = parse_norm_choice(args.norm or "bn")
    hw = args.input or 8
    seed = args.seed if args.seed is not None else 0
    graph = build_mini_resnet(norm_kind=kind, positions=args.positions or "c", input_hw=hw,
                              extra_conv=extra)
    net = Network(graph, "f64", seed, bnet_init="uniform")
    rng = np.random.default_rng([seed, 5])
    x = rng.standard_normal((4, 3, hw, hw))
    labels = rng.integers(0, 10, 4)
    report = grad_check(net, x, labels, max_entries=8, seed=seed)
    if args.verbose:
        print(report)
    print(f"max_rel_err {report.max_rel_err:.3e}")
    if report.max_rel_err > GRADCHECK_TOL:
        print(f"gradient check failed: {report.max_rel_err:.3e} > {GRADCHECK_TOL}", file=sys.stderr)
        return 2
    return 0


def cmd_heatmap(args) -> int:
    cfg, out = _run_dir(args)
    data = load_dataset(cfg)
    ckpt = load_checkpoint(out / "checkpoint.bin")
    net = load_trained_network(cfg, ckpt, data.num_classes, data.x_train.shape[2])
    layer = args.layer or next((n.name for n in net.graph.norm_nodes() if n.attrs["kind"].enhanced), None)
    if layer is None:
        raise UsageError("network has no BNET/GNET layer")
    if args.image:
        image = np.load(args.image)
    else:
        seed = args.seed if args.seed is not None else 0
        image, _ = render_object_image(cfg.synth_spec(), cfg.seed, seed % cfg.synth_classes, seed,
                                       data.meta["mean"], data.meta["std"])
    hm = enhancement_heatmap(net, image.astype(net.dtype), layer)
    (out / "heatmap.csv").write_text(hm.to_csv())
    (out / "heatmap.pgm").write_text(hm.to_pgm())
    if hm.skipped:
        print(f"skipped zero-variance channels: {hm.skipped}", file=sys.stderr)
    sys.stdout.write(hm.to_csv())
    return 0


def cmd_synth_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out or "synth")
    out.mkdir(parents=True, exist_ok=True)
    ds = synth_dataset(cfg.synth_spec(), cfg.seed)
    np.savez(out / "synthetic.npz", x_train=ds.x_train, y_train=ds.y_train, x_test=ds.x_test,
             y_test=ds.y_test, boxes_train=ds.boxes_train, boxes_test=ds.boxes_test)
    np.save(out / "image.npy", ds.x_test[0])
    print(f"wrote {len(ds.x_train)} train / {len(ds.x_test)} test images to {out}")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "count": cmd_count, "gradcheck": cmd_gradcheck,
            "heatmap": cmd_heatmap, "synth-data": cmd_synth_data}


def run(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a subcommand is required\n" + parser.format_usage().strip())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    except Exception as e:  # noqa: BLE001
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
