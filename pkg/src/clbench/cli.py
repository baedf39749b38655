"""Command line entry point: ``clbench {arch-info,run,sweep,report}``.

Exit codes: 0 ok, 1 runtime error (missing data etc.), 2 invalid config or
arguments, 3 training diverged.
"""
from __future__ import annotations

import argparse
import json
import sys

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3


def _arch_spec(args):
    from .nn import ArchSpec, preset

    if args.preset:
        over = {}
        if args.small_stem is not None:
            over["small_image_stem"] = args.small_stem
        for key, attr in (("penultimate", "penultimate"), ("in_features", "in_features"),
                          ("in_channels", "in_channels"), ("input_size", "input_size")):
            if getattr(args, attr) is not None:
                over[key] = getattr(args, attr)
        return preset(args.preset, args.classes, **over)
    if not (args.family and args.depth and args.width):
        raise SystemExit("arch-info: give --preset or all of --family/--depth/--width")
    return ArchSpec(args.family, args.depth, args.width, args.classes,
                    penultimate=args.penultimate or "gap",
                    small_image_stem=True if args.small_stem is None else args.small_stem,
                    in_channels=args.in_channels or 3, input_size=args.input_size or 32,
                    in_features=args.in_features or 784).validate()


def cmd_arch_info(args):
    from .nn import ArchError, analytic_param_count, build, conv_fc_depth, flops_estimate, layer_summary, param_count

    try:
        spec = _arch_spec(args)
    except ArchError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    net = build(spec, rng=0)
    flops = flops_estimate(net)
    info = {
        "spec": spec.to_dict(),
        "label": spec.label(),
        "param_count": param_count(net),
        "param_count_closed_form": analytic_param_count(spec),
        "macs": flops // 2,
        "flops": flops,
        "weight_layers": conv_fc_depth(net),
        "feature_dim": net.feature_dim,
        "layers": layer_summary(net),
    }
    json.dump(info, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return EXIT_OK


def _load(path):
    from .config import ConfigError
    from .runner import load_and_resolve

    try:
        return load_and_resolve(path), None
    except ConfigError as e:
        return None, f"{path}:{e.line}: {e.message}" if e.line else f"{path}: {e.message}"
    except OSError as e:
        return None, f"{path}: {e.strerror}"


def cmd_run(args):
    from .config import single_run_configs
    from .engine import TrainingDivergence
    from .runner import execute

    cfg, err = _load(args.config)
    if err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    if args.output_dir:
        cfg["output_dir"] = args.output_dir
    seeds = [args.seed] if args.seed is not None else cfg["order_seeds"]
    cfg["order_seeds"] = seeds
    try:
        for c in single_run_configs(cfg):
            execute(c, quiet=args.quiet)
    except TrainingDivergence as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


def cmd_sweep(args):
    from .engine import TrainingDivergence
    from .runner import sweep

    cfg, err = _load(args.config)
    if err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    if args.output_dir:
        cfg["output_dir"] = args.output_dir
    log = (lambda *_: None) if args.quiet else print
    try:
        path = sweep(cfg, jobs=args.jobs, resume=not args.no_resume, log=log)
    except TrainingDivergence as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    if not args.quiet:
        print(path.read_text(), end="")
    return EXIT_OK


def cmd_report(args):
    from .runner import report

    try:
        paths = report(args.results_dir, args.out)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    for p in paths.values():
        print(p)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="clbench", description="Class-incremental learning harness")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("arch-info", help="parameter count, FLOPs and layer summary of an architecture")
    a.add_argument("--preset", help="resnet18 | sta_net | pla_net | resnet:D,W[,pen] | mlp:D,W")
    a.add_argument("--family", choices=["resnet", "mlp"])
    a.add_argument("--depth", type=int)
    a.add_argument("--width", type=int)
    a.add_argument("--classes", type=int, default=100)
    a.add_argument("--penultimate", choices=["gap", "gap2x2", "avgpool4x4s3"])
    stem = a.add_mutually_exclusive_group()
    stem.add_argument("--small-stem", dest="small_stem", action="store_true", default=None,
                      help="3x3 stride-1 stem, no max-pool (default)")
    stem.add_argument("--large-stem", dest="small_stem", action="store_false",
                      help="7x7 stride-2 stem followed by max-pool")
    a.add_argument("--in", dest="in_features", type=int, help="MLP input features")
    a.add_argument("--in-channels", type=int)
    a.add_argument("--input-size", type=int)
    a.set_defaults(func=cmd_arch_info)

    r = sub.add_parser("run", help="train one config (every order seed in it, or --seed)")
    r.add_argument("config")
    r.add_argument("--seed", type=int, help="run only this order seed")
    r.add_argument("--output-dir")
    r.add_argument("-q", "--quiet", action="store_true")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="variants x order seeds, resumable, with summary.csv")
    s.add_argument("config")
    s.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    s.add_argument("--no-resume", action="store_true", help="rerun finished runs too")
    s.add_argument("--output-dir")
    s.add_argument("-q", "--quiet", action="store_true")
    s.set_defaults(func=cmd_sweep)

    t = sub.add_parser("report", help="tables, Dual-Arch deltas and per-step series from run dirs")
    t.add_argument("results_dir")
    t.add_argument("--out", help="output directory (default: results_dir)")
    t.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
