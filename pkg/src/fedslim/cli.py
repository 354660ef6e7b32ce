"""Command-line entry points.

Subcommands:
  run       run one federated experiment from a config file plus overrides
  compare   merge several finished runs into a plot-ready comparison table
  gen-data  render a synthetic dataset to the on-disk image/annotation format
  eval      score a saved model checkpoint against an on-disk dataset

Exit codes: 0 success, 2 configuration error, 3 runtime failure. Every flag
of ``run`` mirrors a config key with a ``--`` prefix and overrides the file.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .checkpoint import load_model
from .config import ConfigError, ExperimentConfig, build_config, parse_value
from .data import SceneSpec, load_dataset, make_dataset, save_dataset
from .detection import LossConfig
from .evaluation import EvalContext
from .model import DetectorConfig
from .reporting import compare
from .runner import resolve_out_dir, run_experiment

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

GEN_SPEC_KEYS = {
    "count": int,
    "image_size": int,
    "min_objects": int,
    "max_objects": int,
    "min_object_size": float,
    "max_object_size": float,
    "noise": float,
    "grid_size": int,
    "seed": int,
}


def _add_run_parser(sub) -> None:
    p = sub.add_parser("run", help="run one federated experiment")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument(
        "--parallel",
        default="true",
        help="run client updates in parallel threads (true/false)",
    )
    for f in dataclasses.fields(ExperimentConfig):
        p.add_argument(f"--{f.name}", default=None, metavar="VALUE")


def _run(args: argparse.Namespace) -> int:
    overrides = {}
    for f in dataclasses.fields(ExperimentConfig):
        raw = getattr(args, f.name)
        if raw is None:
            continue
        try:
            overrides[f.name] = parse_value(f.name, raw)
        except ValueError as e:
            raise ConfigError(f"--{f.name}: {e}") from None
    config = build_config(args.config, overrides)
    parallel = args.parallel.strip().lower() in ("true", "1", "yes", "on")
    result = run_experiment(config, parallel=parallel)
    final = result.reports[-1]
    print(
        f"{result.method}: {len(result.reports)} rounds, "
        f"final map50={final.map50:.2f}, "
        f"bytes saved={final.bytes_saved_cumulative}, "
        f"artifacts in {result.out_dir}"
    )
    return EXIT_OK


def _compare(args: argparse.Namespace) -> int:
    out_dir = resolve_out_dir(args.out) if args.out else None
    header, rows = compare(args.run_dirs, out_dir)
    print(",".join(header))
    for row in rows:
        print(",".join(str(v) for v in row))
    return EXIT_OK


def _read_gen_spec(path) -> dict:
    values: dict[str, object] = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in GEN_SPEC_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown dataset spec key {key!r}")
        try:
            values[key] = GEN_SPEC_KEYS[key](value.strip())
        except ValueError as e:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {e}") from None
    return values


def _gen_data(args: argparse.Namespace) -> int:
    values = _read_gen_spec(args.spec) if args.spec else {}
    count = int(values.pop("count", 100))
    size = int(values.pop("image_size", 64))
    spec = SceneSpec(
        image_size=(size, size),
        min_objects=int(values.get("min_objects", 1)),
        max_objects=int(values.get("max_objects", 3)),
        min_size=float(values.get("min_object_size", 0.15)),
        max_size=float(values.get("max_object_size", 0.40)),
        noise=float(values.get("noise", 0.05)),
        grid_size=int(values.get("grid_size", 4)),
        seed=int(values.get("seed", 0)),
    )
    try:
        spec.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    dataset = make_dataset(spec, count)
    out = resolve_out_dir(args.out)
    save_dataset(out, dataset)
    print(f"wrote {count} images to {out}")
    return EXIT_OK


def _eval(args: argparse.Namespace) -> int:
    widths = tuple(int(w) for w in args.channel_widths.split(","))
    config = DetectorConfig(
        grid_size=args.grid_size,
        boxes_per_cell=args.boxes_per_cell,
        num_classes=args.num_classes,
        channel_widths=widths,
        input_size=(args.image_size, args.image_size),
    )
    try:
        config.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    params = load_model(args.model, config)
    dataset = load_dataset(args.data)
    from .data import encode_grid_target

    targets = [
        encode_grid_target(anns, config.grid_size, dataset.image_size, config.num_classes)
        for anns in dataset.annotations
    ]
    ctx = EvalContext(
        images=dataset.images,
        targets=targets,
        ground_truths=dataset.ground_truths(),
        loss_config=LossConfig(),
        conf_threshold=args.conf_threshold,
        nms_threshold=args.nms_threshold,
    )
    map50, eval_loss = ctx.evaluate(params)
    print(json.dumps({"map50": map50, "eval_loss": eval_loss}, indent=1))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedslim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    _add_run_parser(sub)

    p = sub.add_parser("compare", help="compare finished runs")
    p.add_argument("run_dirs", nargs="+", help="run output directories")
    p.add_argument("--out", default=None, help="directory for comparison.csv")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--spec", default=None, help="key = value dataset spec file")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("eval", help="evaluate a model checkpoint")
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--grid_size", type=int, default=4)
    p.add_argument("--boxes_per_cell", type=int, default=2)
    p.add_argument("--num_classes", type=int, default=3)
    p.add_argument("--channel_widths", default="16,32,64,64")
    p.add_argument("--image_size", type=int, default=64)
    p.add_argument("--conf_threshold", type=float, default=0.25)
    p.add_argument("--nms_threshold", type=float, default=0.45)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {"run": _run, "compare": _compare, "gen-data": _gen_data, "eval": _eval}
    try:
        return handlers[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # runtime failures keep partial artifacts on disk
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
