"""``cfode <command> [--config PATH] [--key value ...]``.

Every key of :class:`~cfode.pipeline.RunConfig` can be set in a JSON config
file and overridden by a flag of the same name (``--n_mc`` and ``--n-mc``
are equivalent).  List-valued keys take comma-separated values.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import typing

from . import pipeline
from .simulators import DATASET_KINDS

LIST_KEYS = {"seeds": int, "fractions": float, "fdr_fractions": float, "inputs": str}


def _scalar_type(name, default):
    hints = typing.get_type_hints(pipeline.RunConfig)
    hint = hints[name]
    for t in (int, float, str):
        if hint is t or t in typing.get_args(hint):
            return t
    return type(default) if default is not None else str


def _csv(kind):
    return lambda s: [kind(x) for x in s.split(",") if x.strip()]


def build_parser():
    parser = argparse.ArgumentParser(prog="cfode", description="Counterfactual latent neural SDE experiments.")
    parser.add_argument("command", choices=sorted(pipeline.COMMANDS))
    parser.add_argument("--config", help="JSON file with RunConfig keys")
    parser.add_argument("-v", "--verbose", action="store_true")
    defaults = pipeline.RunConfig()
    for f in dataclasses.fields(pipeline.RunConfig):
        if f.name == "command":
            continue
        flags = [f"--{f.name}"] + ([f"--{f.name.replace('_', '-')}"] if "_" in f.name else [])
        kw = {"dest": f.name, "default": None}
        if f.name in LIST_KEYS:
            kw["type"] = _csv(LIST_KEYS[f.name])
        elif f.name == "dataset":
            kw["choices"] = DATASET_KINDS
        elif f.name == "ablation":
            kw["choices"] = sorted(pipeline.VARIANTS)
        else:
            kw["type"] = _scalar_type(f.name, getattr(defaults, f.name))
        parser.add_argument(*flags, **kw)
    return parser


def resolve(args):
    values = {}
    if args.config:
        with open(args.config) as fh:
            values.update(json.load(fh))
        unknown = set(values) - {f.name for f in dataclasses.fields(pipeline.RunConfig)}
        if unknown:
            raise ValueError(f"{args.config}: unknown config keys {sorted(unknown)}")
    for f in dataclasses.fields(pipeline.RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    values["command"] = args.command
    return pipeline.RunConfig(**values)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve(args)
    except (ValueError, TypeError, OSError) as err:
        parser.error(str(err))
    try:
        pipeline.run(config)
    except (pipeline.PipelineError, ValueError, OSError, FloatingPointError) as err:
        print(f"cfode {args.command}: error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
