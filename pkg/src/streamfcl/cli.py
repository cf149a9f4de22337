"""Command-line entry point: ``streamfcl {run,compare,probe,inspect}``."""
from __future__ import annotations

import argparse
import json
import os
import platform
import shutil
import sys
import tempfile

import numpy as np

from . import __version__
from .config import (PRESETS, ConfigError, RunConfig, derive_seed, dump_config, from_dict, output_root, parse_config,
                     parse_override)
from .data import CifarFormatError
from .eval import write_csv
from .fed import ClientError, Federation, build_federation, final_probes, load_dataset, run, save_state

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_INPUT = 3


class InputError(RuntimeError):
    pass


def resolve_output(path: str) -> str:
    root = output_root()
    return path if not root or os.path.isabs(path) else os.path.join(root, path)


def check_inputs(cfg: RunConfig) -> None:
    if cfg.dataset.source == "cifar10":
        for p in list(cfg.dataset.path) + list(cfg.dataset.test_path):
            if not os.path.isfile(p):
                raise InputError(f"dataset file not found: {p}")


def manifest(cfg: RunConfig, fed: Federation) -> dict:
    return {
        "config": cfg.to_dict(),
        "seeds": {
            "master": cfg.seed,
            "data": derive_seed(cfg.seed, "data"),
            "stream": derive_seed(cfg.seed, "stream"),
            "global_init": derive_seed(cfg.seed, "global", "init"),
            "probe": derive_seed(cfg.seed, "probe"),
            "clients": [
                {"augment": derive_seed(cfg.seed, "client", c.id, "augment"),
                 "buffer": derive_seed(cfg.seed, "client", c.id, "buffer")}
                for c in fed.clients
            ],
        },
        "derived": {
            "segments_per_round": fed.segments_per_round,
            "num_train": len(fed.train),
            "num_test": len(fed.test),
            "input_shape": list(fed.encoder_cfg.input_shape),
        },
        "build": {
            "package": "streamfcl",
            "version": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
        },
    }


def execute(cfg: RunConfig, resume: str | None = None, quiet: bool = True) -> tuple[str, Federation]:
    """Run one configuration and publish its outputs atomically; returns the output directory."""
    check_inputs(cfg)
    out_dir = resolve_output(cfg.output_dir)
    parent = os.path.dirname(os.path.abspath(out_dir))
    os.makedirs(parent, exist_ok=True)
    staging = tempfile.mkdtemp(prefix=".partial-", dir=parent)
    try:
        try:
            datasets = load_dataset(cfg)
        except (OSError, CifarFormatError) as exc:
            raise InputError(str(exc)) from exc

        def on_round(fed, summary):
            if cfg.checkpoint_every and fed.global_model.round % cfg.checkpoint_every == 0:
                os.makedirs(os.path.join(staging, "checkpoints"), exist_ok=True)
                save_state(fed, os.path.join(staging, "checkpoints", f"round_{fed.global_model.round:04d}.json"))
            if not quiet:
                print(f"round {summary['round']}: loss {summary['mean_loss']:.4f} "
                      f"eviction {summary['mean_eviction_ratio']:.3f}", file=sys.stderr)

        fed = run(cfg, datasets=datasets, on_round=on_round, resume=resume)
        fed.archive.write(staging)
        save_state(fed, os.path.join(staging, "checkpoint.json"))
        dump_config(cfg, os.path.join(staging, "config.yaml"))
        with open(os.path.join(staging, "manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest(cfg, fed), fh, indent=2, sort_keys=True)
            fh.write("\n")
        if os.path.exists(out_dir):
            shutil.rmtree(out_dir)
        os.replace(staging, out_dir)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    return out_dir, fed


def _config_from_args(args, path=None) -> RunConfig:
    overrides = [parse_override(s) for s in args.set or []]
    shortcuts = {
        "policy": ("policy", "name"), "seed": ("seed",), "rounds": ("training", "rounds"),
        "stc": ("stream", "stc"), "lazy": ("policy", "lazy_interval"), "output": ("output_dir",),
        "jobs": ("jobs",),
    }
    for attr, keys in shortcuts.items():
        value = getattr(args, attr, None)
        if value is not None:
            node: dict = {}
            cur = node
            for k in keys[:-1]:
                cur = cur.setdefault(k, {})
            cur[keys[-1]] = value
            overrides.append(node)
    return parse_config(path, overrides, args.preset)


def cmd_run(args) -> int:
    cfg = _config_from_args(args, args.config)
    out_dir, fed = execute(cfg, resume=args.resume, quiet=args.quiet)
    for row in fed.archive.probes:
        print(f"label_fraction={row['label_fraction']:g} accuracy={row['accuracy']:.4f}")
    print(out_dir)
    return EXIT_OK


def _parse_named(item: str) -> tuple[str, str | None]:
    if "=" in item:
        name, path = item.split("=", 1)
        return name, path
    if os.path.exists(item):
        return os.path.splitext(os.path.basename(item))[0], item
    return item, None


def cmd_compare(args) -> int:
    """Run every (config, seed) pair and summarize probe accuracy at one label fraction."""
    entries = [_parse_named(c) for c in args.configs]
    base_out = resolve_output(args.output)
    per_seed = []
    for name, path in entries:
        for seed in args.seeds:
            cfg = _config_from_args(args, path)
            tree = cfg.to_dict()
            if path is None:
                tree["policy"]["name"] = name
            tree["seed"] = seed
            tree["output_dir"] = os.path.join(base_out, f"{name}_seed{seed}")
            tree["probe"]["label_fractions"] = [args.fraction]
            cfg = from_dict(tree)
            _, fed = execute(cfg, quiet=args.quiet)
            acc = fed.archive.probes[0]["accuracy"]
            per_seed.append({"name": name, "seed": seed, "label_fraction": args.fraction, "accuracy": acc})
            print(f"{name} seed={seed} accuracy={acc:.4f}", file=sys.stderr)
    summary = []
    for name, _ in entries:
        accs = [r["accuracy"] for r in per_seed if r["name"] == name]
        summary.append({"name": name, "runs": len(accs), "median_accuracy": float(np.median(accs))})
    os.makedirs(base_out, exist_ok=True)
    write_csv(os.path.join(base_out, "compare_runs.csv"), ("name", "seed", "label_fraction", "accuracy"), per_seed)
    write_csv(os.path.join(base_out, "compare_summary.csv"), ("name", "runs", "median_accuracy"), summary)
    ordering = sorted(summary, key=lambda r: (-r["median_accuracy"], r["name"]))
    verdict = " > ".join(f"{r['name']}({r['median_accuracy']:.4f})" for r in ordering)
    with open(os.path.join(base_out, "verdict.txt"), "w", encoding="utf-8") as fh:
        fh.write(verdict + "\n")
    for r in summary:
        print(f"{r['name']}\t{r['runs']}\t{r['median_accuracy']:.4f}")
    print(f"ordering: {verdict}")
    return EXIT_OK


def _load_run(run_dir: str) -> tuple[RunConfig, dict]:
    path = os.path.join(run_dir, "manifest.json")
    if not os.path.isfile(path):
        raise InputError(f"no manifest.json in {run_dir}")
    with open(path, encoding="utf-8") as fh:
        man = json.load(fh)
    return from_dict(man["config"]), man


def cmd_probe(args) -> int:
    from .fed import restore_state

    cfg, _ = _load_run(args.run_dir)
    ckpt = args.checkpoint or os.path.join(args.run_dir, "checkpoint.json")
    if not os.path.isfile(ckpt):
        raise InputError(f"checkpoint not found: {ckpt}")
    fed = build_federation(cfg)
    restore_state(fed, ckpt)
    if args.fractions:
        fed.config.probe.label_fractions = list(args.fractions)
    rows = final_probes(fed)
    out = args.output or os.path.join(args.run_dir, "probe.csv")
    write_csv(out, ("label_fraction", "accuracy"), rows)
    for row in rows:
        print(f"label_fraction={row['label_fraction']:g} accuracy={row['accuracy']:.4f}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    target = args.path
    if os.path.isdir(target):
        target = os.path.join(target, "manifest.json")
    if not os.path.isfile(target):
        raise InputError(f"manifest not found: {target}")
    with open(target, encoding="utf-8") as fh:
        print(json.dumps(json.load(fh), indent=2, sort_keys=True))
    return EXIT_OK


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=sorted(PRESETS), default=None, help="base settings below the config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--policy", default=None, help="buffer policy: is, rr, fifo or kcenter")
    p.add_argument("--seed", type=int, default=None, help="master seed")
    p.add_argument("--rounds", type=int, default=None, help="communication rounds")
    p.add_argument("--stc", type=int, default=None, help="samples per single-class block in each stream")
    p.add_argument("--lazy", type=int, default=None, help="lazy scoring interval T")
    p.add_argument("--jobs", type=int, default=None, help="concurrent clients")
    p.add_argument("--quiet", action="store_true", help="no per-round progress on stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="streamfcl", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one configuration")
    p.add_argument("config", nargs="?", default=None, help="JSON or YAML config file")
    p.add_argument("--output", default=None, help="output directory")
    p.add_argument("--resume", default=None, help="resume from a round checkpoint")
    _add_config_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="run several configs over several seeds")
    p.add_argument("configs", nargs="+", help="config files, NAME=FILE pairs, or bare policy names")
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--fraction", type=float, default=0.1, help="probe label fraction")
    p.add_argument("--output", default="runs/compare")
    _add_config_args(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("probe", help="re-evaluate a run's checkpoint with the linear probe")
    p.add_argument("run_dir")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--fractions", type=float, nargs="+", default=None)
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("inspect", help="print a run manifest")
    p.add_argument("path", help="run directory or manifest.json")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ClientError, ArithmeticError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
