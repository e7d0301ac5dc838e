"""Command-line entry points around the experiment runner.

Every subcommand is driven by the JSON configuration (see
docs/formats.md); command-line flags override the seed, output
directory, and worker-thread count.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import bench
from .errors import RobustCSError
from .nets import save_net
from .operators import save_operator
from .signals import Dataset, save_dataset


def _load_config(args):
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            config = json.load(fh)
    else:
        config = {"schema_version": 1}
    if args.seed is not None:
        config["seed"] = args.seed
    if args.out is not None:
        config["out"] = args.out
    if args.threads is not None:
        config["threads"] = args.threads
    return config


def cmd_gen_data(args):
    cfg = bench.validate_config(_load_config(args))
    A, D, tik, test, train_pool = bench._build_scenario(cfg)
    out = Path(cfg["out"])
    save_operator(out / "operator.rxc", A, meta={"seed": cfg["operator_seed"]})
    for name, block in (("test", test), ("train", train_pool)):
        ds = Dataset(block, (A.matrix @ block.T).T, A)
        save_dataset(out / f"{name}_data.rxc", ds, meta={"seed": cfg["seed"]})
    print(f"wrote operator and datasets under {out}")


def cmd_train(args):
    cfg = bench.validate_config(_load_config(args))
    A, D, tik, test, train_pool = bench._build_scenario(cfg)
    out = Path(cfg["out"]) / "nets"
    trained = []
    for name in cfg["methods"]:
        if name in ("tv", "tikhonov"):
            continue
        net, history = bench._train_net(name, A, tik, train_pool, cfg)
        save_net(out / f"{name}.rxc", net, meta={"seed": cfg["seed"]})
        trained.append((name, history[-1] if history else float("nan")))
    for name, final_loss in trained:
        print(f"trained {name}: final epoch loss {final_loss:.6g}")
    if not trained:
        print("no learnable methods in config; nothing to train")


def cmd_curve(args):
    config = _load_config(args)
    result = bench.run_experiment(config)
    for key, path in result.paths.items():
        print(f"{key}: {path}")


def cmd_attack(args):
    config = _load_config(args)
    config["noise_kinds"] = ["adversarial"]
    config["save_perturbations"] = True
    result = bench.run_experiment(config)
    for key, path in result.paths.items():
        print(f"{key}: {path}")


def cmd_transfer(args):
    config = _load_config(args)
    row = bench.transfer_from_container(config, args.perturbation, args.method)
    print(json.dumps(row, indent=2))


def cmd_ablate_jitter(args):
    config = _load_config(args)
    jit, nojit, ratios, _ = bench.ablate_jitter(config)
    for eta, ratio in ratios.items():
        print(f"rel noise {eta:g}: no-jitter / jitter error ratio = {ratio:.3f}")


def cmd_classify_attack(args):
    config = _load_config(args)
    curve = bench.classification_experiment(config)
    for level, acc in curve:
        print(f"rel noise {level:g}: accuracy {acc * 100:.1f}%")


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="robustcs",
        description="Noise-robustness benchmarks for underdetermined "
                    "inverse-problem solvers",
    )
    parser.add_argument("--config", help="path to a JSON experiment config")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", help="override the output directory")
    parser.add_argument("--threads", type=int, help="worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="sample the operator and datasets").set_defaults(fn=cmd_gen_data)
    sub.add_parser("train", help="train the learnable methods").set_defaults(fn=cmd_train)
    sub.add_parser("curve", help="run the configured noise-to-error study").set_defaults(fn=cmd_curve)
    sub.add_parser("attack", help="adversarial curves only, storing perturbations").set_defaults(fn=cmd_attack)

    p_transfer = sub.add_parser("transfer", help="evaluate a stored perturbation under another method")
    p_transfer.add_argument("--perturbation", required=True, help="perturbation container path")
    p_transfer.add_argument("--method", required=True, help="target method name")
    p_transfer.set_defaults(fn=cmd_transfer)

    sub.add_parser("ablate-jitter", help="compare iterative nets trained with/without noise").set_defaults(fn=cmd_ablate_jitter)
    sub.add_parser("classify-attack", help="margin attacks on classification from measurements").set_defaults(fn=cmd_classify_attack)

    args = parser.parse_args(argv)
    try:
        args.fn(args)
    except RobustCSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
