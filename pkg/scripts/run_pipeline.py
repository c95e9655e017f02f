#!/usr/bin/env python
"""End-to-end desk-scale experiment: generate data, train, evaluate, roll out.

Usage: python scripts/run_pipeline.py [OUT_DIR] [--backbone tie|vanilla|gnn]
"""

import argparse
import sys

from particlesim.cli import main as cli_main


def run(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out", nargs="?", default="runs/pipeline")
    parser.add_argument("--backbone", default="tie", choices=["tie", "vanilla", "gnn"])
    parser.add_argument("--epochs", type=int, default=3)
    parser.add_argument("--train-rollouts", type=int, default=40)
    args = parser.parse_args(argv)

    data_dir = f"{args.out}/data"
    model_dir = f"{args.out}/{args.backbone}"
    steps = [
        ["gen-data", "--out", data_dir,
         "--set", f"dataset.train_rollouts={args.train_rollouts}",
         "--set", "dataset.valid_rollouts=8"],
        ["train", "--out", model_dir, "--data", f"{data_dir}/dataset",
         "--backbone", args.backbone,
         "--set", f"train.epochs={args.epochs}"],
        ["eval", "--out", f"{model_dir}/eval", "--data", f"{data_dir}/dataset",
         "--model-dir", model_dir],
        ["rollout", "--out", f"{model_dir}/rollout", "--data", f"{data_dir}/dataset",
         "--model-dir", model_dir, "--count", "2"],
    ]
    for step in steps:
        print(f"$ particlesim {' '.join(step)}")
        code = cli_main(step)
        if code != 0:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(run())
