"""Command-line entry point: dataset generation, training, rollout,
evaluation, verification suites, and benchmarks.

One JSON config file with dotted-key overrides; every run writes a
resolved-config snapshot next to its outputs.  Exit codes: 0 success,
2 bad arguments, 3 verification failure, 4 training divergence, 5 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .nn import ModelConfig, BACKBONES
from .worlds import (WorldSpec, RolloutDataset, generate_dataset, write_dataset,
                     read_dataset, MetadataError, TruncationError, ChecksumError)
from .attention import build_model
from .training import (TrainConfig, fit, one_step_eval, constant_velocity_eval,
                       rollout, dataset_norm_stats, DivergenceError)
from . import tensor as T
from . import bench as B
from . import verify as V

EXIT_OK = 0
EXIT_BAD_ARGS = 2
EXIT_VERIFY_FAIL = 3
EXIT_DIVERGED = 4
EXIT_IO = 5

DEFAULT_CONFIG = {
    "dataset": {
        "kind": "box_splash",
        "counts": [64],
        "n_frames": 50,
        "train_rollouts": 200,
        "valid_rollouts": 20,
        "seed": 0,
    },
    "model": {
        "backbone": "tie",
        "d": 64,
        "heads": 4,
        "blocks": 2,
        "mlp_hidden": 128,
        "n_abstract": 0,
        "normalized_attention": True,
        "radius": 0.1,
        "history": 1,
        "precision": "f32",
    },
    "train": {
        "lr": 0.0008,
        "lr_decay": 0.8,
        "patience": 3,
        "batch_size": 4,
        "epochs": 5,
        "steps_per_epoch": 100,
        "seed": 0,
    },
    "bench": {
        "n": 512,
        "e_values": [2000, 4000, 8000, 16000],
        "d": 128,
        "blocks": 4,
        "heads": 4,
        "trials": 5,
    },
}

_DATASET_EXTRA = {"counts", "train_rollouts", "valid_rollouts", "seed", "n_frames"}
_WORLD_FIELDS = {f.name for f in dataclasses.fields(WorldSpec)}
_MODEL_FIELDS = {f.name for f in dataclasses.fields(ModelConfig)}
_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}


class BadConfig(ValueError):
    pass


def _deep_merge(base: dict, extra: dict) -> dict:
    out = {k: dict(v) if isinstance(v, dict) else v for k, v in base.items()}
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def _validate(config: dict):
    for key in config:
        if key not in DEFAULT_CONFIG:
            raise BadConfig(f"unknown config section {key!r}")
    for key in config.get("dataset", {}):
        if key not in _WORLD_FIELDS | _DATASET_EXTRA:
            raise BadConfig(f"unknown dataset key {key!r}")
    for key in config.get("model", {}):
        if key not in _MODEL_FIELDS:
            raise BadConfig(f"unknown model key {key!r}")
    for key in config.get("train", {}):
        if key not in _TRAIN_FIELDS:
            raise BadConfig(f"unknown train key {key!r}")
    for key in config.get("bench", {}):
        if key not in DEFAULT_CONFIG["bench"]:
            raise BadConfig(f"unknown bench key {key!r}")


def _parse_override(text: str):
    if "=" not in text:
        raise BadConfig(f"override {text!r} must look like section.key=value")
    key, raw = text.split("=", 1)
    parts = key.split(".")
    if len(parts) != 2:
        raise BadConfig(f"override key {key!r} must be section.key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return parts[0], parts[1], value


def load_config(args) -> dict:
    config = DEFAULT_CONFIG
    if args.config:
        try:
            with open(args.config) as f:
                user = json.load(f)
        except FileNotFoundError as e:
            raise BadConfig(f"config file not found: {args.config}") from e
        except json.JSONDecodeError as e:
            raise BadConfig(f"malformed config {args.config}: {e}") from e
        config = _deep_merge(config, user)
    for text in args.set or []:
        section, key, value = _parse_override(text)
        config = _deep_merge(config, {section: {key: value}})
    # dedicated flags override last
    flag_map = {
        "seed": ("train", "seed"),
        "precision": ("model", "precision"),
        "backbone": ("model", "backbone"),
        "abstract_particles": ("model", "n_abstract"),
        "radius": ("model", "radius"),
        "history": ("model", "history"),
    }
    for attr, (section, key) in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            config = _deep_merge(config, {section: {key: value}})
    if getattr(args, "normalized_attention", None) is not None:
        config = _deep_merge(config, {"model": {
            "normalized_attention": args.normalized_attention == "on"}})
    _validate(config)
    return config


def snapshot_config(config: dict, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(config, f, indent=2)


def _world_spec(dscfg: dict) -> WorldSpec:
    fields = {k: v for k, v in dscfg.items() if k in _WORLD_FIELDS}
    if "counts" in fields:
        fields["counts"] = tuple(fields["counts"])
    for key in ("gravity", "box_lo", "box_hi"):
        if key in fields:
            fields[key] = tuple(fields[key])
    return WorldSpec(**fields)


def _model_config(mcfg: dict, ds: RolloutDataset) -> ModelConfig:
    cfg = dict(mcfg)
    history = int(cfg.get("history", 1))
    cfg["d_in"] = 6 * history + ds.d_a
    model_cfg = ModelConfig(**cfg)
    if model_cfg.n_abstract not in (0, ds.spec.k):
        raise BadConfig(f"n_abstract must be 0 or the material count {ds.spec.k}")
    if model_cfg.n_abstract and model_cfg.backbone == "gnn":
        raise BadConfig("abstract particles require an attention backbone")
    return model_cfg


def cmd_gen_data(args) -> int:
    config = load_config(args)
    dscfg = config["dataset"]
    spec = _world_spec(dscfg)
    ds = generate_dataset(spec, int(dscfg["train_rollouts"]), int(dscfg["valid_rollouts"]),
                          int(dscfg["n_frames"]), seed=int(dscfg.get("seed", 0)))
    snapshot_config(config, args.out)
    write_dataset(ds, os.path.join(args.out, "dataset"))
    print(f"wrote {len(ds.train)} train / {len(ds.valid)} valid rollouts to {args.out}/dataset")
    return EXIT_OK


def _load_dataset(path) -> RolloutDataset:
    return read_dataset(path)


def cmd_train(args) -> int:
    config = load_config(args)
    ds = _load_dataset(args.data)
    model_cfg = _model_config(config["model"], ds)
    model = build_model(model_cfg, seed=int(config["train"].get("seed", 0)))
    train_cfg = TrainConfig(**config["train"])
    snapshot_config(config, args.out)
    history, _stats = fit(model, ds, train_cfg, out_dir=args.out)
    if history:
        last = history[-1]
        print(f"trained {len(history)} epochs; final train {last['train_loss']:.6f} "
              f"valid {last['valid_loss']:.6f}")
    return EXIT_OK


def _restore_model(model_dir, ds: RolloutDataset):
    with open(os.path.join(model_dir, "config.json")) as f:
        config = json.load(f)
    model_cfg = _model_config(config["model"], ds)
    model = build_model(model_cfg, seed=int(config["train"].get("seed", 0)))
    params = T.load_checkpoint(os.path.join(model_dir, "final.manifest.json"),
                               os.path.join(model_dir, "final.blob.bin"))
    model.load_params(params)
    return model, config


def cmd_eval(args) -> int:
    ds = _load_dataset(args.data)
    model, config = _restore_model(args.model_dir, ds)
    stats = dataset_norm_stats(ds)
    snapshot_config(config, args.out)
    report = one_step_eval(model, ds, stats, max_samples=args.samples, seed=0)
    baseline = constant_velocity_eval(ds, history=model.cfg.history,
                                      max_samples=args.samples, seed=0)
    payload = {"one_step": report.to_json(),
               "constant_velocity_baseline": baseline.to_json()}
    with open(os.path.join(args.out, "report.json"), "w") as f:
        json.dump(payload, f, indent=2)
    print(f"one-step M3SE {report.m3se_mean:.6e} +/- {report.m3se_std:.6e} "
          f"(baseline {baseline.m3se_mean:.6e})")
    return EXIT_OK


def cmd_rollout(args) -> int:
    ds = _load_dataset(args.data)
    model, config = _restore_model(args.model_dir, ds)
    stats = dataset_norm_stats(ds)
    snapshot_config(config, args.out)
    n_steps = args.steps or (ds.n_frames - model.cfg.history)
    reports = []
    for i in range(min(args.count, len(ds.valid))):
        out_bin = os.path.join(args.out, f"rollout_{i:03d}.bin")
        _, report = rollout(model, ds, stats, i, n_steps, out_path=out_bin)
        reports.append(report.to_json())
    means = [r["m3se_mean"] for r in reports]
    with open(os.path.join(args.out, "report.json"), "w") as f:
        json.dump({"rollouts": reports,
                   "m3se_mean": float(np.mean(means)),
                   "m3se_std": float(np.std(means))}, f, indent=2)
    print(f"rollout M3SE {np.mean(means):.6e} over {len(reports)} trajectories")
    return EXIT_OK


def cmd_bench(args) -> int:
    config = load_config(args)
    bcfg = config["bench"]
    snapshot_config(config, args.out)
    profiles = []
    for backbone in ("tie", "vanilla", "gnn"):
        cfg = ModelConfig(backbone=backbone, d_in=9, d=int(bcfg["d"]),
                          heads=int(bcfg["heads"]), blocks=int(bcfg["blocks"]),
                          normalized_attention=True, precision="f32")
        for e in bcfg["e_values"]:
            prof = B.time_iteration(cfg, int(bcfg["n"]), int(e), trials=int(bcfg["trials"]))
            profiles.append(prof)
            print(f"{backbone:8s} N={prof.n} E={prof.e} macs={prof.measured_macs} "
                  f"wall={prof.wall_ms_mean:.2f}ms")
            if prof.analytic_macs != prof.measured_macs:
                print(f"  WARNING: analytic {prof.analytic_macs} != measured {prof.measured_macs}")
    B.write_bench_csv(profiles, os.path.join(args.out, "bench.csv"))
    return EXIT_OK


def cmd_verify(args) -> int:
    results = V.run_all(fast=args.fast)
    ok = True
    for name, passed, detail in results:
        print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
        ok = ok and passed
    return EXIT_OK if ok else EXIT_VERIFY_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="particlesim",
                                     description="learned particle simulation engine")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="config override")
        if out:
            p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--precision", choices=["f32", "f64"])
        p.add_argument("--backbone", choices=list(BACKBONES))
        p.add_argument("--normalized-attention", dest="normalized_attention",
                       choices=["on", "off"])
        p.add_argument("--abstract-particles", dest="abstract_particles", type=int)
        p.add_argument("--radius", type=float)
        p.add_argument("--history", type=int)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="one-step evaluation of a trained model")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model-dir", required=True)
    p.add_argument("--samples", type=int, default=200)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rollout", help="recursive rollout evaluation")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model-dir", required=True)
    p.add_argument("--steps", type=int, default=0)
    p.add_argument("--count", type=int, default=5)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("bench", help="cost model and timing benchmark")
    common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("verify", help="run the oracle verification suites")
    common(p, out=False)
    p.add_argument("--fast", action="store_true", help="reduced suite sizes")
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_BAD_ARGS if e.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except DivergenceError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (MetadataError, TruncationError, ChecksumError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except (BadConfig, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BAD_ARGS


if __name__ == "__main__":
    sys.exit(main())
