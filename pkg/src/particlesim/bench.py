"""Analytic multiply-accumulate cost model, instrumented counters, and
wall-clock timing.

Accounting convention: a MAC is one multiply inside a linear-algebra
primitive.  matmul (m,k)x(k,n) costs m*k*n; elementwise mul/div/scale/square
and row/column scaling cost one MAC per output element; layer_norm costs two
per element (inverse-std scaling plus gain); additions, gathers, reductions,
softmaxes, and sqrt cost zero.  The tape tallies the same convention during
a real forward pass, so the analytic formulas must match the instrumented
counts exactly.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .tensor import Tape, Tensor
from .nn import ModelConfig
from .attention import build_model


@dataclass
class CostProfile:
    backbone: str
    n: int
    e: int
    n_abstract: int
    d: int
    blocks: int
    heads: int
    analytic_macs: int
    measured_macs: int
    phase_macs: dict = field(default_factory=dict)
    wall_ms_mean: float = 0.0
    wall_ms_std: float = 0.0


def count_macs(cfg: ModelConfig, n: int, e: int) -> dict:
    """Closed-form forward MAC counts per phase for one model iteration.

    n is the token count (particles plus abstract rows), e the pair count
    after any abstract extension.
    """
    d, dh, H, L, hid, din, out = (cfg.d, cfg.d_head, cfg.heads, cfg.blocks,
                                  cfg.mlp_hidden, cfg.d_in, cfg.out_dim)
    phases: dict[str, int] = {}
    if cfg.backbone == "gnn":
        phases["encode_node"] = n * (din * hid + hid * d)
        phases["encode_edge"] = e * (2 * din * hid + hid * d)
        phases["edge_update"] = L * (e * (3 * d * hid + hid * d) + 2 * e * d)
        phases["node_update"] = L * (n * (2 * d * hid + hid * d) + 2 * n * d)
        phases["decode"] = n * (d * hid + hid * out)
    elif cfg.backbone == "vanilla":
        phases["encode"] = n * (din * d + d * d)
        phases["attention"] = L * (3 * n * d * d + 2 * e * d + e * H)
        phases["post"] = L * (n * d * d + 2 * n * d * hid + 2 * n * d)
        phases["decode"] = n * (d * d + d * out)
    else:  # tie
        phases["encode"] = n * (din * d + d * d)
        phases["token_update"] = 2 * n * d * d + L * (4 * n * d * d + 2 * n * d * dh)
        if cfg.normalized_attention:
            per_block = (n * d * d + 4 * n * d + 4 * n * H + 4 * e * d + 4 * e * H)
        else:
            per_block = (n * d * d + n * d + 2 * e * d + e * H)
        phases["attention"] = L * per_block
        phases["post"] = L * (n * d * d + 2 * n * d * hid + 2 * n * d)
        phases["decode"] = n * (d * d + d * out)
    phases["total"] = sum(phases.values())
    return phases


def synthesize_pairs(n: int, e: int, seed: int = 0):
    """Exactly e distinct directed pairs (i, j), i != j, sorted; decouples the
    interaction count from any radius."""
    if e > n * (n - 1):
        raise ValueError(f"cannot draw {e} distinct pairs from {n} particles")
    rng = np.random.default_rng(seed)
    codes = rng.choice(n * (n - 1), size=e, replace=False)
    recv = codes // (n - 1)
    rem = codes % (n - 1)
    send = np.where(rem >= recv, rem + 1, rem)
    order = np.lexsort((send, recv))
    return recv[order].astype(np.int64), send[order].astype(np.int64)


def measure_macs(cfg: ModelConfig, n: int, e: int, seed: int = 0) -> dict:
    """Instrumented forward-pass MAC tally per tape scope."""
    model = build_model(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    x = rng.standard_normal((n, cfg.d_in)).astype(T.DTYPES[cfg.precision])
    recv, send = synthesize_pairs(n, e, seed)
    with Tape() as tape:
        model.forward(x, recv, send)
    phases = tape.macs_by_scope()
    phases.pop("", None)
    phases["total"] = sum(phases.values())
    return phases


def time_iteration(cfg: ModelConfig, n: int, e: int, trials: int = 5,
                   warmup: int = 2, seed: int = 0) -> CostProfile:
    """Median-of-trials wall time of one forward+backward iteration."""
    if trials < 5:
        raise ValueError("need at least 5 trials")
    model = build_model(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    x = rng.standard_normal((n, cfg.d_in)).astype(T.DTYPES[cfg.precision])
    recv, send = synthesize_pairs(n, e, seed)
    times = []
    measured = 0
    for i in range(warmup + trials):
        t0 = time.perf_counter()
        with Tape() as tape:
            pred = model.forward(x, recv, send)
            loss = T.scale(T.reduce_sum(T.square(pred)), 1.0 / n)
            T.backward(loss, tape)
        dt = (time.perf_counter() - t0) * 1000.0
        if i >= warmup:
            times.append(dt)
            measured = tape.total_macs()
        for p in model.params().values():
            p.grad = None
    analytic = count_macs(cfg, n, e)
    phases = measure_macs(cfg, n, e, seed)
    return CostProfile(
        backbone=cfg.backbone, n=n, e=e, n_abstract=cfg.n_abstract, d=cfg.d,
        blocks=cfg.blocks, heads=cfg.heads,
        analytic_macs=analytic["total"], measured_macs=phases["total"],
        phase_macs=phases,
        wall_ms_mean=float(np.mean(times)), wall_ms_std=float(np.std(times)),
    )


def write_bench_csv(profiles: list[CostProfile], path):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["backbone", "n", "e", "macs", "wall_ms_mean", "wall_ms_std"])
        for p in profiles:
            writer.writerow([p.backbone, p.n, p.e, p.measured_macs,
                             f"{p.wall_ms_mean:.3f}", f"{p.wall_ms_std:.3f}"])
