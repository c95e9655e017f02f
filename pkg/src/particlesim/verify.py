"""Oracle suites: implicit-edge exactness, sigma recovery, gradient checks
against central finite differences, and neighbor-graph equivalence.

Each check returns its worst-case error so callers can assert their own
tolerances; the CLI `verify` subcommand prints one pass/fail line per suite.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tape, Tensor
from .nn import ModelConfig
from .attention import ImplicitEdgeModel, build_model
from .gnn import expand_edge_linear
from . import particles as P
from .bench import synthesize_pairs
from .training import mse_loss


def tie_linear_model(d: int, blocks: int, seed: int) -> ImplicitEdgeModel:
    cfg = ModelConfig(backbone="tie", d_in=d, d=d, heads=1, blocks=blocks,
                      linear_mode=True, normalized_attention=False, precision="f64")
    return ImplicitEdgeModel(cfg, seed=seed)


def implicit_edge_deviation(d: int, blocks: int, n: int, seed: int) -> float:
    """Max |e_ij - (r_i + s_j)| over all pairs and depths for one random
    linear tied configuration; the edge side is the explicit recursion."""
    model = tie_linear_model(d, blocks, seed)
    rng = np.random.default_rng(seed + 7)
    x = rng.standard_normal((n, d))
    e_count = min(max(2 * n, 4), n * (n - 1))
    recv, send = synthesize_pairs(n, e_count, seed)
    record: dict = {}
    model.forward(x, recv, send, record=record)
    block_weights = [(model.w_r[l][0].data, model.w_s[l][0].data, model.w_m[l][0].data)
                     for l in range(blocks)]
    v_traj = record["v"][:blocks]
    edges = expand_edge_linear(model.w_r0[0].data, model.w_s0[0].data,
                               block_weights, x, v_traj, recv, send)
    worst = 0.0
    for level in range(blocks + 1):
        implicit = record["r"][level][0][recv] + record["s"][level][0][send]
        worst = max(worst, float(np.abs(edges[level] - implicit).max()))
    return worst


def run_implicit_edge_suite(n_configs: int = 100, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_configs):
        d = int(rng.choice([4, 16]))
        blocks = int(rng.integers(1, 5))
        n = int(rng.integers(4, 33))
        worst = max(worst, implicit_edge_deviation(d, blocks, n, seed=1000 + i))
    return worst


def sigma_recovered(r: np.ndarray, s: np.ndarray) -> float:
    """Pair standard deviation recovered from per-token statistics."""
    d = r.shape[0]
    mu_r = r.mean()
    mu_s = s.mean()
    var = (r @ r) / d + (s @ s) / d + 2.0 * (r @ s) / d - (mu_r + mu_s) ** 2
    return float(np.sqrt(max(var, 0.0)))


def run_sigma_recovery_suite(n_samples: int = 1000, dims=(2, 8, 64), seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_samples):
        d = int(dims[i % len(dims)])
        r = rng.standard_normal(d)
        s = rng.standard_normal(d)
        direct = float(np.std(r + s))
        rec = sigma_recovered(r, s)
        worst = max(worst, abs(rec - direct) / max(direct, 1e-300))
    return worst


def gradient_check(model, x: np.ndarray, recv, send, material_ids,
                   target: np.ndarray, h: float = 1e-5) -> float:
    """Max relative deviation between tape gradients and central differences,
    over every scalar parameter."""
    def loss_value() -> float:
        return mse_loss(model.forward(x, recv, send, material_ids), target).item()

    with Tape() as tape:
        loss = mse_loss(model.forward(x, recv, send, material_ids), target)
        T.backward(loss, tape)
    worst = 0.0
    for name, p in model.params().items():
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_value()
            flat[i] = orig - h
            down = loss_value()
            flat[i] = orig
            fd = (up - down) / (2.0 * h)
            err = abs(gflat[i] - fd) / max(1.0, abs(gflat[i]), abs(fd))
            worst = max(worst, err)
    return worst


def run_gradient_suite(blocks: int = 2, heads: int = 2, d: int = 16, n: int = 8,
                       n_abstract: int = 2, seed: int = 0) -> float:
    cfg = ModelConfig(backbone="tie", d_in=10, d=d, heads=heads, blocks=blocks,
                      mlp_hidden=2 * d, n_abstract=n_abstract,
                      normalized_attention=True, precision="f64")
    model = ImplicitEdgeModel(cfg, seed=seed)
    rng = np.random.default_rng(seed + 3)
    x = rng.standard_normal((n, cfg.d_in))
    recv, send = synthesize_pairs(n, 3 * n, seed)
    material_ids = rng.integers(0, n_abstract, size=n)
    material_ids[:n_abstract] = np.arange(n_abstract)  # every class non-empty
    target = rng.standard_normal((n, 3))
    return gradient_check(model, x, recv, send, material_ids, target)


def run_neighbor_suite(n_configs: int = 50, max_n: int = 1024, seed: int = 0) -> bool:
    rng = np.random.default_rng(seed)
    for _ in range(n_configs):
        n = int(rng.integers(2, max_n + 1))
        p = rng.uniform(0.0, 1.0, size=(n, 3))
        radius = float(rng.uniform(0.02, np.sqrt(3.0)))
        state = P.SystemState(p, np.zeros_like(p), np.zeros((n, 1)),
                              np.zeros(n, dtype=np.int64))
        fast = P.build_neighbor_graph(state, radius)
        slow = P.brute_force_neighbor_graph(state, radius)
        if not (np.array_equal(fast.receivers, slow.receivers)
                and np.array_equal(fast.senders, slow.senders)):
            return False
    return True


def run_all(fast: bool = False) -> list[tuple[str, bool, str]]:
    """Run every suite; returns (name, passed, detail) rows."""
    results = []
    dev = run_implicit_edge_suite(n_configs=20 if fast else 100)
    results.append(("implicit-edge identity", dev <= 1e-10, f"max deviation {dev:.3e}"))
    err = run_sigma_recovery_suite(n_samples=300 if fast else 1000)
    results.append(("sigma recovery", err <= 1e-9, f"max relative error {err:.3e}"))
    gerr = run_gradient_suite(blocks=1 if fast else 2, d=8 if fast else 16,
                              n=6 if fast else 8)
    results.append(("gradient check", gerr <= 1e-4, f"max relative error {gerr:.3e}"))
    ok = run_neighbor_suite(n_configs=10 if fast else 50, max_n=256 if fast else 1024)
    results.append(("neighbor-graph equivalence", ok, "pair sets equal" if ok else "mismatch"))
    return results
