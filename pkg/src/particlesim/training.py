"""Loss, material-wise metric, Adam with plateau learning-rate decay,
training loop, and recursive rollout evaluation."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor, Tape
from . import particles as P
from .worlds import RolloutDataset, write_rollout_file


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean over particles of the squared L2 velocity error (differentiable)."""
    tgt = Tensor(np.asarray(target, dtype=pred.data.dtype))
    if pred.data.shape != tgt.data.shape:
        raise T.ShapeError(f"mse shapes differ: {pred.data.shape} vs {tgt.data.shape}")
    n = pred.data.shape[0]
    return T.scale(T.reduce_sum(T.square(T.sub(pred, tgt))), 1.0 / n)


def mse(pred: np.ndarray, target: np.ndarray) -> float:
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float((diff * diff).sum(axis=-1).mean())


def m3se(pred: np.ndarray, target: np.ndarray, material_ids: np.ndarray) -> float:
    """Mean over materials of the per-material mean squared velocity error.

    Equals plain MSE when there is a single material.
    """
    material_ids = np.asarray(material_ids)
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    per_particle = (diff * diff).sum(axis=-1)
    ks = np.unique(material_ids)
    total = 0.0
    for k in ks:
        sel = material_ids == k
        if not sel.any():
            raise T.ContractError(f"material class {k} is empty")
        total += per_particle[sel].mean()
    return float(total / len(ks))


class Adam:
    """Standard Adam update; beta=(0.9, 0.999), eps=1e-8."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data, dtype=np.float64) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data, dtype=np.float64) for k, t in params.items()}
        self.t = 0

    def step(self):
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            m_hat = self.m[k] / b1t
            v_hat = self.v[k] / b2t
            p.data = (p.data.astype(np.float64)
                      - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


@dataclass
class TrainConfig:
    lr: float = 0.0008
    lr_decay: float = 0.8
    patience: int = 3
    batch_size: int = 4
    epochs: int = 5
    steps_per_epoch: int = 100
    valid_samples: int = 64
    seed: int = 0
    improvement_tol: float = 1e-6

    def __post_init__(self):
        if self.lr <= 0 or not (0 < self.lr_decay < 1) or self.patience <= 0:
            raise ValueError("invalid training hyperparameters")
        if self.batch_size <= 0 or self.epochs < 0:
            raise ValueError("batch size must be positive, epochs non-negative")


class PlateauScheduler:
    """Multiply lr by the decay factor after `patience` epochs without
    validation-loss improvement (strict, with a small tolerance)."""

    def __init__(self, lr: float, decay: float, patience: int, tol: float = 1e-6):
        self.lr = lr
        self.decay = decay
        self.patience = patience
        self.tol = tol
        self.best = np.inf
        self.bad_epochs = 0

    def update(self, valid_loss: float) -> float:
        if valid_loss < self.best - self.tol:
            self.best = valid_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.decay
                self.bad_epochs = 0
        return self.lr


def dataset_norm_stats(ds: RolloutDataset) -> P.NormStats:
    frames = np.concatenate([r.reshape(-1, 6) for r in ds.train], axis=0).astype(np.float64)
    return P.compute_norm_stats(frames, ds.attributes)


def _transitions(ds: RolloutDataset, split: str, history: int):
    rollouts = getattr(ds, split)
    out = []
    for ri, frames in enumerate(rollouts):
        for t in range(history - 1, frames.shape[0] - 1):
            out.append((ri, t))
    return out


def make_sample(ds: RolloutDataset, frames: np.ndarray, t: int, history: int,
                stats: P.NormStats, radius: float):
    """Model input, neighbor pairs, and normalized target for one transition."""
    ph = [frames[t - i, :, 0:3].astype(np.float64) for i in range(history)]
    qh = [frames[t - i, :, 3:6].astype(np.float64) for i in range(history)]
    x = P.assemble_inputs(ph, qh, ds.attributes, stats)
    state = P.SystemState(ph[0], qh[0], ds.attributes, ds.material_ids, t)
    graph = P.build_neighbor_graph(state, radius)
    target = P.normalize_velocity(frames[t + 1, :, 3:6].astype(np.float64), stats)
    return x, graph, target


def evaluate_loss(model, ds: RolloutDataset, stats, trans, cfg: TrainConfig) -> float:
    total = 0.0
    for ri, t in trans:
        x, graph, target = make_sample(ds, ds.valid[ri], t, model.cfg.history, stats,
                                       model.cfg.radius)
        pred = model.forward(x, graph.receivers, graph.senders, ds.material_ids)
        total += mse(pred.data, target)
    return total / len(trans)


def fit(model, ds: RolloutDataset, cfg: TrainConfig, out_dir=None):
    """Train a model; returns (history rows, NormStats).

    Deterministic given (seed, config, dataset).  On a non-finite loss the
    last good parameters are checkpointed (if out_dir is set) and a
    DivergenceError is raised.
    """
    stats = dataset_norm_stats(ds)
    rng = np.random.default_rng(cfg.seed)
    train_trans = _transitions(ds, "train", model.cfg.history)
    valid_trans = _transitions(ds, "valid", model.cfg.history)
    vrng = np.random.default_rng(cfg.seed + 1)
    if len(valid_trans) > cfg.valid_samples:
        pick = vrng.choice(len(valid_trans), size=cfg.valid_samples, replace=False)
        valid_trans = [valid_trans[i] for i in sorted(pick)]
    sched = PlateauScheduler(cfg.lr, cfg.lr_decay, cfg.patience, cfg.improvement_tol)
    optim = Adam(model.params(), cfg.lr)
    history = []
    last_good = {k: t.data.copy() for k, t in model.params().items()}
    for epoch in range(cfg.epochs):
        epoch_loss = 0.0
        for _ in range(cfg.steps_per_epoch):
            idxs = rng.integers(0, len(train_trans), size=cfg.batch_size)
            optim.zero_grad()
            with Tape() as tape:
                losses = []
                for bi in idxs:
                    ri, t = train_trans[bi]
                    x, graph, target = make_sample(ds, ds.train[ri], t, model.cfg.history,
                                                   stats, model.cfg.radius)
                    pred = model.forward(x, graph.receivers, graph.senders, ds.material_ids)
                    losses.append(mse_loss(pred, target))
                loss = losses[0]
                for extra in losses[1:]:
                    loss = T.add(loss, extra)
                loss = T.scale(loss, 1.0 / len(losses))
                if not np.isfinite(loss.item()):
                    if out_dir is not None:
                        _save_model(dict_to_tensors(last_good), out_dir, "last_good")
                    raise DivergenceError(f"non-finite loss at epoch {epoch}")
                T.backward(loss, tape)
            epoch_loss += loss.item()
            optim.step()
            optim.lr = sched.lr
        last_good = {k: t.data.copy() for k, t in model.params().items()}
        valid_loss = evaluate_loss(model, ds, stats, valid_trans, cfg) if valid_trans else np.nan
        lr_next = sched.update(valid_loss)
        optim.lr = lr_next
        history.append({
            "epoch": epoch,
            "train_loss": epoch_loss / max(cfg.steps_per_epoch, 1),
            "valid_loss": valid_loss,
            "lr": lr_next,
        })
    if out_dir is not None:
        write_history(history, os.path.join(out_dir, "history.csv"))
        _save_model(model.params(), out_dir, "final")
    return history, stats


def dict_to_tensors(arrays: dict) -> dict:
    return {k: Tensor(v.copy(), requires_grad=True) for k, v in arrays.items()}


def _save_model(params: dict, out_dir, tag: str):
    os.makedirs(out_dir, exist_ok=True)
    T.save_checkpoint(params, os.path.join(out_dir, f"{tag}.manifest.json"),
                      os.path.join(out_dir, f"{tag}.blob.bin"))


def write_history(history, path):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["epoch", "train_loss", "valid_loss", "lr"])
        writer.writeheader()
        for row in history:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


@dataclass
class EvalReport:
    per_material: dict
    m3se_mean: float
    m3se_std: float
    per_step: list = field(default_factory=list)
    divergent: bool = False

    def to_json(self) -> dict:
        return asdict(self)


def one_step_eval(model, ds: RolloutDataset, stats: P.NormStats,
                  max_samples: int = 200, seed: int = 0) -> EvalReport:
    """M3SE of single-step predictions on the validation split (world units)."""
    trans = _transitions(ds, "valid", model.cfg.history)
    rng = np.random.default_rng(seed)
    if len(trans) > max_samples:
        pick = rng.choice(len(trans), size=max_samples, replace=False)
        trans = [trans[i] for i in sorted(pick)]
    scores = []
    per_mat: dict[int, list] = {}
    for ri, t in trans:
        frames = ds.valid[ri]
        x, graph, _ = make_sample(ds, frames, t, model.cfg.history, stats, model.cfg.radius)
        pred_norm = model.forward(x, graph.receivers, graph.senders, ds.material_ids).data
        pred = P.denormalize_velocity(pred_norm, stats)
        truth = frames[t + 1, :, 3:6].astype(np.float64)
        scores.append(m3se(pred, truth, ds.material_ids))
        diff = ((pred - truth) ** 2).sum(axis=-1)
        for k in np.unique(ds.material_ids):
            per_mat.setdefault(int(k), []).append(float(diff[ds.material_ids == k].mean()))
    return EvalReport(
        per_material={k: float(np.mean(v)) for k, v in per_mat.items()},
        m3se_mean=float(np.mean(scores)),
        m3se_std=float(np.std(scores)),
    )


def constant_velocity_eval(ds: RolloutDataset, history: int = 1,
                           max_samples: int = 200, seed: int = 0) -> EvalReport:
    """Baseline that predicts the next velocity equals the current one."""
    trans = _transitions(ds, "valid", history)
    rng = np.random.default_rng(seed)
    if len(trans) > max_samples:
        pick = rng.choice(len(trans), size=max_samples, replace=False)
        trans = [trans[i] for i in sorted(pick)]
    scores = []
    for ri, t in trans:
        frames = ds.valid[ri]
        pred = frames[t, :, 3:6].astype(np.float64)
        truth = frames[t + 1, :, 3:6].astype(np.float64)
        scores.append(m3se(pred, truth, ds.material_ids))
    return EvalReport(per_material={}, m3se_mean=float(np.mean(scores)),
                      m3se_std=float(np.std(scores)))


def rollout(model, ds: RolloutDataset, stats: P.NormStats, rollout_idx: int,
            n_steps: int, split: str = "valid", out_path=None):
    """Recursive rollout from a ground-truth prefix; graph rebuilt from the
    predicted positions each step.  Returns (predicted frames, EvalReport)."""
    frames = getattr(ds, split)[rollout_idx]
    H = model.cfg.history
    if n_steps > frames.shape[0] - H:
        raise ValueError(f"rollout of {n_steps} steps exceeds ground truth length")
    ph = [frames[H - 1 - i, :, 0:3].astype(np.float64) for i in range(H)]
    qh = [frames[H - 1 - i, :, 3:6].astype(np.float64) for i in range(H)]
    pred_frames = np.empty((n_steps, frames.shape[1], 6), dtype=np.float32)
    per_step = []
    divergent = False
    for step in range(n_steps):
        t = H - 1 + step
        x = P.assemble_inputs(ph, qh, ds.attributes, stats)
        state = P.SystemState(ph[0], qh[0], ds.attributes, ds.material_ids, t)
        graph = P.build_neighbor_graph(state, model.cfg.radius)
        q_hat = P.denormalize_velocity(
            model.forward(x, graph.receivers, graph.senders, ds.material_ids).data, stats)
        if not np.isfinite(q_hat).all():
            divergent = True
            pred_frames = pred_frames[:step]
            break
        p_next = P.integrate_positions(ph[0], q_hat, ds.spec.dt)
        truth = frames[t + 1, :, 3:6].astype(np.float64)
        per_step.append(m3se(q_hat, truth, ds.material_ids))
        pred_frames[step, :, 0:3] = p_next
        pred_frames[step, :, 3:6] = q_hat
        ph = [p_next] + ph[:-1]
        qh = [q_hat] + qh[:-1]
    report = EvalReport(per_material={}, m3se_mean=float(np.mean(per_step)) if per_step else np.nan,
                        m3se_std=float(np.std(per_step)) if per_step else np.nan,
                        per_step=per_step, divergent=divergent)
    if out_path is not None:
        write_rollout_file(pred_frames, out_path)
    return pred_frames, report
