"""Phase-1 optimisation: Adam with coupled L2 decay and a step LR schedule."""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import container

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "pdectrl-checkpoint"
CHECKPOINT_VERSION = "1"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-6
    step_size: int = 300
    factor: float = 0.5
    epochs: int = 900
    batch_size: int = 32
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not 0 < self.factor <= 1:
            raise ValueError("scheduler factor must lie in (0, 1]")
        if self.batch_size < 1 or self.step_size < 1:
            raise ValueError("batch_size and step_size must be >= 1")


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr * cfg.factor ** (epoch // cfg.step_size)


@torch.no_grad()
def adam_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor],
              state: AdamState, cfg: TrainConfig, lr: float | None = None) -> AdamState:
    """In-place Adam update; weight decay is added to the gradient."""
    lr = cfg.lr if lr is None else lr
    b1, b2 = cfg.betas
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {tuple(g.shape)}, expected {tuple(p.shape)}")
        if not torch.isfinite(g).all():
            raise TrainingDiverged(f"non-finite gradient in parameter {name!r}")
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        v = state.v[name]
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + cfg.eps))
    return state


def train_phase1(network: torch.nn.Module,
                 loss_fn: Callable[..., torch.Tensor],
                 train: Sequence[torch.Tensor],
                 cfg: TrainConfig,
                 metric_fn: Callable[..., float] | None = None,
                 test: Sequence[torch.Tensor] | None = None,
                 on_epoch: Callable[[int, torch.nn.Module], None] | None = None):
    """Shuffled mini-batch training; returns the best-test network and history.

    ``loss_fn(network, *batch)`` gives the training loss; ``metric_fn(network,
    *test)`` the test metric used for best-checkpoint selection (the
    untrained network is a candidate too). ``on_epoch`` sees the network
    after every epoch.
    """
    n = len(train[0])
    if n == 0:
        raise ValueError("empty training set")
    params = dict(network.named_parameters())
    state = AdamState()
    rng = np.random.default_rng(cfg.seed)
    history: list[dict] = []

    def evaluate():
        if metric_fn is None or test is None:
            return math.nan
        with torch.no_grad():
            return float(metric_fn(network, *test))

    best_metric = evaluate()
    best_state = copy.deepcopy(network.state_dict())
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = torch.as_tensor(order[start:start + cfg.batch_size])
            batch = [t[idx] for t in train]
            loss = loss_fn(network, *batch)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"loss became non-finite at epoch {epoch}")
            grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
            grads = {k: torch.zeros_like(p) if g is None else g
                     for (k, p), g in zip(params.items(), grads)}
            adam_step(params, grads, state, cfg, lr=lr)
            total += loss.item() * len(idx)
        metric = evaluate()
        history.append({"epoch": epoch, "lr": lr, "train_loss": total / n, "test_rel_error": metric})
        log.debug("epoch %d lr %.2e loss %.4e test %.4e", epoch, lr, total / n, metric)
        if metric_fn is not None and test is not None and metric < best_metric:
            best_metric = metric
            best_state = copy.deepcopy(network.state_dict())
        if on_epoch is not None:
            on_epoch(epoch, network)
    if metric_fn is not None and test is not None:
        network.load_state_dict(best_state)
    return network, history


def write_metrics_csv(history: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "train_loss", "test_rel_error"])
        for row in history:
            w.writerow([row["epoch"], repr(row["lr"]), repr(row["train_loss"]),
                        repr(row["test_rel_error"])])
    tmp.replace(path)


def save_checkpoint(model, path, extra: dict | None = None) -> None:
    """Store a fitted surrogate estimator: parameter tensors + constructor args."""
    net = model.network_
    arrays = {k: v.detach().cpu().numpy() for k, v in net.state_dict().items()}
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "class": type(model).__name__,
        "params": json.dumps(model.get_params(deep=False), sort_keys=True, default=list),
    }
    for k, v in sorted((extra or {}).items()):
        meta[f"extra.{k}"] = json.dumps(v)
    container.save(path, arrays, meta)


def load_checkpoint(path):
    from . import surrogate

    arrays, meta = container.load(path)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise container.ContainerError(f"{path}: not a checkpoint (format={meta.get('format')!r})")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise container.ContainerError(
            f"{path}: checkpoint version {meta.get('version')!r}, expected {CHECKPOINT_VERSION}")
    cls = {"OperatorSurrogate": surrogate.OperatorSurrogate,
           "TimeSurrogate": surrogate.TimeSurrogate}.get(meta.get("class"))
    if cls is None:
        raise container.ContainerError(f"{path}: unknown model class {meta.get('class')!r}")
    params = json.loads(meta["params"])
    for k, v in params.items():
        if isinstance(v, list):
            params[k] = tuple(v)
    model = cls(**params)
    net = model._build_network()
    state = {k: torch.from_numpy(np.array(v)) for k, v in arrays.items()}
    missing = set(net.state_dict()) ^ set(state)
    if missing:
        raise container.ContainerError(f"{path}: parameter set mismatch {sorted(missing)}")
    net.load_state_dict(state)
    model.network_ = net
    model.checkpoint_extra_ = {k[6:]: json.loads(v) for k, v in meta.items() if k.startswith("extra.")}
    return model

