"""ELBO objective, KL-weight schedules, optimizers and the single-worker loop.

The minimized per-step loss is::

    total = mean NLL over the minibatch + beta * KL(q || p) / N_train

so that summing over one epoch of minibatches recovers the negative ELBO with
the expected log-likelihood estimated from one noise sample per step.
"""
import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from . import tensor as T
from .tensor import SeededRng

log = logging.getLogger(__name__)

# stream tags under the run seed
SHUFFLE_STREAM = 1
STEP_STREAM = 2
INIT_STREAM = 3

METRIC_FIELDS = ("epoch", "nll", "kl", "beta", "total", "train_accuracy", "wall_seconds")


class DataError(ValueError):
    """Labels or dataset contents are invalid."""


@dataclass
class ElboBreakdown:
    nll: float
    kl: float
    beta: float
    total: float
    step: int = 0


def nll_categorical(logits, labels):
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    labels = np.asarray(labels)
    B, C = logits.shape
    if labels.shape != (B,):
        raise T.DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise DataError(f"labels must lie in [0, {C}), got range [{labels.min()}, {labels.max()}]")
    logp = T.log_softmax(logits.astype(np.float64))
    return float(-logp[np.arange(B), labels].mean())


def nll_grad(logits, labels):
    p = T.softmax(logits)
    p[np.arange(len(labels)), labels] -= 1
    return p / len(labels)


def elbo_loss(graph, batch, beta, n_train, rng, sample=True, rows=None):
    """Evaluate the loss on one minibatch.  Returns (ElboBreakdown, (caches, logits))."""
    if n_train <= 0:
        raise ValueError("n_train must be positive")
    x, y = batch
    logits, caches = L.forward(graph, x, rng, sample=sample, rows=rows)
    nll = nll_categorical(logits, y)
    kl = L.graph_kl(graph) if beta else 0.0
    return ElboBreakdown(nll, kl, beta, nll + beta * kl / n_train), (caches, logits)


def elbo_grads(graph, batch, beta, n_train, rng, sample=True, rows=None):
    """Loss breakdown and gradients of ``total`` with respect to every parameter."""
    out, (caches, logits) = elbo_loss(graph, batch, beta, n_train, rng, sample, rows)
    grads = L.backward(graph, caches, nll_grad(logits, batch[1]))
    if beta:
        L.add_kl_grads(graph, grads, beta / n_train)
    return out, grads


# ---------------------------------------------------------------------------
# beta schedules
# ---------------------------------------------------------------------------

@dataclass
class BetaSchedule:
    kind: str = "constant"
    value: float = 1.0
    ramp_steps: int = 0
    cycle_steps: int = 0
    ramp_epochs: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "linear_anneal", "cyclical"):
            raise ValueError(f"unknown beta schedule {self.kind!r}")


def beta_at(schedule, step, steps_per_epoch=1):
    if schedule.kind == "constant":
        return float(schedule.value)
    if schedule.kind == "linear_anneal":
        ramp = schedule.ramp_steps or schedule.ramp_epochs * steps_per_epoch
        return 1.0 if ramp <= 0 else min(1.0, step / ramp)
    cycle = schedule.cycle_steps or steps_per_epoch
    frac = (step % cycle) / cycle
    return min(1.0, 2.0 * frac)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    """Adam or RMSProp state.  ``step`` applies descent on the minimized loss."""

    kind: str = "rmsprop"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    decay: float = 0.9
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in ("adam", "rmsprop"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


def optimizer_step(opt, params, grads):
    """Update ``params`` in place from ``grads`` (only names present in grads)."""
    opt.t += 1
    for name, g in grads.items():
        w = params[name]
        if g.shape != w.shape:
            raise L.UsageError(f"gradient for {name} has shape {g.shape}, parameter {w.shape}")
        if opt.kind == "adam":
            m = opt.m.setdefault(name, np.zeros_like(w))
            v = opt.v.setdefault(name, np.zeros_like(w))
            m *= opt.beta1
            m += (1 - opt.beta1) * g
            v *= opt.beta2
            v += (1 - opt.beta2) * g * g
            mhat = m / (1 - opt.beta1 ** opt.t)
            vhat = v / (1 - opt.beta2 ** opt.t)
            w -= (opt.lr * mhat / (np.sqrt(vhat) + opt.eps)).astype(w.dtype)
        else:
            v = opt.v.setdefault(name, np.zeros_like(w))
            v *= opt.decay
            v += (1 - opt.decay) * g * g
            w -= (opt.lr * g / (np.sqrt(v) + opt.eps)).astype(w.dtype)
    return params


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 23
    batch_size: int = 100
    lr: float = 1e-3
    optimizer: str = "rmsprop"
    beta_schedule: BetaSchedule = field(default_factory=BetaSchedule)
    seed: int = 0
    sample: bool = True          # False trains the mean-weight (deterministic) network
    train_scale: bool = True     # False freezes rho (sigma-frozen network)
    metrics_csv: str = None
    record_steps: bool = False


def epoch_permutation(n, seed, epoch):
    """Deterministic shuffle of ``range(n)`` for one epoch."""
    u = SeededRng(seed).child(SHUFFLE_STREAM, epoch).uniform(n)
    return np.argsort(u, kind="stable")


def step_rng(seed, step, rank=0):
    return SeededRng(seed).child(STEP_STREAM, rank, step)


def accuracy(graph, x, y, batch_size=1000):
    """Accuracy of the mean-weight network."""
    correct = 0
    for i in range(0, len(y), batch_size):
        logits, _ = L.forward(graph, x[i:i + batch_size], sample=False)
        correct += int((logits.argmax(axis=1) == y[i:i + batch_size]).sum())
    return correct / max(len(y), 1)


def trainable_grads(grads, config):
    if config.train_scale:
        return grads
    return {k: v for k, v in grads.items() if not k.endswith("/" + L.SCALE)}


def write_metrics_csv(path, rows, fields=METRIC_FIELDS):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def read_metrics_csv(path, before_epoch=None):
    """Rows of a metrics CSV (numbers parsed), optionally only epochs < ``before_epoch``."""
    try:
        with open(path, newline="") as fh:
            rows = [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in csv.DictReader(fh)]
    except FileNotFoundError:
        return []
    return [r for r in rows if before_epoch is None or r["epoch"] < before_epoch]


def train(graph, dataset, config, opt=None, start_epoch=0, on_epoch=None):
    """Minibatch training.  Returns (graph, per-epoch metrics, optimizer state).

    Every random choice is keyed by (seed, epoch) or (seed, global step), so a
    run resumed from an epoch-boundary checkpoint replays the uninterrupted run.
    ``on_epoch(epoch, graph, opt)`` is called after each epoch (checkpointing).
    """
    x, y = dataset.images, dataset.labels
    n = len(y)
    if n == 0:
        raise DataError("training dataset is empty")
    opt = opt or OptimizerState(config.optimizer, config.lr)
    steps_per_epoch = -(-n // config.batch_size)
    metrics = []
    prior = read_metrics_csv(config.metrics_csv, start_epoch) if config.metrics_csv and start_epoch else []
    for epoch in range(start_epoch, config.epochs):
        t0 = time.perf_counter()
        perm = epoch_permutation(n, config.seed, epoch)
        sums = np.zeros(4)
        step_losses = []
        for b in range(steps_per_epoch):
            step = epoch * steps_per_epoch + b
            idx = perm[b * config.batch_size:(b + 1) * config.batch_size]
            beta = beta_at(config.beta_schedule, step, steps_per_epoch)
            out, grads = elbo_grads(graph, (x[idx], y[idx]), beta, n, step_rng(config.seed, step),
                                    sample=config.sample)
            optimizer_step(opt, graph.params, trainable_grads(grads, config))
            sums += (out.nll, out.kl, out.beta, out.total)
            if config.record_steps:
                step_losses.append(out.total)
        nll, kl, beta, total = sums / steps_per_epoch
        row = dict(epoch=epoch, nll=nll, kl=kl, beta=beta, total=total,
                   train_accuracy=accuracy(graph, x, y), wall_seconds=time.perf_counter() - t0)
        if config.record_steps:
            row["step_losses"] = step_losses
        metrics.append(row)
        log.info("epoch %d nll %.4f kl %.1f total %.4f acc %.4f (%.1fs)", epoch, nll, kl, total,
                 row["train_accuracy"], row["wall_seconds"])
        if config.metrics_csv:
            write_metrics_csv(config.metrics_csv, prior + metrics)
        if on_epoch:
            on_epoch(epoch, graph, opt)
    if config.metrics_csv and not metrics:
        write_metrics_csv(config.metrics_csv, prior)
    return graph, metrics, opt
