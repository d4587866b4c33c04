"""Data-parallel training on top of the collective engine.

Each step, every rank runs forward/backward on its slice of the global
minibatch, the gradients are averaged tensor by tensor through the engine, and
all ranks apply the same optimizer update.  Because the ring reduction order is
fixed, parameters stay bitwise identical across ranks.
"""
import csv
import hashlib
import logging
import multiprocessing as mp
import os
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np

from . import collective as C
from . import elbo as E
from . import layers as L
from .modelio import Dataset

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


def shard(dataset, rank, W, seed=0):
    """Disjoint, near-equal, seed-deterministic shard ``rank`` of ``W``."""
    n = len(dataset.labels)
    if W < 1 or not 0 <= rank < W:
        raise ConfigError(f"invalid rank {rank} for world size {W}")
    if W > n:
        raise ConfigError(f"{W} workers but only {n} examples")
    perm = E.epoch_permutation(n, seed, -1)
    return dataset.subset(np.sort(perm[rank::W]))


def scale_lr(base, W):
    if W < 1:
        raise ConfigError(f"world size must be >= 1, got {W}")
    return base * W


def efficiency(T1, TN, N):
    if T1 <= 0 or TN <= 0 or N <= 0:
        raise L.ParameterError(f"efficiency needs positive inputs, got T1={T1}, TN={TN}, N={N}")
    return T1 / (TN * N)


def throughput(samples, seconds):
    """Samples/second over iterations of ``samples`` each: (time-weighted mean, std of per-iteration rates).

    The mean is total samples over total time, so mean * elapsed recovers the
    number of samples processed.
    """
    seconds = np.asarray(seconds, np.float64)
    if seconds.size == 0 or np.any(seconds <= 0) or samples <= 0:
        raise L.ParameterError("throughput needs positive samples and iteration times")
    rates = samples / seconds
    return float(samples * seconds.size / seconds.sum()), float(rates.std())


@dataclass
class ScalingMetrics:
    samples_per_second: float = 0.0
    samples_per_second_std: float = 0.0
    T_N: float = 0.0
    iterations: int = 0
    samples: int = 0
    comm_fraction: float = 0.0
    efficiency: float = None


@dataclass
class DistConfig:
    workers: int = 2
    transport: str = "channel"
    epochs: int = 1
    batch_per_worker: int = 100
    lr: float = 1e-3
    scale_lr: bool = True
    optimizer: str = "rmsprop"
    beta_schedule: E.BetaSchedule = field(default_factory=E.BetaSchedule)
    seed: int = 0
    sample: bool = True
    train_scale: bool = True
    shared_noise: bool = False     # every rank reads the single-worker noise stream
    max_steps: int = None
    comm: C.CommConfig = field(default_factory=C.CommConfig)
    recv_timeout: float = 300.0


@dataclass
class DistResult:
    graph: L.ModelGraph
    metrics: ScalingMetrics
    step_losses: list
    digests: list                  # per-rank parameter digests
    comm_tables: dict
    reductions_per_step: float     # gradient tensors reduced per step
    epoch_rows: list = field(default_factory=list)


def param_digest(params):
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.hexdigest()


def _rank_loop(engine, graph, dataset, cfg):
    rank, W = engine.rank, engine.world_size
    x, y = dataset.images, dataset.labels
    n = len(y)
    B = cfg.batch_per_worker * W
    if B > n:
        raise ConfigError(f"global batch {B} exceeds dataset size {n}")
    lr = scale_lr(cfg.lr, W) if cfg.scale_lr else cfg.lr
    opt = E.OptimizerState(cfg.optimizer, lr)
    tcfg = E.TrainConfig(train_scale=cfg.train_scale)
    # start from rank 0's parameters
    for name in sorted(graph.params):
        graph.params[name][...] = engine.broadcast(f"init/{name}", graph.params[name])
    steps_per_epoch = n // B
    depth = {l.name: i for i, l in enumerate(graph.layers)}
    losses, times, comm_time, n_grad = [], [], 0.0, 0
    engine.barrier()
    t_start = time.perf_counter()
    step, epoch_rows = 0, []
    for epoch in range(cfg.epochs):
        perm = E.epoch_permutation(n, cfg.seed, epoch)
        e_start, e_first, e_comm = time.perf_counter(), len(times), comm_time
        for b in range(steps_per_epoch):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            t0 = time.perf_counter()
            lo = b * B + rank * cfg.batch_per_worker
            idx = perm[lo:lo + cfg.batch_per_worker]
            rows = (np.arange(rank * cfg.batch_per_worker, (rank + 1) * cfg.batch_per_worker), B)
            rng = E.step_rng(cfg.seed, step, 0 if cfg.shared_noise else rank)
            beta = E.beta_at(cfg.beta_schedule, step, steps_per_epoch)
            out, grads = E.elbo_grads(graph, (x[idx], y[idx]), beta, n, rng, sample=cfg.sample,
                                      rows=rows if cfg.shared_noise else None)
            grads = E.trainable_grads(grads, tcfg)
            tc = time.perf_counter()
            # reverse layer order, as gradients become available during backprop
            names = sorted(grads, key=lambda k: (-depth[k.split("/")[0]], k))
            n_grad += len(names)
            avg = engine.allreduce_many(grads, order=names)
            loss = engine.allreduce("loss", np.array([out.nll, out.kl, out.total]))
            comm_time += time.perf_counter() - tc
            E.optimizer_step(opt, graph.params, avg)
            losses.append(float(loss[2]))
            times.append(time.perf_counter() - t0)
            step += 1
        if len(times) > e_first:
            sps, sps_std = throughput(cfg.batch_per_worker * W, times[e_first:])
            epoch_rows.append(dict(rank=rank, epoch=epoch, samples_per_sec_mean=sps, samples_per_sec_std=sps_std,
                                   wall_s=time.perf_counter() - e_start, comm_s=comm_time - e_comm))
    T_N = time.perf_counter() - t_start
    engine.barrier()
    return dict(rank=rank, epochs=epoch_rows, losses=losses, times=times, T_N=T_N, comm_time=comm_time, steps=step,
                digest=param_digest(graph.params), params=graph.params if rank == 0 else None,
                grad_reductions=n_grad, allreduce_count=engine.stats.ops["allreduce"].count)


def _metrics(res, cfg, W):
    r0 = res[0]
    m = ScalingMetrics(T_N=r0["T_N"], iterations=r0["steps"], samples=r0["steps"] * cfg.batch_per_worker * W)
    if r0["times"]:
        m.samples_per_second, m.samples_per_second_std = throughput(cfg.batch_per_worker * W, r0["times"])
        m.comm_fraction = r0["comm_time"] / max(sum(r0["times"]), 1e-12)
    return m


def dist_train(graph, dataset, cfg):
    """Train ``graph`` with ``cfg.workers`` ranks.  Returns a :class:`DistResult`."""
    W = cfg.workers
    if W < 1:
        raise ConfigError("workers must be >= 1")
    if cfg.transport == "channel":
        graphs = [graph.copy() for _ in range(W)]

        def fn(engine):
            return _rank_loop(engine, graphs[engine.rank], dataset, cfg)

        engines = []

        def wrapped(engine):
            engines.append(engine)
            return fn(engine)

        res = C.run_ranks(W, wrapped, "channel", cfg.comm, cfg.recv_timeout)
        tables = {e.rank: e.stats.table() for e in engines}
    elif cfg.transport == "tcp":
        res, tables = _tcp_train(graph, dataset, cfg)
    else:
        raise ConfigError(f"unknown transport {cfg.transport!r}")
    final = graph.copy()
    for k, v in res[0]["params"].items():
        final.params[k] = v
    steps = max(res[0]["steps"], 1)
    rows = [row for r in res for row in r["epochs"]]
    return DistResult(final, _metrics(res, cfg, W), res[0]["losses"], [r["digest"] for r in res], tables,
                      res[0]["grad_reductions"] / steps, rows)


EPOCH_FIELDS = ("rank", "epoch", "samples_per_sec_mean", "samples_per_sec_std", "wall_s", "comm_s", "efficiency")


def write_epoch_csv(path, result, efficiency_value=None):
    """Per-rank, per-epoch metrics; efficiency is filled on rank 0 rows only."""
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(EPOCH_FIELDS))
        w.writeheader()
        for row in sorted(result.epoch_rows, key=lambda r: (r["epoch"], r["rank"])):
            eff = efficiency_value if row["rank"] == 0 and efficiency_value is not None else ""
            w.writerow(dict(row, efficiency=eff))


# --- multi-process (tcp) ---------------------------------------------------

def _tcp_worker(rank, W, address, graph, data_path, cfg, out_q):
    try:
        dataset = Dataset(np.load(data_path + ".images.npy", mmap_mode="r"),
                          np.load(data_path + ".labels.npy"), "train")
        t = C.TcpTransport(rank, W, tuple(address), recv_timeout=cfg.recv_timeout).connect()
        eng = C.CommEngine(t, cfg.comm).start()
        try:
            out = _rank_loop(eng, graph, dataset, cfg)
        finally:
            eng.stop()
        eng.gather_stats()
        t.close()
        out_q.put((rank, out, None))
    except Exception as exc:  # reported to the parent, tagged with the rank
        out_q.put((rank, None, f"rank {rank}: {type(exc).__name__}: {exc}"))


def _tcp_train(graph, dataset, cfg):
    W = cfg.workers
    ctx = mp.get_context("spawn")
    out_q = ctx.Queue()
    with tempfile.TemporaryDirectory() as tmp:
        data_path = os.path.join(tmp, "data")
        np.save(data_path + ".images.npy", dataset.images)
        np.save(data_path + ".labels.npy", dataset.labels)
        t0 = C.TcpTransport(0, W, recv_timeout=cfg.recv_timeout)
        procs = [ctx.Process(target=_tcp_worker, args=(r, W, t0.address, graph, data_path, cfg, out_q))
                 for r in range(1, W)]
        for p in procs:
            p.start()
        try:
            t0.connect()
            eng = C.CommEngine(t0, cfg.comm).start()
            try:
                r0 = _rank_loop(eng, graph.copy(), dataset, cfg)
            finally:
                eng.stop()
            tables = eng.gather_stats()
            results = {0: r0}
            for _ in range(W - 1):
                rank, out, err = out_q.get(timeout=cfg.recv_timeout)
                if err:
                    raise C.TransportError(err, rank)
                results[rank] = out
        finally:
            t0.close()
            for p in procs:
                p.join(timeout=10)
                if p.is_alive():
                    p.terminate()
    return [results[r] for r in range(W)], tables


# --- scaling harness ---------------------------------------------------------

SCALING_FIELDS = ("workers", "T_N", "efficiency", "samples_per_second", "samples_per_second_std",
                  "comm_fraction", "iterations")


def scaling_harness(graph, dataset, workers=(1, 2, 4, 8), csv_path=None, **cfg_kw):
    """Fixed-workload scaling runs; efficiency = T_1 / (T_N * N).

    The global batch is ``batch_per_worker * N``, so every run processes the
    same number of epochs over the same data.
    """
    rows, T1 = [], None
    for W in workers:
        cfg = DistConfig(workers=W, **cfg_kw)
        res = dist_train(graph.copy(), dataset, cfg)
        m = res.metrics
        if T1 is None:
            if W != 1:
                raise ConfigError("the first harness run must use one worker")
            T1 = m.T_N
        m.efficiency = efficiency(T1, m.T_N, W)
        rows.append(dict(workers=W, T_N=m.T_N, efficiency=m.efficiency, samples_per_second=m.samples_per_second,
                         samples_per_second_std=m.samples_per_second_std, comm_fraction=m.comm_fraction,
                         iterations=m.iterations))
        log.info("W=%d T_N=%.2fs efficiency=%.3f", W, m.T_N, m.efficiency)
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(SCALING_FIELDS))
            w.writeheader()
            w.writerows(rows)
    return rows
