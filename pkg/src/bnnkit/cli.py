"""Command-line entry point: ``bnnkit <command> [options]``.

Commands: train, infer, prune, sweep, dist-train, bench-allreduce.  Options may
also come from a JSON config file (``--config``); flags given on the command
line win over the file.  Exit codes: 0 success, 1 runtime error, 2 usage or
configuration error.

Outputs (all under ``--out-dir``):

    train        model-<epochs>.ckpt, LayerNames.txt, OpsNames.txt, metrics.csv
    infer        predictive.csv, histograms.csv, timing.json
    prune        pruned checkpoint, prune_report.bprn, prune.csv
    sweep        sweep.csv
    dist-train   model-<epochs>.ckpt, dist_metrics.csv, comm_stats.csv [, scaling.csv]
    bench-allreduce  bench_allreduce.csv, comm_stats.csv
"""
import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time

import numpy as np

from . import collective as C
from . import distributed as D
from . import elbo as E
from . import inference as I
from . import layers as L
from . import modelio as M
from . import prune as P
from . import recipes as R
from .tensor import SeededRng

log = logging.getLogger("bnnkit")


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class RunConfig:
    model: str = "bnn-fc"
    data_dir: str = None
    out_dir: str = "runs"
    checkpoint: str = None
    seed: int = 0
    f64: bool = False
    # training
    epochs: int = 23
    batch: int = 100
    lr: float = 1e-3
    opt: str = "rmsprop"
    beta: str = "constant"
    beta_value: float = 1.0
    beta_ramp_epochs: float = 0.0
    n_train: int = 50_000
    limit: int = None
    # inference and pruning
    S: int = 400
    infer_batch: int = I.DEFAULT_BATCH
    bins: int = 20
    threshold: float = P.DEFAULT_THRESHOLD
    percents: str = "0,20,40,60,80,90"
    sparse: bool = False
    # distributed
    workers: int = 1
    transport: str = "channel"
    fusion_mb: float = C.DEFAULT_FUSION_MB
    cycle_ms: float = C.DEFAULT_CYCLE_MS
    coord_timeout_ms: float = C.DEFAULT_TIMEOUT_MS
    no_lr_scaling: bool = False
    scaling: str = None
    sizes: str = None
    reps: int = 5


FIELDS = {f.name for f in dataclasses.fields(RunConfig)}


def load_config(path):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"--config: cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--config: {path} is not valid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"--config: {path} must hold a JSON object")
    unknown = sorted(set(data) - FIELDS)
    if unknown:
        raise ConfigError(f"--config: unknown keys {unknown}")
    return data


def resolve(args):
    """Merge defaults, config file and explicit flags (flags win)."""
    values = {}
    if args.config:
        values.update(load_config(args.config))
    for k, v in vars(args).items():
        if k in FIELDS and v is not None:
            values[k] = v
    cfg = RunConfig(**values)
    if cfg.model not in R.PRESETS:
        raise ConfigError(f"--model: unknown preset {cfg.model!r}; choose from {sorted(R.PRESETS)}")
    for name in ("epochs", "reps"):
        if getattr(cfg, name) < 0:
            raise ConfigError(f"--{name} must be >= 0")
    for name in ("batch", "S", "workers", "infer_batch", "bins"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"--{name.replace('_', '-')} must be >= 1")
    if cfg.transport not in ("channel", "tcp"):
        raise ConfigError(f"--transport must be channel or tcp, got {cfg.transport!r}")
    if cfg.threshold < 0:
        raise ConfigError("--threshold must be >= 0")
    return cfg


def _ints(text, flag):
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{flag}: expected comma-separated integers, got {text!r}") from None


def _floats(text, flag):
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{flag}: expected comma-separated numbers, got {text!r}") from None


def _dtype(cfg):
    return np.float64 if cfg.f64 else np.float32


def _data(cfg):
    if not cfg.data_dir:
        raise ConfigError("--data-dir is required (directory holding the MNIST IDX files)")
    if not os.path.isdir(cfg.data_dir):
        raise ConfigError(f"--data-dir: {cfg.data_dir} is not a directory")
    try:
        train, val, test = M.mnist_splits(cfg.data_dir, cfg.n_train)
    except FileNotFoundError as exc:
        raise ConfigError(f"--data-dir: {exc}") from None
    if cfg.limit:
        train, test = train.subset(np.arange(min(cfg.limit, len(train)))), test.subset(
            np.arange(min(cfg.limit, len(test))))
    if cfg.f64:
        train = M.Dataset(train.images.astype(np.float64), train.labels, train.split)
        test = M.Dataset(test.images.astype(np.float64), test.labels, test.split)
    return train, val, test


def _beta(cfg):
    return E.BetaSchedule(cfg.beta, cfg.beta_value, ramp_epochs=cfg.beta_ramp_epochs)


def _load(cfg):
    path = cfg.checkpoint or M.latest_checkpoint(cfg.out_dir)
    ck = M.load_checkpoint(path)
    manifest_dir = os.path.dirname(os.path.abspath(path))
    if os.path.exists(os.path.join(manifest_dir, M.LAYER_FILE)):
        M.check_manifest(M.parse_manifest(manifest_dir), ck.graph)
    graph = ck.graph.astype(np.float64) if cfg.f64 else ck.graph
    return graph, ck, path


def cmd_train(cfg):
    train, _, _ = _data(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    graph = R.build(cfg.model, cfg.seed, _dtype(cfg))
    metrics_csv = os.path.join(cfg.out_dir, "metrics.csv")
    if cfg.workers > 1:
        return cmd_dist_train(cfg, graph=graph, train=train)
    tc = E.TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch, lr=cfg.lr, optimizer=cfg.opt,
                       beta_schedule=_beta(cfg), seed=cfg.seed, metrics_csv=metrics_csv)
    graph, metrics, opt = E.train(graph, train, tc,
                                  on_epoch=lambda e, g, o: M.save_checkpoint(g, o, cfg.out_dir, e + 1))
    path = M.save_checkpoint(graph, opt, cfg.out_dir, cfg.epochs, extra=dict(model=cfg.model, seed=cfg.seed))
    M.write_manifest(graph, cfg.out_dir)
    print(f"wrote {path}")
    return 0


def cmd_infer(cfg):
    _, _, test = _data(cfg)
    graph, _, path = _load(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    rng = SeededRng(cfg.seed)
    x = test.images.astype(graph.dtype, copy=False)
    if cfg.sparse:
        ps, runtime = P.sparse_infer(P.to_sparse(graph), x, cfg.S, rng, test.labels, cfg.infer_batch)
    else:
        ps = I.predict_mc(graph, x, cfg.S, rng, test.labels, cfg.infer_batch)
        runtime = ps.runtime
    I.write_summary_csv(os.path.join(cfg.out_dir, "predictive.csv"), ps)
    I.write_histograms_csv(os.path.join(cfg.out_dir, "histograms.csv"), ps, cfg.bins)
    acc = I.accuracy(ps, test.labels)
    with open(os.path.join(cfg.out_dir, "timing.json"), "w") as fh:
        json.dump(dict(checkpoint=path, S=cfg.S, examples=len(test), seconds=runtime, accuracy=acc), fh, indent=1)
    print(f"S={cfg.S} accuracy={acc:.4f} ({runtime:.2f}s)")
    return 0


def cmd_prune(cfg):
    _, _, test = _data(cfg)
    graph, ck, _ = _load(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    pruned, mask = P.prune_by_threshold(graph, cfg.threshold)
    x = test.images.astype(graph.dtype, copy=False)
    report, ps = P.make_report(pruned, mask, x, test.labels, cfg.S, SeededRng(cfg.seed), cfg.sparse,
                               cfg.infer_batch)
    P.write_report(os.path.join(cfg.out_dir, "prune_report.bprn"), report)
    acc = I.accuracy(ps, test.labels)
    with open(os.path.join(cfg.out_dir, "prune.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "accuracy", "nnz_total", "total_weights", "runtime_s"])
        w.writerow([cfg.threshold, f"{acc:.6f}", report.nnz_total, mask.size, f"{report.runtime:.6f}"])
    M.save_checkpoint(pruned, None, os.path.join(cfg.out_dir, "pruned"), ck.iteration)
    M.write_manifest(pruned, os.path.join(cfg.out_dir, "pruned"))
    print(f"threshold={cfg.threshold} kept {report.nnz_total}/{mask.size} accuracy={acc:.4f}")
    return 0


def cmd_sweep(cfg):
    _, _, test = _data(cfg)
    graph, _, _ = _load(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    pcts = _floats(cfg.percents, "--percents")
    x = test.images.astype(graph.dtype, copy=False)
    rows = P.prune_sweep(graph, x, test.labels, pcts, cfg.S, SeededRng(cfg.seed),
                         os.path.join(cfg.out_dir, "sweep.csv"), cfg.infer_batch)
    for r in rows:
        print(f"{r['pct']:5.1f}% accuracy={r['accuracy']:.4f} nnz={r['nnz_total']}")
    return 0


def _comm(cfg):
    return C.CommConfig(cycle_ms=cfg.cycle_ms, fusion_mb=cfg.fusion_mb, timeout_ms=cfg.coord_timeout_ms)


def cmd_dist_train(cfg, graph=None, train=None):
    if train is None:
        train, _, _ = _data(cfg)
    if graph is None:
        graph = R.build(cfg.model, cfg.seed, _dtype(cfg))
    os.makedirs(cfg.out_dir, exist_ok=True)
    if cfg.batch % cfg.workers:
        raise ConfigError(f"--batch {cfg.batch} is not divisible by --workers {cfg.workers}")
    kw = dict(transport=cfg.transport, epochs=cfg.epochs, batch_per_worker=cfg.batch // cfg.workers, lr=cfg.lr,
              scale_lr=not cfg.no_lr_scaling, optimizer=cfg.opt, beta_schedule=_beta(cfg), seed=cfg.seed,
              comm=_comm(cfg))
    if cfg.scaling:
        # fixed per-worker batch, so the global batch grows with W
        kw["batch_per_worker"] = cfg.batch
        rows = D.scaling_harness(graph, train, _ints(cfg.scaling, "--scaling"),
                                 os.path.join(cfg.out_dir, "scaling.csv"), **kw)
        for r in rows:
            print(f"W={r['workers']} T_N={r['T_N']:.2f}s efficiency={r['efficiency']:.3f}")
        return 0
    res = D.dist_train(graph, train, D.DistConfig(workers=cfg.workers, **kw))
    D.write_epoch_csv(os.path.join(cfg.out_dir, "dist_metrics.csv"), res)
    _write_comm_tables(os.path.join(cfg.out_dir, "comm_stats.csv"), res.comm_tables)
    path = M.save_checkpoint(res.graph, None, cfg.out_dir, cfg.epochs, extra=dict(model=cfg.model, seed=cfg.seed))
    M.write_manifest(res.graph, cfg.out_dir)
    print(f"wrote {path}; {res.metrics.samples_per_second:.1f} samples/s, "
          f"{res.reductions_per_step:.0f} gradient reductions per step")
    return 0


def _write_comm_tables(path, tables):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "op", "count", "avg_bytes", "cumulative_seconds"])
        for rank in sorted(tables):
            for op, row in tables[rank].items():
                w.writerow([rank, op, row["count"], f"{row['avg_bytes']:.1f}", f"{row['cumulative_seconds']:.6f}"])


BENCH_SIZES = [1 << k for k in range(10, 27, 2)]   # 1 KB ... 64 MB
BENCH_FIELDS = ("transport", "workers", "bytes", "reps", "mean_seconds", "bandwidth_MBps", "checksum")


def bench_allreduce(workers, sizes, reps, transport, comm=None, seed=0):
    """Time allreduce(sum) of float32 tensors; returns (rows, per-rank stats tables).

    Tensors hold small integers, so sums are exact and the checksum column is
    independent of fusion and chunking.
    """
    comm = comm or C.CommConfig()
    needed = max(sizes) / C.MB
    if needed > comm.fusion_mb:
        comm = dataclasses.replace(comm, fusion_mb=needed)

    def body(engine):
        rng = np.random.default_rng([seed, engine.rank])
        out = []
        for nbytes in sizes:
            a = rng.integers(-8, 8, nbytes // 4).astype(np.float32)
            engine.barrier()
            t0 = time.perf_counter()
            for k in range(reps):
                res = engine.allreduce(f"bench/{nbytes}/{k}", a, op="sum")
            dt = (time.perf_counter() - t0) / max(reps, 1)
            out.append((nbytes, dt, float(res.sum()) if reps else 0.0))
        return out, engine.stats.table()

    results = C.run_ranks(workers, body, transport, comm)
    rows = []
    for nbytes, dt, chk in results[0][0]:
        rows.append(dict(transport=transport, workers=workers, bytes=nbytes, reps=reps, mean_seconds=dt,
                         bandwidth_MBps=nbytes / C.MB / dt if dt > 0 else float("inf"), checksum=chk))
    return rows, {r: res[1] for r, res in enumerate(results)}


def cmd_bench_allreduce(cfg):
    os.makedirs(cfg.out_dir, exist_ok=True)
    sizes = _ints(cfg.sizes, "--sizes") if cfg.sizes else BENCH_SIZES
    rows, tables = [], {}
    for transport in ("channel", "tcp"):
        r, t = bench_allreduce(cfg.workers, sizes, cfg.reps, transport, _comm(cfg), cfg.seed)
        rows += r
        tables.update({f"{transport}:{k}": v for k, v in t.items()})
        for row in r:
            print(f"{transport:7s} W={cfg.workers} {row['bytes']:>10d} B  {row['mean_seconds'] * 1e3:9.3f} ms  "
                  f"{row['bandwidth_MBps']:9.1f} MB/s")
    with open(os.path.join(cfg.out_dir, "bench_allreduce.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(BENCH_FIELDS))
        w.writeheader()
        w.writerows(rows)
    _write_comm_tables(os.path.join(cfg.out_dir, "comm_stats.csv"), tables)
    return 0


COMMANDS = {"train": cmd_train, "infer": cmd_infer, "prune": cmd_prune, "sweep": cmd_sweep,
            "dist-train": cmd_dist_train, "bench-allreduce": cmd_bench_allreduce}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("common")
    g.add_argument("--config", help="JSON file of RunConfig fields; flags override it")
    g.add_argument("--seed", type=int)
    g.add_argument("--out-dir", dest="out_dir")
    g.add_argument("--f64", action="store_true", default=None, help="64-bit verification mode")
    g.add_argument("--data-dir", dest="data_dir", help="directory with MNIST IDX files (.gz or raw)")
    g.add_argument("--model", help=f"preset: {', '.join(sorted(R.PRESETS))}")
    g.add_argument("--checkpoint", help="checkpoint file (default: newest in --out-dir)")
    g.add_argument("--limit", type=int, help="use only the first N train/test examples")
    g.add_argument("-v", "--verbose", action="store_true")

    train = argparse.ArgumentParser(add_help=False)
    t = train.add_argument_group("training")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--opt", choices=["rmsprop", "adam"])
    t.add_argument("--beta", choices=["constant", "linear_anneal", "cyclical"])
    t.add_argument("--beta-value", dest="beta_value", type=float)
    t.add_argument("--beta-ramp-epochs", dest="beta_ramp_epochs", type=float)
    t.add_argument("--n-train", dest="n_train", type=int)

    infer = argparse.ArgumentParser(add_help=False)
    i = infer.add_argument_group("inference")
    i.add_argument("-S", "--samples", dest="S", type=int, help="MC iterations (default 400)")
    i.add_argument("--infer-batch", dest="infer_batch", type=int)
    i.add_argument("--sparse", action="store_true", default=None, help="use compressed sparse kernels")

    dist = argparse.ArgumentParser(add_help=False)
    d = dist.add_argument_group("distributed")
    d.add_argument("--workers", type=int)
    d.add_argument("--transport", choices=["channel", "tcp"])
    d.add_argument("--fusion-mb", dest="fusion_mb", type=float)
    d.add_argument("--cycle-ms", dest="cycle_ms", type=float)
    d.add_argument("--coord-timeout-ms", dest="coord_timeout_ms", type=float)

    parser = argparse.ArgumentParser(prog="bnnkit", description="Bayesian neural network toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", parents=[common, train, dist], help="train a preset model")
    p = sub.add_parser("infer", parents=[common, infer], help="MC predictive inference")
    p.add_argument("--bins", type=int)
    p = sub.add_parser("prune", parents=[common, infer], help="prune by SNR threshold")
    p.add_argument("--threshold", type=float, help="SNR threshold (default 10.0)")
    p = sub.add_parser("sweep", parents=[common, infer], help="accuracy vs pruning percentage")
    p.add_argument("--percents", help="comma-separated list (default 0,20,40,60,80,90)")
    p = sub.add_parser("dist-train", parents=[common, train, dist], help="data-parallel training")
    p.add_argument("--no-lr-scaling", dest="no_lr_scaling", action="store_true", default=None)
    p.add_argument("--scaling", help="run the scaling harness over these worker counts, e.g. 1,2,4,8")
    p = sub.add_parser("bench-allreduce", parents=[common, dist], help="allreduce latency/bandwidth")
    p.add_argument("--sizes", help="comma-separated byte sizes (default 1 KB ... 64 MB)")
    p.add_argument("--reps", type=int)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except (ConfigError, D.ConfigError, C.ConfigError, L.ParameterError) as exc:
        print(f"bnnkit {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        if args.verbose:
            log.exception("command failed")
        print(f"bnnkit {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
