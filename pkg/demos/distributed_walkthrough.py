"""Data-parallel BNN training on local ranks, and what travels over the wire.

    python demos/distributed_walkthrough.py --workers 4
"""
import argparse

import numpy as np

from bnnkit import collective as C
from bnnkit import distributed as D
from bnnkit import modelio as M
from bnnkit import recipes as R


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--data-dir", default="data/mnist")
    ap.add_argument("--workers", type=int, default=4)
    ap.add_argument("--transport", default="channel", choices=["channel", "tcp"])
    ap.add_argument("--examples", type=int, default=4000)
    args = ap.parse_args()

    train, _, _ = M.mnist_splits(args.data_dir)
    data = train.subset(np.arange(args.examples))
    W = args.workers

    # with shared noise, W ranks of batch 100/W replay one rank of batch 100
    kw = dict(epochs=1, scale_lr=False, shared_noise=True, max_steps=10, transport=args.transport)
    one = D.dist_train(R.build("bnn-fc"), data, D.DistConfig(workers=1, batch_per_worker=100, **kw))
    many = D.dist_train(R.build("bnn-fc"), data, D.DistConfig(workers=W, batch_per_worker=100 // W, **kw))
    rel = np.max(np.abs(np.subtract(one.step_losses, many.step_losses)) / np.abs(one.step_losses))
    print(f"1x100 vs {W}x{100 // W}: max relative loss difference over 10 steps {rel:.1e}")
    print(f"parameter digests agree across ranks: {len(set(many.digests)) == 1}")

    # every gradient tensor of every variational layer is reduced each step
    print(f"gradient tensors reduced per step: {many.reductions_per_step:.0f}")
    for op, row in many.comm_tables[0].items():
        if row["count"]:
            print(f"  rank 0 {op:15s} calls {row['count']:5d}  avg {row['avg_bytes'] / 1024:9.1f} KB  "
                  f"{row['cumulative_seconds']:.3f}s")

    # a rank that never submits a tensor is named instead of hanging the job
    def forgetful(eng):
        if eng.rank == 0:
            try:
                eng.allreduce("only-rank-0", np.ones(3, np.float32))
            except C.StallError as exc:
                return str(exc)
    print(C.run_ranks(2, forgetful, config=C.CommConfig(cycle_ms=1, timeout_ms=300))[0])


if __name__ == "__main__":
    main()
