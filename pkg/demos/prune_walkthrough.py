"""Train (or reuse) BNN-FC, look at its SNR distribution, prune, and time the sparse path.

    python demos/prune_walkthrough.py --epochs 23
"""
import argparse
import logging

import numpy as np

from bnnkit import inference as I
from bnnkit import modelio as M
from bnnkit import prune as P
from bnnkit import recipes as R
from bnnkit.tensor import SeededRng


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--data-dir", default="data/mnist")
    ap.add_argument("--ckpt-dir", default=".acceptance_cache/bnn-fc")
    ap.add_argument("--epochs", type=int, default=23)
    ap.add_argument("-S", type=int, default=10)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    train, _, test = M.mnist_splits(args.data_dir)
    graph, _, _ = R.train_preset("bnn-fc", train, args.ckpt_dir, R.recipe(epochs=args.epochs))

    # how much signal does each weight carry?
    flat, per_layer = P.global_snr(graph)
    print(f"{flat.size} variational weights; SNR percentiles "
          + ", ".join(f"p{q}={np.percentile(flat, q):.2f}" for q in (10, 50, 90, 99)))
    for name, s in per_layer.items():
        print(f"  {name}: median SNR {np.median(s):.2f}")
    _, mask = P.prune_by_threshold(graph, P.DEFAULT_THRESHOLD)
    print(f"default threshold {P.DEFAULT_THRESHOLD} keeps {mask.total} weights")

    # accuracy as ever more low-SNR weights are removed
    for row in P.prune_sweep(graph, test.images, test.labels, [0, 20, 40, 60, 70, 80, 90], args.S, SeededRng(0)):
        print(f"  pruned {row['pct']:>4}%  threshold {row['threshold']:.3f}  accuracy {row['accuracy']:.4f}")

    # at 70% the CSR kernels skip the removed weights entirely
    pruned, _, _ = P.prune_by_fraction(graph, 70)
    dense, t_dense = P.dense_infer(pruned, test.images, 1, SeededRng(1))
    sparse, t_sparse = P.sparse_infer(P.to_sparse(pruned), test.images, 1, SeededRng(1))
    agree = np.mean(dense.samples[0].argmax(1) == sparse.samples[0].argmax(1))
    print(f"70% pruned, S=1: dense {t_dense:.2f}s, sparse {t_sparse:.2f}s "
          f"({t_dense / t_sparse:.2f}x), argmax agreement {agree:.4f}")
    print(f"accuracy of the sparse run: {I.accuracy(sparse, test.labels):.4f}")


if __name__ == "__main__":
    main()
