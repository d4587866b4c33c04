"""Predictive distributions of a trained BNN-FC and how many MC samples they need.

Reuses the checkpoint written by prune_walkthrough.py.
"""
import argparse

import numpy as np

from bnnkit import inference as I
from bnnkit import modelio as M
from bnnkit.tensor import SeededRng


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--data-dir", default="data/mnist")
    ap.add_argument("--ckpt-dir", default=".acceptance_cache/bnn-fc")
    ap.add_argument("--examples", type=int, default=50)
    args = ap.parse_args()

    _, _, test = M.mnist_splits(args.data_dir)
    graph = M.load_checkpoint(M.latest_checkpoint(args.ckpt_dir)).graph
    x, y = test.images[:args.examples], test.labels[:args.examples]

    ps = I.predict_mc(graph, x, 1000, SeededRng(0), y)
    mean, std = I.predictive_mean(ps), I.predictive_std(ps)
    pred = mean.argmax(1)
    print(f"S=1000 over {len(y)} test images: accuracy {I.accuracy(ps):.3f} in {ps.runtime:.1f}s")
    shaky = np.argsort(-std[np.arange(len(y)), pred])[:5]
    for i in shaky:
        print(f"  example {i}: label {y[i]}, predicted {pred[i]} "
              f"p={mean[i, pred[i]]:.3f} +/- {std[i, pred[i]]:.3f}")

    # the first s samples are exactly what a run with S=s would produce
    for s in (10, 100, 400):
        ks = I.ks_distances(ps.prefix(s), ps)
        print(f"S={s:4d}: median KS distance to S=1000 {np.median(ks):.3f}, max {ks.max():.3f}")

    counts, edges = I.class_pdf_histogram(ps, 7, 7, bins=10)
    print("softmax of class 7 on images of a 7:")
    for k, n in enumerate(counts):
        print(f"  [{edges[k]:.1f}, {edges[k + 1]:.1f})  {'#' * int(60 * n / counts.max())}")


if __name__ == "__main__":
    main()
