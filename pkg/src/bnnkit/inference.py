"""Monte-Carlo predictive inference and convergence diagnostics."""
import csv
import time
from dataclasses import dataclass

import numpy as np

from . import layers as L
from . import tensor as T

MC_STREAM = 4
DEFAULT_BATCH = 100


class NoMatchingExamples(LookupError):
    """A histogram filter selected no examples."""


@dataclass
class PredictiveSamples:
    samples: np.ndarray          # S x B x C softmax probabilities
    labels: np.ndarray = None
    runtime: float = 0.0

    @property
    def S(self):
        return self.samples.shape[0]

    def prefix(self, s):
        """The first ``s`` samples (identical to a run with S=s)."""
        return PredictiveSamples(self.samples[:s], self.labels)


def mc_rng(rng, s):
    return rng.child(MC_STREAM, s)


def predict_mc(graph, x, S, rng, labels=None, batch_size=DEFAULT_BATCH):
    """S stochastic forward passes; pass ``s`` draws from stream ``(rng, s)``.

    Because every pass has its own keyed stream, the result for ``S=400`` is an
    exact prefix of the result for ``S=1000``.  Sign rows are addressed by
    example index, so the batch size changes speed but not the result.
    """
    if S < 1:
        raise L.ParameterError(f"S must be >= 1, got {S}")
    n = len(x)
    batch_size = batch_size or n
    out = None
    t0 = time.perf_counter()
    for s in range(S):
        srng = mc_rng(rng, s)
        for i in range(0, n, batch_size):
            rows = None
            if batch_size < n:
                rows = (np.arange(i, min(i + batch_size, n)), n)
            logits, _ = L.forward(graph, x[i:i + batch_size], srng, rows=rows)
            p = T.softmax(logits)
            if out is None:
                out = np.empty((S, n, p.shape[1]), np.float32)
            out[s, i:i + batch_size] = p
    return PredictiveSamples(out, None if labels is None else np.asarray(labels), time.perf_counter() - t0)


def predictive_mean(ps):
    return ps.samples.mean(axis=0)


def predictive_std(ps):
    return ps.samples.std(axis=0)


def accuracy(ps, labels=None):
    labels = ps.labels if labels is None else labels
    if labels is None:
        raise L.UsageError("accuracy needs ground-truth labels")
    return float((predictive_mean(ps).argmax(axis=1) == np.asarray(labels)).mean())


def class_pdf_histogram(ps, class_index, true_class, bins=20, labels=None):
    """Histogram of the softmax value of ``class_index`` over all samples of
    examples whose label is ``true_class``.  Returns (counts, edges) on [0, 1]."""
    if bins < 2:
        raise L.ParameterError("bins must be >= 2")
    labels = ps.labels if labels is None else labels
    if labels is None:
        raise L.UsageError("class_pdf_histogram needs labels")
    sel = np.flatnonzero(np.asarray(labels) == true_class)
    if sel.size == 0:
        raise NoMatchingExamples(f"no examples with label {true_class}")
    values = ps.samples[:, sel, class_index].ravel()
    counts, edges = np.histogram(values, bins=bins, range=(0.0, 1.0))
    return counts, edges


def ks_distance(a, b):
    """Two-sample Kolmogorov-Smirnov statistic sup |F_a - F_b|."""
    a = np.sort(np.asarray(a, np.float64))
    b = np.sort(np.asarray(b, np.float64))
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.abs(fa - fb).max())


def ks_distances(ps_small, ps_large):
    """KS distance per (example, class) between two sample sets -> B x C."""
    _, B, C = ps_small.samples.shape
    if ps_large.samples.shape[1:] != (B, C):
        raise L.UsageError(f"sample sets disagree on (B, C): {ps_small.samples.shape[1:]} "
                           f"vs {ps_large.samples.shape[1:]}")
    out = np.empty((B, C))
    for b in range(B):
        for c in range(C):
            out[b, c] = ks_distance(ps_small.samples[:, b, c], ps_large.samples[:, b, c])
    return out


def mc_convergence(ps_small, ps_large):
    """Max over (example, class) of the KS distance between two MC runs."""
    return float(ks_distances(ps_small, ps_large).max())


def write_summary_csv(path, ps):
    mean, std = predictive_mean(ps), predictive_std(ps)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["example_id", "class", "mean", "std"])
        for b in range(mean.shape[0]):
            for c in range(mean.shape[1]):
                w.writerow([b, c, f"{mean[b, c]:.8g}", f"{std[b, c]:.8g}"])


def write_histograms_csv(path, ps, bins=20):
    """Per-class pdf histograms (softmax of class X where the true class is X)."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "bin_lo", "bin_hi", "count"])
        for c in range(ps.samples.shape[2]):
            try:
                counts, edges = class_pdf_histogram(ps, c, c, bins)
            except NoMatchingExamples:
                continue
            for k, n in enumerate(counts):
                w.writerow([c, f"{edges[k]:.4f}", f"{edges[k + 1]:.4f}", int(n)])
