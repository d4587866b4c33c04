"""Small synthetic problems shared by several test modules."""
import numpy as np

from bnnkit import layers as L
from bnnkit.modelio import Dataset
from bnnkit.tensor import SeededRng


def blobs(n=200, d=6, classes=3, seed=0, dtype=np.float32):
    """Well-separated Gaussian clusters as a flat-feature Dataset."""
    r = np.random.default_rng(seed)
    centers = r.normal(0, 3, size=(classes, d))
    y = r.integers(0, classes, n)
    x = centers[y] + r.normal(size=(n, d))
    return Dataset(x.astype(dtype), y.astype(np.int64), "train")


def tiny_mlp(sizes=(6, 5, 3), seed=0, dtype=np.float64, rho_mean=-3.0):
    g = L.mlp(list(sizes), dtype=dtype)
    return L.init_params(g, SeededRng(seed), mu_std=0.5, rho_mean=rho_mean, rho_std=0.3)


def tiny_conv(seed=0, dtype=np.float64, rho_mean=-3.0):
    g = L.ModelGraph([
        L.Conv2DFlipout("c1", 3, 3, 1, 2, stride=1), L.ReLU("r1"),
        L.MaxPool2D("p1", 2),
        L.Conv2DFlipout("c2", 2, 2, 2, 2, stride=1, padding="same"), L.ReLU("r2"),
        L.Flatten("flat"),
        L.DenseFlipout("out", 2 * 2 * 2, 3),
    ], (6, 6, 1), dtype=dtype)
    return L.init_params(g, SeededRng(seed), mu_std=0.5, rho_mean=rho_mean, rho_std=0.3)


def finite_difference_check(loss, graph, grads, e=1e-6):
    """Max relative error between ``grads`` and central differences of ``loss()``."""
    worst = 0.0
    for name, w in graph.params.items():
        fd = np.zeros_like(w)
        for i in np.ndindex(w.shape):
            old = w[i]
            w[i] = old + e
            up = loss()
            w[i] = old - e
            down = loss()
            w[i] = old
            fd[i] = (up - down) / (2 * e)
        err = np.abs(grads[name] - fd).max() / max(np.abs(fd).max(), 1e-12)
        worst = max(worst, err)
    return worst


# acceptance bookkeeping: (criterion number, line), printed at the end of the session
ACCEPTANCE_LINES = []


class Criterion:
    """Collects named checks; a failed check does not stop the remaining ones."""

    def __init__(self, number, title):
        self.number, self.title = number, title
        self.notes, self.failed = [], []

    def note(self, text):
        self.notes.append(text)

    def check(self, label, ok, info=""):
        self.notes.append(f"{label}={'ok' if ok else 'NO'}{' (' + info + ')' if info else ''}")
        if not ok:
            self.failed.append(label)

    def __enter__(self):
        return self

    def __exit__(self, kind, exc, tb):
        if exc is not None:
            self.failed.append(f"{kind.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}")
        status = "FAIL" if self.failed else "PASS"
        line = f"criterion {self.number:2d} {status}: {self.title} | " + "; ".join(self.notes)
        if exc is not None:
            line += f" | error {self.failed[-1]}"
        ACCEPTANCE_LINES.append((self.number, line))
        print(line)
        if exc is None and self.failed:
            raise AssertionError(f"criterion {self.number} failed checks: {', '.join(self.failed)}")
        return False
