"""Signal-to-noise pruning of trained variational networks.

A weight's SNR is ``|mu| / sigma``.  Pruning zeroes the mean of every weight
below a threshold and removes it from sampling altogether: pruned positions
draw no noise, and dense layers can be converted to compressed-sparse-row
kernels so the removed work is actually skipped at inference time.

PruneReport binary layout (little-endian)::

    b"BPRN"  u32 version
    u32 n_sections, then per section:
        u8 name length, name bytes, u8 kind (0 f32, 1 u32, 2 u64, 3 f64),
        u32 ndim, ndim x u64 dims, raw data
"""
import csv
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import inference as I
from . import layers as L
from . import tensor as T

DEFAULT_THRESHOLD = 10.0
REPORT_MAGIC = b"BPRN"
REPORT_VERSION = 1


# ---------------------------------------------------------------------------
# SNR and masks
# ---------------------------------------------------------------------------

def snr(p):
    return np.abs(p.mu) / p.sigma()


def global_snr(graph):
    """Concatenated per-layer SNR in layer order, plus the per-layer arrays.

    Already-pruned weights report SNR 0.
    """
    per_layer = {}
    for layer in graph.variational_layers():
        s = snr(graph.variational(layer.name))
        mask = graph.masks.get(layer.name)
        if mask is not None:
            s = np.where(mask, s, 0)
        per_layer[layer.name] = s
    flat = np.concatenate([s.ravel() for s in per_layer.values()]) if per_layer else np.zeros(0)
    return flat, per_layer


@dataclass
class PruneMask:
    masks: dict              # layer name -> bool array, True = kept
    threshold: float
    nnz: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.nnz:
            self.nnz = {k: int(m.sum()) for k, m in self.masks.items()}

    @property
    def total(self):
        return sum(self.nnz.values())

    @property
    def size(self):
        return sum(m.size for m in self.masks.values())

    @property
    def sparsity(self):
        return 1.0 - self.total / max(self.size, 1)


def apply_masks(graph, masks):
    """Copy of ``graph`` with ``masks`` (combined with any existing ones) applied."""
    g = graph.copy()
    g.sparse.clear()
    for name, keep in masks.items():
        old = g.masks.get(name)
        keep = keep if old is None else keep & old
        g.masks[name] = keep
        mu = g.params[f"{name}/{L.KERNEL}"]
        mu[~keep] = 0
    return g


def prune_by_threshold(graph, threshold=DEFAULT_THRESHOLD):
    """Prune weights with SNR < threshold.  Biases are untouched."""
    if threshold < 0:
        raise L.ParameterError("threshold must be >= 0")
    _, per_layer = global_snr(graph)
    masks = {name: s >= threshold for name, s in per_layer.items()}
    pruned = apply_masks(graph, masks)
    return pruned, PruneMask(dict(pruned.masks), float(threshold))


def prune_by_fraction(graph, pct):
    """Prune the ``pct`` percent of variational weights with the lowest SNR.

    Ties are broken by keeping the lower-index weight.  Returns
    (pruned graph, mask, implied threshold).
    """
    if not 0 <= pct <= 100:
        raise L.ParameterError(f"pct must lie in [0, 100], got {pct}")
    flat, per_layer = global_snr(graph)
    n = flat.size
    k = int(round(pct / 100.0 * n))
    order = np.lexsort((-np.arange(n), flat))   # ascending SNR, higher index first among ties
    keep_flat = np.ones(n, bool)
    keep_flat[order[:k]] = False
    if k == 0:
        threshold = 0.0
    elif k == n:
        threshold = float("inf")
    else:
        threshold = 0.5 * (float(flat[order[k - 1]]) + float(flat[order[k]]))
    masks, offset = {}, 0
    for name, s in per_layer.items():
        masks[name] = keep_flat[offset:offset + s.size].reshape(s.shape)
        offset += s.size
    pruned = apply_masks(graph, masks)
    return pruned, PruneMask(dict(pruned.masks), threshold), threshold


# ---------------------------------------------------------------------------
# compressed sparse row kernels
# ---------------------------------------------------------------------------

@dataclass
class SparseKernel:
    """CSR form of a pruned dense kernel (rows = inputs, columns = outputs).

    ``mu`` and ``sigma`` share the sparsity pattern.  Values are stored in
    row-major order of the kept positions, the same order in which the masked
    dense layer assigns its noise draws, so both paths sample identical
    weights.
    """

    shape: tuple
    indptr: np.ndarray
    indices: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray

    @property
    def nnz(self):
        return int(self.indptr[-1])

    @classmethod
    def from_dense(cls, mu, sigma, mask):
        rows, cols = np.nonzero(mask)
        indptr = np.zeros(mask.shape[0] + 1, np.int64)
        np.cumsum(np.bincount(rows, minlength=mask.shape[0]), out=indptr[1:])
        return cls(mask.shape, indptr, cols.astype(np.int32), mu[rows, cols].copy(), sigma[rows, cols].copy())

    def to_dense(self, values=None):
        values = self.mu if values is None else values
        out = np.zeros(self.shape, values.dtype)
        rows = np.repeat(np.arange(self.shape[0]), np.diff(self.indptr))
        out[rows, self.indices] = values
        return out

    def active_rows(self):
        return np.flatnonzero(np.diff(self.indptr))

    def active_cols(self):
        return np.unique(self.indices)

    def compact(self):
        """Row/column compaction: (rows, cols, local row idx, local col idx, mu block).

        Inputs whose kernel row is empty and outputs whose column is empty are
        dropped, leaving a smaller block that holds every stored weight.
        """
        if getattr(self, "_compact", None) is None:
            rows, cols = self.active_rows(), self.active_cols()
            lr = np.repeat(np.arange(rows.size), np.diff(self.indptr)[rows])
            lc = np.searchsorted(cols, self.indices)
            block = np.zeros((rows.size, cols.size), self.mu.dtype)
            block[lr, lc] = self.mu
            self._compact = (rows, cols, lr, lc, block)
        return self._compact

    def block(self, values):
        rows, cols, lr, lc, _ = self.compact()
        out = np.zeros((rows.size, cols.size), values.dtype)
        out[lr, lc] = values
        return out


def csr_matmul(x, sk, values=None):
    """``x @ W`` for a CSR kernel ``W`` (stored mu, or the given nonzero values)."""
    rows, cols, _, _, mu_block = sk.compact()
    if rows.size == 0:
        return np.zeros((x.shape[0], sk.shape[1]), x.dtype)
    block = mu_block if values is None else sk.block(values)
    return _expand_cols(x[:, rows] @ block, cols, sk.shape[1])


def _expand_cols(yc, cols, n_out):
    if cols.size == n_out:
        return yc
    y = np.zeros((yc.shape[0], n_out), yc.dtype)
    y[:, cols] = yc
    return y


def sparse_dense_forward(x, sk, bias, rng, rows=None, sample=True):
    """Flipout dense layer evaluated from a :class:`SparseKernel`.

    Only inputs with a stored weight and outputs with a stored weight take part
    in the products; noise is drawn for stored weights only.
    """
    if x.ndim != 2 or x.shape[1] != sk.shape[0]:
        raise T.DimensionError(f"sparse dense: shape mismatch {x.shape} vs kernel {sk.shape}")
    act_rows, cols, _, _, mu_block = sk.compact()
    if act_rows.size == 0:
        y = np.zeros((x.shape[0], sk.shape[1]), x.dtype)
    else:
        xr = x[:, act_rows]
        yc = xr @ mu_block
        if sample:
            dtype = x.dtype
            eps = rng.child(0).normal(sk.nnz, dtype)
            s = L._draw_signs(rng, 1, x.shape[0], sk.shape[0], dtype, rows)
            r = L._draw_signs(rng, 2, x.shape[0], sk.shape[1], dtype, rows)
            if cols.size < sk.shape[1]:
                r = r[:, cols]
            yc += ((xr * s[:, act_rows]) @ sk.block(sk.sigma * eps)) * r
        y = _expand_cols(yc, cols, sk.shape[1])
    if bias is not None:
        y = T.add_bias(y, bias)
    return y, None


def to_sparse(graph):
    """Copy of a pruned graph whose dense-flipout layers carry CSR kernels."""
    g = graph.copy()
    g.sparse = {}
    for layer in g.variational_layers():
        if layer.kind != "DenseFlipout":
            continue
        p = g.variational(layer.name)
        mask = g.masks.get(layer.name)
        if mask is None:
            mask = np.ones(p.mu.shape, bool)
        g.sparse[layer.name] = SparseKernel.from_dense(p.mu, p.sigma(), mask)
    return g


def sparse_infer(graph, x, S, rng, labels=None, batch_size=I.DEFAULT_BATCH):
    """MC inference through the sparse kernels.  Returns (PredictiveSamples, seconds)."""
    dense_layers = [l.name for l in graph.variational_layers() if l.kind == "DenseFlipout"]
    missing = [n for n in dense_layers if n not in graph.sparse]
    if missing:
        raise L.UsageError(f"graph has no sparse kernels for {missing}; call to_sparse first")
    ps = I.predict_mc(graph, x, S, rng, labels, batch_size)
    return ps, ps.runtime


def dense_infer(graph, x, S, rng, labels=None, batch_size=I.DEFAULT_BATCH):
    g = graph
    if graph.sparse:
        g = graph.copy()
        g.sparse = {}
    ps = I.predict_mc(g, x, S, rng, labels, batch_size)
    return ps, ps.runtime


# ---------------------------------------------------------------------------
# reports and sweeps
# ---------------------------------------------------------------------------

@dataclass
class PruneReport:
    samples: np.ndarray          # test inputs used, f32
    labels: np.ndarray           # u32
    nnz_total: int
    nnz_per_layer: dict          # layer name -> count
    predictive: np.ndarray       # S x B x C f32
    runtime: float
    threshold: float = DEFAULT_THRESHOLD

    def __eq__(self, other):
        return (isinstance(other, PruneReport)
                and np.array_equal(self.samples, other.samples)
                and np.array_equal(self.labels, other.labels)
                and self.nnz_total == other.nnz_total
                and self.nnz_per_layer == other.nnz_per_layer
                and np.array_equal(self.predictive, other.predictive)
                and self.runtime == other.runtime
                and self.threshold == other.threshold)


_KINDS = {0: "<f4", 1: "<u4", 2: "<u8", 3: "<f8"}


def _section(name, kind, arr):
    arr = np.ascontiguousarray(arr, _KINDS[kind])
    nb = name.encode()
    return (struct.pack("<B", len(nb)) + nb + struct.pack("<BI", kind, arr.ndim)
            + struct.pack(f"<{arr.ndim}Q", *arr.shape) + arr.tobytes())


def write_report(path, report):
    layer_names = "\n".join(report.nnz_per_layer).encode()
    sections = [
        _section("samples", 0, report.samples),
        _section("labels", 1, report.labels),
        _section("nnz_total", 2, np.array([report.nnz_total])),
        _section("nnz_per_layer", 2, np.array(list(report.nnz_per_layer.values()), np.uint64)),
        _section("layer_names", 1, np.frombuffer(layer_names, np.uint8).astype(np.uint32)),
        _section("predictive", 0, report.predictive),
        _section("runtime", 3, np.array([report.runtime])),
        _section("threshold", 3, np.array([report.threshold])),
    ]
    with open(path, "wb") as fh:
        fh.write(REPORT_MAGIC + struct.pack("<II", REPORT_VERSION, len(sections)))
        for s in sections:
            fh.write(s)


def read_report(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != REPORT_MAGIC:
        raise ValueError(f"{path}: not a prune report")
    version, n = struct.unpack_from("<II", buf, 4)
    if version != REPORT_VERSION:
        raise ValueError(f"{path}: report version {version} unsupported")
    pos, sec = 12, {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<B", buf, pos)
        name = buf[pos + 1:pos + 1 + ln].decode()
        pos += 1 + ln
        kind, ndim = struct.unpack_from("<BI", buf, pos)
        pos += 5
        dims = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        dt = np.dtype(_KINDS[kind])
        count = int(np.prod(dims))
        sec[name] = np.frombuffer(buf, dt, count, pos).reshape(dims).astype(dt.newbyteorder("="))
        pos += count * dt.itemsize
    names = bytes(sec["layer_names"].astype(np.uint8)).decode().split("\n") if sec["layer_names"].size else []
    return PruneReport(
        samples=sec["samples"], labels=sec["labels"], nnz_total=int(sec["nnz_total"][0]),
        nnz_per_layer={k: int(v) for k, v in zip(names, sec["nnz_per_layer"])},
        predictive=sec["predictive"], runtime=float(sec["runtime"][0]), threshold=float(sec["threshold"][0]),
    )


def make_report(graph, mask, x, labels, S, rng, sparse=False, batch_size=I.DEFAULT_BATCH):
    if sparse:
        ps, runtime = sparse_infer(to_sparse(graph), x, S, rng, labels, batch_size)
    else:
        ps, runtime = dense_infer(graph, x, S, rng, labels, batch_size)
    nnz = mask.nnz if mask is not None else {l.name: int(np.prod(l.kernel_shape)) for l in graph.variational_layers()}
    return PruneReport(np.asarray(x, np.float32), np.asarray(labels, np.uint32), sum(nnz.values()), dict(nnz),
                       ps.samples, runtime, mask.threshold if mask is not None else 0.0), ps


SWEEP_FIELDS = ("pct", "threshold", "accuracy", "nnz_total", "runtime_s")


def prune_sweep(graph, x, labels, pcts, S, rng, csv_path=None, batch_size=I.DEFAULT_BATCH):
    """Accuracy of the predictive mean after pruning each percentage in ``pcts``."""
    rows = []
    for pct in pcts:
        pruned, mask, thr = prune_by_fraction(graph, pct)
        ps, runtime = dense_infer(pruned, x, S, rng, labels, batch_size)
        rows.append(dict(pct=pct, threshold=thr, accuracy=I.accuracy(ps, labels), nnz_total=mask.total,
                         runtime_s=runtime, nnz_per_layer=dict(mask.nnz)))
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(SWEEP_FIELDS), extrasaction="ignore")
            w.writeheader()
            w.writerows(rows)
    return rows
