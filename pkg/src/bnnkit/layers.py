"""Mean-field Gaussian layers with flipout sampling.

Each variational layer owns three variables, named after the convention the
pruning manifests rely on::

    <layer>/kernel                  posterior mean (mu)
    <layer>/un-transformed scale    rho, with sigma = softplus(rho)
    <layer>/bias                    deterministic point estimate

Forward passes draw one Gaussian perturbation per layer per call and decorrelate
it across the batch with per-example sign vectors.  Every forward returns a
cache; :func:`layer_backward` turns the cache and ``dL/dy`` into exact gradients
of the sampled function.
"""
import copy
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T

KERNEL = "kernel"
SCALE = "un-transformed scale"
BIAS = "bias"

VARIATIONAL_KINDS = ("DenseFlipout", "Conv2DFlipout")
LAYER_KINDS = VARIATIONAL_KINDS + ("MaxPool2D", "Flatten", "ReLU")


class UsageError(RuntimeError):
    """An API was called out of sequence (stale cache, unconverted graph, ...)."""


class ParameterError(ValueError):
    """A numeric argument is outside its admissible range."""


def log_sigma(rho):
    """log(softplus(rho)), accurate where softplus underflows."""
    rho = np.asarray(rho)
    safe = np.where(rho < -30, 0.0, rho)
    return np.where(rho < -30, rho, np.log(T.softplus(safe))).astype(rho.dtype, copy=False)


@dataclass
class VariationalParam:
    mu: np.ndarray
    rho: np.ndarray
    name: tuple = (KERNEL, SCALE)

    def __post_init__(self):
        if self.mu.shape != self.rho.shape:
            raise T.DimensionError(f"mu {self.mu.shape} and rho {self.rho.shape} differ")

    def sigma(self):
        return T.softplus(self.rho)


@dataclass
class LayerSpec:
    kind: str
    name: str
    in_units: int = 0
    out_units: int = 0
    kernel_size: tuple = ()
    stride: int = 1
    padding: str = "valid"
    pool: int = 2
    has_bias: bool = True

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    @property
    def variational(self):
        return self.kind in VARIATIONAL_KINDS

    @property
    def kernel_shape(self):
        if self.kind == "DenseFlipout":
            return (self.in_units, self.out_units)
        if self.kind == "Conv2DFlipout":
            kh, kw = self.kernel_size
            return (kh, kw, self.in_units, self.out_units)
        return ()

    def param_count(self):
        if not self.variational:
            return 0
        return 2 * int(np.prod(self.kernel_shape)) + (self.out_units if self.has_bias else 0)


def DenseFlipout(name, in_units, out_units, has_bias=True):
    return LayerSpec("DenseFlipout", name, in_units, out_units, has_bias=has_bias)


def Conv2DFlipout(name, kh, kw, cin, cout, stride=1, padding="valid", has_bias=True):
    return LayerSpec("Conv2DFlipout", name, cin, cout, (kh, kw), stride, padding, has_bias=has_bias)


def MaxPool2D(name, pool=2, stride=None):
    return LayerSpec("MaxPool2D", name, pool=pool, stride=stride or pool)


def Flatten(name="flatten"):
    return LayerSpec("Flatten", name)


def ReLU(name):
    return LayerSpec("ReLU", name)


@dataclass
class ModelGraph:
    """Ordered layers plus their named variables.

    ``masks`` maps a variational layer name to a boolean keep-mask once the
    graph has been pruned; ``sparse`` holds compressed kernels for sparse
    inference (see :mod:`bnnkit.prune`).
    """

    layers: list
    input_shape: tuple
    params: dict = field(default_factory=dict)
    masks: dict = field(default_factory=dict)
    sparse: dict = field(default_factory=dict)
    dtype: type = T.DEFAULT_DTYPE

    def __post_init__(self):
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"layer names must be unique: {names}")
        if not self.params:
            for layer in self.variational_layers():
                self.params[f"{layer.name}/{KERNEL}"] = np.zeros(layer.kernel_shape, self.dtype)
                self.params[f"{layer.name}/{SCALE}"] = np.zeros(layer.kernel_shape, self.dtype)
                if layer.has_bias:
                    self.params[f"{layer.name}/{BIAS}"] = np.zeros(layer.out_units, self.dtype)

    def variational_layers(self):
        return [l for l in self.layers if l.variational]

    def layer(self, name):
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def variational(self, name):
        return VariationalParam(self.params[f"{name}/{KERNEL}"], self.params[f"{name}/{SCALE}"])

    def bias(self, name):
        return self.params.get(f"{name}/{BIAS}")

    def copy(self):
        return copy.deepcopy(self)

    def astype(self, dtype):
        g = self.copy()
        g.dtype = dtype
        g.params = {k: v.astype(dtype) for k, v in g.params.items()}
        return g

    def param_count(self):
        return param_count(self)


def param_count(graph):
    return sum(l.param_count() for l in graph.layers)


def init_params(graph, rng, mu_std=0.1, rho_mean=-9.0, rho_std=0.1):
    """Draw mu ~ N(0, mu_std^2) and rho ~ N(rho_mean, rho_std^2); zero biases."""
    if mu_std <= 0 or rho_std < 0:
        raise ParameterError(f"std must be positive (mu_std={mu_std}, rho_std={rho_std})")
    for i, layer in enumerate(graph.variational_layers()):
        shape = layer.kernel_shape
        r = rng.child(i)
        graph.params[f"{layer.name}/{KERNEL}"] = (mu_std * r.normal(shape, np.float64)).astype(graph.dtype)
        graph.params[f"{layer.name}/{SCALE}"] = (rho_mean + rho_std * r.normal(shape, np.float64)).astype(graph.dtype)
        if layer.has_bias:
            graph.params[f"{layer.name}/{BIAS}"] = np.zeros(layer.out_units, graph.dtype)
    graph.masks.clear()
    graph.sparse.clear()
    return graph


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

def bnn_fc(dtype=T.DEFAULT_DTYPE):
    """Three DenseFlipout layers, 784-256-256-10 (538,122 parameters)."""
    return ModelGraph([
        Flatten("input_flatten"),
        DenseFlipout("den_1", 784, 256), ReLU("relu_1"),
        DenseFlipout("den_2", 256, 256), ReLU("relu_2"),
        DenseFlipout("den_3", 256, 10),
    ], (28, 28, 1), dtype=dtype)


def bnn_conv(filters=256, dtype=T.DEFAULT_DTYPE):
    """Two Conv2DFlipout layers and one DenseFlipout head.

    Geometry: 5x5/2 conv (28->12), 2x2 max-pool (12->6), 5x5/1 conv (6->2),
    flatten, dense to 10 classes.
    """
    return ModelGraph([
        Conv2DFlipout("Conv_1", 5, 5, 1, filters, stride=2), ReLU("relu_1"),
        MaxPool2D("Max_I_1", 2),
        Conv2DFlipout("Conv_2", 5, 5, filters, filters), ReLU("relu_2"),
        Flatten("flatten"),
        DenseFlipout("Dense_I_4", 2 * 2 * filters, 10),
    ], (28, 28, 1), dtype=dtype)


def mlp(sizes, input_shape=None, dtype=T.DEFAULT_DTYPE):
    """Small dense network for tests and demos."""
    layers = [Flatten("input_flatten")]
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(DenseFlipout(f"den_{i + 1}", a, b))
        if i < len(sizes) - 2:
            layers.append(ReLU(f"relu_{i + 1}"))
    return ModelGraph(layers, tuple(input_shape or (sizes[0],)), dtype=dtype)


# ---------------------------------------------------------------------------
# KL to the standard normal prior
# ---------------------------------------------------------------------------

def kl_to_standard_normal(p, mask=None):
    """Closed-form KL(q || N(0, 1)) summed over (kept) weights."""
    mu = p.mu.astype(np.float64)
    rho = p.rho.astype(np.float64)
    sigma = T.softplus(rho)
    terms = -log_sigma(rho) + 0.5 * (sigma * sigma + mu * mu - 1.0)
    if mask is not None:
        terms = terms[mask]
    return float(terms.sum())


def kl_grads(p, mask=None):
    """(dKL/dmu, dKL/drho)."""
    sigma = T.softplus(p.rho)
    sig = T.sigmoid(p.rho)
    # d(-log sigma)/drho = -sigmoid(rho)/softplus(rho) -> -1 as rho -> -inf
    ratio = np.where(p.rho < -30, 1.0, sig / np.where(sigma > 0, sigma, 1.0)).astype(p.rho.dtype)
    dmu = p.mu.copy()
    drho = sigma * sig - ratio
    if mask is not None:
        dmu = dmu * mask
        drho = drho * mask
    return dmu, drho


def graph_kl(graph):
    return sum(kl_to_standard_normal(graph.variational(l.name), graph.masks.get(l.name))
               for l in graph.variational_layers())


# ---------------------------------------------------------------------------
# flipout layers
# ---------------------------------------------------------------------------

class FlipoutCache:
    __slots__ = ("kind", "x_shape", "inputs", "signed", "s", "r", "eps", "mu", "rho",
                 "delta", "mask", "geometry", "consumed")

    def __init__(self, **kw):
        self.consumed = False
        for k in self.__slots__:
            if k != "consumed":
                setattr(self, k, kw.get(k))


def _draw_noise(rng, shape, mask, dtype):
    eps_rng = rng.child(0)
    if mask is None:
        return eps_rng.normal(shape, dtype)
    eps = np.zeros(shape, dtype)
    eps[mask] = eps_rng.normal(int(mask.sum()), dtype)
    return eps


def _draw_signs(rng, stream, batch, width, dtype, rows):
    r = rng.child(stream)
    if rows is None:
        return r.sign((batch, width), dtype)
    idx, total = rows
    idx = np.asarray(idx)
    if idx.size and np.array_equal(idx, np.arange(idx[0], idx[0] + idx.size)):
        # sign rows occupy whole Philox blocks, so a contiguous slice can be skipped to
        r.skip(int(idx[0]) * r.sign_words(width))
        return r.sign((idx.size, width), dtype)
    return r.sign((total, width), dtype)[idx]


def dense_flipout_forward(x, p, bias, rng, mask=None, rows=None, sample=True):
    """y_n = x_n mu + ((x_n * s_n) dW) * r_n + bias, with dW = sigma * eps.

    ``rows=(indices, total)`` selects sign rows out of a larger logical batch so
    that a shard of a batch sees exactly the signs the full batch would.
    ``sample=False`` evaluates the mean-weight network.
    """
    if x.ndim != 2 or x.shape[1] != p.mu.shape[0]:
        raise T.DimensionError(f"dense_flipout: shape mismatch {x.shape} vs kernel {p.mu.shape}")
    mu = p.mu if mask is None else p.mu * mask
    y = x @ mu
    cache = FlipoutCache(kind="DenseFlipout", x_shape=x.shape, inputs=x, mu=mu, rho=p.rho, mask=mask)
    if sample:
        dtype = x.dtype
        eps = _draw_noise(rng, p.mu.shape, mask, dtype)
        delta = p.sigma() * eps
        s = _draw_signs(rng, 1, x.shape[0], p.mu.shape[0], dtype, rows)
        r = _draw_signs(rng, 2, x.shape[0], p.mu.shape[1], dtype, rows)
        signed = x * s
        y = y + (signed @ delta) * r
        cache.eps, cache.delta, cache.s, cache.r, cache.signed = eps, delta, s, r, signed
    if bias is not None:
        y = T.add_bias(y, bias)
    return y, cache


def conv2d_flipout_forward(x, p, bias, rng, stride=1, padding="valid", mask=None, rows=None, sample=True):
    """Convolutional flipout; sign vectors act per input and per output channel."""
    kh, kw, cin, cout = p.mu.shape
    if x.ndim != 4 or x.shape[3] != cin:
        raise T.DimensionError(f"conv2d_flipout: shape mismatch {x.shape} vs kernel {p.mu.shape}")
    mu = p.mu if mask is None else p.mu * mask
    cols = T.im2col(x, kh, kw, stride, padding)
    k = kh * kw * cin
    y = cols @ mu.reshape(k, cout)
    cache = FlipoutCache(kind="Conv2DFlipout", x_shape=x.shape, inputs=cols, mu=mu, rho=p.rho,
                         mask=mask, geometry=(stride, padding))
    if sample:
        dtype = x.dtype
        B = x.shape[0]
        eps = _draw_noise(rng, p.mu.shape, mask, dtype)
        delta = p.sigma() * eps
        s = _draw_signs(rng, 1, B, cin, dtype, rows)
        r = _draw_signs(rng, 2, B, cout, dtype, rows)
        signed = (cols.reshape(B, -1, cin) * s[:, None, :]).reshape(cols.shape)
        y = y + (signed @ delta.reshape(k, cout)) * r[:, None, None, :]
        cache.eps, cache.delta, cache.s, cache.r, cache.signed = eps, delta, s, r, signed
    if bias is not None:
        y = T.add_bias(y, bias)
    return y, cache


def layer_backward(cache, dy, need_input_grad=True):
    """Gradients (dx, dmu, drho, dbias) of the sampled forward function."""
    if cache is None or not isinstance(cache, FlipoutCache):
        raise UsageError("layer_backward needs the cache returned by a flipout forward call")
    if cache.consumed:
        raise UsageError("cache already consumed by an earlier backward call")
    cache.consumed = True
    sampled = cache.eps is not None
    dbias = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    if cache.kind == "DenseFlipout":
        x = cache.inputs
        dmu = x.T @ dy
        dx = dy @ cache.mu.T if need_input_grad else None
        drho = np.zeros_like(cache.rho)
        if sampled:
            g2 = dy * cache.r
            ddelta = cache.signed.T @ g2
            drho = ddelta * cache.eps * T.sigmoid(cache.rho)
            if need_input_grad:
                dx = dx + (g2 @ cache.delta.T) * cache.s
    else:
        cols = cache.inputs
        kshape = cache.mu.shape
        kh, kw, cin, cout = kshape
        k = kh * kw * cin
        stride, padding = cache.geometry
        dmu = T.conv2d_grad_kernel(cols, dy, kshape)
        dcols = dy @ cache.mu.reshape(k, cout).T if need_input_grad else None
        drho = np.zeros_like(cache.rho)
        if sampled:
            g2 = dy * cache.r[:, None, None, :]
            ddelta = T.conv2d_grad_kernel(cache.signed, g2, kshape)
            drho = ddelta * cache.eps * T.sigmoid(cache.rho)
            if need_input_grad:
                B = dy.shape[0]
                back = (g2 @ cache.delta.reshape(k, cout).T).reshape(B, -1, cin) * cache.s[:, None, :]
                dcols = dcols + back.reshape(dcols.shape)
        dx = T.col2im(dcols, cache.x_shape, kh, kw, stride, padding) if need_input_grad else None
    if cache.mask is not None:
        dmu = dmu * cache.mask
        drho = drho * cache.mask
    return dx, dmu, drho, dbias


# ---------------------------------------------------------------------------
# whole-graph passes
# ---------------------------------------------------------------------------

def forward(graph, x, rng=None, sample=True, rows=None):
    """Run the graph on a batch.  Returns (logits, caches).

    Layer ``i`` of the variational layers draws its noise from ``rng.child(i)``.
    """
    if sample and rng is None:
        raise UsageError("sampling forward pass needs an rng")
    h = x.reshape((x.shape[0],) + tuple(graph.input_shape)).astype(graph.dtype, copy=False)
    caches = []
    vi = 0
    for layer in graph.layers:
        kind = layer.kind
        if kind in VARIATIONAL_KINDS:
            p = graph.variational(layer.name)
            mask = graph.masks.get(layer.name)
            lrng = rng.child(vi) if sample else None
            if layer.name in graph.sparse:
                from .prune import sparse_dense_forward
                h, c = sparse_dense_forward(h, graph.sparse[layer.name], graph.bias(layer.name), lrng,
                                            rows=rows, sample=sample)
            elif kind == "DenseFlipout":
                h, c = dense_flipout_forward(h, p, graph.bias(layer.name), lrng, mask, rows, sample)
            else:
                h, c = conv2d_flipout_forward(h, p, graph.bias(layer.name), lrng, layer.stride,
                                              layer.padding, mask, rows, sample)
            vi += 1
        elif kind == "ReLU":
            c = h > 0
            h = h * c
        elif kind == "Flatten":
            c = h.shape
            h = h.reshape(h.shape[0], -1)
        else:
            c = h.shape
            h, idx = T.maxpool2d(h, layer.pool, layer.stride)
            c = (c, idx)
        caches.append(c)
    return h, caches


def backward(graph, caches, dlogits):
    """Backpropagate ``dL/dlogits`` through the graph; returns grads keyed like params."""
    grads = {}
    g = dlogits
    first_var = next(i for i, l in enumerate(graph.layers) if l.variational)
    for i in range(len(graph.layers) - 1, -1, -1):
        layer, c = graph.layers[i], caches[i]
        if layer.variational:
            g, dmu, drho, dbias = layer_backward(c, g, need_input_grad=i > first_var)
            grads[f"{layer.name}/{KERNEL}"] = dmu
            grads[f"{layer.name}/{SCALE}"] = drho
            if layer.has_bias:
                grads[f"{layer.name}/{BIAS}"] = dbias
            if g is None:
                break
        elif layer.kind == "ReLU":
            g = g * c
        elif layer.kind == "Flatten":
            g = g.reshape(c)
        else:
            shape, idx = c
            g = T.maxpool2d_backward(g, idx, shape, layer.pool, layer.stride)
    return grads


def add_kl_grads(graph, grads, scale):
    """grads += scale * dKL/dparams, in place."""
    for layer in graph.variational_layers():
        dmu, drho = kl_grads(graph.variational(layer.name), graph.masks.get(layer.name))
        grads[f"{layer.name}/{KERNEL}"] += (scale * dmu).astype(graph.dtype)
        grads[f"{layer.name}/{SCALE}"] += (scale * drho).astype(graph.dtype)
    return grads
