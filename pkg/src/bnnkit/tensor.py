"""Dense numeric substrate: shape-checked kernels and a counter-based RNG.

Tensors are plain row-major ``numpy.ndarray`` objects.  float32 is the working
precision; float64 is used for verification runs (finite differences etc.).
Every kernel validates shapes before touching data and raises
:class:`DimensionError` naming the offending shapes.
"""
import hashlib
import struct

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested kernel."""


def _shape(a):
    return "x".join(str(d) for d in np.shape(a)) or "scalar"


def _check_same(a, b, op):
    if np.shape(a) != np.shape(b):
        raise DimensionError(f"{op}: shape mismatch {_shape(a)} vs {_shape(b)}")


# ---------------------------------------------------------------------------
# counter-based random streams
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1
_TWO_PI = 2.0 * np.pi


def mix_stream(stream, *ids):
    """Derive a child stream id from a parent id and a path of integers."""
    h = hashlib.blake2b(digest_size=8)
    h.update(struct.pack("<Q", stream & _MASK64))
    for i in ids:
        h.update(struct.pack("<q", int(i)))
    return struct.unpack("<Q", h.digest())[0]


class SeededRng:
    """Philox-4x64 stream keyed by ``(seed, stream)``.

    Output is consumed in whole Philox blocks (4 x uint64), so the complete
    state is the block counter and a stream can be restored or skipped ahead
    exactly.  Normals use Box-Muller on 53-bit uniforms; signs use one raw bit
    each.  Both are platform independent.

    >>> a = SeededRng(1, 2).normal(4)
    >>> b = SeededRng(1, 2).normal(4)
    >>> bool((a == b).all())
    True
    """

    def __init__(self, seed, stream=0, counter=0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self._bitgen = np.random.Philox(key=self.seed | (self.stream << 64), counter=int(counter))
        self.counter = int(counter)

    def child(self, *ids):
        """Independent stream for a sub-task (layer index, worker rank, ...)."""
        return SeededRng(self.seed, mix_stream(self.stream, *ids))

    def state(self):
        return {"seed": self.seed, "stream": self.stream, "counter": self.counter}

    @classmethod
    def from_state(cls, state):
        return cls(state["seed"], state["stream"], state["counter"])

    def raw(self, n):
        """``n`` raw 64-bit words; always advances by a whole number of blocks."""
        blocks = -(-int(n) // 4)
        out = self._bitgen.random_raw(blocks * 4)
        self.counter += blocks
        return out[:n]

    def skip(self, n_words):
        blocks = -(-int(n_words) // 4)
        self._bitgen.advance(blocks)
        self.counter += blocks

    def uniform(self, shape):
        """Uniform doubles in [0, 1)."""
        n = int(np.prod(shape, dtype=np.int64))
        return ((self.raw(n) >> np.uint64(11)) * (1.0 / 9007199254740992.0)).reshape(shape)

    def normal(self, shape, dtype=DEFAULT_DTYPE):
        n = int(np.prod(shape, dtype=np.int64))
        half = -(-n // 2)
        u = ((self.raw(2 * half) >> np.uint64(11)) * (1.0 / 9007199254740992.0)).reshape(2, half)
        radius = np.sqrt(-2.0 * np.log1p(-u[0]))
        angle = _TWO_PI * u[1]
        z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])
        return z[:n].astype(dtype, copy=False).reshape(shape)

    @staticmethod
    def sign_words(cols):
        """Raw words consumed per row of a sign draw with ``cols`` columns."""
        return -(-cols // 256) * 4

    def sign(self, shape, dtype=DEFAULT_DTYPE):
        """Uniform draws from {-1, +1}.

        The last axis is padded to whole blocks (256 bits) per row so that row
        ``i`` of a large draw equals row ``i`` of any smaller prefix draw.
        """
        shape = tuple(shape) if np.ndim(shape) else (int(shape),)
        cols = shape[-1] if shape else 1
        rows = int(np.prod(shape[:-1], dtype=np.int64)) if len(shape) > 1 else 1
        words = self.sign_words(cols)
        bits = np.unpackbits(self.raw(rows * words).view(np.uint8).reshape(rows, words * 8), axis=1,
                             bitorder="little")[:, :cols]
        return (bits.astype(dtype) * 2 - 1).reshape(shape)


def sample_normal(rng, shape, dtype=DEFAULT_DTYPE):
    return rng.normal(shape, dtype)


def sample_sign(rng, shape, dtype=DEFAULT_DTYPE):
    return rng.sign(shape, dtype)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    _check_same(a, b, "add")
    return a + b


def mul(a, b):
    _check_same(a, b, "mul")
    return a * b


def add_bias(x, bias):
    """Broadcast a bias vector over the last axis (the only broadcast supported)."""
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise DimensionError(f"add_bias: shape mismatch {_shape(x)} vs {_shape(bias)}")
    return x + bias


def softplus(x):
    return np.logaddexp(0.0, x).astype(np.result_type(x), copy=False)


def sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def absolute(x):
    return np.abs(x)


def relu(x):
    return np.maximum(x, 0)


def log_softmax(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shape mismatch {_shape(a)} vs {_shape(b)}")
    return a @ b


def conv_output_size(size, k, stride, padding):
    if padding == "valid":
        pad = 0
    elif padding == "same":
        out = -(-size // stride)
        pad = max((out - 1) * stride + k - size, 0)
    else:
        raise ValueError(f"padding must be 'valid' or 'same', got {padding!r}")
    if size + pad < k:
        raise DimensionError(f"conv: kernel {k} larger than padded input {size + pad}")
    return (size + pad - k) // stride + 1, pad


def _pad_input(x, kh, kw, stride, padding):
    oh, ph = conv_output_size(x.shape[1], kh, stride, padding)
    ow, pw = conv_output_size(x.shape[2], kw, stride, padding)
    if ph or pw:
        x = np.pad(x, ((0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2), (0, 0)))
    return x, oh, ow, (ph // 2, pw // 2)


def im2col(x, kh, kw, stride=1, padding="valid"):
    """Patches of ``x`` [B,H,W,C] as a [B, H', W', kh*kw*C] array (kh, kw, C order)."""
    if x.ndim != 4:
        raise DimensionError(f"im2col: expected BxHxWxC input, got {_shape(x)}")
    xp, oh, ow, _ = _pad_input(x, kh, kw, stride, padding)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :oh, :ow]
    # win: B, oh, ow, C, kh, kw
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(x.shape[0], oh, ow, kh * kw * x.shape[3])


def col2im(cols, x_shape, kh, kw, stride=1, padding="valid"):
    """Adjoint of :func:`im2col`: scatter-add patch gradients back to input layout."""
    B, H, W, C = x_shape
    oh, ph = conv_output_size(H, kh, stride, padding)
    ow, pw = conv_output_size(W, kw, stride, padding)
    dxp = np.zeros((B, H + ph, W + pw, C), dtype=cols.dtype)
    c = cols.reshape(B, oh, ow, kh, kw, C)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride, :] += c[:, :, :, i, j, :]
    return dxp[:, ph // 2:ph // 2 + H, pw // 2:pw // 2 + W, :]


def conv2d(x, kernel, stride=1, padding="valid"):
    """Cross-correlation of x [B,H,W,Cin] with kernel [kh,kw,Cin,Cout]."""
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[3] != kernel.shape[2]:
        raise DimensionError(f"conv2d: shape mismatch {_shape(x)} vs {_shape(kernel)}")
    kh, kw, cin, cout = kernel.shape
    cols = im2col(x, kh, kw, stride, padding)
    return cols @ kernel.reshape(kh * kw * cin, cout)


def conv2d_grad_kernel(cols, grad_out, kernel_shape):
    """dL/dkernel from cached patches [B,H',W',K] and dL/dy [B,H',W',Cout]."""
    k = cols.shape[-1]
    g = grad_out.reshape(-1, grad_out.shape[-1])
    return (cols.reshape(-1, k).T @ g).reshape(kernel_shape)


def conv2d_grad_input(grad_out, kernel, x_shape, stride=1, padding="valid"):
    kh, kw, cin, cout = kernel.shape
    dcols = grad_out @ kernel.reshape(kh * kw * cin, cout).T
    return col2im(dcols, x_shape, kh, kw, stride, padding)


def maxpool2d(x, window=2, stride=None):
    """Max pooling (valid padding).  Returns the pooled tensor and argmax indices."""
    stride = stride or window
    if x.ndim != 4 or x.shape[1] < window or x.shape[2] < window:
        raise DimensionError(f"maxpool2d: window {window} does not fit input {_shape(x)}")
    win = sliding_window_view(x, (window, window), axis=(1, 2))[:, ::stride, ::stride]
    B, oh, ow, C = win.shape[:4]
    flat = win.reshape(B, oh, ow, C, window * window)
    idx = flat.argmax(axis=-1)
    return np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0], idx


def maxpool2d_backward(grad_out, idx, x_shape, window=2, stride=None):
    stride = stride or window
    B, oh, ow, C = grad_out.shape
    dx = np.zeros(x_shape, dtype=grad_out.dtype)
    di, dj = np.divmod(idx, window)
    bb, yy, xx, cc = np.indices((B, oh, ow, C), sparse=True)
    target = (bb, yy * stride + di, xx * stride + dj, cc)
    if stride >= window:
        dx[target] = grad_out  # windows are disjoint
    else:
        np.add.at(dx, target, grad_out)
    return dx
