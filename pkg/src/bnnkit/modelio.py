"""Checkpoints, LayerNames/OpsNames manifests and IDX dataset ingestion.

Checkpoint byte layout (all integers little-endian)::

    0    4 bytes   magic b"BNNC"
    4    u32       format version
    8    u64       header length H
    16   H bytes   UTF-8 JSON header (topology, blob table, rng state, ...)
    16+H u32       CRC-32 of bytes [0, 16+H)
    ...            blobs, at offsets listed in the header, each with its CRC-32

Loading validates every section before building anything, so a damaged file
raises :class:`IntegrityError` (with the byte offset of the bad section) and
never yields a partially loaded model.
"""
import gzip
import json
import os
import re
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .elbo import OptimizerState

MAGIC = b"BNNC"
VERSION = 1
LAYER_FILE = "LayerNames.txt"
OPS_FILE = "OpsNames.txt"

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IntegrityError(IOError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class VersionError(IOError):
    pass


class ManifestParseError(ValueError):
    def __init__(self, path, lineno, line):
        super().__init__(f"{path}:{lineno}: malformed manifest line {line!r}")
        self.lineno = lineno


class ConsistencyError(ValueError):
    pass


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    graph: L.ModelGraph
    optimizer: OptimizerState = None
    iteration: int = 0
    rng_state: dict = None
    extra: dict = field(default_factory=dict)


def checkpoint_path(directory, iteration):
    return os.path.join(directory, f"model-{iteration}.ckpt")


def _layer_to_dict(layer):
    return dict(kind=layer.kind, name=layer.name, in_units=layer.in_units, out_units=layer.out_units,
                kernel_size=list(layer.kernel_size), stride=layer.stride, padding=layer.padding,
                pool=layer.pool, has_bias=layer.has_bias)


def _layer_from_dict(d):
    d = dict(d)
    d["kernel_size"] = tuple(d["kernel_size"])
    return L.LayerSpec(**d)


def _blob_le(arr):
    arr = np.ascontiguousarray(arr)
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def save_checkpoint(graph, opt, directory, iteration, rng_state=None, extra=None):
    """Write ``model-<iteration>.ckpt`` into ``directory``; returns the path."""
    os.makedirs(directory, exist_ok=True)
    blobs = dict(graph.params)
    for name, mask in graph.masks.items():
        blobs[f"{name}/mask"] = mask.astype(np.uint8)
    opt_meta = None
    if opt is not None:
        opt_meta = dict(kind=opt.kind, lr=opt.lr, beta1=opt.beta1, beta2=opt.beta2, decay=opt.decay,
                        eps=opt.eps, t=opt.t)
        for k, v in opt.m.items():
            blobs[f"opt/m/{k}"] = v
        for k, v in opt.v.items():
            blobs[f"opt/v/{k}"] = v
    table, chunks, offset = [], [], 0
    for name, arr in blobs.items():
        data = _blob_le(arr).tobytes()
        table.append(dict(name=name, dtype=np.dtype(arr.dtype).newbyteorder("<").str,
                          shape=list(arr.shape), offset=offset, nbytes=len(data), crc=zlib.crc32(data)))
        chunks.append(data)
        offset += len(data)
    header = dict(
        layers=[_layer_to_dict(l) for l in graph.layers], input_shape=list(graph.input_shape),
        dtype=np.dtype(graph.dtype).str, param_names=list(graph.params), mask_layers=list(graph.masks),
        iteration=int(iteration), rng_state=rng_state, optimizer=opt_meta, extra=extra or {}, blobs=table,
    )
    hbytes = json.dumps(header, sort_keys=True).encode()
    head = MAGIC + struct.pack("<IQ", VERSION, len(hbytes)) + hbytes
    path = checkpoint_path(directory, iteration)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(head)
        fh.write(struct.pack("<I", zlib.crc32(head)))
        for c in chunks:
            fh.write(c)
    os.replace(tmp, path)
    return path


def load_checkpoint(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise IntegrityError("bad checkpoint magic", 0)
    version, hlen = struct.unpack_from("<IQ", buf, 4)
    if hlen > len(buf) - 20:
        raise IntegrityError(f"header length {hlen} exceeds file size", 8)
    hend = 16 + hlen
    (crc,) = struct.unpack_from("<I", buf, hend)
    if zlib.crc32(buf[:hend]) != crc:
        raise IntegrityError("header checksum mismatch", hend)
    if version != VERSION:
        raise VersionError(f"checkpoint format version {version}, this build reads {VERSION}")
    header = json.loads(buf[16:hend])
    base = hend + 4
    arrays = {}
    for b in header["blobs"]:
        start = base + b["offset"]
        data = buf[start:start + b["nbytes"]]
        if len(data) != b["nbytes"]:
            raise IntegrityError(f"blob {b['name']!r} truncated", start)
        if zlib.crc32(data) != b["crc"]:
            raise IntegrityError(f"blob {b['name']!r} checksum mismatch", start)
        dt = np.dtype(b["dtype"])
        arrays[b["name"]] = np.frombuffer(data, dt).astype(dt.newbyteorder("="), copy=True).reshape(b["shape"])
    dtype = np.dtype(header["dtype"]).type
    graph = L.ModelGraph([_layer_from_dict(d) for d in header["layers"]], tuple(header["input_shape"]),
                         params={k: arrays[k] for k in header["param_names"]}, dtype=dtype)
    for name in header["mask_layers"]:
        graph.masks[name] = arrays[f"{name}/mask"].astype(bool)
    opt = None
    if header["optimizer"] is not None:
        opt = OptimizerState(**header["optimizer"])
        for k, v in arrays.items():
            if k.startswith("opt/m/"):
                opt.m[k[6:]] = v
            elif k.startswith("opt/v/"):
                opt.v[k[6:]] = v
    return Checkpoint(graph, opt, header["iteration"], header["rng_state"], header["extra"])


def latest_checkpoint(directory):
    best = None
    for f in os.listdir(directory):
        m = re.fullmatch(r"model-(\d+)\.ckpt", f)
        if m and (best is None or int(m.group(1)) > best[0]):
            best = (int(m.group(1)), os.path.join(directory, f))
    if best is None:
        raise FileNotFoundError(f"no model-<iteration>.ckpt in {directory}")
    return best[1]


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

DEFAULT_OPS = {
    "input": "input",
    "labels": "labels",
    "output": "logits",
    "sample": "flipout_sample",
    "log_prob": "labels_distribution/log_prob",
    "predictive": "softmax",
    "accuracy": "accuracy",
}


@dataclass
class Manifest:
    layer_names: list   # ordered (layer, variable) pairs
    ops: dict

    def variables(self):
        return [v for _, v in self.layer_names]


def manifest_from_graph(graph):
    entries = []
    for layer in graph.variational_layers():
        entries.append((layer.name, f"{layer.name}/{L.KERNEL}"))
        entries.append((layer.name, f"{layer.name}/{L.SCALE}"))
    for layer in graph.variational_layers():
        if layer.has_bias:
            entries.append((layer.name, f"{layer.name}/{L.BIAS}"))
    return Manifest(entries, dict(DEFAULT_OPS))


def write_manifest(graph, directory):
    os.makedirs(directory, exist_ok=True)
    m = manifest_from_graph(graph)
    with open(os.path.join(directory, LAYER_FILE), "w") as fh:
        fh.writelines(f"{layer}: {var}\n" for layer, var in m.layer_names)
    with open(os.path.join(directory, OPS_FILE), "w") as fh:
        fh.writelines(f"{k}: {v}\n" for k, v in m.ops.items())
    return m


def _parse_pairs(path):
    pairs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            key, sep, value = line.partition(": ")
            if not sep or not key.strip() or not value.strip():
                raise ManifestParseError(path, lineno, line)
            pairs.append((key, value))
    return pairs


def parse_manifest(directory):
    layers = _parse_pairs(os.path.join(directory, LAYER_FILE))
    ops = dict(_parse_pairs(os.path.join(directory, OPS_FILE)))
    return Manifest(layers, ops)


def check_manifest(manifest, graph):
    """Every manifest variable must exist in the graph, and vice versa."""
    names = manifest.variables()
    seen = set()
    for v in names:
        if v in seen:
            raise ConsistencyError(f"variable {v!r} listed twice in {LAYER_FILE}")
        seen.add(v)
        if v not in graph.params:
            raise ConsistencyError(f"variable {v!r} named in {LAYER_FILE} is absent from the checkpoint")
    missing = [k for k in graph.params if k not in seen]
    if missing:
        raise ConsistencyError(f"checkpoint variable {missing[0]!r} is not listed in {LAYER_FILE}")


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    images: np.ndarray   # N x H x W x C, values in [0, 1]
    labels: np.ndarray   # N int64
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise FormatError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx, split=None):
        return Dataset(self.images[idx], self.labels[idx], split or self.split)


def _open(path):
    with open(path, "rb") as fh:
        gz = fh.read(2) == b"\x1f\x8b"
    return gzip.open(path, "rb") if gz else open(path, "rb")


def read_idx(path):
    """Parse an IDX file (optionally gzip-compressed) into (magic, array)."""
    with _open(path) as fh:
        data = fh.read()
    if len(data) < 4:
        raise FormatError(f"{path}: too short for an IDX header")
    magic = struct.unpack(">I", data[:4])[0]
    if magic >> 16 != 0 or (magic >> 8) & 0xFF != 0x08:
        raise FormatError(f"{path}: unsupported IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    dims = struct.unpack(f">{ndim}I", data[4:4 + 4 * ndim])
    body = np.frombuffer(data, np.uint8, offset=4 + 4 * ndim)
    if body.size != int(np.prod(dims)):
        raise FormatError(f"{path}: header promises {int(np.prod(dims))} bytes, found {body.size}")
    return magic, body.reshape(dims)


def write_idx(path, array, compress=None):
    """Write a uint8 array as IDX (gzip when the path ends in .gz)."""
    array = np.asarray(array, np.uint8)
    head = struct.pack(">I", 0x0800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    compress = path.endswith(".gz") if compress is None else compress
    opener = gzip.open if compress else open
    with opener(path, "wb") as fh:
        fh.write(head + array.tobytes())


def load_mnist(images_path, labels_path, split="train"):
    magic, images = read_idx(images_path)
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"{images_path}: expected image magic 0x{IDX_IMAGES_MAGIC:08x}, got 0x{magic:08x}")
    magic, labels = read_idx(labels_path)
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(f"{labels_path}: expected label magic 0x{IDX_LABELS_MAGIC:08x}, got 0x{magic:08x}")
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    x = (images.astype(np.float32) / 255.0)[..., None]
    return Dataset(x, labels.astype(np.int64), split)


def _find(directory, stem):
    for suffix in ("", ".gz"):
        p = os.path.join(directory, stem + suffix)
        if os.path.exists(p):
            return p
    raise FileNotFoundError(f"{stem}[.gz] not found in {directory}")


def mnist_splits(directory, n_train=50_000):
    """(train, validation, test) from the four official MNIST files.

    The first ``n_train`` training images form the training split and the
    remainder the held-out validation split.
    """
    full = load_mnist(_find(directory, "train-images-idx3-ubyte"), _find(directory, "train-labels-idx1-ubyte"))
    test = load_mnist(_find(directory, "t10k-images-idx3-ubyte"), _find(directory, "t10k-labels-idx1-ubyte"), "test")
    return (full.subset(slice(0, n_train), "train"), full.subset(slice(n_train, None), "validation"), test)
