"""Named model presets and the standard MNIST training recipe.

``train_preset`` checkpoints after every epoch and resumes from the newest
checkpoint in its directory, so an interrupted run continues where it stopped
and produces the same parameters as an uninterrupted one.
"""
import logging
import os

from . import elbo as E
from . import layers as L
from . import modelio as M
from .tensor import SeededRng

log = logging.getLogger(__name__)

PRESETS = {
    "bnn-fc": lambda: L.bnn_fc(),
    "bnn-conv": lambda: L.bnn_conv(256),
    "bnn-conv-64": lambda: L.bnn_conv(64),
}


def build(preset, seed=0, dtype=None):
    if preset not in PRESETS:
        raise L.ParameterError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    graph = PRESETS[preset]()
    if dtype is not None:
        graph = graph.astype(dtype)
    return L.init_params(graph, SeededRng(seed).child(E.INIT_STREAM))


def recipe(epochs=23, seed=0, **kw):
    """RMSProp 1e-3, batch 100, constant beta = 1."""
    return E.TrainConfig(epochs=epochs, batch_size=100, lr=1e-3, optimizer="rmsprop", seed=seed, **kw)


def train_preset(preset, dataset, ckpt_dir, config=None, dtype=None):
    """Train (or resume) ``preset`` on ``dataset``; returns (graph, metrics, opt)."""
    config = config or recipe()
    os.makedirs(ckpt_dir, exist_ok=True)
    if config.metrics_csv is None:
        config.metrics_csv = os.path.join(ckpt_dir, "metrics.csv")
    try:
        latest = M.latest_checkpoint(ckpt_dir)
    except FileNotFoundError:
        latest = None
    if latest is not None:
        ck = M.load_checkpoint(latest)
        graph, opt, start = ck.graph, ck.optimizer, ck.iteration
        log.info("resuming %s from %s (epoch %d)", preset, latest, start)
    else:
        graph, opt, start = build(preset, config.seed, dtype), None, 0
    if start >= config.epochs:
        return graph, [], opt

    def save(epoch, g, o):
        M.save_checkpoint(g, o, ckpt_dir, epoch + 1, extra=dict(preset=preset, seed=config.seed))

    return E.train(graph, dataset, config, opt=opt, start_epoch=start, on_epoch=save)
