"""Desk-scale classification fixture.

Ten random 16x16 binary prototypes; each sample is a prototype with every
pixel flipped independently with probability ``noise``. Both model styles
share the same layer graph:

    digital_first  1 -> 60 ch, 3x3, stride 2     (16x16 -> 8x8)
    irc_gconv      60 -> 60 ch, 3x3, stride 1    (8x8), three times
    digital_last   3840 -> 10 nearest-centroid readout

Weights are random (no training): ternary layers hold exactly 20/60/20
-1/0/+1 per filter, baseline layers hold +-1 weights with BN statistics
taken on the training split. The readout centroids are computed from each
model's own effect-free features on the training split.
"""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from .dataset import Dataset
from .core import MacroGeometry
from .inference import digital_binarize, digital_conv, reference_forward, reference_irc_layer
from .mapper import map_layer, reference_column
from .model import BnParams, Layer, TernaryConvModel

IMAGE = 16
CHANNELS = 60
KERNEL = 3
N_CLASSES = 10
IRC_STRIDES = (1, 1, 1)
NOISE = 0.15


def make_dataset(seed: int = 0, n_train: int = 400, n_calib: int = 40, n_test: int = 200,
                 noise: float = NOISE) -> tuple:
    """Returns ``(train, calib, test)`` drawn around shared class prototypes."""
    rng = np.random.default_rng([seed, 100])
    protos = (rng.random((N_CLASSES, 1, IMAGE, IMAGE)) < 0.5).astype(np.uint8)

    def draw(n, tag):
        r = np.random.default_rng([seed, 101, tag])
        y = np.arange(n) % N_CLASSES
        r.shuffle(y)
        flips = (r.random((n, 1, IMAGE, IMAGE)) < noise).astype(np.uint8)
        return Dataset(protos[y] ^ flips, y, N_CLASSES)

    return draw(n_train, 0), draw(n_calib, 1), draw(n_test, 2)


def ternary_filters(rng, out_ch: int, fan_in: int, dist=(0.2, 0.6, 0.2)) -> np.ndarray:
    n_neg = int(round(dist[0] * fan_in))
    n_pos = int(round(dist[2] * fan_in))
    base = np.zeros(fan_in, dtype=np.int8)
    base[:n_neg] = -1
    base[n_neg:n_neg + n_pos] = 1
    return np.stack([rng.permutation(base) for _ in range(out_ch)])


def _first_layer(rng, train: Dataset) -> Layer:
    w = rng.choice(np.array([-1, 0, 1], dtype=np.int8), size=(CHANNELS, 1, KERNEL, KERNEL), p=[0.3, 0.4, 0.3])
    layer = Layer("digital_first", w, name="first", stride=2, padding=1)
    pre = digital_conv(train.inputs, layer).transpose(0, 2, 3, 1).reshape(-1, CHANNELS)
    # threshold at the per-channel median so activations are roughly balanced
    mean = np.median(pre, axis=0) + 0.5
    bn = BnParams(np.ones(CHANNELS), np.zeros(CHANNELS), mean, np.ones(CHANNELS), eps=0.0)
    return replace(layer, bn=bn)


def _fit_readout(model: TernaryConvModel, train: Dataset) -> TernaryConvModel:
    """Nearest-centroid readout on the model's ideal features."""
    feats = reference_forward(model, train.inputs, features=True)
    feats = feats.reshape(feats.shape[0], -1).astype(float)
    mu = np.stack([feats[train.labels == k].mean(axis=0) for k in range(N_CLASSES)])
    last = Layer("digital_last", 2.0 * mu, name="last", readout_bias=-(mu ** 2).sum(axis=1))
    return replace(model, layers=model.layers[:-1] + (last,))


def make_models(train: Dataset, seed: int = 0) -> tuple:
    """Returns ``(proposed, baseline)`` models fitted to ``train``."""
    rng = np.random.default_rng([seed, 200])
    first = _first_layer(rng, train)
    fan_in = CHANNELS * KERNEL * KERNEL
    shape = (CHANNELS, CHANNELS, KERNEL, KERNEL)

    prop_layers = [first]
    for i, s in enumerate(IRC_STRIDES):
        w = ternary_filters(rng, CHANNELS, fan_in).reshape(shape)
        prop_layers.append(Layer("irc_gconv", w, name=f"irc{i + 1}", stride=s, padding=1))
    prop_layers.append(Layer("digital_last", np.zeros((N_CLASSES, 1)), name="last"))  # refit below
    proposed = TernaryConvModel(tuple(prop_layers), (1, IMAGE, IMAGE), "proposed",
                                {"fixture": "prototype-10class", "seed": seed})

    # baseline: binary weights, BN statistics of 2*(conv - reference) on train data
    base_layers = [first]
    fmap = digital_binarize(digital_conv(train.inputs, first), first)
    for i, s in enumerate(IRC_STRIDES):
        w = rng.choice(np.array([-1, 1], dtype=np.int8), size=shape)
        layer = Layer("irc_gconv", w, name=f"irc{i + 1}", stride=s, padding=1)
        pos = replace(layer, weights=(w == 1).astype(np.int8))
        ref_w = reference_column(fan_in).reshape(CHANNELS, KERNEL, KERNEL)
        ref = replace(layer, weights=np.broadcast_to(ref_w, shape).astype(np.int8))
        pre = 2 * (digital_conv(fmap, pos) - digital_conv(fmap, ref))
        flat = pre.transpose(0, 2, 3, 1).reshape(-1, CHANNELS)
        bn = BnParams(np.ones(CHANNELS), np.zeros(CHANNELS), np.median(flat, axis=0) + 1.0,
                      flat.var(axis=0) + 1.0)
        layer = replace(layer, bn=bn)
        base_layers.append(layer)
        fmap = reference_irc_layer(fmap, layer, map_layer(layer, CHANNELS, MacroGeometry(), "baseline"))
    base_layers.append(Layer("digital_last", np.zeros((N_CLASSES, 1)), name="last"))
    baseline = TernaryConvModel(tuple(base_layers), (1, IMAGE, IMAGE), "baseline",
                                {"fixture": "prototype-10class", "seed": seed})
    return _fit_readout(proposed, train), _fit_readout(baseline, train)


def accuracy(scores: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(scores, axis=1) == labels))


def ideal_accuracy(model: TernaryConvModel, data: Dataset) -> float:
    return accuracy(reference_forward(model, data.inputs), data.labels)
