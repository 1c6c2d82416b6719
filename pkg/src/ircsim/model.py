"""Layer graph of ternary/binary group convolutions and its on-disk container.

Model file layout::

    IRCMODEL\\n
    <header length in bytes, decimal>\\n
    <UTF-8 JSON header: version, style, input shape, layer records>
    <binary payload>

Each layer record names byte ranges in the payload: weights are packed
four per byte (2 bits each: 0 -> 0, 1 -> +1, 2 -> -1), BN parameters and
digital readout weights are little-endian float64.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

MAGIC = b"IRCMODEL\n"
FORMAT_VERSION = 1
LAYER_KINDS = ("digital_first", "irc_gconv", "digital_last")
STYLES = ("baseline", "proposed")


@dataclass(frozen=True)
class BnParams:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        arrs = [np.atleast_1d(np.asarray(a, dtype=float)) for a in (self.gamma, self.beta, self.mean, self.var)]
        if len({a.shape for a in arrs}) != 1:
            raise ValueError("BN parameter vectors must share one shape")
        if np.any(arrs[3] < 0):
            raise ValueError("BN variance must be non-negative")
        if np.any(arrs[0] == 0):
            raise ValueError("BN gamma must be nonzero")
        for name, a in zip(("gamma", "beta", "mean", "var"), arrs):
            object.__setattr__(self, name, a)

    def apply(self, x):
        return self.gamma * (np.asarray(x, dtype=float) - self.mean) / np.sqrt(self.var + self.eps) + self.beta

    def __len__(self):
        return self.gamma.shape[0]


@dataclass(frozen=True)
class Layer:
    """One layer. Conv weights have shape (out, in_per_group, k, k).

    ``digital_last`` holds a dense float readout ``weights`` of shape
    (classes, features) plus ``readout_bias``.
    """

    kind: str
    weights: np.ndarray
    name: str = ""
    stride: int = 1
    padding: int = 1
    bn: BnParams | None = None
    extra_bias: int = 0
    readout_bias: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        w = np.asarray(self.weights)
        if self.kind == "digital_last":
            w = w.astype(float)
            if w.ndim != 2:
                raise ValueError("digital_last weights must be (classes, features)")
            rb = np.zeros(w.shape[0]) if self.readout_bias is None else np.asarray(self.readout_bias, float)
            object.__setattr__(self, "readout_bias", rb)
        else:
            if w.ndim != 4 or w.shape[2] != w.shape[3]:
                raise ValueError("conv weights must be (out, in_per_group, k, k)")
            if not np.all(np.isin(w, (-1, 0, 1))):
                raise ValueError("conv weights must be ternary")
            w = w.astype(np.int8)
            if self.bn is not None and len(self.bn) != w.shape[0]:
                raise ValueError("BN length must equal output channels")
            if self.stride < 1 or self.padding < 0:
                raise ValueError("bad stride/padding")
        object.__setattr__(self, "weights", w)

    @property
    def kernel(self) -> int:
        return self.weights.shape[2]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_per_group(self) -> int:
        return self.weights.shape[1]

    group_size = in_per_group

    @property
    def rows_per_channel(self) -> int:
        return self.in_per_group * self.kernel ** 2

    @property
    def is_binary(self) -> bool:
        return self.kind != "digital_last" and not np.any(self.weights == 0)

    def groups(self, in_channels: int) -> int:
        if in_channels % self.in_per_group:
            raise ValueError(f"{self.name}: {in_channels} input channels not divisible by group width "
                             f"{self.in_per_group}")
        g = in_channels // self.in_per_group
        if self.out_channels % g:
            raise ValueError(f"{self.name}: output channels not divisible into {g} groups")
        return g

    def out_hw(self, h: int, w: int) -> tuple:
        k, s, p = self.kernel, self.stride, self.padding
        oh, ow = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        if oh < 1 or ow < 1:
            raise ValueError(f"{self.name}: kernel does not fit {h}x{w} input")
        return oh, ow


@dataclass(frozen=True)
class TernaryConvModel:
    layers: tuple
    input_shape: tuple
    style: str = "proposed"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.style not in STYLES:
            raise ValueError(f"unknown style {self.style!r}")

    @property
    def irc_layers(self) -> list:
        return [i for i, l in enumerate(self.layers) if l.kind == "irc_gconv"]

    def validate(self) -> None:
        kinds = [l.kind for l in self.layers]
        if not kinds:
            return
        if kinds[0] != "digital_first" or kinds[-1] != "digital_last" or \
                kinds.count("digital_first") != 1 or kinds.count("digital_last") != 1:
            raise ValueError("model needs exactly one digital_first and one digital_last layer, at the ends")
        c, h, w = self.input_shape
        for layer in self.layers[:-1]:
            layer.groups(c)
            h, w = layer.out_hw(h, w)
            c = layer.out_channels
        if self.layers[-1].weights.shape[1] != c * h * w:
            raise ValueError("digital_last input size does not match feature map")
        for layer in self.layers:
            if layer.kind == "irc_gconv" and self.style == "baseline" and not layer.is_binary:
                raise ValueError(f"{layer.name}: baseline style requires binary weights")

    def shapes(self) -> list:
        """Input (C, H, W) of every layer."""
        c, h, w = self.input_shape
        out = []
        for layer in self.layers:
            out.append((c, h, w))
            if layer.kind != "digital_last":
                h, w = layer.out_hw(h, w)
                c = layer.out_channels
        return out

    def with_extra_bias(self, biases: dict) -> "TernaryConvModel":
        layers = [replace(l, extra_bias=int(biases.get(l.name, l.extra_bias))) for l in self.layers]
        return replace(self, layers=tuple(layers))


def pack_ternary(w: np.ndarray) -> bytes:
    flat = np.asarray(w, dtype=np.int8).ravel()
    codes = np.where(flat == -1, 2, flat).astype(np.uint8)
    pad = (-len(codes)) % 4
    codes = np.concatenate([codes, np.zeros(pad, np.uint8)]).reshape(-1, 4)
    packed = codes[:, 0] | (codes[:, 1] << 2) | (codes[:, 2] << 4) | (codes[:, 3] << 6)
    return packed.astype(np.uint8).tobytes()


def unpack_ternary(buf: bytes, shape) -> np.ndarray:
    n = int(np.prod(shape))
    b = np.frombuffer(buf, dtype=np.uint8)
    codes = np.stack([(b >> s) & 3 for s in (0, 2, 4, 6)], axis=1).ravel()[:n]
    if np.any(codes == 3):
        raise ValueError("invalid ternary code in weight section")
    return np.where(codes == 2, -1, codes).astype(np.int8).reshape(shape)


def _f64(a) -> bytes:
    return np.asarray(a, dtype="<f8").tobytes()


def dumps_model(model: TernaryConvModel) -> bytes:
    payload = bytearray()
    records = []

    def put(data: bytes) -> list:
        start = len(payload)
        payload.extend(data)
        return [start, len(data)]

    for layer in model.layers:
        rec = {"kind": layer.kind, "name": layer.name, "shape": list(layer.weights.shape)}
        if layer.kind == "digital_last":
            rec["weights"] = put(_f64(layer.weights))
            rec["readout_bias"] = put(_f64(layer.readout_bias))
        else:
            rec.update(group_size=layer.group_size, stride=layer.stride, padding=layer.padding,
                       extra_bias=layer.extra_bias, weights=put(pack_ternary(layer.weights)))
            if layer.bn is not None:
                rec["bn"] = {k: put(_f64(getattr(layer.bn, k))) for k in ("gamma", "beta", "mean", "var")}
                rec["bn"]["eps"] = layer.bn.eps
        records.append(rec)
    header = {"format": "ircsim-model", "version": FORMAT_VERSION, "style": model.style,
              "input_shape": list(model.input_shape), "layers": records, "meta": model.meta}
    hbytes = json.dumps(header, sort_keys=True).encode()
    return MAGIC + f"{len(hbytes)}\n".encode() + hbytes + bytes(payload)


def loads_model(data: bytes) -> TernaryConvModel:
    if not data.startswith(MAGIC):
        raise ValueError("not an ircsim model file")
    rest = data[len(MAGIC):]
    nl = rest.index(b"\n")
    hlen = int(rest[:nl])
    header = json.loads(rest[nl + 1:nl + 1 + hlen])
    payload = rest[nl + 1 + hlen:]
    if header.get("format") != "ircsim-model":
        raise ValueError("not an ircsim model file")
    if header.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model version {header.get('version')!r}")

    def get(span, dtype="<f8"):
        start, n = span
        if start + n > len(payload):
            raise ValueError("truncated model payload")
        return np.frombuffer(payload[start:start + n], dtype=dtype).astype(float)

    layers = []
    for rec in header["layers"]:
        shape = tuple(rec["shape"])
        if rec["kind"] == "digital_last":
            layers.append(Layer("digital_last", get(rec["weights"]).reshape(shape), name=rec["name"],
                                readout_bias=get(rec["readout_bias"])))
            continue
        start, n = rec["weights"]
        w = unpack_ternary(payload[start:start + n], shape)
        bn = None
        if "bn" in rec:
            bn = BnParams(*(get(rec["bn"][k]) for k in ("gamma", "beta", "mean", "var")), eps=rec["bn"]["eps"])
        layers.append(Layer(rec["kind"], w, name=rec["name"],
                            stride=rec["stride"], padding=rec["padding"], bn=bn,
                            extra_bias=rec.get("extra_bias", 0)))
    return TernaryConvModel(tuple(layers), tuple(header["input_shape"]), header["style"], header.get("meta", {}))


def save_model(model: TernaryConvModel, path) -> None:
    Path(path).write_bytes(dumps_model(model))


def load_model(path) -> TernaryConvModel:
    return loads_model(Path(path).read_bytes())
