"""Binary image dataset container.

Layout::

    IRCDATA\\n
    <header length in bytes, decimal>\\n
    <UTF-8 JSON header: format, version, shape [N, C, H, W], dtype, n_classes>
    <inputs: np.packbits of the N*C*H*W bits, C order>
    <labels: N bytes, uint8>
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"IRCDATA\n"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray  # (N, C, H, W) uint8 bits
    labels: np.ndarray  # (N,) int
    n_classes: int

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.uint8)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 4 or np.any(x > 1):
            raise ValueError("inputs must be an (N, C, H, W) bit tensor")
        if y.shape != (x.shape[0],):
            raise ValueError("need one label per sample")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValueError("label out of range")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.n_classes)

    def dumps(self) -> bytes:
        header = {"format": "ircsim-data", "version": FORMAT_VERSION, "shape": list(self.inputs.shape),
                  "dtype": "bit-packed", "n_classes": self.n_classes}
        h = json.dumps(header, sort_keys=True).encode()
        return (MAGIC + f"{len(h)}\n".encode() + h + np.packbits(self.inputs.ravel()).tobytes()
                + self.labels.astype(np.uint8).tobytes())

    @classmethod
    def loads(cls, data: bytes) -> "Dataset":
        if not data.startswith(MAGIC):
            raise ValueError("not an ircsim dataset file")
        rest = data[len(MAGIC):]
        nl = rest.index(b"\n")
        hlen = int(rest[:nl])
        header = json.loads(rest[nl + 1:nl + 1 + hlen])
        if header.get("format") != "ircsim-data" or header.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported dataset version {header.get('version')!r}")
        body = rest[nl + 1 + hlen:]
        shape = tuple(header["shape"])
        nbits = int(np.prod(shape))
        nbytes = (nbits + 7) // 8
        if len(body) != nbytes + shape[0]:
            raise ValueError("dataset payload size does not match header")
        bits = np.unpackbits(np.frombuffer(body[:nbytes], dtype=np.uint8))[:nbits].reshape(shape)
        labels = np.frombuffer(body[nbytes:], dtype=np.uint8)
        return cls(bits, labels, header["n_classes"])

    def save(self, path) -> None:
        Path(path).write_bytes(self.dumps())

    @classmethod
    def load(cls, path) -> "Dataset":
        return cls.loads(Path(path).read_bytes())
