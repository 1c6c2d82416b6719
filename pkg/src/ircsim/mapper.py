"""Lower layers onto (G+, G-) column pairs.

Row layouts per style, with row 0 nearest the bit-line driver:

* ``proposed``: ternary conv rows first, then 32 extra-bias rows.
* ``baseline``: 96 in-memory BN rows first, then binary conv rows; G- is a
  shared-style reference bit-line with alternating LRS/HRS.

Extra bias is common-mode: the same number of fixed-1 LRS cells on both
bit-lines. It lifts both currents into the sense window without moving the
ideal decision.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import CellState, MacroGeometry, RowRole
from .model import BnParams, Layer, TernaryConvModel

BASELINE_BN_ROWS = 96
PROPOSED_BIAS_ROWS = 32
MANIFEST_VERSION = 1

__all__ = [
    "BnParams", "LayerMapping", "MappingManifest", "map_ternary", "decode_ternary",
    "map_binary_baseline", "fold_bn_to_threshold", "map_bias_rows", "map_extra_bias",
    "check_weight_distribution", "calibrate_extra_bias", "build_manifest", "layer_columns",
]


def _as_ternary(w) -> np.ndarray:
    w = np.asarray(w)
    if not np.all(np.isin(w, (-1, 0, 1))):
        raise ValueError("weights must be in {-1, 0, +1}")
    return w.astype(np.int8)


def map_ternary(w) -> tuple:
    """+1 -> (LRS, HRS), -1 -> (HRS, LRS), 0 -> (HRS, HRS)."""
    w = _as_ternary(w)
    return (w == 1).astype(np.uint8), (w == -1).astype(np.uint8)


def decode_ternary(g_plus, g_minus) -> np.ndarray:
    g_plus, g_minus = np.asarray(g_plus), np.asarray(g_minus)
    if np.any(g_plus & g_minus):
        raise ValueError("row with LRS on both bit-lines is not a ternary weight")
    return g_plus.astype(np.int8) - g_minus.astype(np.int8)


def reference_column(n: int) -> np.ndarray:
    """Alternating HRS/LRS starting with HRS, so odd lengths round LRS down."""
    ref = np.zeros(n, dtype=np.uint8)
    ref[1::2] = CellState.LRS
    return ref


def map_binary_baseline(w) -> tuple:
    w = np.asarray(w)
    if not np.all(np.isin(w, (-1, 1))):
        raise ValueError("binary weights must be in {-1, +1}")
    return (w == 1).astype(np.uint8), reference_column(w.shape[0])


def fold_bn_to_threshold(bn: BnParams) -> tuple:
    """Fold BN + sign into a threshold: ``bn(x) > 0  <=>  (x > theta) xor flip``."""
    gamma = np.asarray(bn.gamma, dtype=float)
    if np.any(gamma == 0):
        raise ValueError("gamma must be nonzero")
    theta = bn.mean - bn.beta * np.sqrt(bn.var + bn.eps) / gamma
    flip = gamma < 0
    if theta.shape == (1,):
        return float(theta[0]), bool(flip[0])
    return theta, flip


def round_half_toward_zero(x):
    x = np.asarray(x, dtype=float)
    q = np.sign(x) * np.ceil(np.abs(x) - 0.5)
    return q.astype(int)


def map_bias_rows(bias_units: int, n_bias_rows: int) -> tuple:
    """Signed bias as fixed-1 LRS cells: positive on G+, negative on G-.

    LRS cells fill the bias region from its driver-side end.
    """
    bias_units = int(bias_units)
    if abs(bias_units) > n_bias_rows:
        raise ValueError(f"bias {bias_units} needs more than {n_bias_rows} bias rows")
    plus = np.zeros(n_bias_rows, dtype=np.uint8)
    minus = np.zeros(n_bias_rows, dtype=np.uint8)
    if bias_units > 0:
        plus[:bias_units] = CellState.LRS
    elif bias_units < 0:
        minus[:-bias_units] = CellState.LRS
    return plus, minus


def map_extra_bias(extra: int, n_bias_rows: int) -> tuple:
    """Common-mode extra bias: ``extra`` LRS cells on both bit-lines."""
    extra = int(extra)
    if not 0 <= extra <= n_bias_rows:
        raise ValueError(f"extra bias {extra} outside [0, {n_bias_rows}]")
    col = np.zeros(n_bias_rows, dtype=np.uint8)
    col[:extra] = CellState.LRS
    return col, col.copy()


def check_weight_distribution(weights, groups: int = 1, tolerance: float = 0.05,
                              target=(0.2, 0.6, 0.2)) -> dict:
    """Fractions of -1/0/+1 per filter group against the 20/60/20 target."""
    w = _as_ternary(weights)
    per_group = []
    for chunk in np.array_split(w.reshape(w.shape[0], -1), groups, axis=0):
        n = chunk.size
        fr = ((chunk == -1).sum() / n, (chunk == 0).sum() / n, (chunk == 1).sum() / n)
        per_group.append(tuple(float(f) for f in fr))
    frac = tuple(float(np.mean([g[i] for g in per_group])) for i in range(3))
    ok = all(abs(g[i] - target[i]) <= tolerance + 1e-12 for g in per_group for i in range(3))
    return {
        "frac_neg": frac[0], "frac_zero": frac[1], "frac_pos": frac[2],
        "per_group": per_group,
        # each nonzero weight puts one LRS cell on one of the two bit-lines
        "lrs_fraction": (frac[0] + frac[2]) / 2.0,
        "pass": bool(ok),
    }


@dataclass(frozen=True)
class CalibrationResult:
    bias: int
    rates: dict  # candidate -> (rate_below_bound, rate_margin_flip)
    met_target: bool

    @property
    def before(self) -> tuple:
        return self.rates[min(self.rates, key=abs)]

    @property
    def after(self) -> tuple:
        return self.rates[self.bias]


def calibrate_extra_bias(evaluate, candidates=range(0, PROPOSED_BIAS_ROWS + 1),
                         target_below_bound: float = 0.03) -> CalibrationResult:
    """Pick the extra bias balancing below-bound and margin-flip rates.

    ``evaluate(bias) -> (rate_below_bound, rate_margin_flip)`` simulates the
    layer over the calibration set. Among candidates meeting the below-bound
    target the one minimising the larger of the two rates wins, ties going to
    the smaller |bias|. With no feasible candidate the minimax choice over
    all candidates is returned and a warning is issued.
    """
    cands = sorted({int(c) for c in candidates}, key=lambda c: (abs(c), c))
    if not cands:
        raise ValueError("empty candidate range")
    rates = {c: tuple(float(r) for r in evaluate(c)) for c in cands}
    feasible = [c for c in cands if rates[c][0] <= target_below_bound]
    pool = feasible or cands
    best = min(pool, key=lambda c: (max(rates[c]), abs(c), c))
    if not feasible:
        warnings.warn(f"no extra bias reaches below-bound rate <= {target_below_bound:.1%}; "
                      f"best effort {best} gives {rates[best][0]:.2%}", RuntimeWarning, stacklevel=2)
    return CalibrationResult(best, dict(sorted(rates.items())), bool(feasible))


@dataclass(frozen=True)
class LayerMapping:
    name: str
    style: str
    kernel: int
    group_size: int
    out_channels: int
    groups: int
    conv_start: int
    conv_rows: int
    bias_start: int
    bias_rows: int
    extra_bias: int = 0
    bias_units: tuple = ()
    residuals: tuple = ()
    swapped: tuple = ()

    @property
    def used_rows(self) -> int:
        return self.conv_rows + self.bias_rows

    def roles(self, rows: int) -> np.ndarray:
        r = np.full(rows, RowRole.UNUSED, dtype=np.uint8)
        r[self.conv_start:self.conv_start + self.conv_rows] = RowRole.CONV
        r[self.bias_start:self.bias_start + self.bias_rows] = RowRole.BIAS
        return r

    def to_record(self) -> dict:
        return {
            "name": self.name, "style": self.style, "kernel": self.kernel,
            "group_size": self.group_size, "out_channels": self.out_channels, "groups": self.groups,
            "conv_rows": [self.conv_start, self.conv_rows], "bias_rows": [self.bias_start, self.bias_rows],
            "extra_bias": self.extra_bias,
            "column_pairs": list(range(self.out_channels)),
            "bias_units": list(self.bias_units), "residuals": list(self.residuals),
            "swapped": list(self.swapped),
        }

    @classmethod
    def from_record(cls, r: dict) -> "LayerMapping":
        return cls(r["name"], r["style"], r["kernel"], r["group_size"], r["out_channels"], r["groups"],
                   r["conv_rows"][0], r["conv_rows"][1], r["bias_rows"][0], r["bias_rows"][1],
                   r["extra_bias"], tuple(r["bias_units"]), tuple(r["residuals"]), tuple(r["swapped"]))


@dataclass(frozen=True)
class MappingManifest:
    rows: int = 1024
    layers: tuple = field(default_factory=tuple)

    def __getitem__(self, name: str) -> LayerMapping:
        for m in self.layers:
            if m.name == name:
                return m
        raise KeyError(name)

    def dumps(self) -> str:
        lines = [json.dumps({"format": "ircsim-manifest", "version": MANIFEST_VERSION,
                             "rows": self.rows, "n_layers": len(self.layers)}, sort_keys=True)]
        lines += [json.dumps(m.to_record(), sort_keys=True) for m in self.layers]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "MappingManifest":
        lines = [l for l in text.splitlines() if l.strip()]
        header = json.loads(lines[0])
        if header.get("format") != "ircsim-manifest" or header.get("version") != MANIFEST_VERSION:
            raise ValueError("unsupported manifest header")
        layers = tuple(LayerMapping.from_record(json.loads(l)) for l in lines[1:])
        if len(layers) != header["n_layers"]:
            raise ValueError("manifest layer count mismatch")
        return cls(header["rows"], layers)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "MappingManifest":
        return cls.loads(Path(path).read_text())


def map_layer(layer: Layer, in_channels: int, geometry: MacroGeometry, style: str) -> LayerMapping:
    groups = layer.groups(in_channels)
    conv_rows = layer.rows_per_channel
    name = layer.name
    if style == "baseline":
        if layer.bn is None:
            raise ValueError(f"{name}: baseline style needs BN parameters")
        if not layer.is_binary:
            raise ValueError(f"{name}: baseline style needs binary weights")
        bias_rows, bias_start, conv_start = BASELINE_BN_ROWS, 0, BASELINE_BN_ROWS
        theta, flip = fold_bn_to_threshold(layer.bn)
        theta = np.where(flip, -np.asarray(theta), theta)
        # conv - ref tracks half the +-1 dot product
        units = round_half_toward_zero(-theta / 2.0)
        residuals = units + theta / 2.0
        if np.any(np.abs(units) > bias_rows):
            raise ValueError(f"{name}: folded BN bias exceeds {bias_rows} rows")
        bias_units, swapped = tuple(int(u) for u in units), tuple(bool(f) for f in flip)
        extra = 0
    elif style == "proposed":
        if layer.bn is not None:
            raise ValueError(f"{name}: proposed style maps layers without BN")
        bias_rows, conv_start = PROPOSED_BIAS_ROWS, 0
        bias_start = conv_rows
        bias_units = (0,) * layer.out_channels
        residuals = np.zeros(layer.out_channels)
        swapped = (False,) * layer.out_channels
        extra = int(layer.extra_bias)
        if not 0 <= extra <= bias_rows:
            raise ValueError(f"{name}: extra bias {extra} outside [0, {bias_rows}]")
    else:
        raise ValueError(f"unknown style {style!r}")
    if conv_rows + bias_rows > geometry.rows:
        raise ValueError(f"{name}: {conv_rows} conv + {bias_rows} bias rows exceed {geometry.rows}")
    if 2 * layer.out_channels > geometry.columns:
        raise ValueError(f"{name}: {layer.out_channels} channel pairs exceed {geometry.columns} columns")
    return LayerMapping(name, style, layer.kernel, layer.in_per_group, layer.out_channels, groups,
                        conv_start, conv_rows, bias_start, bias_rows, extra,
                        bias_units, tuple(float(r) for r in residuals), swapped)


def build_manifest(model: TernaryConvModel, geometry: MacroGeometry = MacroGeometry(),
                   style: str | None = None) -> MappingManifest:
    style = style or model.style
    shapes = model.shapes()
    maps = tuple(map_layer(model.layers[i], shapes[i][0], geometry, style) for i in model.irc_layers)
    return MappingManifest(geometry.rows, maps)


def layer_columns(layer: Layer, mapping: LayerMapping, rows: int) -> tuple:
    """Cell-state matrices ``(plus, minus)`` of shape (rows, out_channels)."""
    c = layer.out_channels
    plus = np.zeros((rows, c), dtype=np.uint8)
    minus = np.zeros((rows, c), dtype=np.uint8)
    w = layer.weights.reshape(c, -1).T  # (conv_rows, channels), row = (cin, ky, kx)
    cs, cr = mapping.conv_start, mapping.conv_rows
    bs, br = mapping.bias_start, mapping.bias_rows
    if mapping.style == "proposed":
        plus[cs:cs + cr], minus[cs:cs + cr] = map_ternary(w)
        plus[bs:bs + br], minus[bs:bs + br] = (a[:, None] for a in map_extra_bias(mapping.extra_bias, br))
    else:
        sgn = np.where(np.asarray(mapping.swapped), -1, 1).astype(np.int8)
        plus[cs:cs + cr] = (w * sgn == 1)
        minus[cs:cs + cr] = reference_column(cr)[:, None]
        for ch, units in enumerate(mapping.bias_units):
            plus[bs:bs + br, ch], minus[bs:bs + br, ch] = map_bias_rows(units, br)
    return plus, minus
