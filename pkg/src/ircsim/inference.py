"""Binary-activation convolution through the simulated macro.

Per column pair the stages run in a fixed order: variation multipliers on
LRS cells, bit-line IR drop (block model), per-bit-line summation,
nonlinearity on each bit-line (p = its activated LRS count, bias cells
included), then the sense amplifier. In partial-sum mode the used rows are
split into k contiguous groups, each group goes through IR drop and
nonlinearity on its own, and an ideal external adder sums the k results
before a single SA decision.

Random streams are keyed by ``(seed, purpose, layer index[, image index])``
so results do not depend on how images are batched.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import DeviceParams, MacroGeometry
from .irdrop import WireModel, is_short, solve_blocks
from .mapper import LayerMapping, MappingManifest, build_manifest, layer_columns, reference_column
from .model import Layer, TernaryConvModel
from .nonideal import (EVENT_ABOVE, EVENT_BELOW, EVENT_MARGIN_FLIP, EVENT_NAMES, REFERENCE_VOLTAGE,
                       NonidealConfig, draw_sa_variates, lookup_voltage, nonlinearity_ratio,
                       sa_decide, variation_multipliers)

_MASK_STREAM = 0
_SA_STREAM = 1
_CHUNK = 4096


@dataclass(frozen=True)
class AccumulationMode:
    mode: str = "single_shot"
    k_subblocks: int = 1

    def __post_init__(self):
        if self.mode == "single_shot":
            object.__setattr__(self, "k_subblocks", 1)
        elif self.mode == "partial_sum":
            if self.k_subblocks < 2:
                raise ValueError("partial_sum needs k_subblocks >= 2")
        else:
            raise ValueError(f"unknown accumulation mode {self.mode!r}")

    @classmethod
    def parse(cls, text: str) -> "AccumulationMode":
        text = text.strip().replace("-", "_")
        if text == "single_shot":
            return cls()
        if text.startswith("partial_sum"):
            _, _, k = text.partition(":")
            return cls("partial_sum", int(k or 3))
        raise ValueError(f"bad mode {text!r}; use single-shot or partial-sum:k")

    def __str__(self) -> str:
        return "single-shot" if self.mode == "single_shot" else f"partial-sum:{self.k_subblocks}"


SINGLE_SHOT = AccumulationMode()


def default_mode(style: str) -> AccumulationMode:
    return AccumulationMode("partial_sum", 3) if style == "baseline" else SINGLE_SHOT


@dataclass
class LayerTrace:
    name: str
    decisions: int = 0
    below_bound: int = 0
    above_bound: int = 0
    margin_flip: int = 0
    domain_events: int = 0
    total_current: float = 0.0

    @property
    def range_violation(self) -> int:
        return self.below_bound + self.above_bound

    def rate(self, what: str) -> float:
        return getattr(self, what) / self.decisions if self.decisions else 0.0

    def merge(self, other: "LayerTrace") -> None:
        self.decisions += other.decisions
        self.below_bound += other.below_bound
        self.above_bound += other.above_bound
        self.margin_flip += other.margin_flip
        self.domain_events += other.domain_events
        self.total_current += other.total_current

    def record(self, events: np.ndarray, i_pos: np.ndarray, i_neg: np.ndarray, domain: int) -> None:
        self.decisions += events.size
        self.below_bound += int(np.count_nonzero(events == EVENT_BELOW))
        self.above_bound += int(np.count_nonzero(events == EVENT_ABOVE))
        self.margin_flip += int(np.count_nonzero(events == EVENT_MARGIN_FLIP))
        self.domain_events += int(domain)
        self.total_current += float(i_pos.sum() + i_neg.sum())


@dataclass
class PairTrace:
    """Per-stage record of one column-pair evaluation."""

    p_pos: int
    p_neg: int
    i_pos: float
    i_neg: float
    group_currents: list = field(default_factory=list)
    event: str | None = None
    domain_event: bool = False


@dataclass(frozen=True)
class SimContext:
    config: NonidealConfig
    mode: AccumulationMode = SINGLE_SHOT
    seed: int | None = None
    geometry: MacroGeometry = MacroGeometry()

    @property
    def run_seed(self) -> int:
        return self.config.seed if self.seed is None else self.seed

    @property
    def device(self) -> DeviceParams:
        return DeviceParams(sigma_log_r=self.config.sigma_log_r, hrs_leakage=self.config.effects.leakage,
                            wordline_voltage=self.config.wordline_voltage)

    @property
    def wire(self) -> WireModel:
        return WireModel(self.config.r_segment, self.config.block_size)


def group_masks(used_rows: int, rows: int, mode: AccumulationMode) -> list:
    """Row masks of the accumulation groups (one mask in single-shot mode)."""
    if mode.mode == "single_shot":
        return [np.ones(rows, dtype=bool)]
    edges = np.linspace(0, used_rows, mode.k_subblocks + 1).round().astype(int)
    masks = []
    for a, b in zip(edges[:-1], edges[1:]):
        m = np.zeros(rows, dtype=bool)
        m[a:b] = True
        masks.append(m)
    masks[-1][used_rows:] = True
    return masks


def conductances(cells: np.ndarray, mult: np.ndarray | None, ctx: SimContext) -> np.ndarray:
    """Normalised branch conductance of every cell (activated)."""
    lrs = cells == 1
    g = np.where(lrs, 1.0, ctx.device.hrs_current)
    if ctx.config.effects.variation and mult is not None:
        g = np.where(lrs, g * mult, g)
    return g


def bitline_currents(x: np.ndarray, cells: np.ndarray, g: np.ndarray, masks: list, ctx: SimContext):
    """Column currents after IR drop and nonlinearity, summed over groups.

    ``x`` is (N, rows) bits, ``cells``/``g`` are (rows, C). Returns
    ``(current, p, domain_events, per_group_currents)`` with (N, C) arrays.
    """
    cfg = ctx.config
    xf = x.astype(float)
    lrs = cells.astype(float)
    n, rows = x.shape
    bsz = cfg.block_size
    total = np.zeros((n, cells.shape[1]))
    p_total = np.zeros((n, cells.shape[1]), dtype=np.int64)
    domain = 0
    per_group = []
    for m in masks:
        # rows past the last driven block cannot conduct
        driven = np.flatnonzero((x * m).any(axis=0))
        nb = -(-(int(driven[-1]) + 1) // bsz) if driven.size else 0
        hi = min(nb * bsz, rows)
        xg = xf[:, :hi] * m[:hi]
        p = np.rint(xg @ lrs[:hi]).astype(np.int64)
        if cfg.effects.ir_drop and not is_short(cfg.r_segment, ctx.device.r_lrs_nominal):
            xb = xg.reshape(n, nb, bsz).transpose(1, 0, 2)  # (nb, N, B)
            block_g = np.matmul(xb, g[:hi].reshape(nb, bsz, -1))  # (nb, N, C)
            v = solve_blocks(block_g, ctx.wire, ctx.device.r_lrs_nominal)
            cur = (block_g * (1.0 - v)).sum(axis=0)
        else:
            cur = xg @ g[:hi]
        if cfg.effects.nonlinearity:
            over = p > cfg.nonlin_domain_max
            domain += int(np.count_nonzero(over))
            cur = cur * nonlinearity_ratio(np.minimum(p, cfg.nonlin_domain_max), cfg)
        per_group.append(cur)
        total += cur
        p_total += p
    return total, p_total, domain, per_group


def evaluate_pairs(x: np.ndarray, plus: np.ndarray, minus: np.ndarray, mult_plus, mult_minus,
                   used_rows: int, ctx: SimContext, u: np.ndarray, coin: np.ndarray):
    """Evaluate C column pairs for N input vectors.

    Returns ``(bits, events, i_pos, i_neg, domain_events)``.
    """
    masks = group_masks(used_rows, x.shape[1], ctx.mode)
    gp = conductances(plus, mult_plus, ctx)
    gn = conductances(minus, mult_minus, ctx)
    i_pos, p_pos, dom_p, _ = bitline_currents(x, plus, gp, masks, ctx)
    i_neg, p_neg, dom_n, _ = bitline_currents(x, minus, gn, masks, ctx)
    bits, events = sa_decide(i_pos, i_neg, p_pos + p_neg, ctx.config, u, coin)
    return bits, events, i_pos, i_neg, dom_p + dom_n


def simulate_column_pair(inputs, plus, minus, mask_plus, mask_minus, ctx: SimContext,
                         rng: np.random.Generator, used_rows: int | None = None) -> tuple:
    """One SA decision for a single mapped column pair; returns ``(bit, PairTrace)``."""
    x = np.asarray(inputs, dtype=np.uint8)[None, :]
    plus = np.asarray(plus, dtype=np.uint8)[:, None]
    minus = np.asarray(minus, dtype=np.uint8)[:, None]
    if x.shape[1] != plus.shape[0] or plus.shape != minus.shape:
        raise ValueError("inputs and columns must have equal length")
    mp = None if mask_plus is None else np.asarray(mask_plus, float)[:, None]
    mn = None if mask_minus is None else np.asarray(mask_minus, float)[:, None]
    used = x.shape[1] if used_rows is None else used_rows
    masks = group_masks(used, x.shape[1], ctx.mode)
    gp, gn = conductances(plus, mp, ctx), conductances(minus, mn, ctx)
    i_pos, p_pos, dp, grp_p = bitline_currents(x, plus, gp, masks, ctx)
    i_neg, p_neg, dn, grp_n = bitline_currents(x, minus, gn, masks, ctx)
    u, coin = draw_sa_variates((1, 1), rng)
    bits, events = sa_decide(i_pos, i_neg, p_pos + p_neg, ctx.config, u, coin)
    if dp + dn:
        warnings.warn("activated LRS count beyond nonlinearity domain; ratio clamped", RuntimeWarning,
                      stacklevel=2)
    trace = PairTrace(int(p_pos[0, 0]), int(p_neg[0, 0]), float(i_pos[0, 0]), float(i_neg[0, 0]),
                      [(float(a[0, 0]), float(b[0, 0])) for a, b in zip(grp_p, grp_n)],
                      EVENT_NAMES[int(events[0, 0])], bool(dp + dn))
    return int(bits[0, 0]), trace


def layer_masks(mapping: LayerMapping, rows: int, ctx: SimContext, layer_index: int):
    """Variation multipliers for the layer's macro: (plus, minus), each (rows, C)."""
    rng = np.random.default_rng([ctx.run_seed, _MASK_STREAM, layer_index])
    mult = variation_multipliers((rows, mapping.out_channels, 2), ctx.config.sigma_log_r, rng)
    return mult[:, :, 0], mult[:, :, 1]


def extract_patches(fmap: np.ndarray, kernel: int, stride: int, padding: int) -> np.ndarray:
    """(N, C, H, W) -> (N, OH, OW, C, k, k) sliding windows."""
    xp = np.pad(fmap, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))  # (N, C, OH', OW', k, k)
    win = win[:, :, ::stride, ::stride]
    return win.transpose(0, 2, 3, 1, 4, 5)


def row_inputs(patches: np.ndarray, mapping: LayerMapping, rows: int) -> np.ndarray:
    """Word-line inputs per output pixel: patch on conv rows, 1 on bias rows."""
    n = patches.shape[0]
    x = np.zeros((n, rows), dtype=np.uint8)
    x[:, mapping.conv_start:mapping.conv_start + mapping.conv_rows] = patches.reshape(n, -1)
    x[:, mapping.bias_start:mapping.bias_start + mapping.bias_rows] = 1
    return x


def gconv_layer_forward(fmap: np.ndarray, layer: Layer, mapping: LayerMapping, ctx: SimContext,
                        layer_index: int, image_ids=None, masks=None) -> tuple:
    """Binary feature map (N, C, H, W) -> (N, C_out, OH, OW) through the macro."""
    fmap = np.asarray(fmap, dtype=np.uint8)
    n, cin, h, w = fmap.shape
    groups = layer.groups(cin)
    if groups != mapping.groups or layer.out_channels != mapping.out_channels:
        raise ValueError(f"{layer.name}: feature map does not match the layer mapping")
    oh, ow = layer.out_hw(h, w)
    rows = ctx.geometry.rows
    image_ids = np.arange(n) if image_ids is None else np.asarray(image_ids)
    plus, minus = layer_columns(layer, mapping, rows)
    mplus, mminus = layer_masks(mapping, rows, ctx, layer_index) if masks is None else masks

    # SA variates: one stream per image, shape (OH, OW, C)
    u = np.empty((n, oh, ow, layer.out_channels))
    coin = np.empty((n, oh, ow, layer.out_channels), dtype=np.uint8)
    for i, img in enumerate(image_ids):
        rng = np.random.default_rng([ctx.run_seed, _SA_STREAM, layer_index, int(img)])
        u[i], coin[i] = draw_sa_variates((oh, ow, layer.out_channels), rng)

    patches = extract_patches(fmap, layer.kernel, layer.stride, layer.padding)
    out = np.zeros((n, oh, ow, layer.out_channels), dtype=np.uint8)
    trace = LayerTrace(layer.name)
    ipg, opg = layer.in_per_group, layer.out_channels // groups
    for g in range(groups):
        chans = slice(g * opg, (g + 1) * opg)
        pg = patches[:, :, :, g * ipg:(g + 1) * ipg].reshape(n * oh * ow, -1)
        x = row_inputs(pg, mapping, rows)
        ug = u[..., chans].reshape(n * oh * ow, opg)
        cg = coin[..., chans].reshape(n * oh * ow, opg)
        res = np.zeros((n * oh * ow, opg), dtype=np.uint8)
        for a in range(0, x.shape[0], _CHUNK):
            sl = slice(a, a + _CHUNK)
            bits, events, ip, ineg, dom = evaluate_pairs(
                x[sl], plus[:, chans], minus[:, chans], mplus[:, chans], mminus[:, chans],
                mapping.used_rows, ctx, ug[sl], cg[sl])
            res[sl] = bits
            trace.record(events, ip, ineg, dom)
        out[..., chans] = res.reshape(n, oh, ow, opg)
    return out.transpose(0, 3, 1, 2), trace


def digital_conv(fmap: np.ndarray, layer: Layer) -> np.ndarray:
    """Exact integer grouped convolution: (N, C, H, W) -> (N, C_out, OH, OW) int."""
    n, cin, h, w = fmap.shape
    groups = layer.groups(cin)
    ipg, opg = layer.in_per_group, layer.out_channels // groups
    patches = extract_patches(np.asarray(fmap, dtype=np.uint8), layer.kernel, layer.stride, layer.padding)
    n_, oh, ow = patches.shape[:3]
    outs = []
    for g in range(groups):
        pg = patches[:, :, :, g * ipg:(g + 1) * ipg].reshape(n_ * oh * ow, -1).astype(float)
        wg = layer.weights[g * opg:(g + 1) * opg].reshape(opg, -1).astype(float)
        # float matmul is exact here: operands are small integers
        out = np.rint(pg @ wg.T).astype(np.int64)
        outs.append(out.reshape(n_, oh, ow, opg).transpose(0, 3, 1, 2))
    return np.concatenate(outs, axis=1)


def digital_binarize(pre: np.ndarray, layer: Layer) -> np.ndarray:
    if layer.bn is None:
        return (pre > 0).astype(np.uint8)
    return (layer.bn.apply(pre.transpose(0, 2, 3, 1)) > 0).transpose(0, 3, 1, 2).astype(np.uint8)


def readout(fmap: np.ndarray, layer: Layer) -> np.ndarray:
    f = fmap.reshape(fmap.shape[0], -1).astype(float)
    return f @ layer.weights.T + layer.readout_bias


def reference_irc_layer(fmap: np.ndarray, layer: Layer, mapping: LayerMapping) -> np.ndarray:
    """Mapped decision rule of one IRC layer in exact integer arithmetic.

    Ternary pairs: ``sum(w*x) > 0``. Binary baseline: ``conv_count -
    reference_count + bias > 0`` with the alternating reference bit-line.
    """
    if mapping.style == "proposed":
        return (digital_conv(fmap, layer) > 0).astype(np.uint8)
    sgn = np.where(np.asarray(mapping.swapped), -1, 1)
    wpos = replace(layer, weights=((layer.weights * sgn[:, None, None, None]) == 1).astype(np.int8))
    conv_count = digital_conv(fmap, wpos)
    # reference bit-line: LRS on odd conv rows, row = (cin, ky, kx)
    ref_w = reference_column(mapping.conv_rows).reshape(layer.in_per_group, layer.kernel, layer.kernel)
    ref_layer = replace(layer, weights=np.broadcast_to(ref_w, layer.weights.shape).astype(np.int8))
    ref_count = digital_conv(fmap, ref_layer)
    bias = np.asarray(mapping.bias_units)[None, :, None, None]
    return (conv_count - ref_count + bias > 0).astype(np.uint8)


def reference_forward(model: TernaryConvModel, x: np.ndarray, manifest: MappingManifest | None = None,
                      features: bool = False):
    """Software forward pass in exact integer arithmetic (no crossbar).

    With ``features`` the binary map feeding the readout is returned instead
    of class scores.
    """
    manifest = manifest or build_manifest(model)
    fmap = np.asarray(x, dtype=np.uint8)
    for layer in model.layers:
        if layer.kind == "digital_last":
            return fmap if features else readout(fmap, layer)
        if layer.kind == "digital_first":
            fmap = digital_binarize(digital_conv(fmap, layer), layer)
        else:
            fmap = reference_irc_layer(fmap, layer, manifest[layer.name])
    return fmap


@dataclass
class ForwardResult:
    scores: np.ndarray
    traces: list


def model_forward(model: TernaryConvModel, x: np.ndarray, ctx: SimContext,
                  manifest: MappingManifest | None = None, image_ids=None) -> ForwardResult:
    model.validate()
    manifest = manifest or build_manifest(model, ctx.geometry)
    fmap = np.asarray(x, dtype=np.uint8)
    traces = []
    for idx, layer in enumerate(model.layers):
        if layer.kind == "digital_first":
            fmap = digital_binarize(digital_conv(fmap, layer), layer)
        elif layer.kind == "irc_gconv":
            fmap, tr = gconv_layer_forward(fmap, layer, manifest[layer.name], ctx, idx, image_ids)
            traces.append(tr)
        else:
            return ForwardResult(readout(fmap, layer), traces)
    return ForwardResult(fmap, traces)


def layer_inputs(model: TernaryConvModel, x: np.ndarray, ctx: SimContext,
                 manifest: MappingManifest | None = None, image_ids=None) -> dict:
    """Input feature map of every IRC layer under ``ctx`` (name -> array)."""
    manifest = manifest or build_manifest(model, ctx.geometry)
    fmap = np.asarray(x, dtype=np.uint8)
    acts = {}
    for idx, layer in enumerate(model.layers):
        if layer.kind == "digital_first":
            fmap = digital_binarize(digital_conv(fmap, layer), layer)
        elif layer.kind == "irc_gconv":
            acts[layer.name] = fmap
            fmap, _ = gconv_layer_forward(fmap, layer, manifest[layer.name], ctx, idx, image_ids)
    return acts


def power_proxy(traces, wordline_voltage: float, voltage_table: dict) -> float:
    """Summed bit-line current scaled by the table's current scale, relative to 0.44 V."""
    _, scale = lookup_voltage(voltage_table, wordline_voltage)
    try:
        _, ref_scale = lookup_voltage(voltage_table, REFERENCE_VOLTAGE)
    except KeyError:
        ref_scale = 1.0
    total = sum(t.total_current for t in traces)
    return total * scale / ref_scale
