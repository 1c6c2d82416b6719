"""Bit-line IR drop: exact ladder oracle and the 32-cell block approximation.

Circuit: row k sits ``k + 1`` wire segments from the clamped bit-line
terminal (row 0 is nearest the driver). An activated cell is a branch of
conductance g_k from the cell bias v_cell into bit-line node k, so its
current is ``g_k * (v_cell - V_k)``. Everything is solved in normalised
units (conductance in 1/R_LRS, voltage in v_cell), which makes branch
currents come out directly in current units.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from .core import ColumnPattern, DeviceParams, _check_inputs, cell_currents


@dataclass(frozen=True)
class WireModel:
    r_segment: float = 0.24
    block_size: int = 32
    driver_position: int = 0

    def __post_init__(self):
        if self.r_segment < 0:
            raise ValueError("r_segment must be non-negative")
        if self.block_size <= 0:
            raise ValueError("block_size must be positive")
        if self.driver_position != 0:
            raise ValueError("only a driver at row 0 is supported")


def branch_conductances(column: ColumnPattern, inputs, mask_column, params: DeviceParams) -> np.ndarray:
    """Normalised branch conductance per row (0 for a deactivated row)."""
    x = _check_inputs(inputs, column)
    g = cell_currents(column.cells, params)
    if mask_column is not None:
        mult = np.asarray(mask_column, dtype=float)
        if mult.shape != g.shape:
            raise ValueError("mask column length does not match column")
        # HRS variation is negligible; only LRS cells carry the multiplier.
        g = np.where(column.cells == 1, g * mult, g)
    return g * x


# segments below this fraction of R_LRS are treated as shorts (avoids overflow)
SHORT_FRACTION = 1e-150


def is_short(r, r_lrs: float):
    return np.asarray(r) < SHORT_FRACTION * r_lrs


def solve_ladder(g: np.ndarray, segment_r: np.ndarray, r_lrs: float) -> np.ndarray:
    """Exact nodal solution of a 1-D ladder; returns node voltages (in v_cell).

    ``segment_r[k]`` is the wire resistance (ohms) between node k and node
    k-1 (the terminal for k = 0). Zero (or negligible) segments merge nodes.
    """
    g = np.asarray(g, dtype=float)
    segment_r = np.asarray(segment_r, dtype=float)
    n = g.shape[0]
    if segment_r.shape != (n,):
        raise ValueError("need one segment resistance per node")
    if np.any(segment_r < 0):
        raise ValueError("segment resistances must be non-negative")

    # group id per node: a new group starts at every nonzero segment
    starts = ~is_short(segment_r, r_lrs)
    group = np.cumsum(starts) - 1  # -1 means tied to the terminal
    n_groups = int(starts.sum())
    volts = np.zeros(n)
    if n_groups == 0:
        return volts
    live = group >= 0
    gg = np.bincount(group[live], weights=g[live], minlength=n_groups)
    link = r_lrs / segment_r[starts]  # normalised link conductance into each group
    upper = np.append(link[1:], 0.0)
    diag = gg + link + upper
    if not np.all(diag > 0):
        raise FloatingPointError("singular ladder system")
    ab = np.zeros((3, n_groups))
    ab[0, 1:] = -link[1:]
    ab[1] = diag
    ab[2, :-1] = -link[1:]
    vg = solve_banded((1, 1), ab, gg)
    volts[live] = vg[group[live]]
    return volts


def exact_ladder_currents(column: ColumnPattern, inputs, mask_column, wire: WireModel,
                          params: DeviceParams = DeviceParams(), segment_r=None) -> np.ndarray:
    """Per-cell currents (units) from a full nodal solve of every row.

    ``segment_r`` overrides the uniform wire with per-segment resistances.
    """
    g = branch_conductances(column, inputs, mask_column, params)
    if segment_r is None:
        segment_r = np.full(g.shape, wire.r_segment)
    volts = solve_ladder(g, segment_r, params.r_lrs_nominal)
    return g * (1.0 - volts)


def terminal_current(volts: np.ndarray, segment_r, r_lrs: float) -> float:
    """Current delivered into the clamped terminal (KCL at the driver)."""
    segment_r = np.asarray(segment_r, dtype=float)
    k = int(np.argmax(segment_r > 0)) if np.any(segment_r > 0) else None
    if k is None or k != 0:
        raise ValueError("terminal current undefined when the first segment is a short")
    return float(volts[0] * r_lrs / segment_r[0])


def block_segment_resistances(n_rows: int, wire: WireModel) -> np.ndarray:
    """Per-segment wire equivalent to the lumped block model (for cross-checks)."""
    if n_rows % wire.block_size:
        raise ValueError("rows must be a multiple of block_size")
    seg = np.zeros(n_rows)
    seg[::wire.block_size] = wire.block_size * wire.r_segment
    seg[0] = (wire.block_size + 1) / 2 * wire.r_segment
    return seg


def _link_conductances(n_blocks: int, wire: WireModel, r_lrs: float) -> np.ndarray:
    # Each block is lumped at its centre row: (B+1)/2 segments from the
    # terminal for block 0, then B segments between successive centres.
    seg = np.full(n_blocks, wire.block_size * wire.r_segment)
    seg[0] = (wire.block_size + 1) / 2 * wire.r_segment
    return r_lrs / seg


def solve_blocks(g: np.ndarray, wire: WireModel, r_lrs: float) -> np.ndarray:
    """Thomas sweep over a block-major batch ``g`` of shape (n_blocks, ...).

    Node voltages are returned in the same layout.
    """
    nb = g.shape[0]
    if is_short(wire.r_segment, r_lrs) or nb == 0:
        return np.zeros_like(g)
    link = _link_conductances(nb, wire, r_lrs)
    upper = np.append(link[1:], 0.0)
    c_prime = np.empty_like(g)
    d_prime = np.empty_like(g)
    denom = g[0] + (link[0] + upper[0])
    c_prime[0] = -upper[0] / denom
    d_prime[0] = g[0] / denom
    for b in range(1, nb):
        denom = g[b] + (link[b] + upper[b]) + link[b] * c_prime[b - 1]
        c_prime[b] = -upper[b] / denom
        d_prime[b] = (g[b] + link[b] * d_prime[b - 1]) / denom
    v = d_prime  # back substitution in place
    for b in range(nb - 2, -1, -1):
        v[b] -= c_prime[b] * v[b + 1]
    return v


def block_voltages(block_g: np.ndarray, wire: WireModel, r_lrs: float) -> np.ndarray:
    """Solve the reduced ladder for a batch of columns.

    ``block_g`` has shape ``(..., n_blocks)`` holding summed normalised
    conductance per block; returns node voltages of the same shape.
    """
    block_g = np.asarray(block_g, dtype=float)
    out = np.zeros_like(block_g)
    if is_short(wire.r_segment, r_lrs) or block_g.size == 0:
        return out
    # blocks past the last conducting one carry no link current, so they
    # sit at the same voltage and can be dropped from the solve
    active = np.flatnonzero(block_g.reshape(-1, block_g.shape[-1]).any(axis=0))
    if active.size == 0:
        return out
    nb = int(active[-1]) + 1
    g = np.ascontiguousarray(np.moveaxis(block_g[..., :nb], -1, 0))
    out[..., :nb] = np.moveaxis(solve_blocks(g, wire, r_lrs), 0, -1)
    if nb < block_g.shape[-1]:
        out[..., nb:] = out[..., nb - 1:nb]
    return out


def block_currents(block_g: np.ndarray, wire: WireModel, r_lrs: float) -> np.ndarray:
    """Per-block current (units) for a batch of block conductance vectors."""
    return block_g * (1.0 - block_voltages(block_g, wire, r_lrs))


def block_approx_currents(column: ColumnPattern, inputs, mask_column, wire: WireModel,
                          params: DeviceParams = DeviceParams()) -> np.ndarray:
    """Per-cell currents with local drop inside each block neglected."""
    n = len(column)
    if n % wire.block_size:
        raise ValueError("rows must be a multiple of block_size")
    g = branch_conductances(column, inputs, mask_column, params)
    gb = g.reshape(-1, wire.block_size).sum(axis=1)
    vb = block_voltages(gb, wire, params.r_lrs_nominal)
    return g * (1.0 - np.repeat(vb, wire.block_size))


def current_drop_profile(n_lrs: int, start_block: int, wire: WireModel,
                         params: DeviceParams = DeviceParams(), rows: int = 1024) -> float:
    """Ideal minus block-model current for ``n_lrs`` contiguous LRS cells."""
    start = start_block * wire.block_size
    if n_lrs < 0 or start_block < 0 or start + n_lrs > rows:
        raise ValueError("placement does not fit the array")
    if n_lrs == 0:
        return 0.0
    lrs = range(start, start + n_lrs)
    column = ColumnPattern.from_lrs_rows(rows, lrs)
    inputs = np.zeros(rows, dtype=np.uint8)
    inputs[start:start + n_lrs] = 1
    cur = block_approx_currents(column, inputs, None, wire, params)
    return float(n_lrs - cur.sum())


def validate_block_model(n_cases: int, wire: WireModel, params: DeviceParams = DeviceParams(),
                         rows: int = 1024, seed: int = 0, sigma_log_r: float = 0.0) -> dict:
    """Relative error of block-model totals against the exact ladder.

    Case i uses ``default_rng([seed, i])``: LRS density ~ U(0, 0.5) and input
    density ~ U(0, 1), so an offending case can be regenerated from its index.
    """
    errors = np.zeros(n_cases)
    for i in range(n_cases):
        column, inputs, mask = random_case(seed, i, rows, sigma_log_r)
        exact = exact_ladder_currents(column, inputs, mask, wire, params).sum()
        approx = block_approx_currents(column, inputs, mask, wire, params).sum()
        errors[i] = abs(approx - exact) / exact if exact > 0 else 0.0
    worst = int(np.argmax(errors)) if n_cases else -1
    return {
        "n_cases": n_cases,
        "errors": errors,
        "p50": float(np.percentile(errors, 50)) if n_cases else 0.0,
        "p95": float(np.percentile(errors, 95)) if n_cases else 0.0,
        "max": float(errors.max()) if n_cases else 0.0,
        "frac_within_1pct": float(np.mean(errors <= 0.01)) if n_cases else 1.0,
        "worst_case": worst,
        "worst_case_seed": [seed, worst],
    }


def random_case(seed: int, index: int, rows: int = 1024, sigma_log_r: float = 0.0):
    rng = np.random.default_rng([seed, index])
    lrs_density = rng.uniform(0.0, 0.5)
    in_density = rng.uniform(0.0, 1.0)
    cells = (rng.random(rows) < lrs_density).astype(np.uint8)
    inputs = (rng.random(rows) < in_density).astype(np.uint8)
    mask = np.exp(-sigma_log_r * rng.standard_normal(rows))
    return ColumnPattern(cells), inputs, mask
