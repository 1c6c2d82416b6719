"""Crossbar abstraction, current units and effect-free MAC evaluation.

One current unit is the nominal LRS cell current at the default read bias
(0.1 V across 100 kOhm = 1 uA), so the sense window reads 35..300 units.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


class CellState(enum.IntEnum):
    HRS = 0
    LRS = 1


class RowRole(enum.IntEnum):
    UNUSED = 0
    CONV = 1
    BIAS = 2


@dataclass(frozen=True)
class DeviceParams:
    r_lrs_nominal: float = 1.0e5
    r_hrs_nominal: float = 1.0e9
    v_cell: float = 0.1
    wordline_voltage: float = 0.44
    sigma_log_r: float = 0.4245
    hrs_leakage: bool = True

    def __post_init__(self):
        if self.r_lrs_nominal <= 0 or self.r_hrs_nominal <= 0:
            raise ValueError("resistances must be positive")
        if self.r_hrs_nominal / self.r_lrs_nominal < 1e3:
            raise ValueError("HRS/LRS ratio must be at least 1e3")
        if self.v_cell <= 0:
            raise ValueError("v_cell must be positive")
        if self.sigma_log_r < 0:
            raise ValueError("sigma_log_r must be non-negative")

    @property
    def i_unit(self) -> float:
        """Amperes per current unit."""
        return self.v_cell / self.r_lrs_nominal

    @property
    def hrs_current(self) -> float:
        """Activated HRS cell current in units (0 when leakage is off)."""
        if not self.hrs_leakage:
            return 0.0
        return self.r_lrs_nominal / self.r_hrs_nominal


@dataclass(frozen=True)
class MacroGeometry:
    rows: int = 1024
    columns: int = 1024
    block_size: int = 32
    i_max: float = 300.0
    i_min_sense: float = 35.0

    def __post_init__(self):
        if self.rows <= 0 or self.block_size <= 0 or self.rows % self.block_size:
            raise ValueError("rows must be a positive multiple of block_size")
        if not 0 < self.i_min_sense < self.i_max:
            raise ValueError("need 0 < i_min_sense < i_max")

    @property
    def n_blocks(self) -> int:
        return self.rows // self.block_size


@dataclass(frozen=True)
class ColumnPattern:
    """Contents of one bit-line: cell states plus a role tag per row."""

    cells: np.ndarray
    roles: np.ndarray = field(default=None)

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=np.uint8)
        if cells.ndim != 1 or np.any(cells > 1):
            raise ValueError("cells must be a 1-D vector of CellState values")
        roles = self.roles
        if roles is None:
            roles = np.full(cells.shape, RowRole.CONV, dtype=np.uint8)
        roles = np.asarray(roles, dtype=np.uint8)
        if roles.shape != cells.shape:
            raise ValueError("roles must match cells in length")
        cells.setflags(write=False)
        roles.setflags(write=False)
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "roles", roles)

    def __len__(self) -> int:
        return self.cells.shape[0]

    @classmethod
    def from_lrs_rows(cls, rows: int, lrs_rows) -> "ColumnPattern":
        cells = np.zeros(rows, dtype=np.uint8)
        cells[np.asarray(list(lrs_rows), dtype=int)] = CellState.LRS
        return cls(cells)


def _check_inputs(inputs, column: ColumnPattern) -> np.ndarray:
    x = np.asarray(inputs)
    if x.shape != column.cells.shape:
        raise ValueError(f"input length {x.shape} does not match column length {column.cells.shape}")
    if np.any((x != 0) & (x != 1)):
        raise ValueError("inputs must be bits")
    return x.astype(np.uint8)


def ideal_cell_current(state: CellState, input_bit: int, params: DeviceParams = DeviceParams()) -> float:
    if input_bit not in (0, 1):
        raise ValueError("input_bit must be 0 or 1")
    if input_bit == 0:
        return 0.0
    if CellState(state) is CellState.LRS:
        return 1.0
    return params.hrs_current


def activated_lrs_count(inputs, column: ColumnPattern) -> int:
    x = _check_inputs(inputs, column)
    return int(np.count_nonzero(x & column.cells))


def ideal_bitline_mac(inputs, column: ColumnPattern, params: DeviceParams = DeviceParams()) -> float:
    x = _check_inputs(inputs, column)
    n_on = int(np.count_nonzero(x))
    p = int(np.count_nonzero(x & column.cells))
    return p + (n_on - p) * params.hrs_current


def cell_currents(cells: np.ndarray, params: DeviceParams) -> np.ndarray:
    """Per-cell activated current (units) for an array of cell states."""
    cells = np.asarray(cells)
    return np.where(cells == CellState.LRS, 1.0, params.hrs_current)
