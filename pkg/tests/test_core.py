import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ircsim.core import (CellState, ColumnPattern, DeviceParams, MacroGeometry, activated_lrs_count,
                         ideal_bitline_mac, ideal_cell_current)

NO_LEAK = DeviceParams(hrs_leakage=False)


def test_cell_current_examples():
    assert ideal_cell_current(CellState.LRS, 1) == 1.0
    assert ideal_cell_current(CellState.LRS, 0) == 0.0
    assert ideal_cell_current(CellState.HRS, 0) == 0.0


def test_hrs_current_from_ohms_law():
    p = DeviceParams()
    # independent route: amperes through HRS at v_cell, divided by amperes per unit
    amps = p.v_cell / p.r_hrs_nominal
    assert ideal_cell_current(CellState.HRS, 1, p) == pytest.approx(amps / p.i_unit, rel=1e-12)
    assert ideal_cell_current(CellState.HRS, 1, p) == pytest.approx(1e-4)
    assert p.i_unit == pytest.approx(1e-6)


def test_bad_input_bit():
    with pytest.raises(ValueError):
        ideal_cell_current(CellState.LRS, 2)


def test_mac_examples():
    col = ColumnPattern.from_lrs_rows(1024, [0, 500, 1023])
    assert ideal_bitline_mac(np.ones(1024), col) == pytest.approx(3.0 + 1021 * 1e-4)
    assert ideal_bitline_mac(np.zeros(1024), col) == 0.0
    col140 = ColumnPattern.from_lrs_rows(1024, range(140))
    assert ideal_bitline_mac(np.ones(1024), col140, NO_LEAK) == 140.0


def test_lrs_count_examples():
    col = ColumnPattern.from_lrs_rows(1024, range(0, 280, 2))
    assert activated_lrs_count(np.ones(1024), col) == 140
    assert activated_lrs_count(np.zeros(1024), col) == 0
    assert activated_lrs_count(col.cells, col) == int(col.cells.sum())


def test_length_mismatch():
    col = ColumnPattern(np.zeros(8))
    with pytest.raises(ValueError):
        ideal_bitline_mac(np.ones(7), col)
    with pytest.raises(ValueError):
        activated_lrs_count(np.ones(9), col)


def test_param_invariants():
    with pytest.raises(ValueError):
        DeviceParams(r_hrs_nominal=1e7)
    with pytest.raises(ValueError):
        DeviceParams(sigma_log_r=-0.1)
    with pytest.raises(ValueError):
        DeviceParams(r_lrs_nominal=0)
    with pytest.raises(ValueError):
        MacroGeometry(rows=1000)
    with pytest.raises(ValueError):
        MacroGeometry(i_min_sense=400)
    assert MacroGeometry().n_blocks == 32


def test_column_is_immutable():
    col = ColumnPattern(np.zeros(4))
    with pytest.raises(ValueError):
        col.cells[0] = 1
    with pytest.raises(ValueError):
        ColumnPattern(np.array([0, 2]))


@given(st.data())
def test_mac_linear_on_disjoint_supports(data):
    n = data.draw(st.integers(1, 200))
    cells = np.array(data.draw(st.lists(st.integers(0, 1), min_size=n, max_size=n)))
    split = np.array(data.draw(st.lists(st.integers(0, 2), min_size=n, max_size=n)))
    a, b = (split == 1).astype(int), (split == 2).astype(int)
    col = ColumnPattern(cells)
    lhs = ideal_bitline_mac(a, col) + ideal_bitline_mac(b, col)
    assert lhs == pytest.approx(ideal_bitline_mac(a | b, col), abs=1e-12)


@given(st.data())
def test_leakage_off_equals_count(data):
    n = data.draw(st.integers(1, 300))
    cells = np.array(data.draw(st.lists(st.integers(0, 1), min_size=n, max_size=n)))
    x = np.array(data.draw(st.lists(st.integers(0, 1), min_size=n, max_size=n)))
    col = ColumnPattern(cells)
    assert ideal_bitline_mac(x, col, NO_LEAK) == activated_lrs_count(x, col)


@given(st.data())
def test_mac_permutation_invariant(data):
    n = data.draw(st.integers(1, 200))
    cells = np.array(data.draw(st.lists(st.integers(0, 1), min_size=n, max_size=n)))
    x = np.array(data.draw(st.lists(st.integers(0, 1), min_size=n, max_size=n)))
    perm = np.array(data.draw(st.permutations(range(n))))
    a = ideal_bitline_mac(x, ColumnPattern(cells))
    b = ideal_bitline_mac(x[perm], ColumnPattern(cells[perm]))
    assert a == pytest.approx(b, abs=1e-12)
