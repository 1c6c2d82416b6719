"""Perturbation models: device variation, bit-line nonlinearity and sense-amp errors.

Config file schema (JSON object, every key optional except ``seed``)::

    seed                  int, mandatory
    sigma_log_r           std of ln(R) for LRS cells          (0.4245)
    nonlin_poly_low       5 coeffs, highest power first, p <= breakpoint
    nonlin_poly_high      5 coeffs, highest power first, p >  breakpoint
    nonlin_breakpoint     int (140)
    nonlin_domain_max     int (320)
    sa_margin_curve       [[p_total, margin_units], ...] non-decreasing
    sa_margin_extra       float units added to the curve (0)
    sa_offset_law         "uniform" | "gaussian"
    sensing_window        [i_min_sense, i_max] units ([35, 300])
    r_segment             bit-line ohms per cell pitch (0.24)
    block_size            rows per IR-drop block (32)
    wordline_voltage      volts (0.44)
    voltage_table         {"<volts>": [sigma_log_r, current_scale], ...}
    effects               {variation, nonlinearity, ir_drop, sense_window,
                           sa_variation, leakage: bool}
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import ndtri

from .core import MacroGeometry

# Default bit-line nonlinearity fit, highest power first.
POLY_LOW = (1.0286e-8, -3.79e-6, 5.3e-4, -3.92e-2, 2.5)
POLY_HIGH = (1.8063e-11, -3.204e-8, 2.2495e-5, -8.057e-3, 1.707)
DEFAULT_MARGIN_CURVE = ((0.0, 1.0), (200.0, 2.0), (400.0, 3.0), (1024.0, 5.0))
DEFAULT_VOLTAGE_TABLE = {0.44: (0.4245, 1.0)}
REFERENCE_VOLTAGE = 0.44


class NonlinearityDomainError(ValueError):
    pass


@dataclass(frozen=True)
class EffectSwitches:
    variation: bool = True
    nonlinearity: bool = True
    ir_drop: bool = True
    sense_window: bool = True
    sa_variation: bool = True
    leakage: bool = True

    @classmethod
    def none(cls) -> "EffectSwitches":
        return cls(False, False, False, False, False, False)

    @classmethod
    def only(cls, *names: str) -> "EffectSwitches":
        unknown = set(names) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown effects: {sorted(unknown)}")
        return cls(**{k: (k in names) for k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class NonidealConfig:
    seed: int = 0
    sigma_log_r: float = 0.4245
    nonlin_poly_low: tuple = POLY_LOW
    nonlin_poly_high: tuple = POLY_HIGH
    nonlin_breakpoint: int = 140
    nonlin_domain_max: int = 320
    sa_margin_curve: tuple = DEFAULT_MARGIN_CURVE
    sa_margin_extra: float = 0.0
    sa_offset_law: str = "uniform"
    sensing_window: tuple = (35.0, 300.0)
    r_segment: float = 0.24
    block_size: int = 32
    wordline_voltage: float = 0.44
    voltage_table: dict = field(default_factory=lambda: dict(DEFAULT_VOLTAGE_TABLE))
    effects: EffectSwitches = EffectSwitches()

    def __post_init__(self):
        object.__setattr__(self, "nonlin_poly_low", tuple(float(c) for c in self.nonlin_poly_low))
        object.__setattr__(self, "nonlin_poly_high", tuple(float(c) for c in self.nonlin_poly_high))
        curve = tuple((float(p), float(m)) for p, m in self.sa_margin_curve)
        object.__setattr__(self, "sa_margin_curve", curve)
        object.__setattr__(self, "sensing_window", tuple(float(v) for v in self.sensing_window))
        table = {float(v): (float(sc[0]), float(sc[1])) for v, sc in self.voltage_table.items()}
        object.__setattr__(self, "voltage_table", table)

        if self.sigma_log_r < 0 or not np.isfinite(self.sigma_log_r):
            raise ValueError("sigma_log_r must be finite and non-negative")
        if len(self.nonlin_poly_low) != 5 or len(self.nonlin_poly_high) != 5:
            raise ValueError("nonlinearity polynomials must have 5 coefficients")
        if not 0 < self.nonlin_breakpoint < self.nonlin_domain_max:
            raise ValueError("need 0 < nonlin_breakpoint < nonlin_domain_max")
        if not curve:
            raise ValueError("sa_margin_curve must not be empty")
        ps = [p for p, _ in curve]
        ms = [m for _, m in curve]
        if any(b <= a for a, b in zip(ps, ps[1:])):
            raise ValueError("sa_margin_curve p_total points must be strictly increasing")
        if any(b < a for a, b in zip(ms, ms[1:])) or min(ms) < 0:
            raise ValueError("sa_margin_curve must be non-negative and non-decreasing")
        if self.sa_offset_law not in ("uniform", "gaussian"):
            raise ValueError(f"unknown sa_offset_law {self.sa_offset_law!r}")
        lo, hi = self.sensing_window
        if not 0 < lo < hi:
            raise ValueError("sensing_window must satisfy 0 < low < high")
        if self.r_segment < 0 or not np.isfinite(self.r_segment):
            raise ValueError("r_segment must be finite and non-negative")
        if self.block_size <= 0:
            raise ValueError("block_size must be positive")
        if not np.all(np.isfinite(self.nonlin_poly_low + self.nonlin_poly_high)):
            raise ValueError("nonlinearity coefficients must be finite")

    @property
    def geometry(self) -> MacroGeometry:
        lo, hi = self.sensing_window
        return MacroGeometry(block_size=self.block_size, i_min_sense=lo, i_max=hi)

    def with_effects(self, effects: EffectSwitches) -> "NonidealConfig":
        return replace(self, effects=effects)

    def at_voltage(self, voltage: float) -> "NonidealConfig":
        """Config at a word-line voltage from the table (sigma follows the table)."""
        sigma, _ = lookup_voltage(self.voltage_table, voltage)
        return replace(self, wordline_voltage=float(voltage), sigma_log_r=sigma)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["voltage_table"] = {repr(v): list(sc) for v, sc in sorted(self.voltage_table.items())}
        d["nonlin_poly_low"] = list(self.nonlin_poly_low)
        d["nonlin_poly_high"] = list(self.nonlin_poly_high)
        d["sa_margin_curve"] = [list(pm) for pm in self.sa_margin_curve]
        d["sensing_window"] = list(self.sensing_window)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NonidealConfig":
        d = dict(d)
        if "seed" not in d:
            raise ValueError("config must specify 'seed'")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if not isinstance(d["seed"], int) or not 0 <= d["seed"] < 2**64:
            raise ValueError("seed must be a 64-bit non-negative integer")
        if "effects" in d:
            d["effects"] = EffectSwitches(**d["effects"])
        return cls(**d)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "NonidealConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def lookup_voltage(table: dict, voltage: float) -> tuple:
    for v, entry in table.items():
        if abs(v - voltage) < 1e-9:
            return entry
    raise KeyError(f"voltage {voltage} not in voltage table {sorted(table)}")


@dataclass(frozen=True)
class VariationMask:
    multipliers: np.ndarray
    seed: int

    def __post_init__(self):
        self.multipliers.setflags(write=False)


def variation_multipliers(shape, sigma_log_r: float, rng: np.random.Generator) -> np.ndarray:
    """Current multipliers exp(-sigma*Z); one standard normal drawn per cell.

    The normal draw does not depend on sigma, so sweeps over sigma with the
    same stream share their random numbers.
    """
    if sigma_log_r < 0:
        raise ValueError("sigma_log_r must be non-negative")
    z = rng.standard_normal(shape)
    if sigma_log_r == 0:
        return np.ones(shape)
    return np.exp(-sigma_log_r * z)


def sample_variation_mask(geometry: MacroGeometry, sigma_log_r: float, seed: int) -> VariationMask:
    rng = np.random.default_rng(seed)
    mult = variation_multipliers((geometry.rows, geometry.columns), sigma_log_r, rng)
    return VariationMask(mult, seed)


def nonlinearity_ratio(p, config: NonidealConfig):
    """Accumulated-current ratio versus activated LRS count ``p``.

    Works elementwise on arrays; raises NonlinearityDomainError for p outside
    ``[0, nonlin_domain_max]``.
    """
    p_arr = np.asarray(p, dtype=float)
    if np.any(p_arr < 0) or np.any(p_arr > config.nonlin_domain_max):
        raise NonlinearityDomainError(
            f"activated LRS count outside fitted domain [0, {config.nonlin_domain_max}]")
    if not config.effects.nonlinearity:
        ratio = np.ones_like(p_arr)
    else:
        low = np.polyval(config.nonlin_poly_low, p_arr)
        high = np.polyval(config.nonlin_poly_high, p_arr)
        ratio = np.where(p_arr <= config.nonlin_breakpoint, low, high)
    return float(ratio) if np.ndim(p) == 0 else ratio


def apply_nonlinearity(ideal_current, p, config: NonidealConfig):
    out = np.asarray(ideal_current, dtype=float) * nonlinearity_ratio(p, config)
    return float(out) if np.ndim(out) == 0 else out


def sa_margin(p_total, config: NonidealConfig):
    """Offset magnitude scale m(p_total) in units: curve value plus extra margin."""
    ps, ms = zip(*config.sa_margin_curve)
    m = np.interp(np.asarray(p_total, dtype=float), ps, ms) + config.sa_margin_extra
    return np.maximum(m, 0.0)


def _offsets_from_uniform(u: np.ndarray, m, law: str) -> np.ndarray:
    # u in [-1, 1); gaussian law maps it through the normal quantile, std m/2
    if law == "uniform":
        return m * u
    q = np.clip((u + 1.0) / 2.0, 1e-12, 1 - 1e-12)
    return m * 0.5 * ndtri(q)


def sample_sa_offset(p_total, config: NonidealConfig, rng: np.random.Generator):
    if np.any(np.asarray(p_total) < 0):
        raise ValueError("p_total must be non-negative")
    m = sa_margin(p_total, config)
    u = rng.uniform(-1.0, 1.0, size=np.shape(p_total))
    off = _offsets_from_uniform(u, m, config.sa_offset_law)
    return float(off) if np.ndim(p_total) == 0 else off


# Event codes recorded per SA decision.
EVENT_NONE = 0
EVENT_BELOW = 1
EVENT_ABOVE = 2
EVENT_MARGIN_FLIP = 3
EVENT_NAMES = {EVENT_NONE: None, EVENT_BELOW: "below_bound",
               EVENT_ABOVE: "above_bound", EVENT_MARGIN_FLIP: "margin_flip"}


def draw_sa_variates(shape, rng: np.random.Generator) -> tuple:
    """Offset variates in [-1, 1) and fallback coin flips for SA decisions."""
    u = rng.uniform(-1.0, 1.0, size=shape)
    coin = rng.integers(0, 2, size=shape, dtype=np.uint8)
    return u, coin


def sa_decide(i_pos, i_neg, p_total, config: NonidealConfig, u, coin) -> tuple:
    """Sense-amp decision from pre-drawn variates; returns ``(bits, events)``."""
    i_pos = np.asarray(i_pos, dtype=float)
    i_neg = np.asarray(i_neg, dtype=float)
    p_total = np.broadcast_to(np.asarray(p_total, dtype=float), i_pos.shape)
    if np.any(i_pos < 0) or np.any(i_neg < 0):
        raise ValueError("bit-line currents must be non-negative")
    if np.any(p_total < 0):
        raise ValueError("p_total must be non-negative")
    diff = i_pos - i_neg
    exact = diff > 0
    events = np.zeros(i_pos.shape, dtype=np.uint8)
    if config.effects.sa_variation:
        d = diff + _offsets_from_uniform(u, sa_margin(p_total, config), config.sa_offset_law)
        bits = d > 0
        events[bits != exact] = EVENT_MARGIN_FLIP
    else:
        bits = exact
    if config.effects.sense_window:
        lo, hi = config.sensing_window
        below = (i_pos < lo) | (i_neg < lo)
        above = ~below & ((i_pos > hi) | (i_neg > hi))
        bits = np.where(below | above, np.asarray(coin).astype(bool), bits)
        events[below] = EVENT_BELOW
        events[above] = EVENT_ABOVE
    return bits.astype(np.uint8), events


def sa_compare_batch(i_pos, i_neg, p_total, config: NonidealConfig, rng: np.random.Generator):
    """Vectorised sense-amp decision; returns ``(bits, events)`` as uint8 arrays.

    The same number of variates is consumed whatever the outcome, which keeps
    streams aligned across configurations.
    """
    u, coin = draw_sa_variates(np.shape(i_pos), rng)
    return sa_decide(i_pos, i_neg, p_total, config, u, coin)


def sa_compare(i_pos: float, i_neg: float, p_total: float, config: NonidealConfig,
               rng: np.random.Generator) -> tuple:
    """Single sense-amp decision; returns ``(bit, event_name_or_None)``."""
    bits, events = sa_compare_batch(np.array([i_pos]), np.array([i_neg]), np.array([p_total]), config, rng)
    return int(bits[0]), EVENT_NAMES[int(events[0])]
