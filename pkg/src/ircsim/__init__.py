"""Desk-scale simulator of a 1024x1024 in-RRAM computing macro with nonideal effects."""
from .core import CellState, ColumnPattern, DeviceParams, MacroGeometry, RowRole
from .inference import AccumulationMode, SimContext, model_forward, reference_forward
from .model import Layer, TernaryConvModel, load_model, save_model
from .nonideal import EffectSwitches, NonidealConfig

__version__ = "0.1.0"

__all__ = [
    "AccumulationMode", "CellState", "ColumnPattern", "DeviceParams", "EffectSwitches", "Layer",
    "MacroGeometry", "NonidealConfig", "RowRole", "SimContext", "TernaryConvModel", "load_model",
    "model_forward", "reference_forward", "save_model",
]
