"""Experiment runner: Monte-Carlo evaluation over seeds, sweeps, calibration.

Every report is a plain dict that serialises deterministically (sorted keys,
no timestamps). Files are append-only: a name that already exists gets a
numeric suffix instead of being overwritten.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import stats

from .dataset import Dataset
from .fixtures import accuracy
from .inference import (AccumulationMode, SimContext, default_mode, gconv_layer_forward, layer_inputs,
                        model_forward, power_proxy, reference_forward)
from .irdrop import WireModel, validate_block_model
from .mapper import PROPOSED_BIAS_ROWS, build_manifest, calibrate_extra_bias
from .model import TernaryConvModel, load_model
from .nonideal import REFERENCE_VOLTAGE, NonidealConfig

METRIC = "top-1 accuracy (desk-scale stand-in for mAP)"
DEFAULT_SEEDS = tuple(range(10))
REPORT_VERSION = 1


@dataclass(frozen=True)
class ExperimentSpec:
    model: Path | None = None
    data: Path | None = None
    config: Path | None = None
    seeds: tuple = DEFAULT_SEEDS
    mode: str | None = None
    style: str | None = None
    out: Path = Path("reports")
    calib_data: Path | None = None
    bias_table: Path | None = None
    workers: int = 1

    def __post_init__(self):
        seeds = tuple(int(s) for s in self.seeds)
        if not seeds:
            raise ValueError("seed list must not be empty")
        if len(set(seeds)) != len(seeds):
            raise ValueError("seed list has duplicates")
        object.__setattr__(self, "seeds", seeds)
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass(frozen=True)
class Inputs:
    model: TernaryConvModel
    data: Dataset
    config: NonidealConfig
    mode: AccumulationMode
    blobs: dict  # name -> raw bytes, for the fingerprint


# ---------------------------------------------------------------- utilities

def fingerprint(blobs: dict, params: dict) -> str:
    """sha256 over every input byte and the run parameters."""
    h = hashlib.sha256()
    for name in sorted(blobs):
        data = blobs[name]
        h.update(f"{name}:{len(data)}\n".encode())
        h.update(data)
    h.update(json.dumps(params, sort_keys=True).encode())
    return h.hexdigest()


def mean_std(values) -> dict:
    """Mean and sample std; std is omitted for a single value."""
    v = np.asarray(values, dtype=float)
    out = {"mean": float(v.mean())}
    if v.size > 1:
        out["std"] = float(v.std(ddof=1))
    return out


def unique_path(path: Path) -> Path:
    """``path`` if free, else the first free ``stem-N.suffix``."""
    path = Path(path)
    if not path.exists():
        return path
    n = 1
    while True:
        cand = path.with_name(f"{path.stem}-{n}{path.suffix}")
        if not cand.exists():
            return cand
        n += 1


def _write_new(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    while True:
        target = unique_path(path)
        try:
            with open(target, "x", encoding="utf-8", newline="") as fh:
                fh.write(text)
            return target
        except FileExistsError:  # lost a race; try the next suffix
            continue


def dumps_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True, allow_nan=False) + "\n"


def dumps_csv(header: list, rows: list, metric: str = METRIC) -> str:
    buf = io.StringIO()
    buf.write(f"# metric: {metric}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(round(v, 10))
    return v


def write_outputs(out_dir: Path, name: str, report: dict, tables: dict) -> list:
    """Write ``name.json`` plus one CSV per table; returns the paths written."""
    out_dir = Path(out_dir)
    paths = [_write_new(out_dir / f"{name}.json", dumps_json(report))]
    for suffix, (header, rows) in tables.items():
        text = dumps_csv(header, rows, report.get("metric", METRIC))
        paths.append(_write_new(out_dir / f"{name}{suffix}.csv", text))
    return paths


# ---------------------------------------------------------------- loading

def load_inputs(spec: ExperimentSpec, data_path: Path | None = None) -> Inputs:
    if spec.model is None or (data_path or spec.data) is None:
        raise ValueError("--model and --data are required")
    model_bytes = Path(spec.model).read_bytes()
    data_path = Path(data_path or spec.data)
    data_bytes = data_path.read_bytes()
    model = load_model(spec.model)
    model.validate()
    if spec.style is not None and spec.style != model.style:
        raise ValueError(f"model file is {model.style}-style, not {spec.style}")
    data = Dataset.loads(data_bytes)
    if tuple(data.inputs.shape[1:]) != model.input_shape:
        raise ValueError(f"dataset shape {data.inputs.shape[1:]} does not match model input {model.input_shape}")
    if spec.config is not None:
        cfg_bytes = Path(spec.config).read_bytes()
        config = NonidealConfig.from_dict(json.loads(cfg_bytes))
    else:
        config = NonidealConfig()
        cfg_bytes = config.dumps().encode()
    blobs = {"model": model_bytes, "data": data_bytes, "config": cfg_bytes}
    if spec.bias_table is not None:
        raw = Path(spec.bias_table).read_bytes()
        model = apply_bias_table(model, json.loads(raw))
        blobs["bias_table"] = raw
    mode = AccumulationMode.parse(spec.mode) if spec.mode else default_mode(model.style)
    return Inputs(model, data, config, mode, blobs)


def apply_bias_table(model: TernaryConvModel, table: dict) -> TernaryConvModel:
    biases = table.get("biases", table)
    names = {model.layers[i].name for i in model.irc_layers}
    unknown = set(biases) - names
    if unknown:
        raise ValueError(f"bias table names unknown layers: {sorted(unknown)}")
    return model.with_extra_bias({k: int(v) for k, v in biases.items()})


# ---------------------------------------------------------------- simulate

def _layer_record(t) -> dict:
    return {
        "layer": t.name, "decisions": t.decisions,
        "below_bound_rate": t.rate("below_bound"), "above_bound_rate": t.rate("above_bound"),
        "margin_flip_rate": t.rate("margin_flip"), "domain_events": t.domain_events,
    }


def run_seed(model: TernaryConvModel, x: np.ndarray, labels: np.ndarray, config: NonidealConfig,
             mode: AccumulationMode, seed: int) -> dict:
    ctx = SimContext(config, mode, seed, config.geometry)
    res = model_forward(model, x, ctx)
    return {
        "seed": int(seed),
        "accuracy": accuracy(res.scores, labels),
        "power_proxy": power_proxy(res.traces, config.wordline_voltage, config.voltage_table),
        "layers": [_layer_record(t) for t in res.traces],
    }


def _run_seed_args(args):
    return run_seed(*args)


def run_seeds(model, data: Dataset, config: NonidealConfig, mode: AccumulationMode, seeds,
              workers: int = 1) -> list:
    """Per-seed results in seed-list order (each seed owns its context)."""
    jobs = [(model, data.inputs, data.labels, config, mode, s) for s in seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_seed_args, jobs))
    return [_run_seed_args(j) for j in jobs]


def _aggregate_layers(per_seed: list) -> list:
    out = []
    for i, first in enumerate(per_seed[0]["layers"]):
        recs = [r["layers"][i] for r in per_seed]
        agg = {"layer": first["layer"], "decisions": sum(r["decisions"] for r in recs),
               "domain_events": sum(r["domain_events"] for r in recs)}
        for k in ("below_bound_rate", "above_bound_rate", "margin_flip_rate"):
            agg[k] = float(np.mean([r[k] for r in recs]))
        out.append(agg)
    return out


def simulate(model: TernaryConvModel, data: Dataset, config: NonidealConfig, mode: AccumulationMode,
             seeds, workers: int = 1) -> dict:
    """Monte-Carlo accuracy over ``seeds`` against the exact software oracle."""
    seeds = tuple(int(s) for s in seeds)
    if not seeds:
        raise ValueError("seed list must not be empty")
    ideal = accuracy(reference_forward(model, data.inputs), data.labels)
    per_seed = run_seeds(model, data, config, mode, seeds, workers)
    acc = mean_std([r["accuracy"] for r in per_seed])
    report = {
        "metric": METRIC, "style": model.style, "mode": str(mode), "seeds": list(seeds),
        "n_samples": len(data), "ideal_accuracy": ideal,
        "accuracy_mean": acc["mean"], "accuracy_drop": ideal - acc["mean"],
        "power_proxy": float(np.mean([r["power_proxy"] for r in per_seed])),
        "per_seed": per_seed, "layers": _aggregate_layers(per_seed),
        "extra_bias": {model.layers[i].name: model.layers[i].extra_bias for i in model.irc_layers},
    }
    if "std" in acc:
        report["accuracy_std"] = acc["std"]
    return report


def _params(command: str, spec: ExperimentSpec, inputs: Inputs, **extra) -> dict:
    return {"command": command, "seeds": list(spec.seeds), "mode": str(inputs.mode),
            "style": inputs.model.style, "report_version": REPORT_VERSION, **extra}


def _seed_table(report: dict) -> tuple:
    rows = [[r["seed"], r["accuracy"], r["power_proxy"]] for r in report["per_seed"]]
    rows.append(["mean", report["accuracy_mean"], report["power_proxy"]])
    if "accuracy_std" in report:
        rows.append(["std", report["accuracy_std"], ""])
    rows.append(["ideal", report["ideal_accuracy"], ""])
    return ["seed", "accuracy", "power_proxy"], rows


def _layer_table(layers: list) -> tuple:
    header = ["layer", "decisions", "margin_flip_pct", "below_bound_pct", "above_bound_pct", "domain_events"]
    rows = [[l["layer"], l["decisions"], 100 * l["margin_flip_rate"], 100 * l["below_bound_rate"],
             100 * l["above_bound_rate"], l["domain_events"]] for l in layers]
    return header, rows


def cmd_simulate(spec: ExperimentSpec) -> tuple:
    """Returns ``(report, written paths)``."""
    inputs = load_inputs(spec)
    report = simulate(inputs.model, inputs.data, inputs.config, inputs.mode, spec.seeds, spec.workers)
    report["fingerprint"] = fingerprint(inputs.blobs, _params("simulate", spec, inputs))
    paths = write_outputs(spec.out, "simulate", report,
                          {"": _seed_table(report), "_layers": _layer_table(report["layers"])})
    return report, paths


# ---------------------------------------------------------------- sweeps

def trend_test(acc: np.ndarray, alpha: float = 0.05) -> dict:
    """Paired one-sided check that accuracy does not increase along the axis.

    ``acc`` is (points, seeds) with common seeds per column. Each consecutive
    step is tested for a significant increase (paired t-test, one-sided);
    the trend counts as non-increasing when no step rejects at ``alpha``.
    """
    acc = np.asarray(acc, dtype=float)
    steps = []
    for a, b in zip(acc[:-1], acc[1:]):
        d = b - a
        if acc.shape[1] < 2 or np.allclose(d, d[0]):
            p = 0.0 if d.size and d[0] > 0 else 1.0
        else:
            p = float(stats.ttest_rel(b, a, alternative="greater").pvalue)
        steps.append({"mean_change": float(d.mean()), "p_increase": p})
    return {"alpha": alpha, "steps": steps, "non_increasing": all(s["p_increase"] >= alpha for s in steps)}


def sweep(model, data, configs: list, mode, seeds, workers: int = 1) -> list:
    return [simulate(model, data, cfg, mode, seeds, workers) for cfg in configs]


def _point(rep: dict) -> tuple:
    return rep["accuracy_mean"], rep.get("accuracy_std", float("nan"))


def cmd_sweep_wl(spec: ExperimentSpec, voltages=(), sigmas=()) -> tuple:
    """Word-line voltage sweep (sigma from the table) or a direct sigma sweep."""
    if voltages and sigmas:
        raise ValueError("give either a voltage axis or a sigma axis, not both")
    inputs = load_inputs(spec)
    cfg = inputs.config
    if voltages:
        configs = [cfg.at_voltage(float(v)) for v in voltages]  # KeyError on unknown voltage
        axis_name, axis = "wordline_voltage", [float(v) for v in voltages]
    else:
        configs = [replace(cfg, sigma_log_r=float(s)) for s in sigmas]
        axis_name, axis = "sigma_log_r", [float(s) for s in sigmas]
    reps = sweep(inputs.model, inputs.data, configs, inputs.mode, spec.seeds, spec.workers)
    ref_power = None
    if voltages:
        ref = [r for c, r in zip(configs, reps) if abs(c.wordline_voltage - REFERENCE_VOLTAGE) < 1e-9]
        if not ref and REFERENCE_VOLTAGE in cfg.voltage_table:
            ref = sweep(inputs.model, inputs.data, [cfg.at_voltage(REFERENCE_VOLTAGE)], inputs.mode,
                        spec.seeds, spec.workers)
        ref_power = ref[0]["power_proxy"] if ref else None
    points = []
    for c, r in zip(configs, reps):
        p = {"wordline_voltage": c.wordline_voltage, "sigma_log_r": c.sigma_log_r,
             "accuracy_mean": r["accuracy_mean"], "power_proxy": r["power_proxy"],
             "per_seed": [s["accuracy"] for s in r["per_seed"]]}
        if "accuracy_std" in r:
            p["accuracy_std"] = r["accuracy_std"]
        if ref_power:
            p["power_relative"] = r["power_proxy"] / ref_power
        points.append(p)
    report = {"metric": METRIC, "axis": axis_name, "values": axis, "seeds": list(spec.seeds),
              "mode": str(inputs.mode), "style": inputs.model.style, "points": points,
              "ideal_accuracy": reps[0]["ideal_accuracy"] if reps else
              accuracy(reference_forward(inputs.model, inputs.data.inputs), inputs.data.labels)}
    if axis_name == "sigma_log_r" and len(points) > 1:
        order = np.argsort(axis, kind="stable")
        report["trend"] = trend_test(np.array([points[i]["per_seed"] for i in order]))
    report["fingerprint"] = fingerprint(inputs.blobs, _params("sweep-wl", spec, inputs, axis=axis_name, values=axis))
    long_rows = [[p["wordline_voltage"], p["sigma_log_r"], p["accuracy_mean"], p.get("accuracy_std", float("nan")),
                  p["power_proxy"], p.get("power_relative", float("nan"))] for p in points]
    label = "Device std variation" if axis_name == "sigma_log_r" else "Wordline voltage"
    wide = ([label] + axis, [["accuracy"] + [p["accuracy_mean"] for p in points],
                             ["accuracy_std"] + [p.get("accuracy_std", float("nan")) for p in points]])
    header = ["wordline_voltage", "sigma_log_r", "accuracy_mean", "accuracy_std", "power_proxy", "power_relative"]
    tables = {"": (header, long_rows),
              "_table": wide}
    return report, write_outputs(spec.out, "sweep", report, tables)


def cmd_tolerance(spec: ExperimentSpec, extras=(1.0, 2.0, 3.0)) -> tuple:
    """SA margin sweep; the sweep always includes extra = 0 as its reference."""
    inputs = load_inputs(spec)
    axis = sorted({0.0, *(float(e) for e in extras)})
    if any(e < 0 for e in axis):
        raise ValueError("sa_margin_extra must be non-negative")
    configs = [replace(inputs.config, sa_margin_extra=e) for e in axis]
    reps = sweep(inputs.model, inputs.data, configs, inputs.mode, spec.seeds, spec.workers)
    points = []
    for e, r in zip(axis, reps):
        p = {"sa_margin_extra": e, "accuracy_mean": r["accuracy_mean"],
             "per_seed": [s["accuracy"] for s in r["per_seed"]],
             "margin_flip_rate": float(np.mean([l["margin_flip_rate"] for l in r["layers"]]))}
        if "accuracy_std" in r:
            p["accuracy_std"] = r["accuracy_std"]
        points.append(p)
    report = {"metric": METRIC, "axis": "sa_margin_extra", "values": axis, "seeds": list(spec.seeds),
              "mode": str(inputs.mode), "style": inputs.model.style, "points": points,
              "ideal_accuracy": reps[0]["ideal_accuracy"]}
    if len(points) > 1:
        report["trend"] = trend_test(np.array([p["per_seed"] for p in points]))
    report["fingerprint"] = fingerprint(inputs.blobs, _params("tolerance", spec, inputs, values=axis))
    header = ["Sensing variation"] + [f"+{e:g}" for e in axis]
    rows = [["accuracy"] + [p["accuracy_mean"] for p in points],
            ["accuracy_std"] + [p.get("accuracy_std", float("nan")) for p in points],
            ["margin_flip_pct"] + [100 * p["margin_flip_rate"] for p in points]]
    return report, write_outputs(spec.out, "tolerance", report, {"": (header, rows)})


# ---------------------------------------------------------------- calibrate

def layer_rates(model: TernaryConvModel, x: np.ndarray, layer_name: str, bias: int, ctx: SimContext,
                acts: dict | None = None) -> tuple:
    """(below_bound, margin_flip) rates of one layer at a given extra bias."""
    acts = acts if acts is not None else layer_inputs(model, x, ctx)
    idx = next(i for i in model.irc_layers if model.layers[i].name == layer_name)
    layer = replace(model.layers[idx], extra_bias=int(bias))
    trial = replace(model, layers=model.layers[:idx] + (layer,) + model.layers[idx + 1:])
    mapping = build_manifest(trial, ctx.geometry)[layer_name]
    _, trace = gconv_layer_forward(acts[layer_name], layer, mapping, ctx, idx)
    return trace.rate("below_bound"), trace.rate("margin_flip")


def calibrate(model: TernaryConvModel, data: Dataset, config: NonidealConfig, mode: AccumulationMode,
              candidates=range(0, PROPOSED_BIAS_ROWS + 1), target: float = 0.03) -> dict:
    """Layer-by-layer extra-bias choice on the calibration split.

    Layers are calibrated in network order; each layer sees inputs produced
    with the biases already chosen upstream. One fixed seed (the config's)
    drives the calibration run.
    """
    if model.style != "proposed":
        raise ValueError("extra-bias calibration applies to the proposed style")
    ctx = SimContext(config, mode, config.seed, config.geometry)
    chosen = {}
    layers = {}
    current = model.with_extra_bias({model.layers[i].name: 0 for i in model.irc_layers})
    for i in model.irc_layers:
        name = model.layers[i].name
        acts = layer_inputs(current, data.inputs, ctx)
        res = calibrate_extra_bias(lambda b: layer_rates(current, data.inputs, name, b, ctx, acts),
                                   candidates, target)
        chosen[name] = res.bias
        current = current.with_extra_bias({name: res.bias})
        layers[name] = {
            "bias": res.bias, "met_target": res.met_target,
            "before": {"below_bound_rate": res.before[0], "margin_flip_rate": res.before[1]},
            "after": {"below_bound_rate": res.after[0], "margin_flip_rate": res.after[1]},
            "candidates": {str(k): list(v) for k, v in res.rates.items()},
        }
    return {"biases": chosen, "layers": layers, "target_below_bound": target, "seed": config.seed}


def calibration_table(result: dict) -> tuple:
    names = list(result["biases"])
    header = ["SA errors", "bias"] + names
    rows = []
    for when, label in (("before", "w/o extra bias"), ("after", "w/ extra bias")):
        L = result["layers"]
        rows.append(["sensing variation (%)", label] + [100 * L[n][when]["margin_flip_rate"] for n in names])
        rows.append(["bit-line current < lower bound (%)", label] + [100 * L[n][when]["below_bound_rate"]
                                                                     for n in names])
    rows.append(["extra bias (cells)", "chosen"] + [result["biases"][n] for n in names])
    return header, rows


def cmd_calibrate(spec: ExperimentSpec) -> tuple:
    data_path = spec.calib_data or spec.data
    inputs = load_inputs(replace(spec, bias_table=None), data_path)
    mode = inputs.mode
    result = calibrate(inputs.model, inputs.data, inputs.config, mode)
    report = {"metric": METRIC, "style": inputs.model.style, "mode": str(mode), **result}
    report["fingerprint"] = fingerprint(inputs.blobs, _params("calibrate", spec, inputs))
    paths = write_outputs(spec.out, "calibrate", report, {"": calibration_table(result)})
    paths.append(_write_new(Path(spec.out) / "bias_table.json",
                            dumps_json({"biases": result["biases"], "fingerprint": report["fingerprint"]})))
    return report, paths


# ---------------------------------------------------------------- IR drop

def irdrop_validate(config: NonidealConfig, n_cases: int = 1000, seed: int | None = None,
                    rows: int = 1024) -> dict:
    wire = WireModel(config.r_segment, config.block_size)
    seed = config.seed if seed is None else seed
    res = validate_block_model(n_cases, wire, rows=rows, seed=seed, sigma_log_r=config.sigma_log_r)
    errs = np.asarray(res["errors"])
    return {
        "n_cases": int(n_cases), "r_segment": config.r_segment, "block_size": config.block_size,
        "seed": seed, "rows": rows,
        "percentiles": {f"p{q}": float(np.percentile(errs, q)) if errs.size else 0.0 for q in (50, 90, 95, 99)},
        "max": float(errs.max()) if errs.size else 0.0,
        "frac_within_1pct": res["frac_within_1pct"],
        "worst_case_seed": list(res["worst_case_seed"]) if res["worst_case_seed"] is not None else None,
        "errors": [float(e) for e in errs],
    }


def cmd_irdrop_validate(spec: ExperimentSpec, n_cases: int = 1000) -> tuple:
    if spec.config is not None:
        raw = Path(spec.config).read_bytes()
        config = NonidealConfig.from_dict(json.loads(raw))
    else:
        config = NonidealConfig()
        raw = config.dumps().encode()
    report = irdrop_validate(config, n_cases)
    report["metric"] = "relative error of block-model bit-line current vs exact ladder"
    report["fingerprint"] = fingerprint({"config": raw}, {"command": "irdrop-validate", "n_cases": n_cases,
                                                          "report_version": REPORT_VERSION})
    rows = [[i, e] for i, e in enumerate(report["errors"])]
    return report, write_outputs(spec.out, "irdrop", report, {"": (["case", "relative_error"], rows)})

