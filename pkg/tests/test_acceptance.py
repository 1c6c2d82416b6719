"""Acceptance gate: one PASS/FAIL line per criterion, printed in the pytest summary.

Run alone with ``python3 tests/test_acceptance.py`` or ``pytest tests/test_acceptance.py``.
"""
import itertools
import sys
import time
from dataclasses import replace

import numpy as np
import pytest
from click.testing import CliRunner

from conftest import ACCEPTANCE_LINES
from ircsim import harness
from ircsim.cli import main
from ircsim.core import MacroGeometry
from ircsim.inference import AccumulationMode, SimContext, default_mode, gconv_layer_forward, simulate_column_pair
from ircsim.irdrop import WireModel, current_drop_profile
from ircsim.mapper import decode_ternary, fold_bn_to_threshold, map_layer, map_ternary
from ircsim.model import BnParams, Layer
from ircsim.nonideal import (EffectSwitches, NonidealConfig, apply_nonlinearity, variation_multipliers)

CFG = NonidealConfig(seed=0)
SEEDS = tuple(range(10))


def report(n: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


@pytest.fixture(scope="module")
def calibrated(desk):
    t = time.perf_counter()
    cal = harness.calibrate(desk["proposed"], desk["calib"], CFG, default_mode("proposed"))
    return cal, desk["proposed"].with_extra_bias(cal["biases"]), time.perf_counter() - t


def test_c01_variation_fit():
    t = time.perf_counter()
    mult = variation_multipliers(100_000, 0.4245, np.random.default_rng(0))
    fitted = float(np.std(np.log(mult), ddof=1))
    dt = time.perf_counter() - t
    rel = abs(fitted - 0.4245) / 0.4245
    ok = rel <= 0.02 and dt < 5
    report(1, ok, f"fitted log-std {fitted:.4f} (rel err {rel:.2%}, tol 2%), {dt:.2f}s (< 5s)")
    assert ok


def test_c02_law_of_large_numbers():
    rng = np.random.default_rng(1)
    rel = []
    for n in (64, 1024):
        s = variation_multipliers((10_000, n), 0.4245, rng).sum(axis=1)
        rel.append(s.std() / s.mean())
    ratio = rel[0] / rel[1]
    ok = abs(ratio - 4.0) / 4.0 <= 0.15
    report(2, ok, f"rel-std ratio N=64/N=1024 = {ratio:.3f} (target 4 +- 15%)")
    assert ok


def test_c03_nonlinearity_immunity():
    p = np.arange(1, 321)
    f = apply_nonlinearity(p.astype(float), p, CFG)
    steps_down = [int(p[i]) for i in np.flatnonzero(np.diff(f) <= 0)]
    monotone = not steps_down
    # every (p+, p-) pair in the domain, nonlinearity only, single shot, leakage off
    q = np.arange(0, 321)
    fq = apply_nonlinearity(q.astype(float), q, CFG)
    exact = q[:, None] > q[None, :]
    sim = fq[:, None] > fq[None, :]
    flips = int(np.count_nonzero(exact != sim))
    # constructed partial-sum(3) flip: G+ 3 x 30 LRS (90), G- 100 LRS in one group
    nonlin = CFG.with_effects(EffectSwitches.only("nonlinearity"))
    plus, minus, x = np.zeros(1024, np.uint8), np.zeros(1024, np.uint8), np.zeros(1024, np.uint8)
    for g in range(3):
        plus[g * 100:g * 100 + 30] = 1
    minus[:100] = 1
    x[:300] = 1
    rng = np.random.default_rng(0)
    ss, _ = simulate_column_pair(x, plus, minus, None, None, SimContext(nonlin), rng, used_rows=300)
    ps, _ = simulate_column_pair(x, plus, minus, None, None,
                                 SimContext(nonlin, AccumulationMode("partial_sum", 3)), rng, used_rows=300)
    constructed = ss == 0 and ps == 1
    ok = monotone and flips == 0 and constructed
    report(3, ok, f"p*ratio(p) strictly increasing: {monotone} (steps down after p={steps_down}); "
                  f"single-shot flips over all pairs: {flips}; partial-sum(3) flip constructed: {constructed} "
                  f"(see decisions ledger: default coefficients step down at the breakpoint)")
    assert ok


def test_c04_irdrop_oracle():
    t = time.perf_counter()
    rep = harness.irdrop_validate(CFG, n_cases=1000, seed=0)
    dt = time.perf_counter() - t
    ok = rep["frac_within_1pct"] >= 0.95 and dt < 60
    report(4, ok, f"{rep['frac_within_1pct']:.1%} of 1000 cases within 1% (need >= 95%), "
                  f"p95 {rep['percentiles']['p95']:.3%}, max {rep['max']:.3%}, {dt:.1f}s (< 60s)")
    assert ok


def test_c05_irdrop_monotone():
    wire = WireModel(CFG.r_segment, CFG.block_size)
    drops = np.array([current_drop_profile(32, b, wire) for b in range(32)])
    ok = bool(np.all(np.diff(drops) >= 0))
    report(5, ok, f"single-block drop non-decreasing over blocks 0..31: {drops[0]:.3f} -> {drops[-1]:.3f} units")
    assert ok


def test_c06_calibration(calibrated):
    cal, _, dt = calibrated
    parts, ok = [], True
    for name, rec in cal["layers"].items():
        b0, f0 = rec["before"]["below_bound_rate"], rec["before"]["margin_flip_rate"]
        b1, f1 = rec["after"]["below_bound_rate"], rec["after"]["margin_flip_rate"]
        good = b1 <= 0.03 and f1 <= 2 * f0
        ok &= good
        parts.append(f"{name} bias {rec['bias']}: below {b0:.2%}->{b1:.2%}, flip {f0:.2%}->{f1:.2%}")
    report(6, ok, "; ".join(parts) + f" ({dt:.0f}s)")
    assert ok


def loop_oracle(fmap, w, stride, padding):
    n, cin, h, wd = fmap.shape
    cout, ipg, k, _ = w.shape
    opg = cout // (cin // ipg)
    xp = np.pad(fmap.astype(int), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh, ow = (h + 2 * padding - k) // stride + 1, (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, cout, oh, ow), dtype=np.uint8)
    for o in range(cout):
        g = o // opg
        for i, j in itertools.product(range(oh), range(ow)):
            win = xp[:, g * ipg:(g + 1) * ipg, i * stride:i * stride + k, j * stride:j * stride + k]
            out[:, o, i, j] = (win * w[o]).sum(axis=(1, 2, 3)) > 0
    return out


def test_c07_mapping_correctness():
    round_trip = all(tuple(decode_ternary(*map_ternary(w))) == w
                     for w in itertools.product((-1, 0, 1), repeat=6))
    off = SimContext(CFG.with_effects(EffectSwitches.none()))
    mismatches = 0
    for case in range(100):
        rng = np.random.default_rng(1000 + case)
        groups, ipg, opg = (int(v) for v in rng.integers(1, 5, 3))
        k = int(rng.choice([1, 3]))
        layer = Layer("irc_gconv", rng.choice([-1, 0, 1], size=(groups * opg, ipg, k, k)), name="t",
                      stride=int(rng.integers(1, 3)), padding=k // 2)
        fmap = rng.integers(0, 2, size=(3, groups * ipg, 6, 6)).astype(np.uint8)
        mapping = map_layer(layer, groups * ipg, MacroGeometry(), "proposed")
        out, _ = gconv_layer_forward(fmap, layer, mapping, off, 1)
        mismatches += int(np.count_nonzero(out != loop_oracle(fmap, layer.weights, layer.stride, layer.padding)))
    ok = round_trip and mismatches == 0
    report(7, ok, f"3^6 ternary round trip exact: {round_trip}; effects-off vs integer oracle on 100 random "
                  f"layers: {mismatches} mismatches")
    assert ok


def test_c08_bn_folding():
    rng = np.random.default_rng(8)
    mismatches, checked = 0, 0
    xs = np.arange(-40, 41)
    for _ in range(1000):
        gamma = rng.uniform(0.05, 4) * rng.choice([-1, 1])
        bn = BnParams([gamma], [rng.normal(0, 3)], [rng.normal(0, 10)], [rng.uniform(0, 20)])
        theta, flip = fold_bn_to_threshold(bn)
        keep = xs != theta
        comparator = (xs[keep] > theta) != flip
        mismatches += int(np.count_nonzero(comparator != (bn.apply(xs[keep]) > 0)))
        checked += int(keep.sum())
    ok = mismatches == 0
    report(8, ok, f"{mismatches} mismatches over 1000 BN sets x {xs.size} integer pre-activations ({checked} checks)")
    assert ok


def test_c09_end_to_end(desk, calibrated):
    _, proposed, _ = calibrated
    t = time.perf_counter()
    rp = harness.simulate(proposed, desk["test"], CFG, default_mode("proposed"), SEEDS)
    rb = harness.simulate(desk["baseline"], desk["test"], CFG, default_mode("baseline"), SEEDS)
    dt = time.perf_counter() - t
    dp, db = 100 * rp["accuracy_drop"], 100 * rb["accuracy_drop"]
    ok = dp <= 5 and db >= 20 and dt < 600
    report(9, ok, f"proposed {100 * rp['ideal_accuracy']:.1f} -> {100 * rp['accuracy_mean']:.1f} "
                  f"+- {100 * rp['accuracy_std']:.1f} (loss {dp:.1f} pts, need <= 5); "
                  f"baseline {100 * rb['ideal_accuracy']:.1f} -> {100 * rb['accuracy_mean']:.1f} "
                  f"+- {100 * rb['accuracy_std']:.1f} (loss {db:.1f} pts, need >= 20); 10 seeds, {dt:.0f}s")
    assert ok


def test_c10_tolerance_trends(desk, calibrated):
    _, proposed, _ = calibrated
    mode = default_mode("proposed")
    sig = harness.sweep(proposed, desk["test"], [replace(CFG, sigma_log_r=s) for s in (0.42, 0.43, 0.44)],
                        mode, SEEDS)
    extra = harness.sweep(proposed, desk["test"], [replace(CFG, sa_margin_extra=e) for e in (0, 1, 2, 3)],
                          mode, SEEDS)
    acc = [np.array([[s["accuracy"] for s in r["per_seed"]] for r in reps]) for reps in (sig, extra)]
    t_sig, t_extra = harness.trend_test(acc[0]), harness.trend_test(acc[1])
    ok = t_sig["non_increasing"] and t_extra["non_increasing"]
    fmt = lambda a: " ".join(f"{100 * v:.1f}" for v in a.mean(axis=1))
    report(10, ok, f"sigma 0.42/0.43/0.44: {fmt(acc[0])} (min p_increase "
                   f"{min(s['p_increase'] for s in t_sig['steps']):.2f}); SA extra +0/+1/+2/+3: {fmt(acc[1])} "
                   f"(min p_increase {min(s['p_increase'] for s in t_extra['steps']):.2f}); "
                   f"paired one-sided t-test, alpha 0.05, 10 seeds")
    assert ok


def test_c11_determinism(small_files, tmp_path):
    base = ["--model", small_files / "proposed.ircmodel", "--data", small_files / "test.ircdata",
            "--config", small_files / "config.json", "--seeds", "0,1"]
    commands = [
        ["simulate", *base], ["sweep-wl", *base, "--sigmas", "0.42,0.44"], ["tolerance", *base, "--extras", "1"],
        ["calibrate", *base, "--calib-data", small_files / "calib.ircdata"], ["irdrop-validate", "--cases", "50"],
    ]
    mismatched = []
    for cmd in commands:
        outs = []
        for run in ("a", "b"):
            out = tmp_path / f"{cmd[0]}-{run}"
            res = CliRunner().invoke(main, [str(a) for a in cmd] + ["--out", str(out)])
            assert res.exit_code == 0, res.output
            outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
        if outs[0] != outs[1]:
            mismatched.append(cmd[0])
    ok = not mismatched
    detail = f"{len(commands)} commands rerun, byte-identical reports: {ok}"
    report(11, ok, detail + (f" (differs: {', '.join(mismatched)})" if mismatched else ""))
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
