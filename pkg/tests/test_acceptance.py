"""Acceptance suite: one check per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines inline, or
``python tests/test_acceptance.py`` for the lines alone.
"""

import json
import math
import time
from collections import defaultdict
from pathlib import Path

import numpy as np
import pytest

from fragility.cli import main
from fragility.diagnostics import (
    DiagnosticsOptions,
    HeadDiagnostics,
    attention_bound,
    depth_relaxation,
    kappa_score,
    kappa_softmax,
    kappa_V,
    relaxation_factor,
    rho_LN,
    trace_diagnostics,
)
from fragility.driver import Exp3Config, Trajectory, exp3_arm, run_exp3
from fragility.earlywarning import SpikeConfig, permutation_pvalue
from fragility.io import read_csv
from fragility.mitigation import EpsBumpConfig
from fragility.linalg import softmax_jac_norm, softmax_jac_norms
from fragility.model import ModelConfig, attention_forward, forward_dual, init_params, ln_forward
from fragility.precision import REFERENCE, Accumulate, FpFormat, PrecisionSpec, effective_eps

SUITE_START = time.perf_counter()
RESULTS: dict[int, str] = {}  # criterion -> report line, read by the terminal summary

NATIVE = [PrecisionSpec(FpFormat.BF16, Accumulate.NATIVE), PrecisionSpec(FpFormat.FP16, Accumulate.NATIVE)]

EXP1_CFG = {
    "experiment": "exp1",
    "root_seed": 0,
    "sweep": {"widths": [32, 64], "precisions": ["bf16-native", "fp16-native"], "seeds": [0, 1, 2, 3, 4], "steps": 8},
}
EXP2_CFG = {"experiment": "exp2", "root_seed": 0, "sweep": {"seeds": [0, 1, 2, 3, 4], "steps": 195}}
EXP3_CFG = {
    "experiment": "exp3",
    "root_seed": 0,
    "sweep": {"seeds": list(range(10))},
    "exp3": {"rho_stars": [0.5], "eps_maxes": [0.01]},
}
EXP3_OUTPUTS = ("exp3_summary.csv", "exp3_seeds.csv", "exp3_events.csv")
OUTPUTS = {
    "exp1": ("exp1_raw.csv", "exp1_configs.csv", "exp1_regression.csv"),
    "exp2": ("leadlag.csv", "leadlag_loss.csv", "exp2_series.csv"),
    "exp3": EXP3_OUTPUTS,
}


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print("\n" + line, flush=True)
    assert ok, f"criterion {n}: {detail}"


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    """Run the three experiments once through the command line."""
    base = tmp_path_factory.mktemp("acceptance")
    out = {}
    for name, cfg in (("exp1", EXP1_CFG), ("exp2", EXP2_CFG), ("exp3", EXP3_CFG)):
        path = base / f"{name}.json"
        path.write_text(json.dumps(cfg, indent=2))
        t0 = time.perf_counter()
        code = main([name, "--config", str(path), "--out", str(base / name), "-q"])
        assert code == 0, f"{name} exited with {code}"
        out[name] = (base / name, time.perf_counter() - t0)
    out["base"] = base
    return out


def test_criterion_01_softmax_jacobian_range():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    lo, hi = np.inf, -np.inf
    total = 0
    for n in range(2, 65):
        rows = rng.dirichlet(np.full(n, rng.uniform(0.05, 2.0)), size=159)
        v = softmax_jac_norms(rows)
        lo, hi, total = min(lo, v.min()), max(hi, v.max()), total + len(v)
    tie = softmax_jac_norm([0.5, 0.5])
    dt = time.perf_counter() - t0
    ok = total >= 10_000 and lo >= 0 and hi <= 0.5 + 1e-9 and abs(tie - 0.5) <= 1e-9 and dt < 5
    report(1, ok, f"{total} rows in [{lo:.3g}, {hi:.12f}], J(0.5,0.5)={tie!r}, {dt:.2f}s")


def test_criterion_02_residual_conditioning():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    violations = 0
    for _ in range(500):
        n = int(rng.integers(1, 33))
        F = rng.standard_normal((n, n))
        rho = rng.uniform(0.0, 0.999)
        F *= rho / np.linalg.norm(F, 2)
        rho = np.linalg.norm(F, 2)
        s = np.linalg.svd(np.eye(n) + F, compute_uv=False)
        violations += s[0] / s[-1] > relaxation_factor(rho)
    dt = time.perf_counter() - t0
    report(2, violations == 0 and dt < 30, f"{violations} violations in 500 trials, {dt:.2f}s")


def test_criterion_03_depth_product():
    rng = np.random.default_rng(3)
    violations = 0
    for _ in range(200):
        n, depth = int(rng.integers(1, 17)), int(rng.integers(1, 7))
        M, rhos = np.eye(n), []
        for _ in range(depth):
            F = rng.standard_normal((n, n))
            F *= rng.uniform(0.0, 0.9) / np.linalg.norm(F, 2)
            rhos.append(np.linalg.norm(F, 2))
            M = (np.eye(n) + F) @ M
        s = np.linalg.svd(M, compute_uv=False)
        violations += s[0] / s[-1] > depth_relaxation(rhos)
    report(3, violations == 0, f"{violations} violations in 200 stacks")


def test_criterion_04_attention_bound_coverage():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    covered, total, worst = 0, 0, 0.0
    failures = []
    for trial in range(500):
        n = int(rng.integers(2, 33))
        heads = int(rng.choice([1, 2, 4]))
        d = int(rng.choice([w for w in (4, 8, 16, 32) if w % heads == 0]))
        cfg = ModelConfig(depth=1, seq_len=n, d_model=d, n_heads=heads, seed=trial)
        layer = init_params(cfg).layers[0]
        X = rng.standard_normal((n, d))
        spec = NATIVE[trial % 2]
        ref = attention_forward(X, layer, REFERENCE, heads)
        lp = attention_forward(X, layer, spec, heads)
        eps = effective_eps(spec)
        ok_trial = True
        for h in range(heads):
            hd = HeadDiagnostics(
                kappa_score(ref.Q[h], ref.K[h], ref.S[h], cfg.d_head),
                kappa_softmax(ref.S[h], ref.P[h])[0],
                kappa_V(ref.V[h]),
            )
            bound = attention_bound(hd, eps, cfg.d_head, n)
            err = np.linalg.norm(lp.A[h] - ref.A[h]) / np.linalg.norm(ref.A[h])
            worst = max(worst, err / bound)
            if err > bound:
                ok_trial = False
                failures.append((trial, h, err / bound))
        covered += ok_trial
        total += 1
    dt = time.perf_counter() - t0
    frac = covered / total
    for trial, h, margin in failures[:10]:
        print(f"  config {trial} head {h}: error/bound = {margin:.3f}")
    report(4, frac >= 0.95 and dt < 120, f"coverage {frac:.3f} of {total}, max error/bound {worst:.3g}, {dt:.1f}s")


def test_criterion_05_unified_bound_coverage():
    covered, accepted, tried, worst = 0, 0, 0, 0.0
    while accepted < 200:
        cfg = ModelConfig(depth=4, seq_len=8, d_model=16, n_heads=2, seed=tried, residual_scale=0.15)
        p = init_params(cfg)
        X0 = np.random.default_rng(10_000 + tried).standard_normal((8, 16))
        tr = forward_dual(p, X0, NATIVE[tried % 2])
        tried += 1
        _, bound = trace_diagnostics(p, tr, DiagnosticsOptions())
        if bound.vacuous:
            continue
        accepted += 1
        covered += tr.final_mismatch <= bound.total
        worst = max(worst, tr.final_mismatch / bound.total)
    frac = covered / accepted
    report(5, frac >= 0.95, f"coverage {frac:.3f} of {accepted} small-gain models ({tried} sampled), "
                            f"max r/bound {worst:.3g}")


def test_criterion_06_eps_scaling_collapse(runs):
    out, dt = runs["exp1"]
    _, rows = read_csv(out / "exp1_regression.csv")
    by = {r["proxy_name"]: r for r in rows}
    raw, scaled = by["predictor"]["pearson_log"], by["predictor_eps"]["pearson_log"]
    n = by["predictor_eps"]["n"]
    ok = n == 20 and scaled >= raw + 0.2 and scaled >= 0.8 and dt < 180
    report(6, ok, f"pearson_log scaled {scaled:.3f} vs raw {raw:.3f} over {n} configs, {dt:.1f}s")


def test_criterion_07_lead_lag_recovery(runs):
    out, dt = runs["exp2"]
    _, rows = read_csv(out / "leadlag.csv")
    lags = [r["best_lag"] for r in rows]
    ok = (
        len(rows) == 5
        and abs(np.mean(lags) - 16) <= 2
        and all(r["p_value"] <= 0.01 for r in rows)
        and all(r["precision_at_k"] >= 0.8 and r["K"] == 20 for r in rows)
        and dt < 120
    )
    detail = ", ".join(f"lag {r['best_lag']} p {r['p_value']:.3g} P@K {r['precision_at_k']:.2f}" for r in rows)
    report(7, ok, f"mean lag {np.mean(lags):.1f}; {detail}; {dt:.1f}s")


def test_criterion_08_detector_calibration():
    t0 = time.perf_counter()
    rejections = 0
    for trial in range(200):
        rng = np.random.default_rng(80_000 + trial)
        x, y = rng.standard_normal(195), rng.standard_normal(195)
        rejections += permutation_pvalue(x, y, SpikeConfig(n_perm=999), rng=trial) <= 0.05
    rate = rejections / 200
    report(8, rate <= 0.08, f"rejection rate {rate:.3f} at 0.05 ({time.perf_counter() - t0:.1f}s)")


def test_criterion_09_mitigation_policy(runs):
    out, _ = runs["exp3"]
    _, events = read_csv(out / "exp3_events.csv")
    _, seeds = read_csv(out / "exp3_seeds.csv")
    d, u = ModelConfig().d_model, FpFormat.BF16.eps_mach

    # (a) eps per LN instance never decreases within a run
    seq = defaultdict(list)
    for e in events:
        seq[(e["seed"], e["rho_star"], e["eps_max"], e["layer"], e["ln"])].append(e)
    monotone = all(e["eps_after"] > e["eps_before"] for e in events)
    for evs in seq.values():
        evs.sort(key=lambda e: e["step"])
        monotone &= all(b["eps_before"] == a["eps_after"] for a, b in zip(evs, evs[1:]))

    # (b) uncapped updates land on rho_star
    eps_min = EpsBumpConfig().eps_min
    uncapped = [e for e in events if eps_min < e["eps_after"] < e["eps_max"]]
    exact = all(
        abs(rho_LN(e["sigma2_median"], e["eps_after"], d, u) - e["rho_star"]) <= np.spacing(e["rho_star"])
        for e in uncapped
    )

    # (c) with the policy off the arms match bit for bit
    small = Exp3Config(rho_stars=(0.5,), eps_maxes=(0.01,), steps=10, tail_steps=5)
    spec = NATIVE[0]
    a = exp3_arm(ModelConfig(), small, Trajectory(mode="drift"), spec, None, 0, 3)
    b = exp3_arm(ModelConfig(), small, Trajectory(mode="drift"), spec, None, 0, 3)
    off = run_exp3(seeds=(0, 1), exp3=small, enabled=False)
    matched = a == b and all(r["delta_ln"] == 0.0 and r["delta_r"] == 0.0 and r["delta_loss"] == 0.0
                             for r in off["summary"])

    # (d) intervention lowers the LN-tap tail mismatch
    better = sum(r["control_ln"] > r["intervention_ln"] for r in seeds) / len(seeds)

    ok = monotone and exact and bool(uncapped) and matched and better >= 0.6 and len(seeds) == 10
    report(9, ok, f"(a) monotone={monotone} over {len(events)} events; (b) {len(uncapped)} uncapped exact={exact}; "
                  f"(c) matched={matched}; (d) LN tail reduced in {better:.0%} of {len(seeds)} seeds")


def test_criterion_10_ln_eps_scaling():
    rng = np.random.default_rng(10)
    eps_grid = np.logspace(-6, -4, 5)
    d, n = 64, 16
    g, b = np.ones(d), np.zeros(d)
    fp16 = PrecisionSpec(FpFormat.FP16, Accumulate.NATIVE)
    med = []
    for eps in eps_grid:
        vals = []
        for _ in range(50):
            x = 0.01 + math.sqrt(eps / 100) * rng.standard_normal((n, d))
            ref = ln_forward(x, g, b, eps)
            lp = ln_forward(x, g, b, eps, fp16)
            vals.append(np.linalg.norm(lp - ref) / np.linalg.norm(ref))
        med.append(float(np.median(vals)))
    increasing = all(m_small > m_big for m_small, m_big in zip(med, med[1:]))  # eps ascending
    slope = np.polyfit(np.log(1 / np.sqrt(eps_grid)), np.log(med), 1)[0]
    ok = increasing and 0.3 <= slope <= 1.5
    report(10, ok, f"median mismatch {['%.3g' % m for m in med]} for eps {['%.0e' % e for e in eps_grid]}, "
                   f"slope {slope:.2f}")


def test_criterion_11_manifest_rerun(runs):
    identical = True
    t0 = time.perf_counter()
    for name, files in OUTPUTS.items():
        out, _ = runs[name]
        again = runs["base"] / f"{name}_rerun"
        code = main([name, "--config", str(out / "manifest.json"), "--out", str(again), "-q"])
        identical &= code == 0
        for f in files:
            identical &= (again / f).read_bytes() == (out / f).read_bytes()
    rerun = time.perf_counter() - t0
    first = sum(runs[k][1] for k in OUTPUTS)
    total = time.perf_counter() - SUITE_START
    report(11, identical and total < 600,
           f"bit-identical={identical}; experiments {first:.0f}s, rerun {rerun:.0f}s, suite {total:.0f}s")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-s", "-p", "no:cacheprovider"]))
