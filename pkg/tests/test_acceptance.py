"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v`` (or this file as a script); the
summary at the end of the pytest run lists every criterion with its numbers.
"""

import csv
import io
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from dsynergy.c2f import C2fConfig, block_param_count, c2f_baseline_forward, c2f_forward, init_params, zero_params
from dsynergy.checks import gradient_suite
from dsynergy.cli import run
from dsynergy.dso import Region, channel_stats, classify_regions, dso_apply, dso_factored, dso_grad
from dsynergy.gating import (
    ConfigError,
    DsgParams,
    MsgParams,
    NoiseSource,
    added_param_count,
    dsg_channels,
    dsg_forward,
    group_assign,
    msg_forward,
)
from dsynergy.toy import ToyConfig, gen_dataset, render_scene, train


def gate(num, title, ok, detail):
    ACCEPTANCE.append((num, title, bool(ok), detail))
    print(f"[{'PASS' if ok else 'FAIL'}] {num:2d}. {title}: {detail}")
    assert ok, detail


def test_01_operator_exactness():
    t0 = time.perf_counter()
    axes = all(dso_apply(v, 0.0) == v and dso_apply(0.0, v) == v for v in np.linspace(0, 3, 61))
    exact = dso_apply(0.0, 0.0) == 0.0 and dso_apply(1.0, 1.0) == 3.0 and axes
    mu, d = np.meshgrid(np.linspace(0, 3, 61), np.linspace(0, 3, 61))
    gap = float(np.abs(dso_factored(mu, d) - dso_apply(mu, d)).max())
    dt = time.perf_counter() - t0
    gate(1, "operator exactness", exact and gap <= 1e-12 and dt < 1.0,
         f"reference points exact={exact}, factored vs expanded max gap {gap:.1e} (<= 1e-12), {dt:.3f}s (< 1s)")


def test_02_derivative_suite():
    t0 = time.perf_counter()
    r = np.random.default_rng(2)
    mu, d = r.uniform(0, 10, 1000), r.uniform(0, 10, 1000)
    h = 1e-4 * (1 + np.abs(mu)), 1e-4 * (1 + np.abs(d))
    num_mu = (dso_apply(mu + h[0], d) - dso_apply(mu - h[0], d)) / (2 * h[0])
    num_d = (dso_apply(mu, d + h[1]) - dso_apply(mu, d - h[1])) / (2 * h[1])
    g_mu, g_d = dso_grad(mu, d)
    rel = max(np.max(np.abs(g_mu - num_mu) / np.maximum(np.abs(g_mu), 1e-8)),
              np.max(np.abs(g_d - num_d) / np.maximum(np.abs(g_d), 1e-8)))
    delta, gap = r.uniform(0.01, 1, 1000), r.uniform(0.01, 1, 1000)
    synergy = np.all(dso_apply(mu + delta, d + gap) - dso_apply(mu, d + gap)
                     > dso_apply(mu + delta, d) - dso_apply(mu, d))
    dt = time.perf_counter() - t0
    gate(2, "derivative suite", rel <= 1e-6 and synergy and dt < 1.0,
         f"max rel err {rel:.1e} (<= 1e-6) on 1000 points, synergy holds={bool(synergy)}, {dt:.3f}s (< 1s)")


def test_03_gradient_checks():
    t0 = time.perf_counter()
    results = list(gradient_suite(seed=0, trials=20))
    dt = time.perf_counter() - t0
    worst_name, worst = max(results, key=lambda nr: nr[1].max_rel_err)
    failed = [n for n, rep in results if not rep.passed]
    gate(3, "gradient checks", not failed and dt < 60,
         f"{len(results)} cases x 20 draws, worst {worst.max_rel_err:.1e} ({worst_name}) (<= 1e-5), "
         f"failed={failed or 'none'}, {dt:.1f}s (< 60s)")


def test_04_statistic_invariants():
    r = np.random.default_rng(4)
    x = r.standard_normal((10_000, 1, 4, 4)) * r.uniform(0.01, 100, (10_000, 1, 1, 1))
    nonneg = bool(np.all(channel_stats(x).d >= 0))
    # dyadic values: every sum and the division by 16 are exact in float64
    q = r.integers(-4096, 4096, (2000, 3, 4, 4)) / 16.0
    c = r.integers(-4096, 4096, (2000, 3, 1, 1)) / 16.0
    s, sc = channel_stats(q), channel_stats(q + c)
    exact = bool(np.array_equal(sc.d, s.d) and np.array_equal(sc.mu, s.mu + c))
    # general floats: equal up to rounding
    cf = r.uniform(-10, 10, (10_000, 1, 1, 1))
    sf, sfc = channel_stats(x), channel_stats(x + cf)
    drift = float(max(np.abs(sfc.d - sf.d).max(), np.abs(sfc.mu - sf.mu - cf).max()) / (np.abs(x).max() + 10))
    gate(4, "statistic invariants", nonneg and exact and drift <= 1e-12,
         f"d >= 0 on 10000 tensors={nonneg}, dyadic shift exact={exact}, float shift drift {drift:.1e} (rel)")


def test_05_msg_contracts():
    r = np.random.default_rng(5)
    simplex, bounds = 0.0, True
    for trial in range(300):
        scale = [0.3, 3.0, 300.0][trial % 3]
        p = MsgParams(*(r.uniform(-scale, scale, s) for s in [(3, 4, 1, 1), (3,)] * 3),
                      logit_source=["noise", "scale"][trial % 2])
        paths = [r.standard_normal((2, 2, 3, 3)) for _ in range(4)]
        res = msg_forward(r.uniform(-2, 2, (2, 4, 1, 1)), paths, p, group_assign(2, 3),
                          NoiseSource(trial, mode=["train", "eval"][trial % 2]))
        simplex = max(simplex, float(np.abs(res.w.sum(axis=1) - 1).max()))
        bounds &= bool(np.all(res.T > 0.1) and np.all(res.T < 2.0) and np.all(res.w >= 0))
    zero = msg_forward(r.uniform(0, 1, (2, 4, 1, 1)), paths, MsgParams.zeros(4, 3), group_assign(2, 3),
                       NoiseSource(mode="eval")).w
    uniform = bool(np.all(zero == 1 / 3))
    y = r.uniform(0, 1, (2, 4, 1, 1))
    a = msg_forward(y, paths, p, group_assign(2, 3), NoiseSource(42)).w
    b = msg_forward(y, paths, p, group_assign(2, 3), NoiseSource(42)).w
    repro = a.tobytes() == b.tobytes()
    gate(5, "MSG contracts", simplex <= 1e-12 and bounds and uniform and repro,
         f"simplex err {simplex:.1e} (<= 1e-12), T in (0.1, 2.0)={bounds}, zero params -> 1/3 exactly={uniform}, "
         f"seeded noise bitwise={repro}")


def test_06_dsg_contracts():
    r = np.random.default_rng(6)
    open_gate, attenuates = True, True
    for trial in range(300):
        scale = [0.3, 3.0, 60.0][trial % 3]
        p = DsgParams(r.uniform(-scale, scale, (8, 4, 1, 1)), r.uniform(-scale, scale, 8), 2)
        x = r.standard_normal((2, 8, 3, 3)) * 10
        res = dsg_forward(r.uniform(-2, 2, (2, 4, 1, 1)), x, p)
        open_gate &= bool(np.all((res.w > 0) & (res.w < 1)))
        attenuates &= bool(np.all(np.abs(res.x_out) <= np.abs(x)))
    x = r.standard_normal((2, 8, 3, 3))
    half = bool(np.array_equal(dsg_forward(r.standard_normal((2, 4, 1, 1)), x, DsgParams.zeros(4, 2)).x_out, 0.5 * x))
    enforced = True
    for C, n in [(8, 1), (8, 2), (64, 2), (64, 4)]:
        cp = dsg_channels(C, n)
        enforced &= cp == (C // 2) * (2 + n)
        DsgParams(np.zeros((cp, C, 1, 1)), np.zeros(cp), n)
        with pytest.raises(ConfigError):
            DsgParams(np.zeros((cp + 1, C, 1, 1)), np.zeros(cp + 1), n)
    gate(6, "DSG contracts", open_gate and attenuates and half and enforced,
         f"gates in (0,1)={open_gate}, |x_out| <= |x_cat|={attenuates}, zero params -> 0.5 x_cat exactly={half}, "
         f"C' enforced for 4 configs={enforced}")


def test_07_flag_off_equivalence():
    r = np.random.default_rng(7)
    equal = 0
    for _ in range(50):
        cfg = C2fConfig(c_in=int(r.integers(1, 6)), c_out=int(r.choice([2, 4, 6, 8])), n=int(r.integers(1, 4)),
                        use_dsg=False, use_msg=False, shortcut=bool(r.integers(0, 2)))
        p = init_params(cfg, r)
        x = r.standard_normal((int(r.integers(1, 3)), cfg.c_in, int(r.integers(1, 7)), int(r.integers(1, 7))))
        equal += c2f_forward(x, p, cfg)[0].tobytes() == c2f_baseline_forward(x, p, cfg).tobytes()
    gate(7, "flag-off equivalence", equal == 50, f"{equal}/50 random (params, input) pairs bitwise equal")


def test_08_parameter_accounting():
    mismatches = 0
    configs = 0
    for C in (2, 4, 8, 16, 64):
        for n in (1, 2, 3, 4):
            for G in range(2, n + 3):
                configs += 1
                r = np.random.default_rng(C * 100 + n * 10 + G)
                allocated = {"dsg": sum(v.size for v in DsgParams.init(C, n, r).named().values()),
                             "msg": sum(v.size for v in MsgParams.init(C, G, r).named().values())}
                mismatches += added_param_count(C, n, G) != allocated
                for dsg in (False, True):
                    for msg in (False, True):
                        cfg = C2fConfig(c_in=3, c_out=C, n=n, groups=G, use_dsg=dsg, use_msg=msg)
                        mismatches += block_param_count(cfg)["total"] != sum(v.size for v in zero_params(cfg).values())
    hand = added_param_count(64, 2, 3)
    ok_hand = hand == {"dsg": 8320, "msg": 585}
    gate(8, "parameter accounting", mismatches == 0 and ok_hand,
         f"{configs} (C, n, G) configs x 4 flag settings, mismatches={mismatches}; "
         f"dsg(64,2)={hand['dsg']} msg(64,3)={hand['msg']} (8320, 585)")


def test_09_toy_training_gate():
    data, val = gen_dataset(7, 2048), gen_dataset([7, 1], 512)
    t0 = time.perf_counter()
    res = train(ToyConfig(), data, epochs=20, lr=0.05, seed=7, val=val)
    dt = time.perf_counter() - t0
    recs = res.metrics.records
    first, last = recs[0], recs[-1]
    grads = res.metrics.first_step_gate_grad
    live = grads.get("block.dsg.w", 0) > 1e-8 and grads.get("block.msg.w_msg", 0) > 1e-8
    ok = dt < 300 and last.loss <= 0.5 * first.loss and last.val_acc >= 0.80 and live
    gate(9, "toy training gate", ok,
         f"{dt:.0f}s (< 300s), loss {first.loss:.4f} -> {last.loss:.4f} (<= 0.5x), val acc {last.val_acc:.3f} "
         f"(>= 0.80), first-step |grad| dsg {grads.get('block.dsg.w', 0):.1e} msg {grads.get('block.msg.w_msg', 0):.1e}")


def test_10_taxonomy_separation():
    r = np.random.default_rng(10)
    share = {}
    for cls in (Region.SMALL, Region.BACKGROUND):
        imgs = np.concatenate([render_scene(cls, r) for _ in range(1000)])
        share[cls] = float((classify_regions(channel_stats(imgs))[:, 0] == cls).mean())
    ok = share[Region.SMALL] >= 0.95 and share[Region.BACKGROUND] >= 0.95
    gate(10, "taxonomy separation", ok,
         f"small -> Small {share[Region.SMALL]:.3f}, background -> Background {share[Region.BACKGROUND]:.3f} (>= 0.95)")


ABLATIONS = [("groups", "2,3,4"), ("alpha", "0.9,1.9,2.9,3.9,4.9"), ("operator", "mean,max,dso")]


def test_11_ablation_machinery(tmp_path):
    # reduced size: the criterion is about the machinery, not the numbers
    common = ["--count", "64", "--val-count", "32", "--epochs", "2", "--seed", "7"]
    summary, ok = [], True
    for axis, values in ABLATIONS:
        outs = []
        for rep in range(2):
            out = tmp_path / f"{axis}{rep}.csv"
            ok &= run(["ablate", "--axis", axis, "--values", values, *common, "--out", str(out)]) == 0
            outs.append(out.read_bytes())
        rows = list(csv.DictReader(io.StringIO(outs[0].decode())))
        well_formed = [r["value"] for r in rows] == values.split(",") and all(
            0 <= float(r["val_acc"]) <= 1 and np.isfinite(float(r["final_loss"]))
            and 0.1 < float(r["t_min"]) <= float(r["t_max"]) < float(r["value"] if axis == "alpha" else 1.9) + 0.1
            for r in rows)
        deterministic = outs[0] == outs[1]
        ok &= well_formed and deterministic
        accs = ", ".join(f"{r['value']}={float(r['val_acc']):.3f}" for r in rows)
        summary.append(f"{axis}: deterministic={deterministic} well-formed={well_formed} val acc [{accs}]")
    gate(11, "ablation machinery", ok, "; ".join(summary))


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
