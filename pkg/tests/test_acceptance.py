"""End-to-end acceptance checks, one test per criterion."""

import itertools
import math
import time
from pathlib import Path

import mpmath
import numpy as np
import pytest

from msm.brownian import estimate_hit_probabilities
from msm.channel import fit_topology
from msm.config import from_dict, load_config
from msm.detection import (GaussianComponent, build_thresholds, detect_2x2, detect_4x4,
                           detector_output_stats, gaussian_intersection, isi_statistics,
                           mf_coefficients, mf_transform, statistic_components, sub_weights)
from msm.harness import model_probabilities, rank_sweep, run_experiment
from msm.modulation import brute_force_budget, single_receiver_statistics, optimize_molecule_budget
from msm.topology import PhysicalParams, make_topology

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def cfg(name, **kw):
    return load_config(CONFIGS / f"{name}.yaml").with_overrides(**kw)


def by_system(results):
    out = {}
    for r in results:
        out.setdefault(r.system, {})[r.avg_molecules] = r
    return out


def test_physics_consistency(report):
    c = cfg("siso_hitprob")
    s = c.systems[0]
    t0 = time.perf_counter()
    hp = estimate_hit_probabilities(s.make_topology(), c.params_for(s), 0, c.engine.molecules, 1)
    elapsed = time.perf_counter() - t0
    with mpmath.workdps(40):
        ref = float(mpmath.mpf(1) / 3 * mpmath.erfc(4 / mpmath.sqrt(20)))
    p, se = hp.p_hat[0, 0], hp.stderr[0, 0]
    z = (p - ref) / se
    ok = abs(z) <= 3 and elapsed <= 300 and c.engine.molecules == 100_000
    report(1, ok, f"p_hat={p:.5f} ref={ref:.5f} z={z:+.2f} runtime={elapsed:.1f}s")
    assert ok


def test_fit_quality(report):
    c = cfg("siso_fit")
    s = c.systems[0]
    e = c.engine
    fits = fit_topology(s.make_topology(), c.params_for(s), molecules=e.molecules, num_slots=e.slots,
                        samples=e.samples, rmse_ceiling=1.0)
    coeffs, rmse = fits[1]
    dev = np.abs(np.array(coeffs.as_tuple()) - (1.0, 0.5, 0.5))
    ok = bool(np.all(dev <= 0.02) and rmse <= 1e-3 and e.molecules == 100_000)
    report(2, ok, "b=({:.4f}, {:.4f}, {:.4f}) rmse={:.2e}".format(*coeffs.as_tuple(), rmse))
    assert ok


def test_full_rank(report):
    c = cfg("rank")
    rk = c.rank
    worst = {}
    for s in c.systems:
        base = dict(s.topology)

        def topo_fn(v, base=base, scheme=s.scheme):
            t = {**base, rk.parameter: v}
            return make_topology(scheme, t["d1"], t.get("h"), t.get("w"), t.get("Rr", 2.0))

        res = rank_sweep(topo_fn, rk.values, rk.draws, rk.molecules, c.params_for(s), c.seed)
        worst[s.scheme] = min(f for _, f in res)
    ok = (len(rk.values) >= 20 and rk.draws >= 1000 and rk.molecules >= 100
          and set(worst) == {"2x2", "4x4"} and min(worst.values()) >= 0.99)
    report(3, ok, f"{len(rk.values)} points, x={rk.molecules}, min full-rank fraction "
                  + ", ".join(f"{k}: {v:.3f}" for k, v in sorted(worst.items())))
    assert ok


def test_optimizer_exactness_and_sensitivity(report):
    rng = np.random.default_rng(2024)
    worst_gap = 0
    for _ in range(50):
        p1, p2 = rng.uniform(0.005, 0.3, 2), rng.uniform(0.0, 0.15, 2)
        L_total = int(rng.integers(2, 5001))
        b = rng.uniform(0, 0.3 * L_total, 16)
        v = rng.uniform(0, 0.3 * L_total, 16)

        def builder(L0, L1, p1=p1, p2=p2):
            st = single_receiver_statistics(p1, p2, L0, L1)
            return st.means, st.variances

        opt = optimize_molecule_budget(builder, L_total, b, v)
        bf, _ = brute_force_budget(builder, L_total, b, v)
        worst_gap = max(worst_gap, abs(opt.L0 - bf.L0))

    scan = cfg("split_sweep")
    errs = {r.L0: r.ber for r in run_experiment(scan)}
    raw = dict(scan.raw, sweep={"avg": [scan.sweep.L_total / 2]})
    raw["systems"] = [dict(raw["systems"][0], budget={"rule": "optimize"})]
    opt_run = run_experiment(from_dict(raw, scan.base_dir))[0]
    worst_L0 = max(errs, key=errs.get)
    ok = worst_gap <= 1 and scan.symbols >= 10_000 and opt_run.ber * 2 <= errs[worst_L0]
    report(4, ok, f"max |dL0| over 50 instances = {worst_gap}; BER(opt L0={opt_run.L0})="
                  f"{opt_run.ber:.4f} vs worst BER(L0={worst_L0})={errs[worst_L0]:.4f}")
    assert ok


def test_msm2x1_beats_qcsk(report):
    c = cfg("msm2x1_vs_qcsk")
    t0 = time.perf_counter()
    res = by_system(run_experiment(c))
    elapsed = time.perf_counter() - t0
    msm, qcsk = res["msm-2x1"], res["qcsk-1x1"]
    pts = sorted(msm)
    ok = len(pts) >= 3 and c.symbols >= 10_000 and elapsed <= 600 and all(
        msm[a].ber < qcsk[a].ber for a in pts)
    report(5, ok, "MSM/QCSK " + " ".join(f"{a:.0f}:{msm[a].ber:.4f}/{qcsk[a].ber:.4f}" for a in pts)
           + f" runtime={elapsed:.1f}s")
    assert ok


def test_msm2x2_gap_over_pairwise(report):
    c = cfg("msm2x2_vs_pairwise")
    raw = dict(c.raw, sweep={"basis": "per-slot", "avg": [1400]})
    res = by_system(run_experiment(from_dict(raw, c.base_dir)))
    m, p = res["msm-2x2"][1400.0], res["pairwise-2x2"][1400.0]
    ok = 10_000 <= c.symbols <= 100_000 and m.ber * 5 <= p.ber
    ratio = p.ber / m.ber if m.ber else math.inf
    report(6, ok, f"avg 1400: MSM {m.ber:.2e} ({m.errors} errors), pairwise {p.ber:.2e}, ratio {ratio:.1f}")
    assert ok


def test_msm4x4_beats_pairwise(report):
    c = cfg("msm4x4_vs_pairwise")
    res = by_system(run_experiment(c))
    msm, pw = res["msm-4x4"], res["pairwise-4x4"]
    ok = c.sweep.basis == "per-bit" and all(msm[a].ber < pw[a].ber for a in msm)
    report(7, ok, "MSM/pairwise " + " ".join(f"{a:.0f}:{msm[a].ber:.1e}/{pw[a].ber:.1e}"
                                               for a in sorted(msm)))
    assert ok


def test_throughput_ordering(report):
    c = cfg("throughput")
    res = by_system(run_experiment(c))
    order = ["msm-4x4", "msm-2x2", "msm-2x1", "siso"]
    pts = sorted(res["siso"])
    ok = c.params_for(c.systems[0]).Ts == 1.0 and all(
        res[a][p].throughput > res[b][p].throughput for p in pts for a, b in zip(order, order[1:]))
    report(8, ok, " ".join(f"{p:.0f}:" + "/".join(f"{res[s][p].throughput:.2f}" for s in order)
                           for p in pts))
    assert ok


def test_detector_algebra(report):
    rng = np.random.default_rng(9)
    checks = {}
    # densities equal at the crossing
    worst = 0.0
    for _ in range(500):
        m1, v1, v2 = rng.uniform(-50, 50), rng.uniform(0.1, 100), rng.uniform(0.1, 100)
        g1, g2 = GaussianComponent(m1, v1), GaussianComponent(m1 + rng.uniform(0.5, 100), v2)
        x = gaussian_intersection(g1, g2)
        worst = max(worst, abs(float(g1.logpdf(x) - g2.logpdf(x))))
    checks["intersection"] = worst <= 1e-9

    Ts1 = PhysicalParams(D=50.0, dt=1e-4, Ts=1.0)
    P22 = model_probabilities(make_topology("2x2", d1=6.0, h=5.0, Rr=2.0), Ts1)
    P44 = model_probabilities(make_topology("4x4", d1=6.0, h=10.0, w=4.0, Rr=3.0), Ts1)
    rt = 0.0
    for P in (P22[0], P44[0]):
        co = mf_coefficients(P)
        x = rng.uniform(0, 3000, (200, co.dim))
        rt = max(rt, float(np.abs(mf_transform(x @ P.T, co) - x).max()))
    checks["mf round trip"] = rt <= 1e-10 * 3000

    co2 = mf_coefficients(P22[0])
    L = (350, 1050)
    subs = [float(mf_transform(P22[0] @ np.eye(2)[tx] * L[b], co2) @ [1, -1])
            for tx, b in itertools.product(range(2), range(2))]
    checks["sub means"] = np.allclose(subs, [L[0], L[1], -L[0], -L[1]], rtol=0, atol=1e-9)
    mix = statistic_components(sub_weights(co2), P22[0], P22[1], L)[0]
    checks["sub means under ISI"] = np.allclose(mix, [L[0], L[1], -L[0], -L[1]], atol=1e-9)

    co4 = mf_coefficients(P44[0])
    y = rng.uniform(0, 500, (200, 4))
    checks["sum"] = np.allclose(mf_transform(y, co4).sum(axis=1), y.sum(axis=1) / co4.row_sum,
                                rtol=1e-10, atol=0)

    ok_all = True
    for scheme, P, Lv in (("2x2", P22, (350, 1050)), ("4x4", P44, (150, 450))):
        co = mf_coefficients(P[0])
        isi = isi_statistics(P[1][0], *Lv)
        ts = build_thresholds(detector_output_stats(scheme, co, *Lv, isi if scheme == "4x4" else None,
                                                    P[1]))
        for tx, b in itertools.product(range(co.dim), range(2)):
            y = P[0] @ (np.eye(co.dim)[tx] * Lv[b])
            if scheme == "2x2":
                got = detect_2x2(y, co, ts)
            else:
                got = detect_4x4(y + isi.mean, co, ts)
            ok_all &= tuple(int(v) for v in got) == (tx, b)
    p1, p2 = P22[0][0, 0], P22[0][0, 1]
    comps = [GaussianComponent(m, v, s) for s, (m, v) in enumerate(zip(
        *statistic_components([1.0], np.array([[p1, p2]]), np.array([[P22[1][0, 0], P22[1][0, 1]]]),
                              (300, 900))))]
    ts21 = build_thresholds(comps)
    ok_all &= all(int(ts21.classify(g.mean)) == g.label for g in comps)
    checks["noiseless recovery"] = bool(ok_all)

    ok = all(checks.values())
    report(9, ok, ", ".join(f"{k}: {'ok' if v else 'FAILED'}" for k, v in checks.items()))
    assert ok


def test_model_vs_engine(report):
    eng = cfg("model_vs_engine")
    stats = eng.with_overrides(source="closed-form", noise="normal")
    a, b = by_system(run_experiment(eng)), by_system(run_experiment(stats))
    parts, ok = [], True
    n_points = 0
    for s in a:
        for p in sorted(a[s]):
            x, y = a[s][p], b[s][p]
            se = math.hypot(x.stderr, y.stderr)
            z = (x.ber - y.ber) / se if se else 0.0
            ok &= abs(z) <= 3
            n_points += 1
            parts.append(f"{s}@{p:.0f}: {x.ber:.4f}/{y.ber:.4f} z={z:+.2f}")
    ok = ok and set(a) == {"siso", "msm-2x1"} and n_points >= 4
    report(10, ok, "engine/normal " + "; ".join(parts))
    assert ok
