"""Command line entry point: ``msm <command> --config FILE``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .brownian import estimate_hit_probabilities
from .channel import fit_topology, write_coefficients
from .config import ExperimentConfig, load_config
from .detection import write_thresholds
from .errors import MSMError
from .harness import (export_results, model_probabilities, prepare_system, rank_sweep,
                      run_experiment, summary_table, threshold_dump, load_targets)
from .modulation import (brute_force_budget, budget_objective, default_targets_2x1,
                         single_receiver_statistics, optimize_molecule_budget)
from .topology import make_topology

log = logging.getLogger("msm")


def _out_dir(cfg: ExperimentConfig, args) -> Path:
    out = Path(args.out) if args.out else cfg.resolve(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_rows(path: Path, header, rows):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def cmd_hitprob(cfg: ExperimentConfig, args) -> int:
    e = cfg.engine
    rows = []
    for s in cfg.systems:
        params = cfg.params_for(s)
        topo = s.make_topology()
        P = model_probabilities(topo, params, e.slots - 1)
        for j in range(topo.n_tx):
            t0 = time.perf_counter()
            hp = estimate_hit_probabilities(topo, params, j, e.molecules, e.slots, far_field=e.far_field)
            log.info("%s emitter %d: %d molecules in %.1fs", s.name, j + 1, e.molecules,
                     time.perf_counter() - t0)
            for i in range(topo.n_rx):
                for k in range(e.slots):
                    p, se, ref = hp.p_hat[i, k], hp.stderr[i, k], P[k, i, j]
                    z = (p - ref) / se if se > 0 else float("nan")
                    rows.append([s.name, j + 1, i + 1, k + 1, repr(float(p)), repr(float(se)),
                                 repr(float(ref)), repr(float(z))])
    path = _write_rows(_out_dir(cfg, args) / "hitprob.csv",
                       ["system", "emitter", "receiver", "slot", "p_hat", "stderr", "p_model", "z"], rows)
    print(f"{'system':<14} {'tx':>3} {'rx':>3} {'slot':>4} {'p_hat':>10} {'model':>10} {'z':>7}")
    for r in rows:
        print(f"{r[0]:<14} {r[1]:>3} {r[2]:>3} {r[3]:>4} {float(r[4]):>10.5f} {float(r[6]):>10.5f} "
              f"{float(r[7]):>7.2f}")
    print(f"wrote {path}")
    return 0


def cmd_fit(cfg: ExperimentConfig, args) -> int:
    e = cfg.engine
    out = _out_dir(cfg, args)
    for s in cfg.systems:
        topo = s.make_topology()
        fits = fit_topology(topo, cfg.params_for(s), molecules=e.molecules, num_slots=e.slots,
                            samples=e.samples, rmse_ceiling=e.rmse_ceiling, far_field=e.far_field)
        path = write_coefficients(out / f"coefficients_{s.name}.csv", topo, fits)
        for cls, (c, rmse) in fits.items():
            print(f"{s.name} class {cls}: d={topo.class_distance(cls):.4f} b1={c.b1:.4f} "
                  f"b2={c.b2:.4f} b3={c.b3:.4f} rmse={rmse:.2e}")
        print(f"wrote {path}")
    return 0


def cmd_rank(cfg: ExperimentConfig, args) -> int:
    rk = cfg.rank
    if not rk.values:
        raise MSMError("rank command needs rank.values in the config")
    out = _out_dir(cfg, args)
    for s in cfg.systems:
        if s.scheme not in ("2x2", "4x4"):
            continue
        base = dict(s.topology)

        def topo_fn(v, base=base, scheme=s.scheme):
            t = {**base, rk.parameter: v}
            return make_topology(scheme, t.get("d1"), t.get("h"), t.get("w"), t.get("Rr", 2.0))

        res = rank_sweep(topo_fn, rk.values, rk.draws, rk.molecules, cfg.params_for(s), cfg.seed)
        path = _write_rows(out / f"rank_{s.name}.csv", [rk.parameter, "draws", "full_rank_fraction"],
                           [[repr(v), rk.draws, repr(f)] for v, f in res])
        worst = min(f for _, f in res)
        print(f"{s.name}: {len(res)} points, minimum full-rank fraction {worst:.4f}; wrote {path}")
    return 0


def cmd_optimize(cfg: ExperimentConfig, args) -> int:
    done = False
    for s in cfg.systems:
        if s.scheme != "2x1" or s.modulation != "msm":
            continue
        setup = prepare_system(cfg, s)
        p1, p2 = setup.design_P[0][0], setup.design_P[1][0]
        totals = [args.l_total] if args.l_total else [
            pt.get("L_total") or int(round(2 * pt["avg"])) for pt in cfg.sweep.points]
        for L_total in dict.fromkeys(totals):
            if args.targets:
                b, c = load_targets(args.targets)
            elif s.budget.targets:
                b, c = load_targets(cfg.resolve(s.budget.targets))
            else:
                b, c = default_targets_2x1(p1, p2, L_total, s.budget.span)

            def builder(L0, L1):
                st = single_receiver_statistics(p1, p2, L0, L1)
                return st.means, st.variances

            opt = optimize_molecule_budget(builder, L_total, b, c)
            obj = budget_objective(builder, opt.L0, L_total, b, c)
            bf, bf_obj = brute_force_budget(builder, L_total, b, c)
            print(f"{s.name} L_total={L_total}: L0={opt.L0} L1={opt.L1} objective={obj:.6g} "
                  f"brute-force L0={bf.L0} delta_L0={opt.L0 - bf.L0} delta_objective={obj - bf_obj:.3g}")
            done = True
    if not done:
        raise MSMError("optimize needs at least one 2x1 MSM system in the config")
    return 0


def cmd_ber(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg, args)
    t0 = time.perf_counter()
    results = run_experiment(cfg)
    csv_path, txt_path = export_results(results, out / f"{cfg.name}.csv")
    print(summary_table(results), end="")
    print(f"config {cfg.hash}, {time.perf_counter() - t0:.1f}s; wrote {csv_path} and {txt_path}")
    if getattr(args, "dump_thresholds", False):
        path = write_thresholds(out / f"{cfg.name}_thresholds.csv", threshold_dump(cfg))
        print(f"wrote {path}")
    return 0


def cmd_throughput(cfg: ExperimentConfig, args) -> int:
    results = run_experiment(cfg)
    csv_path, _ = export_results(results, _out_dir(cfg, args) / f"{cfg.name}.csv")
    systems = list(dict.fromkeys(r.system for r in results))
    avgs = sorted({r.avg_molecules for r in results})
    table = {(r.system, r.avg_molecules): r.throughput for r in results}
    print(f"{'avg':>9} " + " ".join(f"{s:>12}" for s in systems))
    for a in avgs:
        print(f"{a:>9.1f} " + " ".join(f"{table.get((s, a), np.nan):>12.4f}" for s in systems))
    print(f"wrote {csv_path}")
    return 0


HELP = {
    "hitprob": "particle-engine slot hit probabilities against the closed form",
    "fit": "fit control coefficients per distance class and write them to CSV",
    "rank": "full-rank fraction of sampled channel matrices over a geometry sweep",
    "optimize": "solve the 2x1 molecule-budget problem and check it by brute force",
    "ber": "BER sweep for every system in the config",
    "throughput": "throughput table derived from a BER sweep",
}

COMMANDS = {"hitprob": cmd_hitprob, "fit": cmd_fit, "rank": cmd_rank, "optimize": cmd_optimize,
            "ber": cmd_ber, "throughput": cmd_throughput}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="msm", description="Molecular spatial modulation simulator.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", required=True, help="YAML experiment file")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--engine", choices=("particle", "stats"),
                       help="channel used for received counts (ber, throughput)")
        p.add_argument("--out", help="output directory (default: the config's 'out')")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "optimize":
            p.add_argument("--l-total", type=int, help="total molecules L0 + L1")
            p.add_argument("--targets", help="CSV with 16 rows of target mean b and variance c")
        if name == "ber":
            p.add_argument("--dump-thresholds", action="store_true",
                           help="also write every detector threshold to CSV")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        over = {"seed": args.seed}
        if args.engine == "particle":
            over["source"] = "particle"
        elif args.engine == "stats" and cfg.channel.source == "particle":
            over["source"] = "closed-form"
        cfg = cfg.with_overrides(**over)
        return COMMANDS[args.command](cfg, args)
    except MSMError as exc:
        print(f"msm {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"msm {args.command}: I/O error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
