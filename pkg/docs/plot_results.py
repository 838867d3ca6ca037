"""Sample plot of a BER sweep written by ``msm ber``.

Needs matplotlib, which the package itself does not depend on::

    python3 docs/plot_results.py results/msm2x1_vs_qcsk/msm2x1_vs_qcsk.csv -o ber.png

Sweeps over L0 (``split_sweep``) are plotted against L0 instead of the
average molecule count.
"""

import argparse
import csv
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def load(path):
    curves = defaultdict(list)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            curves[row["system"]].append(row)
    return curves


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("csv", help="BER CSV from msm ber or msm throughput")
    ap.add_argument("-o", "--output", default="ber.png")
    ap.add_argument("--throughput", action="store_true", help="plot throughput on a linear axis")
    args = ap.parse_args(argv)

    curves = load(args.csv)
    avgs = {row["avg_molecules"] for rows in curves.values() for row in rows}
    x_key = "L0" if len(avgs) == 1 else "avg_molecules"
    y_key = "throughput" if args.throughput else "ber"

    fig, ax = plt.subplots(figsize=(6, 4))
    for name, rows in curves.items():
        rows.sort(key=lambda r: float(r[x_key]))
        x = [float(r[x_key]) for r in rows]
        y = [float(r[y_key]) for r in rows]
        if args.throughput:
            ax.plot(x, y, marker="o", label=name)
        else:
            err = [float(r["stderr"]) for r in rows]
            # zero-error points cannot sit on a log axis
            keep = [i for i, v in enumerate(y) if v > 0]
            ax.errorbar([x[i] for i in keep], [y[i] for i in keep], yerr=[err[i] for i in keep],
                        marker="o", capsize=3, label=name)
            ax.set_yscale("log")
    ax.set_xlabel("L0" if x_key == "L0" else "average molecules")
    ax.set_ylabel("throughput (bit/s)" if args.throughput else "BER")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.output, dpi=150)
    print(f"wrote {args.output}")


if __name__ == "__main__":
    main()
