"""
Rendering sweep output
======================

The CLI writes plot-ready CSV files rather than images.  This script draws
them with matplotlib (an optional dependency)::

    funnelkit sweep-funnel-layer --out runs
    funnelkit bench --out runs
    python demos/plot_sweeps.py runs
"""

import csv
import sys
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

out = Path(sys.argv[1] if len(sys.argv) > 1 else "out")


def read(name):
    with open(out / name, newline="") as fh:
        return list(csv.DictReader(fh))


# %%
# Metric against funnel layer, one line per recovery op, with a +/- std band.
for stem in ("sweep_funnel_layer", "sweep_recovery_op"):
    path = out / f"{stem}_plot.csv"
    if not path.exists():
        continue
    series = defaultdict(list)
    for r in read(path.name):
        series[(r["scenario"], r["recovery_op"])].append((int(r["x"]), float(r["y_mean"]), float(r["y_std"])))
    fig, ax = plt.subplots(figsize=(6, 4))
    for (scenario, op), pts in sorted(series.items()):
        pts.sort()
        xs, ys, sd = zip(*pts)
        ax.plot(xs, ys, marker="o", label=f"{op} ({scenario})")
        ax.fill_between(xs, [y - s for y, s in zip(ys, sd)], [y + s for y, s in zip(ys, sd)], alpha=0.2)
    ax.set_xlabel("funnel layer (0 = no funnel)")
    ax.set_ylabel("mean metric")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / f"{stem}.png", dpi=120)
    print("wrote", out / f"{stem}.png")

# %%
# Analytic and measured savings against funnel layer.
if (out / "bench.csv").exists():
    rows = read("bench.csv")
    xs = [int(r["funnel_layer"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(xs, [float(r["flops_savings"]) for r in rows], marker="o", label="FLOPs")
    ax.plot(xs, [float(r["latency_savings"]) for r in rows], marker="s", label="measured latency")
    ax.set_xlabel("funnel layer")
    ax.set_ylabel("savings vs. no funnel")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "bench.png", dpi=120)
    print("wrote", out / "bench.png")
