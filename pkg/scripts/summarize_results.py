#!/usr/bin/env python3
"""Print markdown tables from a results directory written by run_experiments.py.

    python3 scripts/summarize_results.py results
"""

from __future__ import annotations

import csv
import json
import os
import sys
from collections import defaultdict

import numpy as np

TASKS = ("segmentation", "presence")


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def load(path):
    with open(path) as fh:
        return json.load(fh)


def sweep_tables(root: str, task: str) -> list[str]:
    d = os.path.join(root, f"sweep-{task}")
    if not os.path.exists(os.path.join(d, "summary.json")):
        return [f"_{task}: sweep missing_", ""]
    summary = load(os.path.join(d, "summary.json"))
    data = rows(os.path.join(d, "sweep.csv"))
    quality = "mIoU" if task == "segmentation" else "accuracy"
    out = [f"### {task}", "",
           f"| curve | lambda | bpp (mean of seeds) | {quality} | final val total per seed |", "|---|---|---|---|---|"]
    grouped = defaultdict(list)
    for r in data:
        grouped[(r["curve"], float(r["lam"]))].append(r)
    for (curve, lam), rs in grouped.items():
        bpp = np.mean([float(r["bpp"]) for r in rs])
        q = np.mean([float(r["quality_gt"]) for r in rs])
        vals = " / ".join(f"{float(r['final_val_total']):.4f}" for r in sorted(rs, key=lambda r: int(r["seed"])))
        out.append(f"| {curve} | {lam:g} | {bpp:.4f} | {q:.4f} | {vals} |")
    out.append("")
    for pair, v in summary["bd_rate"].items():
        a, b = pair.split("->")
        out.append(f"- BD-rate of {b} against {a}: {v:+.2f}% ({summary['bd_method']})")
    out.append("")
    return out


def main(argv=None) -> int:
    root = (argv or sys.argv[1:] or ["results"])[0]
    lines = []
    for task in TASKS:
        lines += sweep_tables(root, task)
    abl = os.path.join(root, "ablation-segmentation", "ablation.json")
    if os.path.exists(abl):
        rep = load(abl)
        lines += [f"### position ablation (segmentation, lambda {rep['lam']:g}, {rep['variant']})", "",
                  "| position | final val total per seed | median |", "|---|---|---|"]
        for pos, vals in rep["final_val_total"].items():
            lines.append(f"| {pos} | {' / '.join(f'{v:.4f}' for v in vals)} | {rep['median'][pos]:.4f} |")
        lines += ["", f"- lowest aux median: {rep['best_position']}; AuxEnc beats no-aux on "
                      f"{rep['aux_enc_beats_none_seeds']}/{len(rep['seeds'])} seeds", ""]
    for task in TASKS:
        p = os.path.join(root, f"bitmap-{task}", "bitmap_summary.json")
        if os.path.exists(p):
            s = load(p)
            lines.append(f"- bit allocation ({task}): ROI cells get more bits than background on "
                         f"{100 * s['frac_roi_gt_bg']:.1f}% of {s['n_valid']} images; mean aux-minus-baseline "
                         f"bits per cell {s['mean_diff_roi']:+.4f} in ROI, {s['mean_diff_bg']:+.4f} outside")
    p = os.path.join(root, "roi-presence", "roi_summary.json")
    if os.path.exists(p):
        s = load(p)
        lines.append(f"- QF {s['qf']} background scaling (presence): background bits drop on "
                     f"{100 * s['frac_bg_reduced']:.1f}% and total bits on {100 * s['frac_total_reduced']:.1f}% "
                     f"of images; bpp {s['bpp_plain']:.4f} -> {s['bpp_qf']:.4f}, accuracy "
                     f"{s.get('quality_plain', float('nan')):.4f} -> {s.get('quality_qf', float('nan')):.4f}")
    p = os.path.join(root, "timing.json")
    if os.path.exists(p):
        t = load(p)
        lines.append("- CPU time: " + ", ".join(f"{k} {v / 60:.1f} min" for k, v in sorted(t.items())))
    print("\n".join(lines))
    return 0


if __name__ == "__main__":
    sys.exit(main())
