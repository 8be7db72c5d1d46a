#!/usr/bin/env python3
"""Run the full experiment protocol into one results directory.

Stages (each skipped when its summary file already exists, unless --force):

  sweep-segmentation   RD sweep, baseline vs auxiliary loss, all seeds
  sweep-presence       same for the presence (classification) task
  ablation-segmentation  aux insertion position ablation at the mid lambda
  bitmap-<task>        bit allocation of TaskAux vs baseline at the mid lambda
  roi-presence         QF background scaling applied to the baseline codec

CPU seconds per stage go to timing.json.

    python3 scripts/run_experiments.py --out results
    python3 scripts/run_experiments.py --out results --stages sweep-presence roi-presence
    python3 scripts/run_experiments.py --out /tmp/smoke --set data.n_train=16 train.epochs=1 ...
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

from icmaux import config as config_mod
from icmaux import pipeline as pl

HERE = os.path.dirname(os.path.abspath(__file__))
CONFIGS = os.path.join(HERE, "..", "configs")
STAGES = ("sweep-segmentation", "sweep-presence", "ablation-segmentation",
          "bitmap-segmentation", "bitmap-presence", "roi-presence")
SUMMARY = {"sweep": "summary.json", "ablation": "ablation.json", "bitmap": "bitmap_summary.json",
           "roi": "roi_summary.json"}


def load_cfg(task: str, out_dir: str, overrides: dict | None = None):
    cfg = config_mod.load(os.path.join(CONFIGS, f"{task}.json"))
    return config_mod.apply_overrides(cfg, {**(overrides or {}), "out_dir": out_dir})


def mid_lambda(cfg) -> float:
    return float(cfg.sweep.lams[(len(cfg.sweep.lams) - 1) // 2])


def pair_checkpoints(cfg, out_dir: str, task: str, seed: int = 0) -> tuple[str, str]:
    """(aux-trained, baseline) checkpoints from the sweep at the mid lambda."""
    lam = mid_lambda(cfg)
    labels = [pl.variant_label(*pl.parse_variant(v, cfg.loss.position)) for v in cfg.sweep.variants]
    base, aux = labels
    sweep = os.path.join(out_dir, f"sweep-{task}")
    path = lambda lab: os.path.join(sweep, f"{lab.replace('@', '_')}_lam{lam:g}_seed{seed}.ckpt")
    return path(aux), path(base)


def run_stage(stage: str, out_dir: str, log, overrides: dict | None = None) -> dict:
    kind, task = stage.split("-", 1)
    cfg = load_cfg(task, out_dir, overrides)
    if kind == "ablation":
        cfg = config_mod.apply_overrides(cfg, {"loss.lam": mid_lambda(cfg)})
    run = pl.open_run(cfg, stage, force=True)
    if kind in ("sweep", "ablation"):
        rec = pl.get_recognizer(cfg, log)
        data = pl.build_data(cfg, rec)
        warm = pl.get_warm_codec_state(cfg, data, log)
        if kind == "sweep":
            return pl.rd_sweep(cfg, run, rec, data, warm, log)["summary"]
        return pl.ablate(cfg, run, rec, data, warm, log)
    aux_ckpt, base_ckpt = pair_checkpoints(cfg, out_dir, task)
    batch = pl.eval_batch(cfg)
    if kind == "bitmap":
        codec_a, _, _ = pl.load_model(aux_ckpt)
        codec_b, _, _ = pl.load_model(base_ckpt)
        return pl.bitmap_analysis(codec_a, codec_b, batch, run)["summary"]
    codec, _, _ = pl.load_model(base_ckpt)
    rec = pl.get_recognizer(cfg, log)
    return pl.roi_baseline(codec, batch, cfg.roi_config(), rec, task, run)["summary"]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="results")
    ap.add_argument("--stages", nargs="*", default=list(STAGES), choices=STAGES)
    ap.add_argument("--force", action="store_true", help="rerun stages that already have a summary")
    ap.add_argument("--set", nargs="*", default=[], metavar="KEY=VALUE",
                    help="config overrides applied to both tasks, e.g. train.epochs=1")
    args = ap.parse_args(argv)
    overrides = dict(kv.split("=", 1) for kv in args.set)

    t0 = time.time()
    log = lambda msg: print(f"[{time.time() - t0:8.1f}s] {msg}", flush=True)
    os.makedirs(args.out, exist_ok=True)
    timing_path = os.path.join(args.out, "timing.json")
    timing = json.load(open(timing_path)) if os.path.exists(timing_path) else {}
    for stage in args.stages:
        done = os.path.join(args.out, stage, SUMMARY[stage.split("-")[0]])
        if os.path.exists(done) and not args.force:
            log(f"{stage}: done, skipping")
            continue
        log(f"{stage}: start")
        c0 = time.process_time()
        summary = run_stage(stage, args.out, log, overrides)
        timing[stage] = time.process_time() - c0
        with open(timing_path, "w") as fh:
            json.dump(timing, fh, indent=2, sort_keys=True)
        log(f"{stage}: {json.dumps(summary, default=float)}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
