"""Acceptance criteria, one test each, at their stated tolerances.

Criteria that need trained models read the experiment outputs from
``$ICMAUX_RESULTS`` (default ``<repo>/results``) and run
``scripts/run_experiments.py`` first when those outputs are missing.  Every
test appends one PASS/FAIL line to the summary printed at the end of the run.
"""

import csv
import importlib.util
import json
import os
from dataclasses import asdict

import numpy as np
import pytest

from icmaux import checkpoint as ckpt
from icmaux import config as config_mod
from icmaux import gradsuite
from icmaux import pipeline as pl
from icmaux.codec import FactorizedEntropyModel, LatentCode
from icmaux.coder import Bitstream, build_cdf, rc_decode, rc_encode
from icmaux.metrics import RDCurve, bd_rate
from icmaux.training import LossConfig, compute_loss

from conftest import ACCEPTANCE_LINES

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
RESULTS = os.environ.get("ICMAUX_RESULTS", os.path.join(ROOT, "results"))
TASKS = ("segmentation", "presence")
PIXELS = 64 * 64

_loader = importlib.util.spec_from_file_location("run_experiments", os.path.join(ROOT, "scripts", "run_experiments.py"))
runner = importlib.util.module_from_spec(_loader)
_loader.loader.exec_module(runner)


def report(n, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def task_cfg(task):
    return runner.load_cfg(task, RESULTS)


@pytest.fixture(scope="module")
def results():
    missing = [s for s in runner.STAGES
               if not os.path.exists(os.path.join(RESULTS, s, runner.SUMMARY[s.split("-")[0]]))]
    if missing:
        runner.main(["--out", RESULTS, "--stages", *missing])
    return RESULTS


def sweep_rows(task):
    return read_csv(os.path.join(RESULTS, f"sweep-{task}", "sweep.csv"))


def curve_labels(task):
    cfg = task_cfg(task)
    return [pl.variant_label(*pl.parse_variant(v, cfg.loss.position)) for v in cfg.sweep.variants]


# --- 1 ------------------------------------------------------------------


def test_c01_finite_difference_gradients():
    seeds = range(10)
    double = gradsuite.run_suite(seeds, np.float64)
    single = gradsuite.run_suite(seeds, np.float32)
    bad = [r.name for r in double + single if not r.passed]
    worst_d = max(r.max_rel_error for r in double)
    worst_s = max(r.max_rel_error for r in single)
    report(1, not bad, f"{len(gradsuite.CASES)} ops x 10 seeds; worst rel err double {worst_d:.2e} (tol 1e-6), "
                       f"single {worst_s:.2e} (tol 1e-3); failing: {bad[:5]}")


# --- 2 ------------------------------------------------------------------


def test_c02_gradient_routing_over_five_epochs(tmp_path):
    cfg = config_mod.apply_overrides(task_cfg("segmentation"), {
        "data.n_train": 64, "data.n_val": 16, "train.epochs": 5, "train.audit_every": 1})
    rec = pl.get_recognizer(cfg)
    data = pl.build_data(cfg, rec)
    run = str(tmp_path)
    facts, ok = [], True
    for position in ("AuxEnc", "AuxDec", "AuxTask"):
        loss = LossConfig(**{**asdict(cfg.loss_config()), "variant": "TaskAux", "position": position,
                             "lam": 8.0})
        out = pl.train_one(cfg, run, position, loss, rec, data, None, seed=0)
        audits = out.result.audits
        steps = out.result.steps
        if position == "AuxEnc":
            good = all(a.decoder_zero and a.decoder_max_abs == 0.0 and a.encoder_nonzero for a in audits)
        else:
            good = all(a.decoder_max_abs > 0 for a in audits)
        ok &= good and len(audits) == steps and steps > 0
        facts.append(f"{position}: {len(audits)}/{steps} steps audited, "
                     f"max|g_dec| {max(a.decoder_max_abs for a in audits):.2e}")
    report(2, ok, "; ".join(facts))


# --- 3 ------------------------------------------------------------------


def test_c03_aux_branch_absent_from_eval(results, tmp_path):
    cfg = task_cfg("presence")
    aux_path, _ = runner.pair_checkpoints(cfg, results, "presence")
    codec, aux, ck = pl.load_model(aux_path)
    rec = pl.get_recognizer(cfg)
    batch = pl.eval_batch(cfg)
    assert aux is not None
    with_aux = pl.evaluate(cfg, codec, rec, batch)
    g = compute_loss(codec, batch.subset(slice(0, 32)), LossConfig(**ck.hparams["loss"]), recognizer=rec,
                     aux=aux, training=False)
    calls_in_eval = aux.calls
    stripped = str(tmp_path / "noaux.ckpt")
    ckpt.save(stripped, ck.without_module("aux"))
    codec2, aux2, _ = pl.load_model(stripped)
    without = pl.evaluate(cfg, codec2, rec, batch)
    same = (repr(with_aux.to_dict()) == repr(without.to_dict())
            and np.array_equal(with_aux.image_bits, without.image_bits)
            and np.array_equal(with_aux.image_coded_bits, without.image_coded_bits))
    report(3, calls_in_eval == 0 and g.aux_term is None and aux2 is None and same,
           f"aux calls during eval {calls_in_eval}; eval identical after deleting aux: {same}")


# --- 4 ------------------------------------------------------------------


def test_c04_range_coder(results):
    rng = np.random.default_rng(2024)
    em = FactorizedEntropyModel(4, init_scale=3.0)
    em.mu.data[:] = rng.normal(size=4)
    table = build_cdf(em)
    vals = rng.integers(-64, 65, size=(4, 250, 100))
    bs = rc_encode(LatentCode(vals, table.model_digest), table)
    back = rc_decode(Bitstream.from_bytes(bs.to_bytes()), table).values
    h = float(table.code_lengths(vals).sum())
    random_ok = np.array_equal(back, vals) and h <= bs.payload_bits <= 1.01 * h + 64

    n, worst, bounds_ok, trip_ok = 0, 0.0, True, True
    for task in TASKS:
        trip_ok &= all(r["roundtrip_ok"] == "True" for r in sweep_rows(task))
        for r in read_csv(os.path.join(results, f"sweep-{task}", "coding.csv")):
            t, c = float(r["table_bits"]), float(r["payload_bits"])
            bounds_ok &= t <= c <= 1.01 * t + 64
            worst = max(worst, (c - t) / t)
            n += 1
    report(4, random_ok and bounds_ok and trip_ok and n > 0,
           f"1e5 random symbols ok={random_ok}; {n} sweep latents roundtrip={trip_ok}, "
           f"bounds={bounds_ok}, worst overhead {100 * worst:.3f}%")


# --- 5 ------------------------------------------------------------------


def test_c05_estimated_vs_coded_rate(results):
    n, ok, worst = 0, True, 0.0
    for task in TASKS:
        for r in sweep_rows(task):
            est, coded = float(r["bpp"]), float(r["bpp_coded"])
            ok &= abs(coded - est) <= 0.01 * est + 64 / PIXELS
            worst = max(worst, abs(coded - est) / est)
            n += 1
        for r in read_csv(os.path.join(results, f"sweep-{task}", "coding.csv")):
            e, c = float(r["est_bits"]), float(r["payload_bits"])
            ok &= abs(c - e) <= 0.01 * e + 64
    report(5, ok and n > 0, f"{n} checkpoints (and each of their images) within 1% + 64 bits; "
                            f"worst checkpoint gap {100 * worst:.3f}%")


# --- 6 ------------------------------------------------------------------


def test_c06_bd_rate_oracle():
    anchor = RDCurve.from_arrays([0.1, 0.2, 0.4, 0.8], [0.50, 0.62, 0.71, 0.78], "anchor")

    def scaled(c, k):
        return RDCurve.from_arrays(c.bpp * k, c.quality, f"x{k}")

    same = bd_rate(anchor, anchor)
    half = bd_rate(anchor, scaled(anchor, 0.5))
    more = bd_rate(anchor, scaled(anchor, 1.25))
    test = RDCurve.from_arrays([0.09, 0.21, 0.35, 0.9], [0.48, 0.63, 0.72, 0.80], "t")
    invariant = bd_rate(anchor, test) == bd_rate(scaled(anchor, 4.0), scaled(test, 4.0))
    ok = same == 0.0 and abs(half + 50) <= 1e-6 and abs(more - 25) <= 1e-6 and invariant
    report(6, ok, f"identical {same:.4f}%, halved {half:.8f}%, x1.25 {more:.8f}%, scale invariant {invariant}")


# --- 7 ------------------------------------------------------------------


def test_c07_directional_reproduction(results):
    facts, majority_each, negative_any = [], True, False
    for task in TASKS:
        cfg = task_cfg(task)
        base, aux = curve_labels(task)
        mid = runner.mid_lambda(cfg)
        rows = [r for r in sweep_rows(task) if float(r["lam"]) == mid]
        val = {(r["curve"], int(r["seed"])): float(r["final_val_total"]) for r in rows}
        seeds = cfg.sweep.seeds
        wins = sum(val[(aux, s)] < val[(base, s)] for s in seeds)
        majority_each &= len(seeds) >= 3 and wins > len(seeds) / 2
        summary = json.load(open(os.path.join(results, f"sweep-{task}", "summary.json")))
        bd = summary["bd_rate"][f"{base}->{aux}"]
        negative_any |= bool(np.isfinite(bd) and bd < 0)
        facts.append(f"{task}: {aux} lower val total on {wins}/{len(seeds)} seeds at lam {mid:g}, "
                     f"BD-rate vs {base} {bd:+.2f}%")
    timing = json.load(open(os.path.join(results, "timing.json")))
    cpu = sum(timing[f"sweep-{t}"] for t in TASKS)
    facts.append(f"sweep CPU {cpu / 60:.1f} min")
    report(7, majority_each and negative_any and cpu <= 7200, "; ".join(facts))


# --- 8 ------------------------------------------------------------------


def test_c08_position_ablation(results):
    rep = json.load(open(os.path.join(results, "ablation-segmentation", "ablation.json")))
    med = rep["median"]
    produced = set(med) == {"none", "AuxEnc", "AuxDec", "AuxTask"} and len(rep["seeds"]) >= 3 and all(
        len(v) == len(rep["seeds"]) for v in rep["final_val_total"].values())
    raw = ", ".join(f"{k} {v:.4f}" for k, v in med.items())
    if rep["aux_enc_best"]:
        report(8, produced, f"AuxEnc best; medians {raw}")
    else:
        # the criterion records a non-AuxEnc winner as a documented divergence, not a failure
        ACCEPTANCE_LINES.append(f"criterion  8: {'PASS' if produced else 'FAIL'}  documented divergence, "
                                f"best is {rep['best_position']}; medians {raw}")
        assert produced and "divergence" in rep


# --- 9 ------------------------------------------------------------------


def test_c09_bit_allocation(results):
    facts, ok = [], True
    for task in TASKS:
        s = json.load(open(os.path.join(results, f"bitmap-{task}", "bitmap_summary.json")))
        ok &= s["frac_roi_gt_bg"] >= 0.7 and s["mean_diff_roi"] > 0
        facts.append(f"{task}: ROI>bg on {100 * s['frac_roi_gt_bg']:.1f}% of {s['n_valid']} images, "
                     f"mean ROI diff {s['mean_diff_roi']:+.4f} bits/cell")
    report(9, ok, "; ".join(facts))


# --- 10 -----------------------------------------------------------------


def test_c10_qf_baseline(results):
    s = json.load(open(os.path.join(results, "roi-presence", "roi_summary.json")))
    ok = s["frac_bg_reduced"] >= 0.7 and s["frac_total_reduced"] >= 0.7
    report(10, ok, f"QF {s['qf']}: background bits reduced on {100 * s['frac_bg_reduced']:.1f}%, total on "
                   f"{100 * s['frac_total_reduced']:.1f}% of images; bpp {s['bpp_plain']:.4f} -> {s['bpp_qf']:.4f}")


# --- 11 -----------------------------------------------------------------

SMOKE = ["data.n_train=64", "data.n_val=4", "task.pretrain_steps=2", "task.n_heldout=4", "task.min_miou=0",
         "task.min_presence_acc=0", "train.epochs=1", "train.warm_start_epochs=1", "train.aux_width=8",
         "eval.n_images=8", "sweep.seeds=[0]"]


def _csvs(root):
    out = {}
    for d, _, files in os.walk(root):
        for f in files:
            if f.endswith(".csv"):
                out[os.path.relpath(os.path.join(d, f), root)] = open(os.path.join(d, f), "rb").read()
    return out


@pytest.mark.filterwarnings("ignore::icmaux.metrics.BDRateWarning")
def test_c11_determinism(results, tmp_path):
    runs = []
    for k in range(2):
        out = str(tmp_path / f"pipe{k}")
        runner.main(["--out", out, "--set", *SMOKE])
        runs.append(_csvs(out))
    pipeline_same = runs[0] == runs[1] and len(runs[0]) > 10

    # retrain one full-size sweep run and compare with the stored log
    cfg = task_cfg("presence")
    base, _ = curve_labels("presence")
    mid = runner.mid_lambda(cfg)
    name = f"{base}_lam{mid:g}_seed0"
    rec = pl.get_recognizer(cfg)
    data = pl.build_data(cfg, rec)
    warm = pl.get_warm_codec_state(cfg, data)
    loss = LossConfig(**{**asdict(cfg.loss_config()), "variant": base, "lam": mid})
    pl.train_one(cfg, str(tmp_path), name, loss, rec, data, warm, seed=0)
    stored = open(os.path.join(results, "sweep-presence", f"{name}_log.csv"), "rb").read()
    retrain_same = (tmp_path / f"{name}_log.csv").read_bytes() == stored
    report(11, pipeline_same and retrain_same,
           f"{len(runs[0])} CSVs identical across two pipeline runs: {pipeline_same}; "
           f"retrained {name} log identical: {retrain_same}")
