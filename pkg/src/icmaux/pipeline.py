"""Experiment orchestration shared by the CLI and the scripts.

Everything here writes into ``<out_dir>/<run-name>/`` and stamps the config
digest into each artifact.  Expensive shared stages (recognizer pretraining,
image-fidelity warm start) are cached under ``<out_dir>/_cache`` keyed by the
digest of the config fields they depend on.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import shutil
from dataclasses import asdict, dataclass

import numpy as np

from . import checkpoint as ckpt
from .codec import CodecConfig, CodecModel, bit_allocation_map, bit_map_diff
from .config import RunConfig
from .metrics import (
    BD_METHOD,
    RDCurve,
    RDPoint,
    bd_rate,
    emit_bitmap,
    emit_bitmap_diff,
    encode_latents,
    evaluate_codec,
    emit_rd_report,
)
from .roi import RoiConfig, mask_to_latent, roi_transform
from .task import (
    AuxiliaryBranch,
    Batch,
    RecognitionModel,
    RecognizerConfig,
    make_batch,
    pretrain_recognizer,
)
from .training import LossConfig, TaskData, TrainConfig, TrainResult, make_aux_branch, train, write_log_csv


class RunExistsError(FileExistsError):
    pass


class MissingCheckpointError(FileNotFoundError):
    pass


def _digest(obj) -> str:
    canon = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]


def _write_json(path: str, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _noop(_msg: str) -> None:
    pass


# ---------------------------------------------------------------------------
# run directories


def open_run(cfg: RunConfig, name: str, force: bool = False) -> str:
    """Create ``out_dir/name``; refuse to touch a non-empty one unless ``force``."""
    path = os.path.join(cfg.out_dir, name)
    if os.path.isdir(path) and os.listdir(path):
        if not force:
            raise RunExistsError(f"run directory {path} exists; choose a new run name or pass --force")
        shutil.rmtree(path)
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "config.json"), "w") as fh:
        fh.write(cfg.to_json())
        fh.write("\n")
    _write_json(os.path.join(path, "run.json"), {"config_digest": cfg.digest(), "run": name})
    return path


# ---------------------------------------------------------------------------
# cached shared stages


def _cache_dir(cfg: RunConfig) -> str:
    d = os.path.join(cfg.out_dir, "_cache")
    os.makedirs(d, exist_ok=True)
    return d


def recognizer_key(cfg: RunConfig) -> dict:
    t = asdict(cfg.task)
    t.pop("name")  # one recognizer serves both tasks
    return t


def get_recognizer(cfg: RunConfig, log=_noop) -> RecognitionModel:
    key = recognizer_key(cfg)
    path = os.path.join(_cache_dir(cfg), f"recognizer-{_digest(key)}.ckpt")
    rcfg = RecognizerConfig(tuple(cfg.task.widths), cfg.task.seed)
    model = RecognitionModel(rcfg)
    if os.path.exists(path):
        model.load_state_dict(ckpt.load(path).module_state("recognizer"))
        model.freeze()
        return model
    log(f"pretraining recognizer ({cfg.task.pretrain_steps} steps)")
    model, report = pretrain_recognizer(cfg.task.seed, cfg.task.pretrain_steps, cfg.task.pretrain_lr,
                                        batch_size=cfg.task.pretrain_batch, heldout_seed=cfg.task.heldout_seed,
                                        n_heldout=cfg.task.n_heldout, cfg=rcfg,
                                        min_miou=cfg.task.min_miou, min_presence_acc=cfg.task.min_presence_acc,
                                        log=log)
    ck = ckpt.pack({"recognizer": model}, {"recognizer": rcfg.to_dict()},
                   {"report": report.to_dict(), "key": key})
    ckpt.save(path, ck)
    log(f"recognizer ready: {report.to_dict()}")
    return model


def build_data(cfg: RunConfig, recognizer: RecognitionModel | None) -> TaskData:
    d = cfg.data
    return TaskData.build(d.train_seed, d.n_train, d.val_seed, d.n_val, recognizer)


def warm_key(cfg: RunConfig) -> dict:
    t = cfg.train
    return {"codec": asdict(cfg.codec), "data": asdict(cfg.data), "epochs": t.warm_start_epochs,
            "lam": t.warm_start_lam, "lr": t.warm_start_lr, "batch_size": t.batch_size,
            "entropy_lr_mult": t.entropy_lr_mult}


def get_warm_codec_state(cfg: RunConfig, data: TaskData, log=_noop) -> dict | None:
    """Image-fidelity (RdImage) pretraining shared by every task run; ``None`` if disabled."""
    t = cfg.train
    if t.warm_start_epochs <= 0:
        return None
    key = warm_key(cfg)
    path = os.path.join(_cache_dir(cfg), f"codec-warm-{_digest(key)}.ckpt")
    if os.path.exists(path):
        return ckpt.load(path).module_state("codec")
    log(f"warm-starting codec ({t.warm_start_epochs} epochs, lambda {t.warm_start_lam})")
    codec = CodecModel(cfg.codec_config())
    tcfg = TrainConfig(epochs=t.warm_start_epochs, batch_size=t.batch_size, lr0=t.warm_start_lr,
                       seed=cfg.codec.seed, entropy_lr_mult=t.entropy_lr_mult)
    res = train(codec, data, LossConfig("RdImage", t.warm_start_lam, task=cfg.task.name), tcfg, log=log)
    ck = ckpt.pack({"codec": codec}, {"codec": cfg.codec_config().to_dict()},
                   {"key": key, "final_val_total": res.final_val_total})
    ckpt.save(path, ck)
    return ck.module_state("codec")


# ---------------------------------------------------------------------------
# single training run


@dataclass
class RunOutcome:
    name: str
    loss: LossConfig
    result: TrainResult
    codec: CodecModel
    aux: AuxiliaryBranch | None
    path: str


def save_model(path: str, cfg: RunConfig, loss: LossConfig, codec: CodecModel, aux: AuxiliaryBranch | None,
               meta: dict | None = None) -> None:
    hp = {"codec": cfg.codec_config().to_dict(), "loss": asdict(loss)}
    if aux is not None:
        hp["aux"] = {"position": aux.position, "task": aux.task, "in_shape": list(aux.in_shape),
                     "width": aux.width}
    m = {"config_digest": cfg.digest(), **(meta or {})}
    ckpt.save(path, ckpt.pack({"codec": codec, "aux": aux}, hp, m))


def load_model(path: str) -> tuple[CodecModel, AuxiliaryBranch | None, ckpt.Checkpoint]:
    if not os.path.exists(path):
        raise MissingCheckpointError(f"checkpoint not found: {path}")
    ck = ckpt.load(path)
    codec = CodecModel(CodecConfig(**ck.hparams["codec"]))
    codec.load_state_dict(ck.module_state("codec"))
    aux = None
    if "aux" in ck.hparams and ck.has_module("aux"):
        a = ck.hparams["aux"]
        aux = AuxiliaryBranch(a["position"], a["task"], tuple(a["in_shape"]), a["width"])
        aux.load_state_dict(ck.module_state("aux"))
    return codec, aux, ck


def train_one(cfg: RunConfig, run_dir: str, name: str, loss: LossConfig, recognizer: RecognitionModel,
              data: TaskData, warm_state: dict | None, seed: int | None = None, log=_noop) -> RunOutcome:
    """Train one codec from the shared starting point and write its log and checkpoint."""
    tcfg = cfg.train_config()
    if seed is not None:
        tcfg = TrainConfig(**{**asdict(tcfg), "seed": seed})
    codec = CodecModel(cfg.codec_config())
    if warm_state is not None:
        codec.load_state_dict(warm_state)
    aux = None
    if loss.uses_aux:
        aux = make_aux_branch(loss.position, codec, recognizer, loss.task, tcfg.seed, cfg.train.aux_width,
                              loss.aux_task_tap)
    res = train(codec, data, loss, tcfg, recognizer=recognizer if loss.uses_recognizer else None, aux=aux,
                log_path=os.path.join(run_dir, f"{name}_log.csv"), log=log)
    path = os.path.join(run_dir, f"{name}.ckpt")
    save_model(path, cfg, loss, codec, aux, {"seed": tcfg.seed, "steps": res.steps})
    if res.audits:
        _write_audits(os.path.join(run_dir, f"{name}_audit.csv"), res.audits)
    return RunOutcome(name, loss, res, codec, aux, path)


def _write_audits(path: str, audits: list) -> None:
    with open(path, "w", newline="") as fh:
        fields = list(asdict(audits[0]))
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for a in audits:
            w.writerow(asdict(a))


# ---------------------------------------------------------------------------
# evaluation


def eval_batch(cfg: RunConfig) -> Batch:
    return make_batch(cfg.eval.seed, range(cfg.eval.n_images))


def evaluate(cfg: RunConfig, codec, recognizer, batch: Batch | None = None, teacher: dict | None = None,
             **kw):
    batch = eval_batch(cfg) if batch is None else batch
    return evaluate_codec(codec, recognizer, batch, cfg.task.name, teacher=teacher, code=cfg.eval.code, **kw)


# ---------------------------------------------------------------------------
# RD sweep


def parse_variant(text: str, default_position: str) -> tuple[str, str]:
    """``"TaskAux"`` or ``"TaskAuxMse@none"`` -> (variant, position)."""
    variant, _, position = text.partition("@")
    return variant, position or default_position


def variant_label(variant: str, position: str) -> str:
    from .training import AUX_VARIANTS

    return f"{variant}@{position}" if variant in AUX_VARIANTS else variant


def rd_sweep(cfg: RunConfig, run_dir: str, recognizer, data: TaskData, warm_state, log=_noop) -> dict:
    """Train every (variant, lambda, seed), evaluate, and emit the RD report and BD-rate table.

    Each curve point is the seed mean of bpp and quality at one lambda.
    """
    batch = eval_batch(cfg)
    teacher = _teacher(recognizer, batch)
    curves, rows, coding = {}, [], []
    for entry in cfg.sweep.variants:
        variant, position = parse_variant(entry, cfg.loss.position)
        label = variant_label(variant, position)
        points = []
        for lam in cfg.sweep.lams:
            loss = LossConfig(**{**asdict(cfg.loss_config()), "variant": variant, "position": position,
                                 "lam": float(lam)})
            bpps, quals = [], []
            for seed in cfg.sweep.seeds:
                name = f"{label.replace('@', '_')}_lam{lam:g}_seed{seed}"
                out = train_one(cfg, run_dir, name, loss, recognizer, data, warm_state, seed=int(seed), log=log)
                ev = evaluate(cfg, out.codec, recognizer, batch, teacher)
                bpps.append(ev.bpp)
                quals.append(ev.quality_gt)
                rows.append({"curve": label, "lam": float(lam), "seed": int(seed), "checkpoint": f"{name}.ckpt",
                             "final_val_total": out.result.final_val_total, **ev.to_dict()})
                coding += [{"checkpoint": f"{name}.ckpt", "index": i, "est_bits": float(e), "table_bits": float(t),
                            "payload_bits": float(c)}
                           for i, (e, t, c) in enumerate(zip(ev.image_bits, ev.image_table_bits, ev.image_coded_bits))]
                log(f"{name}: bpp {ev.bpp:.4f} (coded {ev.bpp_coded:.4f}) quality {ev.quality_gt:.4f}")
            points.append(RDPoint(float(np.mean(bpps)), float(np.mean(quals)), f"lam{lam:g}"))
        curves[label] = RDCurve(points, label)
    matrix = emit_rd_report(curves, os.path.join(run_dir, "rd_points.csv"))
    _write_rows(os.path.join(run_dir, "sweep.csv"), rows)
    _write_rows(os.path.join(run_dir, "coding.csv"), coding)
    labels = list(curves)
    summary = {"config_digest": cfg.digest(), "bd_method": BD_METHOD, "curves": labels,
               "bd_rate": {f"{a}->{b}": matrix[(a, b)] for a in labels for b in labels if a != b}}
    if len(labels) == 2:
        summary["bd_rate_test_vs_anchor"] = matrix[(labels[0], labels[1])]
    _write_json(os.path.join(run_dir, "summary.json"), summary)
    return {"curves": curves, "matrix": matrix, "rows": rows, "summary": summary}


def _teacher(recognizer, batch: Batch) -> dict:
    from .training import _batched_teacher

    return _batched_teacher(recognizer, batch)


def _write_rows(path: str, rows: list) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# ---------------------------------------------------------------------------
# position ablation


def ablate(cfg: RunConfig, run_dir: str, recognizer, data: TaskData, warm_state, log=_noop) -> dict:
    """One run per (position, seed) at the configured lambda; compares final validation loss."""
    finals: dict[str, list] = {}
    for position in ("none", "AuxEnc", "AuxDec", "AuxTask"):
        finals[position] = []
        for seed in cfg.sweep.seeds:
            loss = LossConfig(**{**asdict(cfg.loss_config()), "position": position})
            out = train_one(cfg, run_dir, f"{position}_seed{seed}", loss, recognizer, data, warm_state,
                            seed=int(seed), log=log)
            finals[position].append(out.result.final_val_total)
    medians = {k: float(np.median(v)) for k, v in finals.items()}
    aux_enc_best = medians["AuxEnc"] <= min(medians["AuxDec"], medians["AuxTask"])
    wins = sum(a < b for a, b in zip(finals["AuxEnc"], finals["none"]))
    report = {"config_digest": cfg.digest(), "variant": cfg.loss.variant, "lam": cfg.loss.lam,
              "seeds": list(cfg.sweep.seeds), "final_val_total": finals, "median": medians,
              "aux_enc_best": bool(aux_enc_best),
              "best_position": min(("AuxEnc", "AuxDec", "AuxTask"), key=medians.get),
              "aux_enc_beats_none_seeds": int(wins)}
    if not aux_enc_best:
        report["divergence"] = "AuxEnc is not the lowest median validation loss in this run"
    _write_json(os.path.join(run_dir, "ablation.json"), report)
    with open(os.path.join(run_dir, "ablation.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["position", "seed", "final_val_total"])
        for pos, vals in finals.items():
            for s, v in zip(cfg.sweep.seeds, vals):
                w.writerow([pos, s, repr(v)])
    return report


# ---------------------------------------------------------------------------
# bit allocation and ROI analysis


def roi_split(bits: np.ndarray, roi: np.ndarray) -> tuple[float, float]:
    """Mean bits per latent cell inside and outside the ROI (NaN when a side is empty)."""
    roi = roi.astype(bool)
    inside = float(bits[roi].mean()) if roi.any() else float("nan")
    outside = float(bits[~roi].mean()) if (~roi).any() else float("nan")
    return inside, outside


def bitmap_analysis(codec_a, codec_b, batch: Batch, out_dir: str | None = None, n_export: int = 4,
                    factor: int = 8) -> dict:
    """Per-image ROI statistics of ``codec_a`` plus its difference map against ``codec_b``.

    Images without any foreground or background latent cell are skipped in the
    ROI comparisons.
    """
    codes_a = encode_latents(codec_a, batch.x)
    codes_b = encode_latents(codec_b, batch.x)
    rows = []
    for i, (ca, cb) in enumerate(zip(codes_a, codes_b)):
        ma = bit_allocation_map(ca, codec_a.entropy)
        mb = bit_allocation_map(cb, codec_b.entropy)
        roi = mask_to_latent(batch.seg[i], factor)
        a_in, a_out = roi_split(ma, roi)
        d_in, d_out = roi_split(bit_map_diff(ma, mb), roi)
        rows.append({"index": i, "roi_cells": int(roi.sum()), "a_roi": a_in, "a_bg": a_out,
                     "diff_roi": d_in, "diff_bg": d_out, "a_bits": float(ma.sum()), "b_bits": float(mb.sum())})
        if out_dir is not None and i < n_export:
            emit_bitmap(ca, codec_a.entropy, os.path.join(out_dir, f"bitmap_a_{i:03d}.pgm"))
            emit_bitmap(cb, codec_b.entropy, os.path.join(out_dir, f"bitmap_b_{i:03d}.pgm"))
            emit_bitmap_diff(ma, mb, os.path.join(out_dir, f"bitmap_diff_{i:03d}.pgm"))
    valid = [r for r in rows if 0 < r["roi_cells"] < roi.size]
    frac = float(np.mean([r["a_roi"] > r["a_bg"] for r in valid])) if valid else float("nan")
    diff_roi = float(np.mean([r["diff_roi"] for r in valid])) if valid else float("nan")
    summary = {"n_images": len(rows), "n_valid": len(valid), "frac_roi_gt_bg": frac,
               "mean_diff_roi": diff_roi,
               "mean_diff_bg": float(np.mean([r["diff_bg"] for r in valid])) if valid else float("nan")}
    if out_dir is not None:
        _write_rows(os.path.join(out_dir, "bitmap_stats.csv"), rows)
        _write_json(os.path.join(out_dir, "bitmap_summary.json"), summary)
    return {"rows": rows, "summary": summary}


def roi_baseline(codec, batch: Batch, roi_cfg: RoiConfig, recognizer=None, task: str = "presence",
                 out_dir: str | None = None, factor: int = 8) -> dict:
    """Compare plain encoding with QF-scaled background latents on the same images."""
    transform = roi_transform(batch.seg, roi_cfg, factor)
    plain = encode_latents(codec, batch.x)
    scaled = encode_latents(codec, batch.x, transform=transform)
    rows = []
    for i, (cp, cs) in enumerate(zip(plain, scaled)):
        roi = mask_to_latent(batch.seg[i], factor, roi_cfg.binarize_threshold)
        mp = bit_allocation_map(cp, codec.entropy)
        ms = bit_allocation_map(cs, codec.entropy)
        _, bg_p = roi_split(mp, roi)
        _, bg_s = roi_split(ms, roi)
        rows.append({"index": i, "roi_cells": int(roi.sum()), "bg_bits_plain": bg_p, "bg_bits_qf": bg_s,
                     "bits_plain": float(mp.sum()), "bits_qf": float(ms.sum())})
    valid = [r for r in rows if r["roi_cells"] < roi.size]
    summary = {
        "qf": roi_cfg.qf, "n_images": len(rows), "n_valid": len(valid),
        "frac_bg_reduced": float(np.mean([r["bg_bits_qf"] < r["bg_bits_plain"] for r in valid])),
        "frac_total_reduced": float(np.mean([r["bits_qf"] < r["bits_plain"] for r in valid])),
        "bpp_plain": float(np.mean([r["bits_plain"] for r in rows]) / batch.x[0, 0].size),
        "bpp_qf": float(np.mean([r["bits_qf"] for r in rows]) / batch.x[0, 0].size),
    }
    if recognizer is not None:
        ev_p = evaluate_codec(codec, recognizer, batch, task, code=False)
        ev_s = evaluate_codec(codec, recognizer, batch, task, code=False, transform=transform)
        summary["quality_plain"] = ev_p.quality_gt
        summary["quality_qf"] = ev_s.quality_gt
    if out_dir is not None:
        _write_rows(os.path.join(out_dir, "roi_stats.csv"), rows)
        _write_json(os.path.join(out_dir, "roi_summary.json"), summary)
    return {"rows": rows, "summary": summary}


def bd_between(curve_anchor: RDCurve, curve_test: RDCurve) -> float:
    return bd_rate(curve_anchor, curve_test)
