"""Command-line entry point.

Usage: ``icmaux <command> [--config c.json] [--name RUN] [--force] [--section.key VALUE ...]``

Exit codes: 0 success, 1 other failure, 2 config/schema error, 3 missing
checkpoint, 4 numerical abort, 5 run directory exists.  Failures print one
JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import autodiff as ad
from . import config as config_mod
from . import pipeline as pl
from .codec import PaddingRequiredError, to_latent_code
from .coder import build_cdf, rc_decode, rc_encode, read_bitstream, write_bitstream
from .config import ConfigError, RunConfig
from .metrics import bd_rate_matrix, load_rd_report, write_pgm16
from .task import generate_sample
from .training import TrainingDiverged

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_CHECKPOINT, EXIT_NUMERIC, EXIT_EXISTS = 0, 1, 2, 3, 4, 5


def _parse_overrides(extra: list[str]) -> dict:
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise ConfigError(f"unrecognized argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"override {tok} needs a value")
            value = extra[i + 1]
            i += 2
        out[key] = value
    return out


def _logger(quiet: bool):
    if quiet:
        return pl._noop
    t0 = time.time()
    return lambda msg: print(f"[{time.time() - t0:7.1f}s] {msg}", file=sys.stderr, flush=True)


def load_config(args, extra) -> RunConfig:
    cfg = config_mod.load(args.config) if args.config else RunConfig().validate()
    overrides = _parse_overrides(extra)
    if args.out_dir:
        overrides["out_dir"] = args.out_dir
    return config_mod.apply_overrides(cfg, overrides) if overrides else cfg


def _run_name(args, cfg: RunConfig) -> str:
    return args.name or f"{args.command}-{cfg.digest()}"


# ---------------------------------------------------------------------------
# image I/O


def read_png(path: str) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def write_png(path: str, img: np.ndarray) -> None:
    from PIL import Image

    arr = np.clip(np.round(np.asarray(img).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg: RunConfig, log) -> dict:
    run = pl.open_run(cfg, _run_name(args, cfg), args.force)
    seed = cfg.data.train_seed if args.seed is None else args.seed
    n = args.count
    index = []
    for i in range(n):
        s = generate_sample(seed, i)
        write_png(os.path.join(run, f"img_{i:05d}.png"), s.image)
        write_pgm16(os.path.join(run, f"mask_{i:05d}.pgm"), s.seg_mask.astype(np.uint16),
                    [f"classes 0=bg 1=circle 2=square 3=triangle", f"seed {seed} index {i}"])
        index.append({"index": i, "presence": [int(v) for v in s.presence]})
    pl._write_json(os.path.join(run, "presence.json"),
                   {"config_digest": cfg.digest(), "seed": seed, "samples": index})
    return {"run_dir": run, "count": n}


def cmd_pretrain(args, cfg: RunConfig, log) -> dict:
    run = pl.open_run(cfg, _run_name(args, cfg), args.force)
    rec = pl.get_recognizer(cfg, log)
    from .task import evaluate_recognizer, make_batch

    report = evaluate_recognizer(rec, make_batch(cfg.task.heldout_seed, range(cfg.task.n_heldout)))
    report["config_digest"] = cfg.digest()
    pl._write_json(os.path.join(run, "recognizer.json"), report)
    return {"run_dir": run, **report}


def _setup(cfg: RunConfig, log, need_warm: bool = True):
    rec = pl.get_recognizer(cfg, log)
    data = pl.build_data(cfg, rec)
    warm = pl.get_warm_codec_state(cfg, data, log) if need_warm else None
    return rec, data, warm


def cmd_train(args, cfg: RunConfig, log) -> dict:
    run = pl.open_run(cfg, _run_name(args, cfg), args.force)
    rec, data, warm = _setup(cfg, log)
    loss = cfg.loss_config()
    out = pl.train_one(cfg, run, "model", loss, rec, data, warm, log=log)
    ev = pl.evaluate(cfg, out.codec, rec)
    pl._write_json(os.path.join(run, "eval.json"), {"config_digest": cfg.digest(), **ev.to_dict()})
    return {"run_dir": run, "checkpoint": out.path, "final_val_total": out.result.final_val_total,
            **ev.to_dict()}


def cmd_eval(args, cfg: RunConfig, log) -> dict:
    codec, _aux, ck = pl.load_model(args.checkpoint)
    run = pl.open_run(cfg, _run_name(args, cfg), args.force)
    rec = pl.get_recognizer(cfg, log)
    ev = pl.evaluate(cfg, codec, rec)
    res = {"config_digest": cfg.digest(), "checkpoint": os.path.abspath(args.checkpoint), **ev.to_dict()}
    if args.roi:
        roi = pl.roi_baseline(codec, pl.eval_batch(cfg), cfg.roi_config(), rec, cfg.task.name, run)
        res["roi"] = roi["summary"]
    pl._write_json(os.path.join(run, "eval.json"), res)
    return {"run_dir": run, **res}


def cmd_encode(args, cfg: RunConfig, log) -> dict:
    codec, _aux, _ = pl.load_model(args.checkpoint)
    img = read_png(args.input)
    _, h, w = img.shape
    f = codec.downsample_factor
    if h % f or w % f:
        raise PaddingRequiredError(f"image {h}x{w} is not a multiple of {f}; pad it first")
    with ad.no_grad():
        y = codec.encode(ad.Tensor(img[None])).data[0]
    code = to_latent_code(y, codec.entropy)
    bs = rc_encode(code, build_cdf(codec.entropy))
    write_bitstream(args.output, bs)
    return {"output": args.output, "latent_shape": list(code.shape), "payload_bits": bs.payload_bits,
            "bpp": bs.payload_bits / (h * w)}


def cmd_decode(args, cfg: RunConfig, log) -> dict:
    codec, _aux, _ = pl.load_model(args.checkpoint)
    bs = read_bitstream(args.input)
    code = rc_decode(bs, build_cdf(codec.entropy))
    with ad.no_grad():
        x_hat = codec.decode(ad.Tensor(code.values[None].astype(np.float32))).data[0]
    write_png(args.output, x_hat)
    if args.latent_out:
        np.save(args.latent_out, code.values)
    return {"output": args.output, "latent_shape": list(code.shape)}


def cmd_rd_sweep(args, cfg: RunConfig, log) -> dict:
    run = pl.open_run(cfg, _run_name(args, cfg), args.force)
    rec, data, warm = _setup(cfg, log)
    res = pl.rd_sweep(cfg, run, rec, data, warm, log)
    return {"run_dir": run, **res["summary"]}


def cmd_bd_rate(args, cfg: RunConfig, log) -> dict:
    curves = load_rd_report(args.report)
    if args.anchor and args.test:
        from .metrics import bd_rate

        return {"anchor": args.anchor, "test": args.test,
                "bd_rate": bd_rate(curves[args.anchor], curves[args.test])}
    m = bd_rate_matrix(curves)
    return {"bd_rate": {f"{a}->{b}": v for (a, b), v in m.items()}}


def cmd_bitmap(args, cfg: RunConfig, log) -> dict:
    codec_a, _, _ = pl.load_model(args.checkpoint)
    codec_b, _, _ = pl.load_model(args.against or args.checkpoint)
    run = pl.open_run(cfg, _run_name(args, cfg), args.force)
    res = pl.bitmap_analysis(codec_a, codec_b, pl.eval_batch(cfg), run, n_export=args.export)
    return {"run_dir": run, **res["summary"]}


def cmd_ablate(args, cfg: RunConfig, log) -> dict:
    run = pl.open_run(cfg, _run_name(args, cfg), args.force)
    rec, data, warm = _setup(cfg, log)
    rep = pl.ablate(cfg, run, rec, data, warm, log)
    return {"run_dir": run, **rep}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "encode": cmd_encode,
    "decode": cmd_decode,
    "rd-sweep": cmd_rd_sweep,
    "bd-rate": cmd_bd_rate,
    "bitmap": cmd_bitmap,
    "ablate-positions": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (defaults are used when omitted)")
    common.add_argument("--name", help="run name under out_dir (default: <command>-<config digest>)")
    common.add_argument("--out-dir", dest="out_dir", help="shortcut for --out_dir")
    common.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    common.add_argument("--quiet", action="store_true")

    p = argparse.ArgumentParser(prog="icmaux", description="Auxiliary-loss training workbench for image coding for machines")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("gen-data", parents=[common], help="export synthetic samples as PNG/PGM/JSON")
    s.add_argument("--count", type=int, default=16)
    s.add_argument("--seed", type=int)
    sub.add_parser("pretrain", parents=[common], help="pretrain (or load cached) frozen recognizer")
    sub.add_parser("train", parents=[common], help="train one codec with the configured loss")
    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--roi", action="store_true", help="also run the QF background-scaling baseline")
    for name, helptext in (("encode", "PNG -> .icmb"), ("decode", ".icmb -> PNG")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("input")
        s.add_argument("-o", "--output", required=True)
        s.add_argument("--checkpoint", required=True)
        if name == "decode":
            s.add_argument("--latent-out", dest="latent_out", help="also save decoded integer latent (.npy)")
    sub.add_parser("rd-sweep", parents=[common], help="train/evaluate every variant over the lambda grid")
    s = sub.add_parser("bd-rate", parents=[common], help="BD-rate table from an RD points CSV")
    s.add_argument("report")
    s.add_argument("--anchor")
    s.add_argument("--test")
    s = sub.add_parser("bitmap", parents=[common], help="bit-allocation maps and ROI statistics")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--against", help="reference checkpoint for difference maps")
    s.add_argument("--export", type=int, default=4, help="number of images to export as PGM")
    sub.add_parser("ablate-positions", parents=[common], help="aux insertion position ablation")
    return p


def _fail(code: int, exc: BaseException) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        cfg = load_config(args, extra)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    log = _logger(args.quiet)
    try:
        result = COMMANDS[args.command](args, cfg, log)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except (pl.MissingCheckpointError, FileNotFoundError) as exc:
        return _fail(EXIT_CHECKPOINT if isinstance(exc, pl.MissingCheckpointError) else EXIT_FAIL, exc)
    except (TrainingDiverged, ad.NonFiniteError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, exc)
    except pl.RunExistsError as exc:
        return _fail(EXIT_EXISTS, exc)
    except Exception as exc:  # coding errors, routing violations, failed pretraining, ...
        return _fail(EXIT_FAIL, exc)
    print(json.dumps(result, indent=2, sort_keys=True, default=float))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
