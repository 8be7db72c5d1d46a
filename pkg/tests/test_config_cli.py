import json

import numpy as np
import pytest

from icmaux import cli
from icmaux import config as config_mod
from icmaux.config import ConfigError, RunConfig

TINY = {
    "data": {"n_train": 16, "n_val": 4},
    "task": {"pretrain_steps": 2, "pretrain_batch": 4, "n_heldout": 4, "min_miou": 0.0, "min_presence_acc": 0.0},
    "train": {"epochs": 1, "batch_size": 8, "warm_start_epochs": 1, "aux_width": 8},
    "eval": {"n_images": 4},
    "sweep": {"lams": [1.0, 2.0, 4.0, 8.0], "variants": ["Task", "TaskAux"], "seeds": [0]},
}


def tiny_config(tmp_path, **extra) -> str:
    d = json.loads(json.dumps(TINY))
    d["out_dir"] = str(tmp_path / "runs")
    for k, v in extra.items():
        d.setdefault(k, {}).update(v)
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(d))
    return str(path)


def run(argv, capsys):
    code = cli.main(argv + ["--quiet"])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if out.strip() else None), (json.loads(err) if err.strip() else None)


# --- config -------------------------------------------------------------


def test_defaults_validate_and_digest_is_stable():
    a, b = RunConfig().validate(), RunConfig().validate()
    assert a.digest() == b.digest() and len(a.digest()) == 12
    assert config_mod.from_dict(a.to_dict()).digest() == a.digest()


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown key"):
        config_mod.from_dict({"train": {"epochz": 3}})


def test_type_errors():
    with pytest.raises(ConfigError):
        config_mod.from_dict({"train": {"epochs": "3"}})
    with pytest.raises(ConfigError):
        config_mod.from_dict({"train": {"debug": 1}})
    with pytest.raises(ConfigError):
        config_mod.from_dict({"loss": {"lam": True}})


def test_value_errors():
    for bad in ({"task": {"name": "detection"}}, {"loss": {"lam": -1.0}}, {"roi": {"qf": 1.0}},
                {"sweep": {"variants": ["Nope"]}}, {"sweep": {"variants": ["TaskAux@middle"]}},
                {"sweep": {"lams": [1.0, 1.0]}}):
        with pytest.raises(ConfigError):
            config_mod.from_dict(bad)


def test_variant_with_position_accepted():
    cfg = config_mod.from_dict({"sweep": {"variants": ["TaskAuxMse@none", "TaskAuxMse@AuxEnc"]}})
    assert cfg.sweep.variants[0] == "TaskAuxMse@none"


def test_overrides():
    cfg = config_mod.apply_overrides(RunConfig(), {"loss.variant": "TaskAux", "loss.lam": "2.5",
                                                   "sweep.seeds": "[4, 5]", "out_dir": "123"})
    assert cfg.loss.variant == "TaskAux" and cfg.loss.lam == 2.5
    assert cfg.sweep.seeds == [4, 5] and cfg.out_dir == "123"
    assert cfg.digest() != RunConfig().digest()
    moved = config_mod.apply_overrides(RunConfig(), {"out_dir": "elsewhere"})
    assert moved.digest() == RunConfig().digest()
    with pytest.raises(ConfigError):
        config_mod.apply_overrides(RunConfig(), {"loss.nope": "1"})
    with pytest.raises(ConfigError):
        config_mod.apply_overrides(RunConfig(), {"nosection.lam": "1"})


def test_typed_views():
    cfg = RunConfig()
    assert cfg.loss_config().task == cfg.task.name
    assert not hasattr(cfg.train_config(), "aux_width")
    assert cfg.roi_config().qf == 1.4


def test_load_invalid_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        config_mod.load(str(p))


# --- cli ----------------------------------------------------------------


def test_gen_data(tmp_path, capsys):
    code, out, _ = run(["gen-data", "--config", tiny_config(tmp_path), "--count", "3", "--name", "d"], capsys)
    assert code == 0 and out["count"] == 3
    files = sorted(p.name for p in (tmp_path / "runs" / "d").iterdir())
    assert "img_00002.png" in files and "mask_00000.pgm" in files and "config.json" in files


def test_config_error_exit_code(tmp_path, capsys):
    code, _, err = run(["gen-data", "--config", tiny_config(tmp_path), "--train.epochz", "3"], capsys)
    assert code == cli.EXIT_CONFIG and err["error"] == "ConfigError"


def test_missing_checkpoint_exit_code(tmp_path, capsys):
    code, _, err = run(["eval", "--config", tiny_config(tmp_path), "--checkpoint", str(tmp_path / "x.ckpt")],
                       capsys)
    assert code == cli.EXIT_CHECKPOINT and err["exit_code"] == 3


def test_existing_run_exit_code(tmp_path, capsys):
    cfg = tiny_config(tmp_path)
    assert run(["gen-data", "--config", cfg, "--count", "1", "--name", "r"], capsys)[0] == 0
    assert run(["gen-data", "--config", cfg, "--count", "1", "--name", "r"], capsys)[0] == cli.EXIT_EXISTS
    assert run(["gen-data", "--config", cfg, "--count", "1", "--name", "r", "--force"], capsys)[0] == 0


def test_train_encode_decode_eval(tmp_path, capsys):
    cfg = tiny_config(tmp_path)
    code, out, err = run(["train", "--config", cfg, "--name", "t", "--loss.variant", "TaskAux"], capsys)
    assert code == 0, err
    ckpt = out["checkpoint"]
    assert run(["gen-data", "--config", cfg, "--count", "1", "--name", "img"], capsys)[0] == 0
    png = str(tmp_path / "runs" / "img" / "img_00000.png")
    code, enc, err = run(["encode", png, "-o", str(tmp_path / "a.icmb"), "--checkpoint", ckpt], capsys)
    assert code == 0, err
    assert enc["latent_shape"] == [32, 8, 8]
    code, _, err = run(["decode", str(tmp_path / "a.icmb"), "-o", str(tmp_path / "a.png"), "--checkpoint", ckpt,
                        "--latent-out", str(tmp_path / "lat.npy")], capsys)
    assert code == 0, err
    assert np.load(tmp_path / "lat.npy").shape == (32, 8, 8)
    assert cli.read_png(str(tmp_path / "a.png")).shape == (3, 64, 64)
    code, ev, err = run(["eval", "--config", cfg, "--checkpoint", ckpt, "--name", "e", "--roi"], capsys)
    assert code == 0, err
    assert ev["roundtrip_ok"] and abs(ev["bpp_coded"] - ev["bpp"]) <= 0.01 * ev["bpp"] + 64 / 4096
    assert "frac_bg_reduced" in ev["roi"]


def test_encode_requires_padding(tmp_path, capsys):
    from PIL import Image

    cfg = tiny_config(tmp_path)
    code, out, _ = run(["train", "--config", cfg, "--name", "t"], capsys)
    Image.fromarray(np.zeros((60, 64, 3), np.uint8)).save(tmp_path / "odd.png")
    code, _, err = run(["encode", str(tmp_path / "odd.png"), "-o", str(tmp_path / "o.icmb"),
                        "--checkpoint", out["checkpoint"]], capsys)
    assert code == cli.EXIT_FAIL and err["error"] == "PaddingRequiredError"


@pytest.mark.filterwarnings("ignore::icmaux.metrics.BDRateWarning")  # one-epoch curves are noisy
def test_rd_sweep_bd_rate_and_bitmap(tmp_path, capsys):
    cfg = tiny_config(tmp_path)
    code, out, err = run(["rd-sweep", "--config", cfg, "--name", "s"], capsys)
    assert code == 0, err
    run_dir = tmp_path / "runs" / "s"
    assert (run_dir / "rd_points.csv").exists() and (run_dir / "rd_points_bdrate.csv").exists()
    code, bd, err = run(["bd-rate", str(run_dir / "rd_points.csv"), "--config", cfg], capsys)
    assert code == 0, err
    assert bd["bd_rate"]["Task->Task"] == 0.0
    a, b = str(run_dir / "TaskAux_AuxEnc_lam2_seed0.ckpt"), str(run_dir / "Task_lam2_seed0.ckpt")
    code, bm, err = run(["bitmap", "--config", cfg, "--checkpoint", a, "--against", b, "--name", "bm",
                         "--export", "2"], capsys)
    assert code == 0, err
    assert (tmp_path / "runs" / "bm" / "bitmap_diff_001.pgm").exists()
    assert bm["n_images"] == 4
