import re
from pathlib import Path

import numpy as np
import pytest

from nirlora.cli import main
from nirlora.config import SCHEMA, parse_config
from nirlora.data import Raster, gen_synthetic, load_raster, select_bands, write_raster
from nirlora.head import sigmoid
from nirlora.pipeline import load_checkpoint
from nirlora.train import REPORT_PATTERN, predict_logits
from nirlora.vit import ConfigError

CFG = """\
model.backbone = tiny
model.patch_size = 4
model.image_size = 32
head.width = 8
data.dir = {data}
data.bands = 3,4,5
train.epochs = {epochs}
train.lr = 3e-3
lora.r = {rank}
seed = 5
out = {out}
"""


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert main(["gen-synth", "--n", "8", "--seed", "1", "--size", "64", "--out", str(d)]) == 0
    return d


def _write_cfg(tmp_path, data, epochs=3, rank=4, name="run.cfg"):
    path = tmp_path / name
    path.write_text(CFG.format(data=data, epochs=epochs, rank=rank, out=tmp_path / "runs"))
    return path


def _train(cfg, capsys, *extra):
    code = main(["train", "--config", str(cfg), *extra])
    out = capsys.readouterr().out
    assert code == 0, out
    run_dir = Path(re.search(r"run directory: (.+)", out).group(1))
    return run_dir, out


def test_gen_synth_writes_pairs(synth_dir):
    files = sorted(p.name for p in synth_dir.iterdir())
    assert len(files) == 16
    assert files[:2] == ["0000.image.lvim", "0000.mask.lvim"]


def test_train_writes_run_directory(tmp_path, synth_dir, capsys):
    run_dir, out = _train(_write_cfg(tmp_path, synth_dir, epochs=4), capsys)
    names = {p.name for p in run_dir.iterdir()}
    assert {"config.cfg", "resolved.cfg", "log.tsv", "metrics.txt", "adapter.lvwt", "base.lvwt"} <= names
    log = (run_dir / "log.tsv").read_text().splitlines()
    assert len(log) == 4 and all(len(line.split("\t")) == 5 for line in log)
    report = [line for line in out.splitlines() if line.startswith(("IoU", "F1"))]
    assert len(report) == 2 and all(re.match(REPORT_PATTERN, line) for line in report)
    resolved = parse_config((run_dir / "resolved.cfg").read_text())
    assert resolved["train.epochs"] == 4 and resolved["model.patch_size"] == 4


def test_train_flag_overrides(tmp_path, synth_dir, capsys):
    run_dir, _ = _train(_write_cfg(tmp_path, synth_dir, epochs=1), capsys, "--seed", "9", "--bands", "4,4,4")
    resolved = parse_config((run_dir / "resolved.cfg").read_text())
    assert resolved.seed == 9 and resolved["data.bands"] == (4, 4, 4)


def test_train_is_deterministic(tmp_path, synth_dir, capsys):
    cfg = _write_cfg(tmp_path, synth_dir, epochs=3)
    a, out_a = _train(cfg, capsys)
    b, out_b = _train(cfg, capsys)
    assert a != b
    for name in ("adapter.lvwt", "base.lvwt", "log.tsv", "metrics.txt"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    strip = lambda s: [line for line in s.splitlines() if not line.startswith(("run directory", "checkpoint"))]  # noqa: E731
    assert strip(out_a) == strip(out_b)


def test_missing_dataset_names_path(tmp_path, capsys):
    missing = tmp_path / "no_such_data"
    assert main(["train", "--config", str(_write_cfg(tmp_path, missing))]) == 2
    assert str(missing) in capsys.readouterr().err


def test_usage_and_config_errors_exit_1(tmp_path, capsys):
    assert main(["frobnicate"]) == 1
    assert main(["train"]) == 1
    assert main(["train", "--config", str(tmp_path / "absent.cfg")]) == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("lora.rank = 4\n")
    assert main(["count-params", "--config", str(bad)]) == 1
    assert "unknown key" in capsys.readouterr().err
    bad.write_text("model.backbone = B_16\nlora.r = 5000\n")
    assert main(["count-params", "--config", str(bad)]) == 1


def test_config_parser_rules():
    cfg = parse_config("# comment\nlora.r = 8  # inline\n\ntrain.freeze_encoder = yes\n")
    assert cfg["lora.r"] == 8 and cfg["train.freeze_encoder"] is True
    assert cfg["train.epochs"] == SCHEMA["train.epochs"][1]
    for text in ("lora.r = 4\nlora.r = 5\n", "no equals sign\n", "train.epochs = many\n", "train.decay_unit = hour\n"):
        with pytest.raises(ConfigError):
            parse_config(text)


def test_resolved_config_round_trips():
    cfg = parse_config("model.backbone = tiny\nhead.atrous_rates = 2,4\nmodel.pretrained = none\n")
    again = parse_config(cfg.resolved_text())
    assert again.values == cfg.values


def test_count_params_rows(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("model.backbone = B_16\nhead.width = 256\n")
    assert main(["count-params", "--config", str(cfg)]) == 0
    rows = [line.split() for line in capsys.readouterr().out.splitlines()[2:]]
    assert len(rows) == 2
    for row in rows:
        total, trainable, frozen = (int(v) for v in row[-6:-3])
        assert trainable + frozen == total
    full_trainable_m = float(rows[0][-2])
    assert abs(full_trainable_m / 91.49 - 1) <= 0.05
    cfg.write_text("model.backbone = L_16\n")
    assert main(["count-params", "--config", str(cfg)]) == 0
    lora_row = capsys.readouterr().out.splitlines()[-1]
    assert float(lora_row.split()[-1].rstrip("%")) >= 97.0


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory, synth_dir):
    tmp = tmp_path_factory.mktemp("trained")
    cfg = _write_cfg(tmp, synth_dir, epochs=8)
    assert main(["train", "--config", str(cfg)]) == 0
    (run_dir,) = (tmp / "runs").iterdir()
    return cfg, run_dir


def test_eval_merged_matches_adapter(trained_run, tmp_path, capsys):
    cfg, run_dir = trained_run
    merged = tmp_path / "merged.lvwt"
    assert main(["merge", str(run_dir / "base.lvwt"), str(run_dir / "adapter.lvwt"), str(merged)]) == 0
    capsys.readouterr()
    assert main(["eval", "--config", str(cfg), "--checkpoint", str(run_dir / "adapter.lvwt"), "--split", "train"]) == 0
    adapter_out = capsys.readouterr().out
    assert main(["eval", "--config", str(cfg), "--checkpoint", str(merged), "--split", "train"]) == 0
    assert capsys.readouterr().out == adapter_out
    assert all(re.match(REPORT_PATTERN, line) for line in adapter_out.splitlines())


def test_eval_rejects_mismatched_config(trained_run, tmp_path, synth_dir, capsys):
    _, run_dir = trained_run
    other = _write_cfg(tmp_path, synth_dir, rank=2, name="r2.cfg")
    assert main(["eval", "--config", str(other), "--checkpoint", str(run_dir / "adapter.lvwt")]) == 1
    assert "digest" in capsys.readouterr().err


def test_predict_writes_binary_mask(trained_run, tmp_path, capsys):
    _, run_dir = trained_run
    img, _ = gen_synthetic(1, 99, 224, 224)[0]
    write_raster(tmp_path / "scene.lvim", img)
    out = tmp_path / "mask.lvim"
    assert main(["predict", "--checkpoint", str(run_dir / "adapter.lvwt"), str(tmp_path / "scene.lvim"), str(out)]) == 0
    mask = load_raster(out)
    assert mask.data.shape == (224, 224, 1) and mask.data.dtype == np.uint8
    assert set(np.unique(mask.data)) <= {0, 1}


def test_merged_predict_matches_adapter_outside_band(trained_run, tmp_path):
    _, run_dir = trained_run
    merged = tmp_path / "merged.lvwt"
    assert main(["merge", str(run_dir / "base.lvwt"), str(run_dir / "adapter.lvwt"), str(merged)]) == 0
    img, _ = gen_synthetic(1, 7, 64, 64)[0]
    write_raster(tmp_path / "scene.lvim", img)
    masks = {}
    for name, ckpt in (("adapter", run_dir / "adapter.lvwt"), ("merged", merged)):
        out = tmp_path / f"{name}.lvim"
        assert main(["predict", "--checkpoint", str(ckpt), str(tmp_path / "scene.lvim"), str(out)]) == 0
        masks[name] = load_raster(out).data[:, :, 0]
    # probabilities from the adapter model decide which pixels are safely away from 0.5
    model, meta = load_checkpoint(run_dir / "adapter.lvwt")
    from nirlora.data import NormStats

    stats = NormStats.from_dict(meta["norm"])
    data = select_bands(img, meta["bands"]).data
    tiles = np.stack([data[y : y + 32, x : x + 32].transpose(2, 0, 1) for y in (0, 32) for x in (0, 32)])
    tiles = ((tiles - stats.mean[None, :, None, None]) / stats.std[None, :, None, None]).astype(np.float32)
    prob = sigmoid(predict_logits(model, tiles)[:, 0])
    full = np.zeros((64, 64))
    for k, (y, x) in enumerate((y, x) for y in (0, 32) for x in (0, 32)):
        full[y : y + 32, x : x + 32] = prob[k]
    safe = np.abs(full - 0.5) > 1e-4
    assert safe.mean() > 0.9
    np.testing.assert_array_equal(masks["adapter"][safe], masks["merged"][safe])


def test_predict_on_bad_inputs_exits_2(trained_run, tmp_path, capsys):
    _, run_dir = trained_run
    write_raster(tmp_path / "small.lvim", Raster(np.zeros((8, 8, 6), np.float32)))
    code = main(["predict", "--checkpoint", str(run_dir / "adapter.lvwt"), str(tmp_path / "small.lvim"), str(tmp_path / "o")])
    assert code == 2
    code = main(["predict", "--checkpoint", str(tmp_path / "nope.lvwt"), str(tmp_path / "small.lvim"), str(tmp_path / "o")])
    assert code == 2
