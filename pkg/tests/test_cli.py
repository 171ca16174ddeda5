import json
from pathlib import Path

import numpy as np
import pytest

from foggyscene.cli import main
from foggyscene.config import RunConfig
from foggyscene.data import Domain, Split, load_manifest, load_sample
from foggyscene.errors import ConfigurationError
from foggyscene.metrics import METRIC_KEYS


def write_config(path: Path, text: str) -> Path:
    path.write_text(text)
    return path


TINY_MODEL = """
[model]
num_classes = 5
resolution = [32, 64]

[data]
train_pairs = 2
test_pairs = 1
"""


def test_generate_writes_dataset(tmp_path):
    cfg = write_config(tmp_path / "cfg.toml", TINY_MODEL)
    out = tmp_path / "data"
    assert main(["generate", "--config", str(cfg), "--out", str(out)]) == 0
    manifest = load_manifest(out)
    assert len(manifest.entries) == 6
    for entry in manifest.entries:
        for kind in ("rgb", "depth", "labels"):
            assert manifest.path_for(entry, kind).is_file()
    assert (out / "config.resolved.toml").is_file()


def test_generate_rerun_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path / "cfg.toml", TINY_MODEL)
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["generate", "--config", str(cfg), "--out", str(out), "--seed", "5"]) == 0
        outs.append(out)
    rel = "train/rgb/0001_foggy.png"
    assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes()


def test_generate_zero_count_fails_before_writing(tmp_path):
    cfg = write_config(tmp_path / "cfg.toml", TINY_MODEL + "\n[data.extra]\n")
    # malformed section: rejected with exit code 2
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "d1")]) == 2
    cfg2 = write_config(
        tmp_path / "cfg2.toml",
        "[model]\nnum_classes = 5\nresolution = [32, 64]\n[data]\ntrain_pairs = 0\n",
    )
    out = tmp_path / "d2"
    assert main(["generate", "--config", str(cfg2), "--out", str(out)]) == 2
    assert not out.exists()


def test_unknown_config_key_rejected(tmp_path):
    cfg = write_config(tmp_path / "cfg.toml", "[train]\nlearning_rate_typo = 1.0\n")
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 2


def test_resolved_config_roundtrip(tmp_path):
    cfg_path = write_config(tmp_path / "cfg.toml", TINY_MODEL + "\n[train]\nseed = 9\nlr = 0.002\n")
    original = RunConfig.from_file(cfg_path)
    echoed = RunConfig.from_file(original.write_resolved(tmp_path / "resolved.toml"))
    assert echoed == original


def _train_config_text(tiny_root, **extra):
    lines = [
        "[model]",
        "num_classes = 5",
        "resolution = [32, 64]",
        "[data]",
        f'root = "{tiny_root}"',
        "[train]",
        "batch_size = 1",
        "threads = 2",
        "sample_every = 0",
    ]
    lines += [f"{k} = {v}" for k, v in extra.items()]
    return "\n".join(lines) + "\n"


def test_train_da_stage_writes_checkpoint(tiny_root, tmp_path):
    cfg = write_config(tmp_path / "cfg.toml", _train_config_text(tiny_root))
    out = tmp_path / "da"
    code = main(
        ["train", "--config", str(cfg), "--stage", "da", "--out", str(out), "--iterations", "2"]
    )
    assert code == 0
    assert (out / "da.ckpt").is_file()
    assert (out / "da_log.jsonl").is_file()


def test_train_zero_iterations_writes_checkpoint_and_empty_log(tiny_root, tmp_path):
    cfg = write_config(tmp_path / "cfg.toml", _train_config_text(tiny_root))
    out = tmp_path / "da0"
    code = main(
        ["train", "--config", str(cfg), "--stage", "da", "--out", str(out), "--iterations", "0"]
    )
    assert code == 0
    assert (out / "da.ckpt").is_file()
    assert (out / "da_log.jsonl").read_text() == ""


def test_train_seg_without_prerequisite_exits_4(tiny_root, tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.toml", _train_config_text(tiny_root))
    code = main(
        ["train", "--config", str(cfg), "--stage", "seg", "--out", str(tmp_path / "seg"),
         "--iterations", "1"]
    )
    assert code == 4
    err = capsys.readouterr().err
    assert "depth checkpoint" in err


def test_eval_reports_exact_metric_keys(tiny_bundle, tiny_root, tmp_path):
    ckpt = tiny_bundle.checkpoints["finetune"]
    cfg = write_config(tmp_path / "cfg.toml", _train_config_text(tiny_root))
    reports = {}
    for flag, name in (("--with-da", "with"), ("--no-da", "no")):
        out = tmp_path / f"eval_{name}"
        code = main(
            ["eval", "--config", str(cfg), "--checkpoint", str(ckpt), flag, "--out", str(out)]
        )
        assert code == 0
        doc = json.loads((out / "report.json").read_text())
        assert set(doc["metrics"]) == set(METRIC_KEYS)
        assert (out / "report.txt").is_file()
        reports[name] = doc
    # both toggles produce comparable mIoU entries
    assert isinstance(reports["with"]["metrics"]["miou"], float)
    assert isinstance(reports["no"]["metrics"]["miou"], float)


def test_eval_without_checkpoint_is_config_error(tiny_root, tmp_path):
    cfg = write_config(tmp_path / "cfg.toml", _train_config_text(tiny_root))
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path / "e")]) == 2


def test_eval_oracle_ground_truth_scores_perfectly(tiny_bundle, tiny_manifest, tmp_path, monkeypatch):
    # test hook: replace inference with a ground-truth oracle
    from foggyscene import train as train_mod
    from foggyscene.metrics import evaluate

    entries = tiny_manifest.select(split=Split.TEST, domain=Domain.FOGGY)
    queue = [load_sample(tiny_manifest, e.id) for e in entries]

    def oracle_run(self, rgb, apply_da):
        sample = queue.pop(0)
        return train_mod.InferenceResult(
            translated=None, labels=sample.labels.copy(), depth_m=sample.depth.copy()
        )

    monkeypatch.setattr(train_mod.InferenceEngine, "run", oracle_run)
    report = evaluate(tiny_bundle.checkpoints["finetune"], tiny_manifest, apply_da=False)
    assert report.miou == 1.0
    assert report.abs_rel == 0.0
    assert report.delta1 == 1.0


def test_infer_writes_artifacts(tiny_bundle, tiny_manifest, tmp_path):
    entry = tiny_manifest.select(split=Split.TEST, domain=Domain.FOGGY)[0]
    image = tiny_manifest.path_for(entry, "rgb")
    out = tmp_path / "infer"
    code = main(
        ["infer", "--checkpoint", str(tiny_bundle.checkpoints["finetune"]),
         "--image", str(image), "--with-da", "--out", str(out)]
    )
    assert code == 0
    from foggyscene.data import load_depth_png, load_label_png, load_rgb_png

    labels = load_label_png(out / "labels.png")
    assert labels.shape == (32, 64)
    assert labels.max() < 5
    raw_depth = load_depth_png(out / "depth.png") * 256.0
    assert raw_depth.min() >= 256 and raw_depth.max() <= 20480
    assert load_rgb_png(out / "translated.png").shape == (32, 64, 3)


def test_infer_missing_checkpoint_exits_5(tiny_manifest, tmp_path):
    entry = tiny_manifest.entries[0]
    image = tiny_manifest.path_for(entry, "rgb")
    code = main(
        ["infer", "--checkpoint", str(tmp_path / "nope.ckpt"), "--image", str(image),
         "--out", str(tmp_path / "o")]
    )
    assert code == 5


def test_config_defaults_match_protocol():
    cfg = RunConfig.from_dict({})
    assert cfg.train.lr == pytest.approx(1e-3)
    assert cfg.train.betas == (0.5, 0.999)
    assert cfg.train.iterations_da == 2000
    assert cfg.train.iterations_depth == 1500
    assert cfg.train.iterations_seg == 1500
    assert cfg.train.iterations_finetune == 300
    assert cfg.data.train_pairs == 32
    assert cfg.data.test_pairs == 8
    assert cfg.model.resolution == (128, 256)
    assert cfg.model.stage_widths == (16, 64, 128)


def test_config_type_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict({"train": {"lr": "fast"}})
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict({"model": {"resolution": [32]}})
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict({"nonsense": {}})
