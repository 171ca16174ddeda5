import numpy as np
import pytest
import torch

from conftest import tiny_run_config
from foggyscene.data import Domain, Split, load_manifest, load_sample
from foggyscene.errors import ConfigurationError, FormatError, PipelineError
from foggyscene.train import (
    DEPTH_MAX,
    DEPTH_MIN,
    InferenceEngine,
    PipelineState,
    Stage,
    TrainConfig,
    finetune,
    infer,
    train_depth,
    train_domain_adaptation,
    train_segmentation,
    unit_to_meters,
)


def make_cfg(stage, tiny_root, out, iterations, **overrides):
    run_cfg = tiny_run_config(**overrides.pop("train", {}))
    return run_cfg.train_config(stage, out, data_root=tiny_root, iterations=iterations, **overrides)


# -- config validation ------------------------------------------------------------

def test_train_config_validation(tmp_path):
    with pytest.raises(ConfigurationError):
        TrainConfig(stage=Stage.DA, data_root=tmp_path, out_dir=tmp_path, lr=0.0)
    with pytest.raises(ConfigurationError):
        TrainConfig(stage=Stage.DA, data_root=tmp_path, out_dir=tmp_path, batch_size=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(stage=Stage.DA, data_root=tmp_path, out_dir=tmp_path, iterations=-1)


# -- optimizer correctness -----------------------------------------------------------

def test_adam_step_matches_hand_computation():
    # one step on f(t) = t^2 / 2 from t = 1: grad = t
    theta = torch.nn.Parameter(torch.tensor(1.0, dtype=torch.float64))
    lr, b1, b2, eps = 1e-3, 0.5, 0.999, 1e-8
    opt = torch.optim.Adam([theta], lr=lr, betas=(b1, b2), eps=eps)
    loss = 0.5 * theta**2
    loss.backward()
    opt.step()
    g = 1.0
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    m_hat = m / (1 - b1)
    v_hat = v / (1 - b2)
    expected = 1.0 - lr * m_hat / (v_hat**0.5 + eps)
    assert float(theta) == pytest.approx(expected, abs=1e-12)


# -- alternation and logging ------------------------------------------------------------

def test_depth_trainer_alternates_domains(tiny_root, tmp_path):
    cfg = make_cfg(Stage.DEPTH, tiny_root, tmp_path / "alt", iterations=6)
    log = train_depth(cfg)
    domains = [r["domain"] for r in log.history]
    assert domains == ["normal", "foggy"] * 3
    assert len(log.history) == 6
    assert (tmp_path / "alt" / "depth_log.jsonl").exists()


def test_identity_generators_give_zero_cycle_loss(tiny_root, tmp_path):
    from foggyscene.blocks import PatchDiscriminator
    from foggyscene.train import SceneStore, _run_da_loop

    class ToyIdentityGenerator(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.scale = torch.nn.Parameter(torch.ones(()))

        def forward(self, x):
            return x * self.scale

    cfg = make_cfg(Stage.DA, tiny_root, tmp_path / "toy", iterations=1)
    manifest = load_manifest(tiny_root)
    store = SceneStore(manifest, Split.TRAIN, cfg.model.input_resolution)
    state = PipelineState(cfg.model, cfg.translation)
    state.modules["gen_xy"] = ToyIdentityGenerator()
    state.modules["gen_yx"] = ToyIdentityGenerator()
    state.modules["disc_x"] = PatchDiscriminator(3, 4, 2)
    state.modules["disc_y"] = PatchDiscriminator(3, 4, 2)
    state.ensure_optimizer("da_gen", cfg.lr, cfg.betas)
    state.ensure_optimizer("da_disc", cfg.lr, cfg.betas)
    history = _run_da_loop(
        state, cfg, store.samples(Domain.FOGGY), store.samples(Domain.NORMAL), 1, cfg.lr
    )
    assert history[0]["cyc"] == 0.0


def test_da_training_deterministic(tiny_root, tmp_path):
    logs = []
    for run in ("r1", "r2"):
        cfg = make_cfg(Stage.DA, tiny_root, tmp_path / run, iterations=3, train={"threads": 1})
        logs.append(train_domain_adaptation(cfg))
    a = [(r["adv_xy"], r["cyc"], r["combined"]) for r in logs[0].history]
    b = [(r["adv_xy"], r["cyc"], r["combined"]) for r in logs[1].history]
    assert a == b


def test_normal_update_changes_foggy_branch(tiny_root, tmp_path):
    # shared weights: a single NORMAL-domain step must move FOGGY predictions
    cfg = make_cfg(Stage.DEPTH, tiny_root, tmp_path / "share", iterations=1)
    manifest = load_manifest(tiny_root)
    foggy_entry = manifest.select(split=Split.TRAIN, domain=Domain.FOGGY)[0]
    sample = load_sample(manifest, foggy_entry.id)
    from foggyscene.train import _rgb_tensor, rgb_to_luminance_t

    x = _rgb_tensor(sample).unsqueeze(0)

    torch.manual_seed(0)
    state_before = PipelineState(cfg.model, cfg.translation)
    state_before.ensure_module("depth_model", cfg.seed)
    model = state_before.modules["depth_model"].eval()
    with torch.no_grad():
        before = model(x, rgb_to_luminance_t(x)).depth_full.clone()
    log = train_depth(cfg)  # iteration 0 consumes a NORMAL batch
    assert log.history[0]["domain"] == "normal"
    after_state = PipelineState.load(log.final_checkpoint)
    model_after = after_state.modules["depth_model"].eval()
    with torch.no_grad():
        after = model_after(x, rgb_to_luminance_t(x)).depth_full
    assert not torch.equal(before, after)


# -- stage prerequisites and isolation ------------------------------------------------------

def test_segmentation_requires_depth_checkpoint(tiny_root, tmp_path):
    cfg = make_cfg(Stage.SEG, tiny_root, tmp_path / "noprereq", iterations=1)
    with pytest.raises(PipelineError, match="depth checkpoint"):
        train_segmentation(cfg)


def test_segmentation_requires_translation_when_da_enabled(tiny_root, tmp_path):
    depth_cfg = make_cfg(Stage.DEPTH, tiny_root, tmp_path / "d", iterations=1)
    depth_log = train_depth(depth_cfg)
    seg_cfg = make_cfg(Stage.SEG, tiny_root, tmp_path / "s", iterations=1)
    with pytest.raises(PipelineError, match="domain-adaptation"):
        train_segmentation(seg_cfg, depth_checkpoint=depth_log.final_checkpoint)


def test_stage_three_freezes_earlier_components(tiny_root, tmp_path):
    da_cfg = make_cfg(Stage.DA, tiny_root, tmp_path / "da", iterations=2)
    da_log = train_domain_adaptation(da_cfg)
    depth_cfg = make_cfg(
        Stage.DEPTH, tiny_root, tmp_path / "depth", iterations=2, checkpoint_in=da_log.final_checkpoint
    )
    depth_log = train_depth(depth_cfg)
    before = PipelineState.load(depth_log.final_checkpoint).parameter_hashes()
    seg_cfg = make_cfg(Stage.SEG, tiny_root, tmp_path / "seg", iterations=2)
    seg_log = train_segmentation(seg_cfg, depth_checkpoint=depth_log.final_checkpoint)
    after = PipelineState.load(seg_log.final_checkpoint).parameter_hashes()
    for frozen in ("gen_xy", "gen_yx", "disc_x", "disc_y", "depth_model"):
        assert after[frozen] == before[frozen], f"stage III mutated {frozen}"
    assert "seg_model" in after


# -- checkpoint behaviour ----------------------------------------------------------------------

def test_resume_reproduces_unbroken_history(tiny_root, tmp_path):
    whole_cfg = make_cfg(Stage.DEPTH, tiny_root, tmp_path / "whole", iterations=12,
                         train={"threads": 1})
    whole = train_depth(whole_cfg)
    half1_cfg = make_cfg(Stage.DEPTH, tiny_root, tmp_path / "h1", iterations=6,
                         train={"threads": 1})
    half1 = train_depth(half1_cfg)
    half2_cfg = make_cfg(Stage.DEPTH, tiny_root, tmp_path / "h2", iterations=6,
                         checkpoint_in=half1.final_checkpoint, train={"threads": 1})
    half2 = train_depth(half2_cfg)
    key = lambda r: (r["iteration"], r["depth_l1"], r["depth_adv"], r["combined"])
    assert [key(r) for r in whole.history[6:]] == [key(r) for r in half2.history]


def test_checkpoint_save_load_save_byte_identical(tiny_root, tmp_path):
    cfg = make_cfg(Stage.DEPTH, tiny_root, tmp_path / "ck", iterations=2)
    log = train_depth(cfg)
    state = PipelineState.load(log.final_checkpoint)
    resaved = state.save(tmp_path / "resaved.ckpt")
    assert log.final_checkpoint.read_bytes() == resaved.read_bytes()


def test_truncated_checkpoint_raises_format_error(tiny_root, tmp_path):
    cfg = make_cfg(Stage.DEPTH, tiny_root, tmp_path / "tr", iterations=1)
    log = train_depth(cfg)
    data = log.final_checkpoint.read_bytes()
    broken = tmp_path / "broken.ckpt"
    broken.write_bytes(data[: len(data) // 3])
    with pytest.raises(FormatError):
        PipelineState.load(broken)


def test_zero_iteration_stage_writes_checkpoint_with_empty_history(tiny_root, tmp_path):
    cfg = make_cfg(Stage.DA, tiny_root, tmp_path / "zero", iterations=0)
    log = train_domain_adaptation(cfg)
    assert log.history == []
    assert log.final_checkpoint.is_file()


# -- finetune -------------------------------------------------------------------------------------

def test_finetune_zero_iterations_is_identity(tiny_bundle, tiny_root, tmp_path):
    seg_ckpt = tiny_bundle.checkpoints["seg"]
    cfg = make_cfg(Stage.FINETUNE, tiny_root, tmp_path / "ft0", iterations=0)
    log = finetune(cfg, checkpoint=seg_ckpt)
    assert log.history == []
    assert seg_ckpt.read_bytes() == log.final_checkpoint.read_bytes()


def test_finetune_uses_scaled_learning_rate(tiny_bundle, tiny_root, tmp_path):
    cfg = make_cfg(
        Stage.FINETUNE, tiny_root, tmp_path / "ft", iterations=1,
        train={"refined_train": 4, "refined_test": 2},
    )
    log = finetune(cfg, checkpoint=tiny_bundle.checkpoints["seg"])
    assert len(log.history) == 3  # one iteration for each of the three trainers
    assert all(r["lr"] == pytest.approx(1e-4) for r in log.history)


def test_finetune_requires_full_bundle(tiny_root, tmp_path):
    cfg_d = make_cfg(Stage.DEPTH, tiny_root, tmp_path / "only_depth", iterations=1)
    log = train_depth(cfg_d)
    cfg = make_cfg(Stage.FINETUNE, tiny_root, tmp_path / "ftbad", iterations=1)
    with pytest.raises(PipelineError):
        finetune(cfg, checkpoint=log.final_checkpoint)


# -- inference ---------------------------------------------------------------------------------------

def test_infer_outputs_are_calibrated(tiny_bundle, tiny_manifest):
    entry = tiny_manifest.select(split=Split.TEST, domain=Domain.FOGGY)[0]
    sample = load_sample(tiny_manifest, entry.id)
    result = infer(tiny_bundle.checkpoints["finetune"], sample.rgb, apply_da=True)
    assert result.labels.shape == sample.labels.shape
    assert result.labels.min() >= 0 and result.labels.max() < 5
    assert result.depth_m.min() >= DEPTH_MIN
    assert result.depth_m.max() <= DEPTH_MAX
    assert result.translated is not None
    assert 0.0 <= result.translated.min() and result.translated.max() <= 1.0


def test_infer_without_da_skips_translation(tiny_bundle, tiny_manifest):
    entry = tiny_manifest.select(split=Split.TEST, domain=Domain.NORMAL)[0]
    sample = load_sample(tiny_manifest, entry.id)
    result = infer(tiny_bundle.checkpoints["finetune"], sample.rgb, apply_da=False)
    assert result.translated is None


def test_infer_writes_png_artifacts(tiny_bundle, tiny_manifest, tmp_path):
    entry = tiny_manifest.select(split=Split.TEST, domain=Domain.FOGGY)[0]
    sample = load_sample(tiny_manifest, entry.id)
    out = tmp_path / "artifacts"
    infer(tiny_bundle.checkpoints["finetune"], sample.rgb, apply_da=True, out_dir=out)
    for name in ("translated.png", "labels.png", "labels_color.png", "depth.png"):
        assert (out / name).is_file()
    from foggyscene.data import load_depth_png, load_label_png

    labels = load_label_png(out / "labels.png")
    assert labels.max() < 5
    depth_raw = load_depth_png(out / "depth.png") * 256.0
    assert depth_raw.min() >= 256
    assert depth_raw.max() <= 20480


def test_inference_requires_trained_components(tiny_root, tmp_path):
    cfg = make_cfg(Stage.DEPTH, tiny_root, tmp_path / "inc", iterations=1)
    log = train_depth(cfg)
    with pytest.raises(PipelineError):
        InferenceEngine.from_checkpoint(log.final_checkpoint)


def test_unit_depth_calibration_bounds():
    assert unit_to_meters(0.0) == DEPTH_MIN
    assert unit_to_meters(1.0) == DEPTH_MAX


# -- evaluation over a manifest ------------------------------------------------------------------------

def test_evaluate_produces_reports(tiny_bundle, tiny_manifest, tmp_path):
    from foggyscene.metrics import METRIC_KEYS, evaluate

    report = evaluate(
        tiny_bundle.checkpoints["finetune"], tiny_manifest, apply_da=False, out_dir=tmp_path / "ev"
    )
    assert set(report.metric_map()) == set(METRIC_KEYS)
    assert report.num_samples == 2
    assert (tmp_path / "ev" / "report.json").is_file()
    assert (tmp_path / "ev" / "report.txt").is_file()
    assert report.delta1 <= report.delta2 <= report.delta3


def test_evaluate_empty_selection_raises(tiny_bundle, tiny_manifest):
    from foggyscene.data import DatasetManifest
    from foggyscene.errors import DatasetError
    from foggyscene.metrics import evaluate

    empty = DatasetManifest(root=tiny_manifest.root, resolution=tiny_manifest.resolution, entries=[])
    with pytest.raises(DatasetError):
        evaluate(tiny_bundle.checkpoints["finetune"], empty, apply_da=False)
