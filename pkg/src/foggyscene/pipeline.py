"""End-to-end run: generate (or reuse) a dataset, train stages I-IV, then
evaluate the final checkpoint on the held-out foggy test split with and
without translation, mirroring the five-step protocol behind one call.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from . import metrics as metrics_mod
from . import train as train_mod
from .config import RunConfig
from .data import DatasetManifest, build_synthetic_dataset, load_manifest
from .train import Stage


@dataclass
class PipelineResult:
    out_dir: Path
    data_root: Path
    checkpoints: dict[str, Path]
    report_with_da: metrics_mod.EvalReport
    report_no_da: metrics_mod.EvalReport
    translation: dict


def ensure_dataset(cfg: RunConfig, out_dir: Path) -> DatasetManifest:
    """Reuse the configured dataset root when it already holds a manifest,
    otherwise generate the synthetic corpus inside the run directory."""
    root = Path(cfg.data.root)
    if not root.is_absolute():
        root = Path(out_dir) / root
    if (root / "manifest.json").is_file():
        return load_manifest(root)
    return build_synthetic_dataset(
        root,
        train_pairs=cfg.data.train_pairs,
        test_pairs=cfg.data.test_pairs,
        resolution=cfg.model.resolution,
        num_classes=cfg.model.num_classes,
        seed=cfg.train.seed,
        train_beta=cfg.data.train_beta,
        test_beta=cfg.data.test_beta,
        atmosphere=cfg.data.atmosphere,
    )


def run_pipeline(cfg: RunConfig, out_dir: Path, seed: int | None = None) -> PipelineResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_mod.set_threads(cfg.train.threads)
    cfg.write_resolved(out_dir / "config.resolved.toml")
    manifest = ensure_dataset(cfg, out_dir)
    data_root = manifest.root

    def stage_cfg(stage: Stage, checkpoint_in=None):
        return cfg.train_config(
            stage, out_dir, data_root=data_root, checkpoint_in=checkpoint_in, seed=seed
        )

    checkpoints: dict[str, Path] = {}
    if cfg.train.use_domain_adaptation:
        log = train_mod.train_domain_adaptation(stage_cfg(Stage.DA))
        checkpoints["da"] = log.final_checkpoint
        depth_in = checkpoints["da"]
    else:
        depth_in = None
    log = train_mod.train_depth(stage_cfg(Stage.DEPTH, checkpoint_in=depth_in))
    checkpoints["depth"] = log.final_checkpoint
    log = train_mod.train_segmentation(
        stage_cfg(Stage.SEG), depth_checkpoint=checkpoints["depth"]
    )
    checkpoints["seg"] = log.final_checkpoint
    log = train_mod.finetune(stage_cfg(Stage.FINETUNE), checkpoint=checkpoints["seg"])
    checkpoints["finetune"] = log.final_checkpoint
    final = checkpoints["finetune"]

    report_with_da = None
    if cfg.train.use_domain_adaptation:
        report_with_da = metrics_mod.evaluate(
            final, manifest, apply_da=True, out_dir=out_dir / "eval_with_da"
        )
    report_no_da = metrics_mod.evaluate(
        final, manifest, apply_da=False, out_dir=out_dir / "eval_no_da"
    )
    if report_with_da is None:
        report_with_da = report_no_da

    if cfg.train.use_domain_adaptation:
        translation = train_mod.translation_mae(final, manifest)
    else:
        translation = {}
    (out_dir / "translation_stats.json").write_text(json.dumps(translation, sort_keys=True))

    return PipelineResult(
        out_dir=out_dir,
        data_root=data_root,
        checkpoints=checkpoints,
        report_with_da=report_with_da,
        report_no_da=report_no_da,
        translation=translation,
    )
