"""Command-line entry point: one command, five subcommands.

    foggyscene generate --config cfg.toml --out data/
    foggyscene train    --config cfg.toml --stage da --out runs/da
    foggyscene eval     --config cfg.toml --checkpoint runs/final.ckpt --with-da --out runs/eval
    foggyscene infer    --checkpoint runs/final.ckpt --image foggy.png --out runs/infer
    foggyscene pipeline --config cfg.toml --out runs/full

Exit codes: 0 success, 2 configuration error, 3 data error, 4 pipeline error
(missing stage prerequisite), 5 checkpoint format error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import metrics as metrics_mod
from . import train as train_mod
from .config import RunConfig
from .data import build_synthetic_dataset, load_manifest, load_rgb_png
from .errors import (
    ConfigurationError,
    ContractError,
    DatasetError,
    FormatError,
    MetricsError,
    PipelineError,
)
from .pipeline import run_pipeline
from .train import Stage

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_PIPELINE = 4
EXIT_FORMAT = 5


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig.from_dict({})
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    return cfg


def _echo_config(cfg: RunConfig, out_dir: Path) -> None:
    cfg.write_resolved(Path(out_dir) / "config.resolved.toml")


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    root = Path(args.out) if args.out else Path(cfg.data.root)
    _echo_config(cfg, root)
    manifest = build_synthetic_dataset(
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
    print(f"wrote {len(manifest.entries)} samples under {root}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    stage = Stage(args.stage)
    out_dir = Path(args.out) if args.out else Path("runs") / stage.value
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, out_dir)

    def opt_path(value) -> Path | None:
        return Path(value) if value else None

    da_ckpt = opt_path(cfg.train.da_checkpoint)
    depth_ckpt = opt_path(cfg.train.depth_checkpoint)
    seg_ckpt = opt_path(cfg.train.seg_checkpoint)
    tc = cfg.train_config(stage, out_dir, iterations=args.iterations)
    if stage is Stage.DA:
        log = train_mod.train_domain_adaptation(tc)
    elif stage is Stage.DEPTH:
        tc.checkpoint_in = da_ckpt
        log = train_mod.train_depth(tc)
    elif stage is Stage.SEG:
        log = train_mod.train_segmentation(tc, da_checkpoint=da_ckpt, depth_checkpoint=depth_ckpt)
    else:
        if seg_ckpt is None:
            raise PipelineError(
                "fine-tuning requires [train].seg_checkpoint pointing at the stage-III checkpoint"
            )
        log = train_mod.finetune(tc, checkpoint=seg_ckpt)
    print(
        f"stage {stage.value}: {len(log.history)} iterations in {log.wall_clock_s:.1f}s, "
        f"checkpoint {log.final_checkpoint}"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    checkpoint = args.checkpoint or (cfg.eval.checkpoint or None)
    if checkpoint is None:
        raise ConfigurationError("eval needs --checkpoint or [eval].checkpoint")
    apply_da = cfg.eval.apply_da if args.with_da is None else args.with_da
    out_dir = Path(args.out) if args.out else Path("runs") / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, out_dir)
    manifest = load_manifest(Path(cfg.data.root))
    report = metrics_mod.evaluate(Path(checkpoint), manifest, apply_da=apply_da, out_dir=out_dir)
    print(json.dumps(report.metric_map(), indent=1, sort_keys=True))
    return EXIT_OK


def cmd_infer(args) -> int:
    if args.with_da is None:
        apply_da = True
    else:
        apply_da = args.with_da
    out_dir = Path(args.out) if args.out else Path("runs") / "infer"
    rgb = load_rgb_png(Path(args.image))
    result = train_mod.infer(Path(args.checkpoint), rgb, apply_da=apply_da, out_dir=out_dir)
    written = ["labels.png", "labels_color.png", "depth.png"]
    if result.translated is not None:
        written.insert(0, "translated.png")
    print(f"wrote {', '.join(written)} under {out_dir}")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = _load_config(args)
    out_dir = Path(args.out) if args.out else Path("runs") / "pipeline"
    result = run_pipeline(cfg, out_dir)
    print(f"pipeline finished under {result.out_dir}")
    print(f"  mIoU with DA:    {result.report_with_da.miou:.4f}")
    print(f"  mIoU without DA: {result.report_no_da.miou:.4f}")
    if result.translation:
        print(
            f"  translation MAE: foggy {result.translation['mae_foggy']:.4f} -> "
            f"translated {result.translation['mae_translated']:.4f}"
        )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="foggyscene", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", type=Path, default=None, help="TOML run configuration")
            p.add_argument("--seed", type=int, default=None, help="override [train].seed")
        p.add_argument("--out", type=Path, default=None, help="output directory")

    p = sub.add_parser("generate", help="write the synthetic paired dataset")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="run one training stage")
    common(p)
    p.add_argument("--stage", required=True, choices=[s.value for s in Stage])
    p.add_argument("--iterations", type=int, default=None, help="override the stage's iteration count")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(p)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--with-da", dest="with_da", action="store_true", default=None)
    p.add_argument("--no-da", dest="with_da", action="store_false")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="run the frozen pipeline on one image")
    common(p, config=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--with-da", dest="with_da", action="store_true", default=None)
    p.add_argument("--no-da", dest="with_da", action="store_false")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("pipeline", help="generate + train all stages + evaluate")
    common(p)
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, ContractError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, MetricsError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except PipelineError as exc:
        print(f"pipeline error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
