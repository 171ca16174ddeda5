"""Run configuration: a sectioned TOML document ([data], [model], [train],
[eval]) validated up front, with a resolved copy (defaults filled in) written
next to every run's outputs so any run can be reproduced from its echo.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigurationError
from .models import LdMode, SegDepthConfig, TranslationConfig
from .train import Stage, TrainConfig


@dataclass
class DataSection:
    root: str = "data"
    train_pairs: int = 32
    test_pairs: int = 8
    train_beta: tuple[float, float] = (0.05, 0.3)
    test_beta: tuple[float, float] = (0.15, 0.3)
    atmosphere: tuple[float, float, float] = (0.9, 0.9, 0.92)

    def __post_init__(self):
        if self.train_pairs < 1 or self.test_pairs < 1:
            raise ConfigurationError(
                f"pair counts must be >= 1, got train={self.train_pairs} test={self.test_pairs}"
            )


@dataclass
class ModelSection:
    num_classes: int = 5
    resolution: tuple[int, int] = (128, 256)
    stage_widths: tuple[int, int, int] = (16, 64, 128)
    rgb_stage2_modules: int = 5
    rgb_stage3_modules: int = 8
    stage3_dilations: tuple[int, ...] = (2, 4, 8, 16)
    ld_dense_modules: tuple[int, int, int] = (4, 3, 4)
    ld_growth: tuple[int, int, int] = (12, 22, 32)
    dropout: float = 0.1
    gen_width: int = 32
    gen_residual: int = 6
    disc_base_width: int = 16
    disc_scales: int = 3


@dataclass
class TrainSection:
    seed: int = 0
    batch_size: int = 2
    lr: float = 1e-3
    betas: tuple[float, float] = (0.5, 0.999)
    lambda_cyc: float = 10.0
    iterations_da: int = 2000
    iterations_depth: int = 1500
    iterations_seg: int = 1500
    iterations_finetune: int = 300
    augment: bool = True
    adversarial: bool = True
    use_domain_adaptation: bool = True
    saturating_gan: bool = False
    threads: int = 1
    sample_every: int = 500
    refined_train: int = 24
    refined_test: int = 8
    da_checkpoint: str = ""
    depth_checkpoint: str = ""
    seg_checkpoint: str = ""


@dataclass
class EvalSection:
    apply_da: bool = True
    checkpoint: str = ""


_SECTIONS = {
    "data": DataSection,
    "model": ModelSection,
    "train": TrainSection,
    "eval": EvalSection,
}


def _coerce(value, target_type, key):
    origin = getattr(target_type, "__origin__", None)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{key} must be an array, got {value!r}")
        args = target_type.__args__
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], key) for v in value)
        if len(value) != len(args):
            raise ConfigurationError(f"{key} must have {len(args)} entries, got {len(value)}")
        return tuple(_coerce(v, t, key) for v, t in zip(value, args))
    if target_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{key} must be a number, got {value!r}")
        return float(value)
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{key} must be an integer, got {value!r}")
        return int(value)
    if target_type is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{key} must be a boolean, got {value!r}")
        return value
    if target_type is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{key} must be a string, got {value!r}")
        return value
    raise ConfigurationError(f"unsupported config field type for {key}")


def _fill_section(cls, doc: dict, section: str):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigurationError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    kwargs = {}
    for name, f in known.items():
        if name in doc:
            target = f.type if not isinstance(f.type, str) else _annotation_type(cls, name)
            kwargs[name] = _coerce(doc[name], target, f"{section}.{name}")
    return cls(**kwargs)


def _annotation_type(cls, name):
    import typing

    hints = typing.get_type_hints(cls)
    return hints[name]


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        unknown = sorted(set(doc) - set(_SECTIONS))
        if unknown:
            raise ConfigurationError(f"unknown config section(s): {', '.join(unknown)}")
        kwargs = {}
        for name, section_cls in _SECTIONS.items():
            section_doc = doc.get(name, {})
            if not isinstance(section_doc, dict):
                raise ConfigurationError(f"[{name}] must be a table")
            kwargs[name] = _fill_section(section_cls, section_doc, name)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: Path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            doc = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(f"invalid TOML in {path}: {exc}") from exc
        return cls.from_dict(doc)

    # -- derived typed configs -------------------------------------------

    def seg_depth_config(self) -> SegDepthConfig:
        m = self.model
        return SegDepthConfig(
            num_classes=m.num_classes,
            stage_widths=m.stage_widths,
            rgb_stage2_modules=m.rgb_stage2_modules,
            rgb_stage3_modules=m.rgb_stage3_modules,
            stage3_dilations=m.stage3_dilations,
            ld_dense_modules=m.ld_dense_modules,
            ld_growth=m.ld_growth,
            input_resolution=m.resolution,
            ld_mode=LdMode.LUM_AND_DEPTH,
            dropout=m.dropout,
        )

    def translation_config(self) -> TranslationConfig:
        m = self.model
        return TranslationConfig(
            width=m.gen_width,
            num_residual=m.gen_residual,
            disc_base_width=m.disc_base_width,
            disc_scales=m.disc_scales,
        )

    def iterations_for(self, stage: Stage) -> int:
        return {
            Stage.DA: self.train.iterations_da,
            Stage.DEPTH: self.train.iterations_depth,
            Stage.SEG: self.train.iterations_seg,
            Stage.FINETUNE: self.train.iterations_finetune,
        }[stage]

    def train_config(
        self,
        stage: Stage,
        out_dir: Path,
        data_root: Path | None = None,
        iterations: int | None = None,
        checkpoint_in: Path | None = None,
        seed: int | None = None,
    ) -> TrainConfig:
        t = self.train
        return TrainConfig(
            stage=stage,
            data_root=Path(data_root) if data_root is not None else Path(self.data.root),
            out_dir=Path(out_dir),
            model=self.seg_depth_config(),
            translation=self.translation_config(),
            iterations=self.iterations_for(stage) if iterations is None else iterations,
            batch_size=t.batch_size,
            lr=t.lr,
            betas=t.betas,
            seed=t.seed if seed is None else seed,
            checkpoint_in=checkpoint_in,
            adversarial=t.adversarial,
            use_domain_adaptation=t.use_domain_adaptation,
            lambda_cyc=t.lambda_cyc,
            augment=t.augment,
            threads=t.threads,
            sample_every=t.sample_every,
            saturating_gan=t.saturating_gan,
            refined_train=t.refined_train,
            refined_test=t.refined_test,
        )

    # -- echo --------------------------------------------------------------

    def to_toml(self) -> str:
        lines = []
        for section_name in _SECTIONS:
            section = getattr(self, section_name)
            lines.append(f"[{section_name}]")
            for f in dataclasses.fields(section):
                lines.append(f"{f.name} = {_toml_value(getattr(section, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def write_resolved(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_toml())
        return path


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (tuple, list)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigurationError(f"cannot serialize config value {value!r}")
