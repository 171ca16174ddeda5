"""Staged training: (I) fog<->clear translation, (II) depth, (III)
segmentation on translated inputs, (IV) fine-tuning on a refined subset, plus
checkpointing, resumable deterministic trainers, and single-image inference.

Determinism contract: with a fixed seed and ``threads=1`` every run is
bit-reproducible, and a run split by a checkpoint resume produces the same
loss history as the unbroken run. All randomness flows through one numpy
generator per stage plus the torch RNG, both captured in checkpoints.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    DEPTH_MAX,
    DEPTH_MIN,
    LUMA_COEFFS,
    DatasetManifest,
    Domain,
    SceneSample,
    Split,
    load_manifest,
    load_sample,
    resize_bilinear,
    resize_nearest,
    save_depth_png,
    save_label_png,
    save_rgb_png,
    split_refined,
    stable_seed,
    to_luminance,
    CLASS_PALETTE,
)
from .errors import ConfigurationError, ContractError, DatasetError, PipelineError
from .losses import (
    AdvRole,
    LossBreakdown,
    UncertaintyWeights,
    adversarial_loss,
    cycle_consistency_loss,
    depth_loss,
    domain_adaptation_loss,
    joint_depth_loss,
    joint_seg_loss,
    segmentation_loss,
)
from .models import (
    PatchDiscriminator,
    SegDepthConfig,
    SegDepthNet,
    TranslationConfig,
    TranslationGenerator,
    depth_model_config,
)


class Stage(str, Enum):
    DA = "da"
    DEPTH = "depth"
    SEG = "seg"
    FINETUNE = "finetune"


@dataclass
class TrainConfig:
    stage: Stage
    data_root: Path
    out_dir: Path
    model: SegDepthConfig = field(default_factory=SegDepthConfig)
    translation: TranslationConfig = field(default_factory=TranslationConfig)
    iterations: int = 0
    batch_size: int = 2
    lr: float = 1e-3
    betas: tuple[float, float] = (0.5, 0.999)
    seed: int = 0
    checkpoint_in: Path | None = None
    checkpoint_out: Path | None = None
    adversarial: bool = True
    use_domain_adaptation: bool = True
    lambda_cyc: float = 10.0
    augment: bool = True
    threads: int | None = 1
    sample_every: int = 500
    saturating_gan: bool = False
    refined_train: int = 24
    refined_test: int = 8
    finetune_lr_scale: float = 0.1

    def __post_init__(self):
        self.stage = Stage(self.stage)
        self.data_root = Path(self.data_root)
        self.out_dir = Path(self.out_dir)
        if self.lr <= 0:
            raise ConfigurationError(f"learning rate must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch size must be >= 1, got {self.batch_size}")
        if self.iterations < 0:
            raise ConfigurationError(f"iteration count must be >= 0, got {self.iterations}")
        if self.checkpoint_out is None:
            self.checkpoint_out = self.out_dir / f"{self.stage.value}.ckpt"
        self.checkpoint_out = Path(self.checkpoint_out)
        if self.checkpoint_in is not None:
            self.checkpoint_in = Path(self.checkpoint_in)


@dataclass
class TrainLog:
    stage: Stage
    history: list[dict]
    wall_clock_s: float
    final_checkpoint: Path

    def write_jsonl(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            for rec in self.history:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return path


def set_threads(threads: int | None) -> None:
    if threads is not None and threads >= 1:
        torch.set_num_threads(int(threads))


def rgb_to_luminance_t(rgb: torch.Tensor) -> torch.Tensor:
    """Torch twin of data.to_luminance: (B,3,H,W) -> (B,1,H,W)."""
    coeffs = torch.as_tensor(LUMA_COEFFS, dtype=rgb.dtype, device=rgb.device)
    return (rgb * coeffs.view(1, 3, 1, 1)).sum(dim=1, keepdim=True)


def meters_to_unit(depth_m: np.ndarray) -> np.ndarray:
    return np.clip((depth_m - DEPTH_MIN) / (DEPTH_MAX - DEPTH_MIN), 0.0, 1.0)


def unit_to_meters(unit) -> np.ndarray:
    return DEPTH_MIN + np.asarray(unit, dtype=np.float64) * (DEPTH_MAX - DEPTH_MIN)


def _rgb_tensor(sample: SceneSample) -> torch.Tensor:
    return torch.from_numpy(sample.rgb.transpose(2, 0, 1).astype(np.float32))


def _depth_unit_tensor(sample: SceneSample) -> torch.Tensor:
    return torch.from_numpy(meters_to_unit(sample.depth).astype(np.float32)).unsqueeze(0)


def _labels_tensor(sample: SceneSample) -> torch.Tensor:
    return torch.from_numpy(sample.labels.astype(np.int64))


def _resize_sample(sample: SceneSample, resolution: tuple[int, int]) -> SceneSample:
    if sample.resolution == tuple(resolution):
        return sample
    rgb = np.clip(resize_bilinear(sample.rgb, resolution), 0.0, 1.0)
    return SceneSample(
        rgb=rgb,
        depth=resize_bilinear(sample.depth, resolution),
        labels=resize_nearest(sample.labels, resolution),
        luminance=to_luminance(rgb),
        domain=sample.domain,
        id=sample.id,
    )


class SceneStore:
    """Loads one split of a dataset into memory at the training resolution."""

    def __init__(self, manifest: DatasetManifest, split: Split, resolution: tuple[int, int]):
        self.manifest = manifest
        self.split = split
        self.resolution = tuple(resolution)
        self._cache: dict[str, SceneSample] = {}
        self._by_domain = {
            d: [e.id for e in manifest.select(split=split, domain=d)] for d in Domain
        }

    def sample(self, sample_id: str) -> SceneSample:
        if sample_id not in self._cache:
            self._cache[sample_id] = _resize_sample(
                load_sample(self.manifest, sample_id), self.resolution
            )
        return self._cache[sample_id]

    def samples(self, domain: Domain) -> list[SceneSample]:
        return [self.sample(sid) for sid in self._by_domain[domain]]


# --------------------------------------------------------------------------
# Pipeline state (all components + optimizers + RNG), checkpoint-serializable

_TRANSLATION_MODULES = ("gen_xy", "gen_yx", "disc_x", "disc_y")


class PipelineState:
    """Every trainable component of the pipeline plus optimizer and RNG state.

    Components appear as stages create them; a checkpoint written after stage
    k therefore bundles everything stages 1..k trained, and later stages (or
    resumed runs) reconstruct modules from the stored configs before loading
    parameters.
    """

    def __init__(self, model_cfg: SegDepthConfig, translation_cfg: TranslationConfig):
        self.model_cfg = model_cfg
        self.translation_cfg = translation_cfg
        self.modules: dict[str, torch.nn.Module] = {}
        self.optimizers: dict[str, torch.optim.Adam] = {}
        self.counters: dict[str, int] = {}
        self.stages_done: list[str] = []
        self.np_rng_state: dict[str, dict] = {}
        self.torch_rng_state: np.ndarray | None = None
        self.uncertainty = UncertaintyWeights()

    # -- module registry ----------------------------------------------------

    def _build_module(self, name: str) -> torch.nn.Module:
        t = self.translation_cfg
        if name in ("gen_xy", "gen_yx"):
            return TranslationGenerator(t.width, t.num_residual)
        if name in ("disc_x", "disc_y"):
            return PatchDiscriminator(3, t.disc_base_width, t.disc_scales)
        if name == "depth_model":
            return SegDepthNet(depth_model_config(self.model_cfg))
        if name == "depth_disc":
            return PatchDiscriminator(1, t.disc_base_width, t.disc_scales)
        if name == "seg_model":
            return SegDepthNet(self.model_cfg)
        if name == "seg_disc":
            return PatchDiscriminator(self.model_cfg.num_classes, t.disc_base_width, t.disc_scales)
        raise ContractError(f"unknown pipeline module {name!r}")

    def ensure_module(self, name: str, seed: int) -> torch.nn.Module:
        if name not in self.modules:
            torch.manual_seed(stable_seed(seed, "init", name))
            self.modules[name] = self._build_module(name)
        return self.modules[name]

    def _optimizer_params(self, name: str) -> list[torch.nn.Parameter]:
        m = self.modules
        if name == "da_gen":
            return list(m["gen_xy"].parameters()) + list(m["gen_yx"].parameters()) + [
                self.uncertainty.s_da
            ]
        if name == "da_disc":
            return list(m["disc_x"].parameters()) + list(m["disc_y"].parameters())
        if name == "depth":
            return list(m["depth_model"].parameters()) + [self.uncertainty.s_depth]
        if name == "depth_disc":
            return list(m["depth_disc"].parameters())
        if name == "seg":
            return list(m["seg_model"].parameters()) + [
                self.uncertainty.s_seg,
                self.uncertainty.s_depth,
            ]
        if name == "seg_disc":
            return list(m["seg_disc"].parameters())
        raise ContractError(f"unknown optimizer {name!r}")

    def ensure_optimizer(self, name: str, lr: float, betas) -> torch.optim.Adam:
        if name not in self.optimizers:
            self.optimizers[name] = torch.optim.Adam(
                self._optimizer_params(name), lr=lr, betas=tuple(betas)
            )
        return self.optimizers[name]

    # -- stage RNG ------------------------------------------------------------

    def stage_rng(self, stage_key: str, seed: int) -> np.random.Generator:
        """Resume the stage's generator when it already ran, else seed fresh."""
        resuming = self.counters.get(stage_key, 0) > 0 and stage_key in self.np_rng_state
        if resuming:
            rng = np.random.default_rng(0)
            rng.bit_generator.state = self.np_rng_state[stage_key]
            if self.torch_rng_state is not None:
                torch.set_rng_state(torch.from_numpy(self.torch_rng_state.copy()))
        else:
            rng = np.random.default_rng(stable_seed(seed, "data", stage_key))
            torch.manual_seed(stable_seed(seed, "torch", stage_key))
        return rng

    def capture_rng(self, stage_key: str, rng: np.random.Generator) -> None:
        self.np_rng_state[stage_key] = rng.bit_generator.state
        self.torch_rng_state = torch.get_rng_state().numpy().copy()

    # -- (de)serialization ----------------------------------------------------

    def save(self, path: Path) -> Path:
        meta = {
            "model_cfg": _cfg_dict(self.model_cfg),
            "translation_cfg": asdict(self.translation_cfg),
            "counters": self.counters,
            "stages_done": self.stages_done,
            "np_rng": self.np_rng_state,
            "modules": sorted(self.modules),
            "optimizers": {
                name: opt.state_dict()["param_groups"] for name, opt in self.optimizers.items()
            },
        }
        arrays: dict[str, np.ndarray] = {}
        for name in sorted(self.modules):
            for key, value in self.modules[name].state_dict().items():
                arrays[f"module/{name}/{key}"] = value.detach().cpu().numpy()
        for key, value in self.uncertainty.state_dict().items():
            arrays[f"uncertainty/{key}"] = value.detach().cpu().numpy()
        for name, opt in self.optimizers.items():
            for pid, pstate in opt.state_dict()["state"].items():
                for key, value in pstate.items():
                    arrays[f"optim/{name}/{pid}/{key}"] = (
                        value.detach().cpu().numpy() if torch.is_tensor(value) else np.asarray(value)
                    )
        if self.torch_rng_state is not None:
            arrays["rng/torch"] = self.torch_rng_state
        return save_checkpoint(path, meta, arrays)

    @classmethod
    def load(cls, path: Path) -> "PipelineState":
        meta, arrays = load_checkpoint(path)
        state = cls(
            SegDepthConfig(**meta["model_cfg"]),
            TranslationConfig(**meta["translation_cfg"]),
        )
        state.counters = {k: int(v) for k, v in meta["counters"].items()}
        state.stages_done = list(meta["stages_done"])
        state.np_rng_state = meta["np_rng"]
        for name in meta["modules"]:
            module = state._build_module(name)
            prefix = f"module/{name}/"
            sd = {
                key[len(prefix):]: torch.from_numpy(arr.copy())
                for key, arr in arrays.items()
                if key.startswith(prefix)
            }
            module.load_state_dict(sd)
            state.modules[name] = module
        state.uncertainty.load_state_dict(
            {
                key[len("uncertainty/"):]: torch.from_numpy(arr.copy())
                for key, arr in arrays.items()
                if key.startswith("uncertainty/")
            }
        )
        for name, groups in meta["optimizers"].items():
            opt = torch.optim.Adam(state._optimizer_params(name), lr=groups[0]["lr"])
            opt_state: dict[int, dict] = {}
            prefix = f"optim/{name}/"
            for key, arr in arrays.items():
                if not key.startswith(prefix):
                    continue
                pid_str, field_name = key[len(prefix):].split("/", 1)
                opt_state.setdefault(int(pid_str), {})[field_name] = torch.from_numpy(arr.copy())
            opt.load_state_dict({"state": opt_state, "param_groups": groups})
            state.optimizers[name] = opt
        if "rng/torch" in arrays:
            state.torch_rng_state = arrays["rng/torch"].copy()
        return state

    def merge_translation_from(self, other: "PipelineState") -> None:
        """Adopt another bundle's translation components (stage-I artifacts)."""
        for name in _TRANSLATION_MODULES:
            if name in other.modules:
                self.modules[name] = other.modules[name]
        for name in ("da_gen", "da_disc"):
            if name in other.optimizers:
                self.optimizers[name] = other.optimizers[name]
        with torch.no_grad():
            self.uncertainty.s_da.copy_(other.uncertainty.s_da)
        if "da" in other.counters:
            self.counters["da"] = other.counters["da"]
        if "da" in other.np_rng_state:
            self.np_rng_state["da"] = other.np_rng_state["da"]
        if "da" in other.stages_done and "da" not in self.stages_done:
            self.stages_done.insert(0, "da")

    def has_translation(self) -> bool:
        return all(name in self.modules for name in _TRANSLATION_MODULES)

    def parameter_hashes(self) -> dict[str, str]:
        import hashlib

        out = {}
        for name in sorted(self.modules):
            h = hashlib.sha256()
            for key, value in self.modules[name].state_dict().items():
                h.update(key.encode())
                h.update(value.detach().cpu().numpy().tobytes())
            out[name] = h.hexdigest()
        return out


def _cfg_dict(cfg: SegDepthConfig) -> dict:
    doc = asdict(cfg)
    doc["ld_mode"] = cfg.ld_mode.value
    return doc


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


# --------------------------------------------------------------------------
# Shared loop bodies

def _batch(
    samples: list[SceneSample],
    rng: np.random.Generator,
    batch_size: int,
    augment_flag: bool,
):
    idx = rng.integers(0, len(samples), size=batch_size)
    if augment_flag:
        flips = rng.random(batch_size) < 0.5
    else:
        flips = np.zeros(batch_size, dtype=bool)
    chosen = [samples[int(i)].hflip() if f else samples[int(i)] for i, f in zip(idx, flips)]
    return chosen, [bool(f) for f in flips]


def _f(value) -> float:
    return float(value.detach()) if torch.is_tensor(value) else float(value)


def _one_hot_labels(labels: torch.Tensor, num_classes: int, ignore_index: int = 255) -> torch.Tensor:
    valid = labels != ignore_index
    clamped = labels.clamp(0, num_classes - 1)
    oh = F.one_hot(clamped, num_classes).permute(0, 3, 1, 2).float()
    return oh * valid.unsqueeze(1).float()


def use_batch_stats(model: torch.nn.Module) -> None:
    """Serve the model normalizing by the statistics of the input itself.

    Training alternates single-domain batches, so no single set of stored
    running statistics matches both weather domains; normalizing each input
    by its own batch statistics reproduces the computation the weights were
    trained under. Dropout stays off; running-stat buffers are not updated
    (train-mode BatchNorm with tracking disabled skips the buffer update).
    """
    model.eval()
    for m in model.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            m.train()
            m.track_running_stats = False


def training_mode(model: torch.nn.Module) -> None:
    """Full training mode, re-enabling running-stat tracking if it was off."""
    model.train()
    for m in model.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            m.track_running_stats = True


def recalibrate_batchnorm(model: torch.nn.Module, forwards) -> None:
    """Re-estimate BatchNorm running statistics under the final weights.

    Batch statistics drift over a training run, so running averages mix stale
    feature scales (and, with per-batch domain alternation, whichever domain
    came last). Resetting the buffers and streaming the training samples once
    in stats-only mode leaves the served model with exact population
    statistics. Deterministic: no dropout, fixed sample order.
    """
    bns = [m for m in model.modules() if isinstance(m, torch.nn.BatchNorm2d)]
    if not bns:
        return
    for bn in bns:
        bn.track_running_stats = True
        bn.reset_running_stats()
    model.eval()
    for bn in bns:
        bn.train()
    with torch.no_grad():
        for forward in forwards:
            forward()
    model.eval()


def _run_da_loop(state, cfg: TrainConfig, foggy, normal, iterations, lr) -> list[dict]:
    gen_xy = state.modules["gen_xy"]
    gen_yx = state.modules["gen_yx"]
    disc_x = state.modules["disc_x"]
    disc_y = state.modules["disc_y"]
    for mod in (gen_xy, gen_yx, disc_x, disc_y):
        mod.train()
    opt_g = state.optimizers["da_gen"]
    opt_d = state.optimizers["da_disc"]
    _set_lr(opt_g, lr)
    _set_lr(opt_d, lr)
    rng = state.stage_rng("da", cfg.seed)
    sample_dir = cfg.out_dir / "samples"
    history = []
    start_time = time.perf_counter()
    start = state.counters.get("da", 0)
    for it in range(start, start + iterations):
        xs, _ = _batch(foggy, rng, cfg.batch_size, cfg.augment)
        ys, _ = _batch(normal, rng, cfg.batch_size, cfg.augment)
        x = torch.stack([_rgb_tensor(s) for s in xs])
        y = torch.stack([_rgb_tensor(s) for s in ys])

        y_fake = gen_xy(x)
        x_fake = gen_yx(y)
        x_cycled = gen_yx(y_fake)
        y_cycled = gen_xy(x_fake)
        adv_xy = adversarial_loss(None, disc_y(y_fake), AdvRole.GENERATOR, cfg.saturating_gan)
        adv_yx = adversarial_loss(None, disc_x(x_fake), AdvRole.GENERATOR, cfg.saturating_gan)
        cyc = cycle_consistency_loss(x, x_cycled, y, y_cycled)
        da = domain_adaptation_loss(adv_xy, adv_yx, cyc, cfg.lambda_cyc)
        total = state.uncertainty.weighted("s_da", da)
        opt_g.zero_grad(set_to_none=True)
        total.backward()
        opt_g.step()

        d_loss = adversarial_loss(
            disc_y(y), disc_y(y_fake.detach()), AdvRole.DISCRIMINATOR
        ) + adversarial_loss(disc_x(x), disc_x(x_fake.detach()), AdvRole.DISCRIMINATOR)
        opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        opt_d.step()

        breakdown = LossBreakdown(
            adv_xy=_f(adv_xy), adv_yx=_f(adv_yx), cyc=_f(cyc), combined=_f(total)
        )
        history.append(
            {
                "iteration": it,
                "stage": "da",
                "lr": lr,
                **breakdown.as_dict(),
                "disc": _f(d_loss),
                "s_da": state.uncertainty.values()["s_da"],
                "wall_clock_s": time.perf_counter() - start_time,
            }
        )
        if cfg.sample_every > 0 and (it % cfg.sample_every == 0 or it == start + iterations - 1):
            sample_dir.mkdir(parents=True, exist_ok=True)
            with torch.no_grad():
                probe = _rgb_tensor(foggy[0]).unsqueeze(0)
                out = gen_xy(probe)[0].numpy().transpose(1, 2, 0)
            save_rgb_png(sample_dir / f"iter{it:06d}_foggy.png", foggy[0].rgb)
            save_rgb_png(sample_dir / f"iter{it:06d}_translated.png", np.clip(out, 0.0, 1.0))
    state.counters["da"] = start + iterations
    state.capture_rng("da", rng)
    return history


def _run_depth_loop(state, cfg: TrainConfig, normal, foggy, iterations, lr) -> list[dict]:
    model = state.modules["depth_model"]
    disc = state.modules["depth_disc"]
    training_mode(model)
    disc.train()
    opt = state.optimizers["depth"]
    opt_disc = state.optimizers["depth_disc"]
    _set_lr(opt, lr)
    _set_lr(opt_disc, lr)
    rng = state.stage_rng("depth", cfg.seed)
    history = []
    start_time = time.perf_counter()
    start = state.counters.get("depth", 0)
    for it in range(start, start + iterations):
        domain = Domain.NORMAL if it % 2 == 0 else Domain.FOGGY
        pool = normal if domain is Domain.NORMAL else foggy
        batch, _ = _batch(pool, rng, cfg.batch_size, cfg.augment)
        rgb = torch.stack([_rgb_tensor(s) for s in batch])
        gt_unit = torch.stack([_depth_unit_tensor(s) for s in batch])
        lum = rgb_to_luminance_t(rgb)

        out = model(rgb, lum)
        l1 = depth_loss(out.depth_full, out.depth_half, gt_unit)
        if domain is Domain.FOGGY and cfg.adversarial:
            adv = adversarial_loss(
                None, disc(out.depth_full), AdvRole.GENERATOR, cfg.saturating_gan
            )
        else:
            adv = torch.zeros(())
        joint = joint_depth_loss(l1, adv)
        total = state.uncertainty.weighted("s_depth", joint)
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()

        disc_val = 0.0
        if domain is Domain.FOGGY and cfg.adversarial:
            d_loss = adversarial_loss(
                disc(gt_unit), disc(out.depth_full.detach()), AdvRole.DISCRIMINATOR
            )
            opt_disc.zero_grad(set_to_none=True)
            d_loss.backward()
            opt_disc.step()
            disc_val = _f(d_loss)

        breakdown = LossBreakdown(depth_l1=_f(l1), depth_adv=_f(adv), combined=_f(total))
        history.append(
            {
                "iteration": it,
                "stage": "depth",
                "domain": domain.value,
                "lr": lr,
                **breakdown.as_dict(),
                "disc": disc_val,
                "s_depth": state.uncertainty.values()["s_depth"],
                "wall_clock_s": time.perf_counter() - start_time,
            }
        )
    if iterations > 0:
        def depth_forward(s):
            x = _rgb_tensor(s).unsqueeze(0)
            return lambda: model(x, rgb_to_luminance_t(x))

        recalibrate_batchnorm(model, [depth_forward(s) for s in normal + foggy])
    state.counters["depth"] = start + iterations
    state.capture_rng("depth", rng)
    return history


def _run_seg_loop(state, cfg: TrainConfig, normal, foggy, iterations, lr) -> list[dict]:
    model = state.modules["seg_model"]
    disc = state.modules["seg_disc"]
    training_mode(model)
    disc.train()
    opt = state.optimizers["seg"]
    opt_disc = state.optimizers["seg_disc"]
    _set_lr(opt, lr)
    _set_lr(opt_disc, lr)
    depth_model = state.modules["depth_model"]
    use_batch_stats(depth_model)
    gen = state.modules.get("gen_xy") if cfg.use_domain_adaptation else None
    if gen is not None:
        gen.eval()

    num_classes = cfg.model.num_classes
    cache: dict[tuple[str, bool], tuple[torch.Tensor, torch.Tensor, torch.Tensor]] = {}

    def prepared_inputs(sample: SceneSample, flipped: bool):
        # network inputs are fully determined by (sample, flip): translation and
        # depth prediction run under frozen weights, so they are cached
        key = (sample.id, sample.domain.value, flipped)
        if key not in cache:
            x = _rgb_tensor(sample).unsqueeze(0)
            with torch.no_grad():
                if sample.domain is Domain.FOGGY and gen is not None:
                    x = gen(x)
                lum = rgb_to_luminance_t(x)
                d_in = depth_model(x, lum).depth_full
            cache[key] = (x[0], lum[0], d_in[0])
        return cache[key]

    rng = state.stage_rng("seg", cfg.seed)
    history = []
    start_time = time.perf_counter()
    start = state.counters.get("seg", 0)
    for it in range(start, start + iterations):
        domain = Domain.NORMAL if it % 2 == 0 else Domain.FOGGY
        pool = normal if domain is Domain.NORMAL else foggy
        idx = rng.integers(0, len(pool), size=cfg.batch_size)
        if cfg.augment:
            flips = rng.random(cfg.batch_size) < 0.5
        else:
            flips = np.zeros(cfg.batch_size, dtype=bool)
        raw = [pool[int(i)] for i in idx]
        flipped_samples = [s.hflip() if f else s for s, f in zip(raw, flips)]
        prep = [prepared_inputs(s, bool(f)) for s, f in zip(raw, flips)]
        x = torch.stack([p[0] for p in prep])
        lum = torch.stack([p[1] for p in prep])
        d_in = torch.stack([p[2] for p in prep])
        labels = torch.stack([_labels_tensor(s) for s in flipped_samples])
        gt_unit = torch.stack([_depth_unit_tensor(s) for s in flipped_samples])

        out = model(x, lum, d_in)
        seg_ce = segmentation_loss(out.seg_logits, labels)
        if domain is Domain.FOGGY and cfg.adversarial:
            probs = torch.softmax(out.seg_logits, dim=1)
            seg_adv = adversarial_loss(None, disc(probs), AdvRole.GENERATOR, cfg.saturating_gan)
        else:
            seg_adv = torch.zeros(())
        joint_s = joint_seg_loss(seg_ce, seg_adv)
        l1 = depth_loss(out.depth_full, out.depth_half, gt_unit)
        total = state.uncertainty.weighted("s_seg", joint_s) + state.uncertainty.weighted(
            "s_depth", l1
        )
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()

        disc_val = 0.0
        if domain is Domain.FOGGY and cfg.adversarial:
            real = _one_hot_labels(labels, num_classes)
            d_loss = adversarial_loss(
                disc(real), disc(torch.softmax(out.seg_logits, dim=1).detach()), AdvRole.DISCRIMINATOR
            )
            opt_disc.zero_grad(set_to_none=True)
            d_loss.backward()
            opt_disc.step()
            disc_val = _f(d_loss)

        breakdown = LossBreakdown(
            seg_ce=_f(seg_ce), seg_adv=_f(seg_adv), depth_l1=_f(l1), combined=_f(total)
        )
        history.append(
            {
                "iteration": it,
                "stage": "seg",
                "domain": domain.value,
                "lr": lr,
                **breakdown.as_dict(),
                "disc": disc_val,
                "s_seg": state.uncertainty.values()["s_seg"],
                "wall_clock_s": time.perf_counter() - start_time,
            }
        )
    if iterations > 0:
        def seg_forward(s):
            x, lum, d_in = prepared_inputs(s, False)
            return lambda: model(x.unsqueeze(0), lum.unsqueeze(0), d_in.unsqueeze(0))

        recalibrate_batchnorm(model, [seg_forward(s) for s in normal + foggy])
    state.counters["seg"] = start + iterations
    state.capture_rng("seg", rng)
    return history


# --------------------------------------------------------------------------
# Stage entry points

def _prepare(cfg: TrainConfig) -> DatasetManifest:
    set_threads(cfg.threads)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    if not (cfg.data_root / "manifest.json").is_file():
        raise DatasetError(f"no dataset manifest under {cfg.data_root}")
    return load_manifest(cfg.data_root)


def _initial_state(cfg: TrainConfig) -> PipelineState:
    if cfg.checkpoint_in is not None:
        return PipelineState.load(cfg.checkpoint_in)
    return PipelineState(cfg.model, cfg.translation)


def _finish(cfg: TrainConfig, state: PipelineState, stage: Stage, history, t0) -> TrainLog:
    if stage.value not in state.stages_done:
        state.stages_done.append(stage.value)
    path = state.save(cfg.checkpoint_out)
    log = TrainLog(
        stage=stage,
        history=history,
        wall_clock_s=time.perf_counter() - t0,
        final_checkpoint=path,
    )
    log.write_jsonl(cfg.out_dir / f"{stage.value}_log.jsonl")
    return log


def train_domain_adaptation(cfg: TrainConfig) -> TrainLog:
    """Stage I: fit the unpaired fog<->clear translation pair."""
    t0 = time.perf_counter()
    manifest = _prepare(cfg)
    store = SceneStore(manifest, Split.TRAIN, cfg.model.input_resolution)
    foggy = store.samples(Domain.FOGGY)
    normal = store.samples(Domain.NORMAL)
    if not foggy or not normal:
        raise DatasetError("translation training needs samples in both weather domains")
    state = _initial_state(cfg)
    for name in _TRANSLATION_MODULES:
        state.ensure_module(name, cfg.seed)
    state.ensure_optimizer("da_gen", cfg.lr, cfg.betas)
    state.ensure_optimizer("da_disc", cfg.lr, cfg.betas)
    history = _run_da_loop(state, cfg, foggy, normal, cfg.iterations, cfg.lr)
    return _finish(cfg, state, Stage.DA, history, t0)


def train_depth(cfg: TrainConfig) -> TrainLog:
    """Stage II: fit the depth model on both domains with shared weights."""
    t0 = time.perf_counter()
    manifest = _prepare(cfg)
    store = SceneStore(manifest, Split.TRAIN, cfg.model.input_resolution)
    foggy = store.samples(Domain.FOGGY)
    normal = store.samples(Domain.NORMAL)
    if not foggy or not normal:
        raise DatasetError("depth training needs samples in both weather domains")
    if not any(s.valid_depth_mask().any() for s in normal + foggy):
        raise DatasetError("depth training needs depth ground truth (all depths invalid)")
    state = _initial_state(cfg)
    state.ensure_module("depth_model", cfg.seed)
    state.ensure_module("depth_disc", cfg.seed)
    state.ensure_optimizer("depth", cfg.lr, cfg.betas)
    state.ensure_optimizer("depth_disc", cfg.lr, cfg.betas)
    history = _run_depth_loop(state, cfg, normal, foggy, cfg.iterations, cfg.lr)
    return _finish(cfg, state, Stage.DEPTH, history, t0)


def train_segmentation(
    cfg: TrainConfig,
    da_checkpoint: Path | None = None,
    depth_checkpoint: Path | None = None,
) -> TrainLog:
    """Stage III: fit the segmentation model; foggy batches are first mapped
    through the frozen stage-I generator and consume frozen stage-II depth."""
    t0 = time.perf_counter()
    manifest = _prepare(cfg)
    depth_ckpt = Path(depth_checkpoint) if depth_checkpoint else cfg.checkpoint_in
    if depth_ckpt is None or not Path(depth_ckpt).is_file():
        raise PipelineError(
            f"segmentation stage requires the stage-II depth checkpoint (missing: {depth_ckpt})"
        )
    state = PipelineState.load(depth_ckpt)
    if "depth_model" not in state.modules:
        raise PipelineError(f"checkpoint {depth_ckpt} lacks the trained depth model")
    if cfg.use_domain_adaptation:
        if da_checkpoint is not None and Path(da_checkpoint) != Path(depth_ckpt):
            if not Path(da_checkpoint).is_file():
                raise PipelineError(
                    f"segmentation stage requires the stage-I domain-adaptation checkpoint "
                    f"(missing: {da_checkpoint})"
                )
            state.merge_translation_from(PipelineState.load(da_checkpoint))
        if not state.has_translation():
            raise PipelineError(
                "segmentation stage requires the stage-I domain-adaptation checkpoint "
                "(no translation components available)"
            )
        for name in _TRANSLATION_MODULES:
            state.modules[name].requires_grad_(False)
    state.modules["depth_model"].requires_grad_(False)

    store = SceneStore(manifest, Split.TRAIN, cfg.model.input_resolution)
    foggy = store.samples(Domain.FOGGY)
    normal = store.samples(Domain.NORMAL)
    if not foggy or not normal:
        raise DatasetError("segmentation training needs samples in both weather domains")
    state.ensure_module("seg_model", cfg.seed)
    state.ensure_module("seg_disc", cfg.seed)
    state.ensure_optimizer("seg", cfg.lr, cfg.betas)
    state.ensure_optimizer("seg_disc", cfg.lr, cfg.betas)
    history = _run_seg_loop(state, cfg, normal, foggy, cfg.iterations, cfg.lr)
    return _finish(cfg, state, Stage.SEG, history, t0)


def finetune(cfg: TrainConfig, checkpoint: Path) -> TrainLog:
    """Stage IV: continue all three trainers on a refined subset at lr x 0.1.

    With ``iterations == 0`` the output checkpoint is byte-identical to the
    input.
    """
    t0 = time.perf_counter()
    set_threads(cfg.threads)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint = Path(checkpoint)
    if not checkpoint.is_file():
        raise PipelineError(f"fine-tuning requires the stage-III checkpoint (missing: {checkpoint})")
    state = PipelineState.load(checkpoint)
    missing = [
        name
        for name in (*_TRANSLATION_MODULES, "depth_model", "seg_model")
        if name not in state.modules
    ]
    if missing:
        raise PipelineError(f"fine-tuning needs a full pipeline checkpoint; missing {missing}")

    if cfg.iterations == 0:
        # identity on checkpoints: re-serialize the loaded state untouched
        path = state.save(cfg.checkpoint_out)
        log = TrainLog(
            stage=Stage.FINETUNE,
            history=[],
            wall_clock_s=time.perf_counter() - t0,
            final_checkpoint=path,
        )
        log.write_jsonl(cfg.out_dir / "finetune_log.jsonl")
        return log

    history: list[dict] = []
    if cfg.iterations > 0:
        manifest = _prepare(cfg)
        train_entries = manifest.select(split=Split.TRAIN)
        pool = DatasetManifest(
            root=manifest.root, resolution=manifest.resolution, entries=train_entries
        )
        refined_train, _refined_test = split_refined(
            pool, cfg.refined_train, cfg.refined_test, cfg.seed
        )
        store = SceneStore(refined_train, Split.TRAIN, cfg.model.input_resolution)
        foggy = store.samples(Domain.FOGGY)
        normal = store.samples(Domain.NORMAL)
        if not foggy or not normal:
            raise DatasetError("refined subset must keep both weather domains")
        lr = cfg.lr * cfg.finetune_lr_scale
        state.modules["depth_model"].requires_grad_(True)
        history += _run_da_loop(state, cfg, foggy, normal, cfg.iterations, lr)
        history += _run_depth_loop(state, cfg, normal, foggy, cfg.iterations, lr)
        for name in _TRANSLATION_MODULES:
            state.modules[name].requires_grad_(False)
        state.modules["depth_model"].requires_grad_(False)
        history += _run_seg_loop(state, cfg, normal, foggy, cfg.iterations, lr)
    return _finish(cfg, state, Stage.FINETUNE, history, t0)


# --------------------------------------------------------------------------
# Inference

@dataclass
class InferenceResult:
    translated: np.ndarray | None  # (H, W, 3) in [0,1], present when DA applied
    labels: np.ndarray             # (H, W) int64 class indices
    depth_m: np.ndarray            # (H, W) float64 meters in [DEPTH_MIN, DEPTH_MAX]


class InferenceEngine:
    """Frozen end-to-end inference: optional translation, then depth, then
    segmentation consuming the predicted depth."""

    def __init__(self, state: PipelineState):
        if "seg_model" not in state.modules or "depth_model" not in state.modules:
            raise PipelineError(
                "inference needs a checkpoint holding both the depth and segmentation models"
            )
        self.state = state
        self.seg_model = state.modules["seg_model"]
        self.depth_model = state.modules["depth_model"]
        use_batch_stats(self.seg_model)
        use_batch_stats(self.depth_model)
        self.gen_xy = state.modules.get("gen_xy")
        if self.gen_xy is not None:
            self.gen_xy.eval()
        for mod in state.modules.values():
            mod.requires_grad_(False)

    @classmethod
    def from_checkpoint(cls, path: Path) -> "InferenceEngine":
        return cls(PipelineState.load(path))

    @property
    def num_classes(self) -> int:
        return self.state.model_cfg.num_classes

    @property
    def resolution(self) -> tuple[int, int]:
        return self.state.model_cfg.input_resolution

    def run(self, rgb: np.ndarray, apply_da: bool) -> InferenceResult:
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise ContractError(f"expected HxWx3 rgb input, got {rgb.shape}")
        if rgb.shape[:2] != self.resolution:
            rgb = np.clip(resize_bilinear(rgb, self.resolution), 0.0, 1.0)
        x = torch.from_numpy(rgb.transpose(2, 0, 1).astype(np.float32)).unsqueeze(0)
        translated = None
        with torch.no_grad():
            if apply_da:
                if self.gen_xy is None:
                    raise PipelineError("checkpoint has no translation generator for --with-da")
                x = self.gen_xy(x)
                translated = x[0].numpy().transpose(1, 2, 0).astype(np.float64)
            lum = rgb_to_luminance_t(x)
            depth_unit = self.depth_model(x, lum).depth_full
            out = self.seg_model(x, lum, depth_unit)
        labels = out.seg_logits.argmax(dim=1)[0].numpy().astype(np.int64)
        depth_m = np.clip(unit_to_meters(depth_unit[0, 0].numpy()), DEPTH_MIN, DEPTH_MAX)
        return InferenceResult(translated=translated, labels=labels, depth_m=depth_m)


def colorize_labels(labels: np.ndarray) -> np.ndarray:
    palette = np.clip(CLASS_PALETTE, 0.0, 1.0)
    out = np.zeros((*labels.shape, 3), dtype=np.float64)
    for k in range(min(len(palette), int(labels.max()) + 1)):
        out[labels == k] = palette[k]
    return out


def infer(
    checkpoint: Path,
    rgb: np.ndarray,
    apply_da: bool,
    out_dir: Path | None = None,
) -> InferenceResult:
    """Run the frozen pipeline on one image; write PNG artifacts if asked."""
    engine = InferenceEngine.from_checkpoint(checkpoint)
    result = engine.run(rgb, apply_da)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        if result.translated is not None:
            save_rgb_png(out_dir / "translated.png", np.clip(result.translated, 0.0, 1.0))
        save_label_png(out_dir / "labels.png", result.labels)
        save_rgb_png(out_dir / "labels_color.png", colorize_labels(result.labels))
        save_depth_png(out_dir / "depth.png", result.depth_m)
    return result


def translation_mae(
    checkpoint: Path, manifest: DatasetManifest, split: Split = Split.TEST
) -> dict[str, float]:
    """Mean absolute error of foggy and translated images against the paired
    clear ground truth, averaged over the split's foggy samples."""
    state = PipelineState.load(checkpoint)
    if not state.has_translation():
        raise PipelineError("checkpoint has no translation components")
    gen = state.modules["gen_xy"].eval()
    gen.requires_grad_(False)
    resolution = state.model_cfg.input_resolution
    by_pair = {
        e.pair_id: e for e in manifest.select(split=split, domain=Domain.NORMAL) if e.pair_id
    }
    foggy_entries = [
        e for e in manifest.select(split=split, domain=Domain.FOGGY) if e.pair_id in by_pair
    ]
    if not foggy_entries:
        raise DatasetError(f"no paired foggy samples in split {split}")
    mae_foggy, mae_translated = [], []
    for entry in foggy_entries:
        foggy = _resize_sample(load_sample(manifest, entry.id), resolution)
        clear = _resize_sample(load_sample(manifest, by_pair[entry.pair_id].id), resolution)
        with torch.no_grad():
            out = gen(_rgb_tensor(foggy).unsqueeze(0))[0].numpy().transpose(1, 2, 0)
        mae_foggy.append(float(np.abs(foggy.rgb - clear.rgb).mean()))
        mae_translated.append(float(np.abs(out.astype(np.float64) - clear.rgb).mean()))
    return {
        "num_pairs": len(foggy_entries),
        "mae_foggy": float(np.mean(mae_foggy)),
        "mae_translated": float(np.mean(mae_translated)),
    }
