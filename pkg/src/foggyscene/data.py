"""Scene data for the fog pipeline: procedural generation, fog synthesis,
augmentation, and on-disk datasets.

A dataset on disk is laid out as::

    <root>/<split>/rgb/<id>.png      8-bit RGB
    <root>/<split>/depth/<id>.png    16-bit grayscale, value = meters * 256, 0 = invalid
    <root>/<split>/labels/<id>.png   8-bit class index, 255 = ignore
    <root>/manifest.json             ids, splits, domains, fog parameters

The synthetic generator renders simple road scenes (sky band, receding ground
plane, boxes of distinct classes) whose depth, labels and colors are mutually
consistent, so the full training pipeline can be exercised without any
external download. Fog is synthesized with the homogeneous atmospheric
scattering model ``I = J * exp(-beta * d) + A * (1 - exp(-beta * d))``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError, ContractError, DatasetError

IGNORE_LABEL = 255
DEPTH_MIN = 1.0
DEPTH_MAX = 80.0
DEPTH_SCALE = 256.0  # stored uint16 depth = meters * DEPTH_SCALE

# BT.601 luma coefficients.
LUMA_COEFFS = np.array([0.299, 0.587, 0.114], dtype=np.float64)

DEFAULT_ATMOSPHERE = (0.9, 0.9, 0.92)
DEFAULT_BETA_RANGE = (0.05, 0.3)

# One fixed color per class index; classes 0/1 are sky/ground, the rest boxes.
CLASS_PALETTE = np.array(
    [
        (0.53, 0.70, 0.92),  # sky
        (0.42, 0.38, 0.34),  # ground
        (0.85, 0.25, 0.20),
        (0.20, 0.62, 0.25),
        (0.95, 0.78, 0.10),
        (0.48, 0.18, 0.62),
        (0.10, 0.45, 0.78),
        (0.90, 0.48, 0.05),
        (0.15, 0.72, 0.65),
        (0.75, 0.12, 0.48),
        (0.58, 0.70, 0.15),
        (0.30, 0.30, 0.80),
        (0.82, 0.60, 0.45),
        (0.25, 0.52, 0.42),
        (0.68, 0.35, 0.28),
        (0.40, 0.65, 0.85),
        (0.88, 0.88, 0.35),
        (0.55, 0.25, 0.15),
        (0.35, 0.82, 0.38),
    ],
    dtype=np.float64,
)


class Domain(str, Enum):
    NORMAL = "normal"
    FOGGY = "foggy"


class Split(str, Enum):
    TRAIN = "train"
    TEST = "test"


def stable_seed(*parts) -> int:
    """Map a tuple of ints/strings to a 63-bit seed, stable across processes."""
    text = "/".join(str(p) for p in parts)
    digest = hashlib.blake2s(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") >> 1


@dataclass
class FogParams:
    """Homogeneous fog: extinction coefficient (1/m) and atmospheric light."""

    beta: float
    atmosphere: tuple[float, float, float] = DEFAULT_ATMOSPHERE

    def __post_init__(self):
        if self.beta < 0:
            raise ConfigurationError(f"fog extinction beta must be >= 0, got {self.beta}")
        self.atmosphere = tuple(float(a) for a in self.atmosphere)
        if len(self.atmosphere) != 3 or any(not (0.0 <= a <= 1.0) for a in self.atmosphere):
            raise ConfigurationError(f"atmosphere must be a 3-vector in [0,1], got {self.atmosphere}")


@dataclass
class SceneSample:
    """One aligned record of image, depth, labels and luminance.

    All spatial fields share the same HxW; rgb/luminance live in [0,1], depth
    is meters (0 marks invalid pixels), labels are class indices in [0, K) or
    the IGNORE_LABEL sentinel.
    """

    rgb: np.ndarray        # (H, W, 3) float64
    depth: np.ndarray      # (H, W) float64, meters
    labels: np.ndarray     # (H, W) int64
    luminance: np.ndarray  # (H, W) float64
    domain: Domain
    id: str

    def __post_init__(self):
        h, w = self.rgb.shape[:2]
        if self.rgb.shape != (h, w, 3):
            raise ContractError(f"rgb must be HxWx3, got {self.rgb.shape}")
        for name in ("depth", "labels", "luminance"):
            arr = getattr(self, name)
            if arr.shape != (h, w):
                raise ContractError(f"{name} shape {arr.shape} does not match rgb {h}x{w}")
        if self.rgb.min() < 0.0 or self.rgb.max() > 1.0:
            raise ContractError("rgb values must lie in [0,1]")
        if self.luminance.min() < 0.0 or self.luminance.max() > 1.0:
            raise ContractError("luminance values must lie in [0,1]")
        if not np.isfinite(self.depth).all() or self.depth.min() < 0.0:
            raise ContractError("depth must be finite and >= 0 (0 marks invalid pixels)")
        labs = self.labels
        if labs.dtype.kind not in "iu" or labs.min() < 0 or labs.max() > IGNORE_LABEL:
            raise ContractError("labels must be integers in [0, 255]")

    @property
    def resolution(self) -> tuple[int, int]:
        return self.rgb.shape[0], self.rgb.shape[1]

    def valid_depth_mask(self) -> np.ndarray:
        return self.depth > 0.0

    def hflip(self) -> "SceneSample":
        """Mirror every spatial field left-right."""
        return SceneSample(
            rgb=self.rgb[:, ::-1].copy(),
            depth=self.depth[:, ::-1].copy(),
            labels=self.labels[:, ::-1].copy(),
            luminance=self.luminance[:, ::-1].copy(),
            domain=self.domain,
            id=self.id,
        )


def to_luminance(rgb: np.ndarray) -> np.ndarray:
    """BT.601 luma: Y = 0.299 R + 0.587 G + 0.114 B, per pixel."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ContractError(f"expected HxWx3 rgb, got shape {rgb.shape}")
    if rgb.min() < 0.0 or rgb.max() > 1.0:
        raise ContractError("rgb values must lie in [0,1]")
    return np.clip(rgb @ LUMA_COEFFS, 0.0, 1.0)


def _distance_shade(depth_m):
    """Brightness factor monotone in inverse distance, in [0.55, 1.15]."""
    return 0.55 + 0.6 * np.clip(6.0 / np.asarray(depth_m, dtype=np.float64), 0.0, 1.0)


def _check_resolution(resolution, what="resolution"):
    h, w = int(resolution[0]), int(resolution[1])
    if h <= 0 or w <= 0 or h % 8 or w % 8:
        raise ConfigurationError(f"{what} must be positive and divisible by 8, got {h}x{w}")
    return h, w


def generate_scene(seed: int, resolution: tuple[int, int], num_classes: int = 5) -> SceneSample:
    """Render one procedural clear-weather scene, deterministic in ``seed``.

    Layout: sky band (class 0, far depth), a ground plane (class 1) whose
    depth recedes with the row index like f/(r - horizon), and 1-2 boxes per
    remaining class, each box at a single depth, drawn far-to-near so nearer
    boxes occlude.
    """
    h, w = _check_resolution(resolution)
    if not 2 <= num_classes <= 19:
        raise ConfigurationError(f"num_classes must be in [2, 19], got {num_classes}")

    rng = np.random.default_rng(seed)
    horizon = int(h * rng.uniform(0.30, 0.42))
    sky_depth = 50.0
    rgb = np.zeros((h, w, 3), dtype=np.float64)
    depth = np.full((h, w), sky_depth, dtype=np.float64)
    labels = np.zeros((h, w), dtype=np.int64)

    # Sky: fixed far depth, slight vertical gradient.
    sky_shade = 1.0 - 0.15 * (np.arange(horizon, dtype=np.float64) / max(horizon, 1))
    rgb[:horizon] = CLASS_PALETTE[0] * sky_shade[:, None, None]

    # Ground plane: perspective depth f/(r - horizon + 1), clipped to range.
    # Surfaces are shaded by an atmospheric-perspective factor monotone in
    # inverse depth, so appearance carries the cue a fully convolutional
    # network needs to regress absolute distance.
    bottom_depth = rng.uniform(8.0, 12.0)
    focal = bottom_depth * (h - horizon)
    rows = np.arange(horizon, h, dtype=np.float64)
    ground_depth = np.clip(focal / (rows - horizon + 1.0), DEPTH_MIN, sky_depth)
    depth[horizon:] = ground_depth[:, None]
    labels[horizon:] = 1
    rgb[horizon:] = CLASS_PALETTE[1] * _distance_shade(ground_depth)[:, None, None]

    # Boxes, far to near so near ones occlude.
    boxes = []
    for cls in range(2, num_classes):
        for _ in range(int(rng.integers(1, 3))):
            z = rng.uniform(10.0, 50.0)
            # apparent size shrinks with distance
            scale = (16.0 / z) ** 0.5
            bh = int(np.clip(h * rng.uniform(0.18, 0.40) * scale, 3, h // 2))
            bw = int(np.clip(w * rng.uniform(0.10, 0.24) * scale, 3, w // 2))
            base = int(np.clip(horizon + focal / z, horizon + 1, h - 1))
            x0 = int(rng.integers(0, max(w - bw, 1)))
            jitter = rng.uniform(-0.04, 0.04, size=3)
            boxes.append((z, cls, base, bh, x0, bw, jitter))
    for z, cls, base, bh, x0, bw, jitter in sorted(boxes, key=lambda b: -b[0]):
        top = max(base - bh, 0)
        color = np.clip(CLASS_PALETTE[cls] * _distance_shade(z) + jitter, 0.0, 1.0)
        rgb[top:base, x0 : x0 + bw] = color
        depth[top:base, x0 : x0 + bw] = z
        labels[top:base, x0 : x0 + bw] = cls

    rgb = np.clip(rgb + rng.normal(0.0, 0.015, size=rgb.shape), 0.0, 1.0)
    return SceneSample(
        rgb=rgb,
        depth=depth,
        labels=labels,
        luminance=to_luminance(rgb),
        domain=Domain.NORMAL,
        id=f"scene-{seed:08d}",
    )


def synthesize_fog(sample: SceneSample, fog: FogParams) -> SceneSample:
    """Apply homogeneous fog to a sample; labels and depth are untouched.

    Per pixel and channel: I = J * t + A * (1 - t) with transmittance
    t = exp(-beta * depth). Luminance is recomputed from the fogged image.
    """
    if fog.beta < 0:
        raise ConfigurationError(f"fog extinction beta must be >= 0, got {fog.beta}")
    t = np.exp(-fog.beta * sample.depth)[..., None]
    atmosphere = np.asarray(fog.atmosphere, dtype=np.float64)
    rgb = np.clip(sample.rgb * t + atmosphere * (1.0 - t), 0.0, 1.0)
    return SceneSample(
        rgb=rgb,
        depth=sample.depth.copy(),
        labels=sample.labels.copy(),
        luminance=to_luminance(rgb),
        domain=Domain.FOGGY,
        id=sample.id,
    )


def resize_bilinear(arr: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with half-pixel-centered sampling; works on (H,W) and (H,W,C)."""
    h_in, w_in = arr.shape[:2]
    h_out, w_out = out_hw
    if (h_out, w_out) == (h_in, w_in):
        return arr.copy()
    ys = (np.arange(h_out, dtype=np.float64) + 0.5) * (h_in / h_out) - 0.5
    xs = (np.arange(w_out, dtype=np.float64) + 0.5) * (w_in / w_out) - 0.5
    y0f = np.floor(ys)
    x0f = np.floor(xs)
    wy = (ys - y0f)[:, None]
    wx = (xs - x0f)[None, :]
    y0 = np.clip(y0f.astype(np.int64), 0, h_in - 1)
    y1 = np.clip(y0f.astype(np.int64) + 1, 0, h_in - 1)
    x0 = np.clip(x0f.astype(np.int64), 0, w_in - 1)
    x1 = np.clip(x0f.astype(np.int64) + 1, 0, w_in - 1)
    if arr.ndim == 3:
        wy = wy[..., None]
        wx = wx[..., None]
    a00 = arr[y0][:, x0]
    a01 = arr[y0][:, x1]
    a10 = arr[y1][:, x0]
    a11 = arr[y1][:, x1]
    top = a00 * (1.0 - wx) + a01 * wx
    bot = a10 * (1.0 - wx) + a11 * wx
    return top * (1.0 - wy) + bot * wy


def resize_nearest(arr: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resize with half-pixel-centered sampling."""
    h_in, w_in = arr.shape[:2]
    h_out, w_out = out_hw
    if (h_out, w_out) == (h_in, w_in):
        return arr.copy()
    ys = np.clip(np.floor((np.arange(h_out) + 0.5) * (h_in / h_out)).astype(np.int64), 0, h_in - 1)
    xs = np.clip(np.floor((np.arange(w_out) + 0.5) * (w_in / w_out)).astype(np.int64), 0, w_in - 1)
    return arr[ys][:, xs].copy()


def augment(
    sample: SceneSample,
    seed: int,
    target_resolution: tuple[int, int],
    flip: bool | None = None,
) -> SceneSample:
    """Seeded horizontal flip (p=0.5) plus resize to ``target_resolution``.

    rgb/luminance/depth are resized bilinearly, labels nearest-neighbor.
    ``flip`` forces the flip decision when not None.
    """
    th, tw = _check_resolution(target_resolution, "target resolution")
    sh, sw = sample.resolution
    _check_resolution((sh, sw), "source resolution")
    if th > sh or tw > sw:
        raise ConfigurationError(f"target {th}x{tw} exceeds source {sh}x{sw}")
    rng = np.random.default_rng(seed)
    do_flip = bool(rng.random() < 0.5) if flip is None else bool(flip)
    out = sample.hflip() if do_flip else sample
    if (th, tw) != (sh, sw):
        rgb = np.clip(resize_bilinear(out.rgb, (th, tw)), 0.0, 1.0)
        out = SceneSample(
            rgb=rgb,
            depth=resize_bilinear(out.depth, (th, tw)),
            labels=resize_nearest(out.labels, (th, tw)),
            luminance=np.clip(resize_bilinear(out.luminance, (th, tw)), 0.0, 1.0),
            domain=out.domain,
            id=out.id,
        )
    elif not do_flip:
        out = SceneSample(
            rgb=out.rgb.copy(),
            depth=out.depth.copy(),
            labels=out.labels.copy(),
            luminance=out.luminance.copy(),
            domain=out.domain,
            id=out.id,
        )
    return out


# --------------------------------------------------------------------------
# PNG IO

def save_rgb_png(path: Path, rgb: np.ndarray) -> None:
    arr = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_rgb_png(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_depth_png(path: Path, depth_m: np.ndarray) -> None:
    v = np.round(np.clip(depth_m, 0.0, 65535.0 / DEPTH_SCALE) * DEPTH_SCALE).astype(np.uint16)
    v[depth_m <= 0.0] = 0
    Image.fromarray(v).save(path)


def load_depth_png(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img, dtype=np.float64)
    return arr / DEPTH_SCALE


def save_label_png(path: Path, labels: np.ndarray) -> None:
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path)


def load_label_png(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img, dtype=np.int64).copy()


# --------------------------------------------------------------------------
# Manifests

MANIFEST_NAME = "manifest.json"
_KINDS = ("rgb", "depth", "labels")


@dataclass
class ManifestEntry:
    id: str
    split: Split
    domain: Domain
    pair_id: str | None = None
    fog: FogParams | None = None
    # explicit relative paths per modality; None means the standard layout
    paths: dict[str, str] | None = None


@dataclass
class DatasetManifest:
    """Index of a dataset on disk: ordered ids with split/domain/fog metadata."""

    root: Path
    resolution: tuple[int, int]
    entries: list[ManifestEntry] = field(default_factory=list)
    warnings: int = 0

    def __post_init__(self):
        self.root = Path(self.root)
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DatasetError("manifest ids are not unique")

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def entry(self, sample_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.id == sample_id:
                return e
        raise DatasetError(f"sample id {sample_id!r} not in manifest")

    def select(self, split: Split | None = None, domain: Domain | None = None) -> list[ManifestEntry]:
        out = self.entries
        if split is not None:
            out = [e for e in out if e.split == split]
        if domain is not None:
            out = [e for e in out if e.domain == domain]
        return list(out)

    def path_for(self, entry: ManifestEntry, kind: str) -> Path:
        if entry.paths is not None:
            return self.root / entry.paths[kind]
        return self.root / entry.split.value / kind / f"{entry.id}.png"

    def check_files(self) -> None:
        for e in self.entries:
            for kind in _KINDS:
                p = self.path_for(e, kind)
                if not p.is_file():
                    raise DatasetError(f"manifest id {e.id!r}: missing {kind} file {p}")

    def to_dict(self) -> dict:
        samples = []
        for e in self.entries:
            rec = {
                "id": e.id,
                "split": e.split.value,
                "domain": e.domain.value,
                "pair_id": e.pair_id,
                "fog": None
                if e.fog is None
                else {"beta": e.fog.beta, "atmosphere": list(e.fog.atmosphere)},
            }
            if e.paths is not None:
                rec["paths"] = dict(e.paths)
            samples.append(rec)
        return {"version": 1, "resolution": list(self.resolution), "samples": samples}

    def save(self, path: Path | None = None) -> Path:
        path = Path(path) if path is not None else self.root / MANIFEST_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        return path

    @classmethod
    def from_dict(cls, root: Path, doc: dict) -> "DatasetManifest":
        entries = []
        for rec in doc["samples"]:
            fog = rec.get("fog")
            entries.append(
                ManifestEntry(
                    id=rec["id"],
                    split=Split(rec["split"]),
                    domain=Domain(rec["domain"]),
                    pair_id=rec.get("pair_id"),
                    fog=None if fog is None else FogParams(fog["beta"], tuple(fog["atmosphere"])),
                    paths=rec.get("paths"),
                )
            )
        return cls(root=Path(root), resolution=tuple(doc["resolution"]), entries=entries)


def load_manifest(root: Path) -> DatasetManifest:
    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.is_file():
        raise DatasetError(f"no {MANIFEST_NAME} under {root}")
    manifest = DatasetManifest.from_dict(root, json.loads(path.read_text()))
    manifest.check_files()
    return manifest


def load_sample(manifest: DatasetManifest, sample_id: str) -> SceneSample:
    entry = manifest.entry(sample_id)
    rgb = load_rgb_png(manifest.path_for(entry, "rgb"))
    depth = load_depth_png(manifest.path_for(entry, "depth"))
    labels = load_label_png(manifest.path_for(entry, "labels"))
    return SceneSample(
        rgb=rgb,
        depth=depth,
        labels=labels,
        luminance=to_luminance(rgb),
        domain=entry.domain,
        id=entry.id,
    )


def build_synthetic_dataset(
    root: Path,
    train_pairs: int = 32,
    test_pairs: int = 8,
    resolution: tuple[int, int] = (128, 256),
    num_classes: int = 5,
    seed: int = 0,
    train_beta: tuple[float, float] = DEFAULT_BETA_RANGE,
    test_beta: tuple[float, float] = (0.15, 0.3),
    atmosphere: tuple[float, float, float] = DEFAULT_ATMOSPHERE,
) -> DatasetManifest:
    """Generate paired clear/foggy scenes and write them as a dataset.

    Each pair shares geometry and labels: the foggy member is the clear scene
    passed through the scattering model with a per-pair beta drawn from the
    split's range. Fully deterministic in ``seed``.
    """
    if train_pairs < 1 or test_pairs < 1:
        raise ConfigurationError(
            f"need at least one pair per split, got train={train_pairs} test={test_pairs}"
        )
    _check_resolution(resolution)
    root = Path(root)
    manifest = DatasetManifest(root=root, resolution=tuple(resolution))
    plan = [(Split.TRAIN, train_pairs, train_beta), (Split.TEST, test_pairs, test_beta)]
    k = 0
    for split, count, beta_range in plan:
        if beta_range[0] < 0 or beta_range[1] < beta_range[0]:
            raise ConfigurationError(f"invalid beta range {beta_range}")
        for kind in _KINDS:
            (root / split.value / kind).mkdir(parents=True, exist_ok=True)
        for _ in range(count):
            scene_rng = np.random.default_rng(stable_seed(seed, "beta", k))
            beta = float(scene_rng.uniform(*beta_range))
            clear = generate_scene(stable_seed(seed, "scene", k), resolution, num_classes)
            fog = FogParams(beta=beta, atmosphere=atmosphere)
            foggy = synthesize_fog(clear, fog)
            pair_id = f"{k:04d}"
            for sample, domain, fog_params in (
                (clear, Domain.NORMAL, None),
                (foggy, Domain.FOGGY, fog),
            ):
                sid = f"{pair_id}_{domain.value}"
                save_rgb_png(root / split.value / "rgb" / f"{sid}.png", sample.rgb)
                save_depth_png(root / split.value / "depth" / f"{sid}.png", sample.depth)
                save_label_png(root / split.value / "labels" / f"{sid}.png", sample.labels)
                manifest.entries.append(
                    ManifestEntry(id=sid, split=split, domain=domain, pair_id=pair_id, fog=fog_params)
                )
            k += 1
    manifest.save()
    return manifest


def load_cityscapes_layout(root: Path, domain: Domain) -> DatasetManifest:
    """Index a Cityscapes-convention tree: ``leftImg8bit/``, ``gtFine/`` with
    ``*_labelTrainIds.png``, and ``disparity/``.

    Samples missing any modality are skipped and counted in
    ``manifest.warnings``. Stored disparity values are interpreted as
    meters * 256 like the native layout; supply calibrated depth for metric
    results.
    """
    root = Path(root)
    img_root = root / "leftImg8bit"
    images = sorted(img_root.rglob("*_leftImg8bit.png")) if img_root.is_dir() else []
    if not images:
        raise DatasetError(f"no leftImg8bit images under {root}")

    def find(sub: str, name: str) -> Path | None:
        hits = sorted((root / sub).rglob(name)) if (root / sub).is_dir() else []
        return hits[0] if hits else None

    entries, skipped = [], 0
    for img in images:
        base = img.name[: -len("_leftImg8bit.png")]
        label = find("gtFine", f"{base}_gtFine_labelTrainIds.png")
        disp = find("disparity", f"{base}_disparity.png")
        if label is None or disp is None:
            skipped += 1
            continue
        rel = img.relative_to(root)
        split = Split.TRAIN if "train" in rel.parts else Split.TEST
        entries.append(
            ManifestEntry(
                id=base,
                split=split,
                domain=domain,
                paths={
                    "rgb": str(rel),
                    "labels": str(label.relative_to(root)),
                    "depth": str(disp.relative_to(root)),
                },
            )
        )
    if not entries:
        raise DatasetError(f"no complete rgb/label/depth triples under {root} ({skipped} incomplete)")
    with Image.open(images[0]) as img:
        resolution = (img.height, img.width)
    return DatasetManifest(root=root, resolution=resolution, entries=entries, warnings=skipped)


def split_refined(
    manifest: DatasetManifest, train_count: int, test_count: int, seed: int
) -> tuple[DatasetManifest, DatasetManifest]:
    """Deterministic disjoint subsets of the requested sizes.

    The seeded shuffle is stratified by domain (round-robin over per-domain
    shuffles) so both weather conditions stay represented in small subsets.
    """
    total = train_count + test_count
    if train_count < 0 or test_count < 0:
        raise ConfigurationError("split counts must be non-negative")
    if total > len(manifest.entries):
        raise DatasetError(
            f"requested {train_count}+{test_count} samples, manifest has {len(manifest.entries)}"
        )
    rng = np.random.default_rng(stable_seed(seed, "split-refined"))
    queues = []
    for domain in Domain:
        group = [e for e in manifest.entries if e.domain == domain]
        order = rng.permutation(len(group))
        queues.append([group[i] for i in order])
    interleaved = []
    while any(queues):
        for q in queues:
            if q:
                interleaved.append(q.pop(0))
    picked = interleaved[:total]
    train = [replace(e, split=Split.TRAIN) for e in picked[:train_count]]
    test = [replace(e, split=Split.TEST) for e in picked[train_count:total]]
    make = lambda entries: DatasetManifest(
        root=manifest.root, resolution=manifest.resolution, entries=entries
    )
    return make(train), make(test)
