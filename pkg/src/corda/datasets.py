"""Dataset format, loading, depth normalization and the synthetic dual-domain benchmark.

A dataset directory looks like::

    <root>/manifest.json
    <root>/images/000000.png   8-bit RGB
    <root>/labels/000000.png   8-bit class ids, 255 = ignore
    <root>/depth/000000.png    16-bit, round(depth_m / d_max * 65535), 0 = invalid
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, ContractError, FormatError

IGNORE_INDEX = 255
DEPTH_SCALE = 65535
MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1

# Object shapes cycle over classes 2..C-1.
OBJECT_SHAPES = ("box", "ball", "pole")


class Domain(str, enum.Enum):
    SOURCE = "source"
    TARGET = "target"


@dataclass
class Sample:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    semantics: np.ndarray  # H x W int64
    depth: np.ndarray  # H x W float32 meters, 0 = invalid
    domain: Domain

    def __post_init__(self):
        hw = self.semantics.shape
        if self.image.shape[:2] != hw or self.depth.shape != hw or self.image.ndim != 3:
            raise FormatError(
                f"inconsistent sample dims: image {self.image.shape}, "
                f"semantics {self.semantics.shape}, depth {self.depth.shape}"
            )

    @property
    def valid_depth(self) -> np.ndarray:
        return self.depth > 0


@dataclass
class Record:
    image: str
    semantics: str
    depth: str
    split: str = "train"


@dataclass
class DatasetManifest:
    root: Path
    records: list[Record]
    num_classes: int
    class_names: list[str]
    d_min: float
    d_max: float
    domain: Domain = Domain.SOURCE
    dims: tuple[int, int] | None = None

    def __post_init__(self):
        self.root = Path(self.root)
        if not 0 < self.d_min < self.d_max:
            raise ConfigError(f"need 0 < d_min < d_max, got {self.d_min}, {self.d_max}")
        if len(self.class_names) != self.num_classes:
            raise ConfigError("class_names length must equal num_classes")

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> "DatasetManifest":
        """Sub-manifest restricted to records of one split."""
        return replace(self, records=[r for r in self.records if r.split == name])

    def to_json(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "domain": self.domain.value,
            "num_classes": self.num_classes,
            "class_names": list(self.class_names),
            "d_min": self.d_min,
            "d_max": self.d_max,
            "dims": list(self.dims) if self.dims else None,
            "records": [vars(r) for r in self.records],
        }

    def save(self) -> Path:
        path = self.root / MANIFEST_NAME
        path.write_text(json.dumps(self.to_json(), indent=2))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        data = json.loads(path.read_text())
        try:
            manifest = cls(
                root=path.parent,
                records=[Record(**r) for r in data["records"]],
                num_classes=int(data["num_classes"]),
                class_names=list(data["class_names"]),
                d_min=float(data["d_min"]),
                d_max=float(data["d_max"]),
                domain=Domain(data.get("domain", "source")),
                dims=tuple(data["dims"]) if data.get("dims") else None,
            )
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed manifest {path}: {exc}") from exc
        for rec in manifest.records:
            for rel in (rec.image, rec.semantics, rec.depth):
                if not (manifest.root / rel).is_file():
                    raise FileNotFoundError(manifest.root / rel)
        return manifest


@dataclass
class DomainShiftConfig:
    """Appearance and geometry knobs for one synthetic domain.

    ``palette`` holds one base RGB color per class. Only ``palette``,
    ``texture_noise``, ``gain``, ``bias`` and ``color_jitter`` affect the
    image; they never touch the semantics or depth arrays.
    """

    palette: list[tuple[float, float, float]]
    texture_noise: float = 0.03
    gain: float = 1.0
    bias: float = 0.0
    color_jitter: float = 0.05
    depth_noise_std: float = 0.05
    object_count: tuple[int, int] = (2, 5)
    seed: int = 0

    def __post_init__(self):
        if self.texture_noise < 0 or self.depth_noise_std < 0 or self.color_jitter < 0:
            raise ConfigError("noise amplitudes must be >= 0")
        lo, hi = self.object_count
        if lo < 0 or hi < lo:
            raise ConfigError(f"empty object count range {self.object_count}")


def default_class_names(num_classes: int) -> list[str]:
    names = ["sky", "ground"]
    for k in range(num_classes - 2):
        shape = OBJECT_SHAPES[k % len(OBJECT_SHAPES)]
        names.append(shape if k < len(OBJECT_SHAPES) else f"{shape}{k // len(OBJECT_SHAPES)}")
    return names


def object_shape(class_id: int) -> str:
    return OBJECT_SHAPES[(class_id - 2) % len(OBJECT_SHAPES)]


# ---------------------------------------------------------------------------
# depth encoding


def encode_depth(depth: np.ndarray, d_max: float) -> np.ndarray:
    """Meters -> uint16 with 0 reserved for invalid pixels."""
    depth = np.asarray(depth, dtype=np.float64)
    stored = np.rint(np.clip(depth, 0.0, d_max) / d_max * DEPTH_SCALE)
    # a valid but tiny depth must not collide with the invalid sentinel
    stored[(depth > 0) & (stored == 0)] = 1
    return stored.astype(np.uint16)


def decode_depth(stored: np.ndarray, d_max: float) -> np.ndarray:
    return np.asarray(stored, dtype=np.float64) / DEPTH_SCALE * d_max


def to_inverse_depth(depth, d_min: float, d_max: float) -> tuple[np.ndarray, np.ndarray]:
    """Normalized inverse depth in [0, 1] (1 at d_min, 0 at d_max) and the valid mask."""
    if not 0 < d_min < d_max:
        raise ConfigError(f"need 0 < d_min < d_max, got {d_min}, {d_max}")
    depth = np.asarray(depth, dtype=np.float64)
    valid = depth > 0
    clamped = np.clip(np.where(valid, depth, d_max), d_min, d_max)
    inv = (1.0 / clamped - 1.0 / d_max) / (1.0 / d_min - 1.0 / d_max)
    inv = np.where(valid, np.clip(inv, 0.0, 1.0), 0.0)
    return inv, valid


# ---------------------------------------------------------------------------
# loading


def _read_png(path: Path) -> np.ndarray:
    if not path.is_file():
        raise FileNotFoundError(path)
    with Image.open(path) as im:
        return np.array(im)


def load_sample(manifest: DatasetManifest, index: int) -> Sample:
    if not 0 <= index < len(manifest):
        raise IndexError(f"index {index} out of range for {len(manifest)} records")
    rec = manifest.records[index]
    image = _read_png(manifest.root / rec.image)
    labels = _read_png(manifest.root / rec.semantics)
    stored = _read_png(manifest.root / rec.depth)
    if image.ndim != 3 or image.shape[2] != 3:
        raise FormatError(f"{rec.image}: expected RGB, got shape {image.shape}")
    if labels.ndim != 2 or stored.ndim != 2:
        raise FormatError(f"{rec.semantics}/{rec.depth}: expected single channel")
    bad = (labels >= manifest.num_classes) & (labels != IGNORE_INDEX)
    if bad.any():
        raise FormatError(f"{rec.semantics}: label values outside 0..{manifest.num_classes - 1}")
    return Sample(
        image=image.astype(np.float32) / 255.0,
        semantics=labels.astype(np.int64),
        depth=decode_depth(stored, manifest.d_max).astype(np.float32),
        domain=manifest.domain,
    )


def load_all(manifest: DatasetManifest) -> list[Sample]:
    return [load_sample(manifest, i) for i in range(len(manifest))]


def random_crop_pair(sample: Sample, size: int, rng: np.random.Generator) -> Sample:
    """Crop image, semantics and depth at one shared random offset."""
    h, w = sample.semantics.shape
    if size > min(h, w) or size <= 0:
        raise ConfigError(f"crop size {size} does not fit {h}x{w}")
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    return Sample(
        image=sample.image[y : y + size, x : x + size],
        semantics=sample.semantics[y : y + size, x : x + size],
        depth=sample.depth[y : y + size, x : x + size],
        domain=sample.domain,
    )


# ---------------------------------------------------------------------------
# synthetic scene generator

CAMERA_HEIGHT = 1.5  # meters


@dataclass
class _Scene:
    semantics: np.ndarray
    depth: np.ndarray  # noise-free
    objects: list[tuple[int, np.ndarray]] = field(default_factory=list)  # (class, mask)


def ground_depth(rows: np.ndarray, horizon: int, focal: float) -> np.ndarray:
    """Flat-ground depth for image rows strictly below the horizon."""
    return focal * CAMERA_HEIGHT / (rows - horizon)


def _layout_scene(rng, h, w, num_classes, object_count, d_max) -> _Scene:
    focal = 0.625 * h
    horizon = int(rng.integers(int(0.3 * h), int(0.5 * h) + 1))
    rows = np.arange(h)[:, None].repeat(w, axis=1)
    semantics = np.where(rows <= horizon, 0, 1).astype(np.int64)
    depth = np.full((h, w), d_max, dtype=np.float64)
    below = rows > horizon
    depth[below] = ground_depth(rows[below], horizon, focal)

    yy, xx = np.mgrid[0:h, 0:w]
    n = int(rng.integers(object_count[0], object_count[1] + 1))
    objs = []
    for _ in range(n):
        cls = int(rng.integers(2, num_classes))
        base = int(rng.integers(horizon + 3, h))
        d = float(ground_depth(np.array([base]), horizon, focal)[0])
        ppm = focal / d  # pixels per meter at that depth
        cx = float(rng.uniform(0, w))
        shape = object_shape(cls)
        if shape == "box":
            bw = max(3.0, rng.uniform(1.0, 2.5) * ppm)
            bh = max(3.0, rng.uniform(0.8, 2.0) * ppm)
            mask = (np.abs(xx - cx) <= bw / 2) & (yy <= base) & (yy > base - bh)
        elif shape == "ball":
            r = max(2.0, rng.uniform(0.5, 1.0) * ppm)
            cy = base - r
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        else:
            pw = max(1.0, rng.uniform(0.15, 0.3) * ppm)
            ph = max(6.0, rng.uniform(3.0, 5.0) * ppm)
            mask = (np.abs(xx - cx) <= pw / 2) & (yy <= base) & (yy > base - ph)
        objs.append((d, cls, mask))

    scene = _Scene(semantics=semantics, depth=depth)
    # painter's order: far first
    for d, cls, mask in sorted(objs, key=lambda o: -o[0]):
        semantics[mask] = cls
        depth[mask] = d
        scene.objects.append((cls, mask))
    return scene


def _render(scene: _Scene, cfg: DomainShiftConfig, rng) -> np.ndarray:
    palette = np.asarray(cfg.palette, dtype=np.float64)
    h, w = scene.semantics.shape
    image = palette[scene.semantics].copy()
    for cls, mask in scene.objects:
        image[mask] += rng.normal(0.0, cfg.color_jitter, size=3)
    image += rng.normal(0.0, 1.0, size=(h, w, 3)) * cfg.texture_noise
    image = cfg.gain * image + cfg.bias
    return np.clip(image, 0.0, 1.0)


def _depth_noise(depth, std, rng, d_min, d_max) -> np.ndarray:
    if std > 0:
        noise = np.clip(rng.normal(0.0, std, size=depth.shape), -3 * std, 3 * std)
        depth = depth + noise
    return np.clip(depth, d_min, d_max)


def render_sample(
    cfg: DomainShiftConfig,
    index: int,
    dims: tuple[int, int] = (64, 64),
    num_classes: int = 5,
    d_min: float = 1.0,
    d_max: float = 80.0,
):
    """Render scene ``index`` in memory: (uint8 image, uint8 labels, float depth meters).

    Geometry, appearance and depth noise draw from independent streams so
    that appearance-only config changes leave labels and depth untouched.
    """
    if num_classes < 3:
        raise ConfigError(f"need at least 3 classes (sky, ground, object), got {num_classes}")
    h, w = dims
    if h < 32 or w < 32:
        raise ConfigError(f"dims must be at least 32x32, got {dims}")
    geo = np.random.default_rng([cfg.seed, index, 0])
    app = np.random.default_rng([cfg.seed, index, 1])
    dep = np.random.default_rng([cfg.seed, index, 2])
    scene = _layout_scene(geo, h, w, num_classes, cfg.object_count, d_max)
    if len(cfg.palette) < num_classes:
        raise ConfigError(f"palette has {len(cfg.palette)} colors for {num_classes} classes")
    image = np.rint(_render(scene, cfg, app) * 255).astype(np.uint8)
    depth = _depth_noise(scene.depth, cfg.depth_noise_std, dep, d_min, d_max)
    return image, scene.semantics.astype(np.uint8), depth


def generate_synthetic_domain(
    cfg: DomainShiftConfig,
    count: int,
    root: str | Path,
    dims: tuple[int, int] = (64, 64),
    num_classes: int = 5,
    d_min: float = 1.0,
    d_max: float = 80.0,
    domain: Domain = Domain.SOURCE,
    eval_count: int = 0,
) -> DatasetManifest:
    """Write ``count`` train (+ ``eval_count`` eval) samples under ``root``."""
    if count <= 0:
        raise ConfigError("count must be positive")
    if num_classes < 3:
        raise ConfigError(f"need at least 3 classes (sky, ground, object), got {num_classes}")
    if not 0 < d_min < d_max:
        raise ConfigError(f"need 0 < d_min < d_max, got {d_min}, {d_max}")
    # smallest flat-ground depth is at the bottom row
    if 0.625 * dims[0] * CAMERA_HEIGHT / math.ceil(0.7 * dims[0]) < d_min:
        raise ConfigError("d_min larger than nearest ground depth for these dims")
    root = Path(root)
    for sub in ("images", "labels", "depth"):
        (root / sub).mkdir(parents=True, exist_ok=True)

    records = []
    for i in range(count + eval_count):
        image, labels, depth = render_sample(cfg, i, dims, num_classes, d_min, d_max)
        name = f"{i:06d}.png"
        rec = Record(f"images/{name}", f"labels/{name}", f"depth/{name}",
                     "train" if i < count else "eval")
        Image.fromarray(image, mode="RGB").save(root / rec.image)
        Image.fromarray(labels, mode="L").save(root / rec.semantics)
        Image.fromarray(encode_depth(depth, d_max)).save(root / rec.depth)
        records.append(rec)

    manifest = DatasetManifest(
        root=root,
        records=records,
        num_classes=num_classes,
        class_names=default_class_names(num_classes),
        d_min=d_min,
        d_max=d_max,
        domain=domain,
        dims=tuple(dims),
    )
    manifest.save()
    return manifest


# ---------------------------------------------------------------------------
# domain-shift presets

SOURCE_PALETTE = [
    (0.45, 0.65, 0.95),  # sky
    (0.45, 0.42, 0.40),  # ground
    (0.85, 0.30, 0.20),  # box
    (0.20, 0.70, 0.30),  # ball
    (0.90, 0.85, 0.20),  # pole
]
TARGET_PALETTE = [
    (0.72, 0.74, 0.78),
    (0.38, 0.40, 0.44),
    (0.62, 0.42, 0.55),
    (0.50, 0.58, 0.38),
    (0.62, 0.60, 0.45),
]


def _extend_palette(palette, num_classes, seed):
    palette = list(palette)
    rng = np.random.default_rng(seed)
    while len(palette) < num_classes:
        palette.append(tuple(float(v) for v in rng.uniform(0.1, 0.9, size=3)))
    return palette[:num_classes]


def preset(name: str, seed: int = 0, num_classes: int = 5) -> tuple[DomainShiftConfig, DomainShiftConfig]:
    """(source, target) configs for a named domain-shift preset."""
    if name == "default":
        src = DomainShiftConfig(
            palette=_extend_palette(SOURCE_PALETTE, num_classes, 11),
            texture_noise=0.03, gain=1.0, bias=0.0, color_jitter=0.05,
            depth_noise_std=0.02, object_count=(2, 5), seed=2 * seed,
        )
        tgt = DomainShiftConfig(
            palette=_extend_palette(TARGET_PALETTE, num_classes, 12),
            texture_noise=0.08, gain=0.85, bias=0.05, color_jitter=0.08,
            depth_noise_std=0.3, object_count=(2, 5), seed=2 * seed + 1,
        )
        return src, tgt
    if name == "identity":
        src, _ = preset("default", seed, num_classes)
        return src, replace(src, seed=2 * seed + 1)
    raise ConfigError(f"unknown preset {name!r}; choose from {PRESET_NAMES}")


PRESET_NAMES = ("default", "identity")
