"""Synthetic surface datasets with known ground-truth masks.

Each sample carries a binary mask whose area ratio is set by the generator's
``f_true`` hypothesis. Rough (mask = 1) and smooth (mask = 0) regions get
textures of different spatial frequency but identical mean brightness, so
only texture separates them.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .hypotheses import Hypothesis, parse_hypothesis
from .netpbm import encode_pgm, read_pgm
from .rng import SplitMix64, derive_seed, mix64

MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class TextureParams:
    rough_passes: int = 0
    smooth_passes: int = 4
    contrast: float = 0.12
    noise: float = 0.02


@dataclass(frozen=True)
class DatasetConfig:
    label_range: tuple[int, int] = (0, 7)
    counts: tuple[int, int, int] = (40, 5, 5)
    size: tuple[int, int] = (64, 64)
    f_true: str = "linear"
    mask_mode: str = "blob"
    mask_passes: int = 12
    texture: TextureParams = field(default_factory=TextureParams)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "label_range", tuple(int(v) for v in self.label_range))
        object.__setattr__(self, "counts", tuple(int(v) for v in self.counts))
        object.__setattr__(self, "size", tuple(int(v) for v in self.size))
        if isinstance(self.texture, dict):
            object.__setattr__(self, "texture", TextureParams(**self.texture))
        if self.mask_mode not in ("blob", "bernoulli"):
            raise ValueError(f"mask_mode must be 'blob' or 'bernoulli', got {self.mask_mode!r}")
        if len(self.counts) != 3 or min(self.counts) < 0:
            raise ValueError(f"counts must be three non-negative integers, got {self.counts}")
        if min(self.size) < 4:
            raise ValueError(f"image size must be at least 4x4, got {self.size}")
        self.hypothesis()  # validates f_true over the range

    def hypothesis(self) -> Hypothesis:
        return parse_hypothesis(self.f_true, self.label_range, name=f"f_true={self.f_true}")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("label_range", "counts", "size"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> DatasetConfig:
        return cls(**d)


def smooth_field(h: int, w: int, seed: int, passes: int) -> np.ndarray:
    """Seeded uniform noise blurred by ``passes`` separable 3-tap box filters (clamped borders)."""
    if h < 4 or w < 4:
        raise ValueError("field must be at least 4x4")
    if passes < 0:
        raise ValueError("passes must be >= 0")
    noise = SplitMix64(seed).uniform(h * w).reshape(h, w)
    return blur(noise, passes)


def blur(field: np.ndarray, passes: int) -> np.ndarray:
    return kernels.box_blur(np.asarray(field, dtype=np.float64), passes)


def threshold_at_ratio(field: np.ndarray, r: float) -> np.ndarray:
    """Mask with ones at the ceil(r*H*W) largest entries; ties go to the lower row-major index."""
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"ratio must be in [0, 1], got {r}")
    flat = np.asarray(field, dtype=np.float64).reshape(-1)
    # guard against r*n landing a hair above an integer
    k = min(flat.size, math.ceil(r * flat.size - 1e-9))
    mask = np.zeros(flat.size, dtype=np.uint8)
    if k > 0:
        order = np.argsort(-flat, kind="stable")
        mask[order[:k]] = 1
    return mask.reshape(np.shape(field))


def bernoulli_mask(h: int, w: int, r: float, seed: int) -> np.ndarray:
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"ratio must be in [0, 1], got {r}")
    u = SplitMix64(seed).uniform(h * w).reshape(h, w)
    return (u < r).astype(np.uint8)


def _standardize(x: np.ndarray) -> np.ndarray:
    sd = x.std()
    return (x - x.mean()) / (sd if sd > 0 else 1.0)


def render_texture(mask: np.ndarray, seed: int, params: TextureParams = TextureParams()) -> np.ndarray:
    """Grayscale image: high-frequency texture where mask = 1, low-frequency elsewhere."""
    mask = np.asarray(mask).astype(bool)
    h, w = mask.shape
    rng = SplitMix64(seed)
    rough = _standardize(blur(rng.uniform(h * w).reshape(h, w), params.rough_passes))
    smooth = _standardize(blur(rng.uniform(h * w).reshape(h, w), params.smooth_passes))
    noise = rng.uniform(h * w).reshape(h, w) * 2.0 - 1.0
    tex = np.where(mask, rough, smooth)
    # each region is re-centred so brightness carries no signal
    for region in (mask, ~mask):
        if region.any():
            tex[region] -= tex[region].mean()
    img = 0.5 + params.contrast * tex + params.noise * noise
    return np.clip(img, 0.0, 1.0)


@dataclass
class SurfaceSample:
    image: np.ndarray
    label: int
    true_mask: np.ndarray
    true_ratio: float
    seed: int
    split: str
    index: int


def make_sample(config: DatasetConfig, label: int, split: str, index: int) -> SurfaceSample:
    """Regenerate one sample from its coordinates alone."""
    h, w = config.size
    seed = derive_seed(config.seed, label, split, index)
    r = config.hypothesis()(label)
    mask_seed = mix64(seed ^ 0x6D61736B)
    if config.mask_mode == "blob":
        mask = threshold_at_ratio(smooth_field(h, w, mask_seed, config.mask_passes), r)
    else:
        mask = bernoulli_mask(h, w, r, mask_seed)
    image = render_texture(mask, mix64(seed ^ 0x74657874), config.texture)
    return SurfaceSample(image, label, mask, float(mask.mean()), seed, split, index)


def sample_paths(split: str, label: int, index: int) -> tuple[str, str]:
    name = f"{label}_{index}.pgm"
    return f"images/{split}/{name}", f"masks/{split}/{name}"


def generate_dataset(config: DatasetConfig, out_dir: str | os.PathLike) -> dict:
    """Write images, masks and ``manifest.json`` under ``out_dir``; returns the manifest."""
    out = Path(out_dir)
    for split in SPLITS:
        (out / "images" / split).mkdir(parents=True, exist_ok=True)
        (out / "masks" / split).mkdir(parents=True, exist_ok=True)
    digest = hashlib.sha256()
    records = []
    lo, hi = config.label_range
    for split, count in zip(SPLITS, config.counts):
        for label in range(lo, hi + 1):
            for index in range(count):
                s = make_sample(config, label, split, index)
                img_path, mask_path = sample_paths(split, label, index)
                img_bytes = encode_pgm(s.image)
                mask_bytes = encode_pgm(s.true_mask.astype(np.float64))
                (out / img_path).write_bytes(img_bytes)
                (out / mask_path).write_bytes(mask_bytes)
                digest.update(img_bytes)
                digest.update(mask_bytes)
                records.append({
                    "image": img_path,
                    "mask": mask_path,
                    "label": label,
                    "split": split,
                    "index": index,
                    "true_ratio": s.true_ratio,
                    "seed": s.seed,
                })
    body = {"format_version": MANIFEST_VERSION, "config": config.to_dict(), "samples": records}
    digest.update(json.dumps(body, sort_keys=True).encode())
    manifest = dict(body, checksum=digest.hexdigest())
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


@dataclass
class Split:
    images: np.ndarray  # (n, 1, H, W)
    labels: np.ndarray  # (n,)
    true_ratio: np.ndarray
    masks: np.ndarray  # (n, H, W), uint8
    paths: list[str]

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Dataset:
    root: Path
    config: DatasetConfig
    splits: dict[str, Split]
    manifest: dict

    @property
    def label_range(self) -> tuple[int, int]:
        return self.config.label_range

    @property
    def size(self) -> tuple[int, int]:
        return self.config.size

    def __getitem__(self, split: str) -> Split:
        return self.splits[split]


def load_dataset(root: str | os.PathLike) -> Dataset:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json in {root}")
    manifest = json.loads(path.read_text())
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {manifest.get('format_version')}")
    config = DatasetConfig.from_dict(manifest["config"])
    h, w = config.size
    splits = {}
    for split in SPLITS:
        recs = [r for r in manifest["samples"] if r["split"] == split]
        imgs = np.zeros((len(recs), 1, h, w))
        masks = np.zeros((len(recs), h, w), dtype=np.uint8)
        for i, r in enumerate(recs):
            img = read_pgm(root / r["image"])
            if img.shape != (h, w):
                raise ValueError(f"{r['image']}: expected {(h, w)}, got {img.shape}")
            imgs[i, 0] = img
            masks[i] = read_pgm(root / r["mask"]) > 0.5
        splits[split] = Split(
            images=imgs,
            labels=np.array([r["label"] for r in recs], dtype=np.int64),
            true_ratio=np.array([r["true_ratio"] for r in recs]),
            masks=masks,
            paths=[r["image"] for r in recs],
        )
    return Dataset(root, config, splits, manifest)
