"""Synthetic 2D phantoms with exact ground truth.

Each phantom is a union of bright ellipses and capsules on a dim background.
The label is the crisp shape union; the image is that piecewise-constant
object blurred by a separable Gaussian and corrupted by Poisson noise.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter1d

from . import io
from .core import normalize

MARGIN = 2
MAX_ATTEMPTS = 1000
FG_FRACTION_RANGE = (0.01, 0.5)
MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
SHAPES = ("ellipse", "capsule")


class PhantomError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    height: int = 64
    width: int = 64
    n_structures: int = 3
    fg_intensity_range: tuple[float, float] = (0.6, 1.0)
    bg_intensity: float = 0.1
    blur_sigma: float = 1.0
    noise_scale: Optional[float] = 50.0  # None -> noiseless, else Poisson(pixel*scale)/scale
    size_range: tuple[float, float] = (0.06, 0.2)  # structure radius as a fraction of min(h, w)
    shapes: tuple[str, ...] = SHAPES
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.fg_intensity_range
        if min(self.height, self.width) < 8:
            raise ValueError("phantom sides must be >= 8")
        if not 1 <= self.n_structures <= 8:
            raise ValueError(f"n_structures must be in 1..8, got {self.n_structures}")
        if not lo <= hi:
            raise ValueError("fg_intensity_range must be ordered (lo, hi)")
        if self.bg_intensity < 0 or not lo > self.bg_intensity:
            raise ValueError("foreground must be brighter than a non-negative background")
        if self.blur_sigma < 0:
            raise ValueError("blur_sigma must be >= 0")
        if self.noise_scale is not None and self.noise_scale <= 0:
            raise ValueError("noise_scale must be > 0 (or None for no noise)")
        if not 0 < self.size_range[0] <= self.size_range[1]:
            raise ValueError("size_range must satisfy 0 < lo <= hi")
        unknown = set(self.shapes) - set(SHAPES)
        if not self.shapes or unknown:
            raise ValueError(f"shapes must be a non-empty subset of {SHAPES}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fg_intensity_range"] = list(self.fg_intensity_range)
        d["size_range"] = list(self.size_range)
        d["shapes"] = list(self.shapes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        for key in ("fg_intensity_range", "size_range", "shapes"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def with_seed(self, seed: int) -> "PhantomSpec":
        return PhantomSpec.from_dict({**self.to_dict(), "seed": int(seed)})


def _ellipse(rng, rmin, rmax):
    a, b = rng.uniform(rmin, rmax, size=2)
    theta = rng.uniform(0.0, math.pi)
    c, s = math.cos(theta), math.sin(theta)
    ext_x = math.sqrt((a * c) ** 2 + (b * s) ** 2)
    ext_y = math.sqrt((a * s) ** 2 + (b * c) ** 2)

    def raster(yy, xx, cy, cx):
        dx, dy = xx - cx, yy - cy
        u = (dx * c + dy * s) / a
        v = (-dx * s + dy * c) / b
        return u * u + v * v <= 1.0

    return ext_y, ext_x, raster


def _capsule(rng, rmin, rmax):
    r = rng.uniform(rmin, max(rmin, 0.6 * rmax))
    half = rng.uniform(0.5 * rmin, rmax)
    theta = rng.uniform(0.0, math.pi)
    c, s = math.cos(theta), math.sin(theta)
    ext_x = half * abs(c) + r
    ext_y = half * abs(s) + r

    def raster(yy, xx, cy, cx):
        dx, dy = xx - cx, yy - cy
        t = np.clip(dx * c + dy * s, -half, half)
        return (dx - t * c) ** 2 + (dy - t * s) ** 2 <= r * r

    return ext_y, ext_x, raster


def _place_label(spec: PhantomSpec, rng) -> tuple[np.ndarray, np.ndarray] | None:
    h, w = spec.height, spec.width
    side = min(h, w)
    rmin = max(1.0, spec.size_range[0] * side)
    rmax = max(rmin, spec.size_range[1] * side)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    label = np.zeros((h, w), dtype=bool)
    clean = np.full((h, w), float(spec.bg_intensity))
    for _ in range(spec.n_structures):
        kind = spec.shapes[rng.integers(len(spec.shapes))]
        ext_y, ext_x, raster = (_ellipse if kind == "ellipse" else _capsule)(rng, rmin, rmax)
        lo_y, hi_y = MARGIN + ext_y, h - 1 - MARGIN - ext_y
        lo_x, hi_x = MARGIN + ext_x, w - 1 - MARGIN - ext_x
        if lo_y > hi_y or lo_x > hi_x:
            return None
        cy, cx = rng.uniform(lo_y, hi_y), rng.uniform(lo_x, hi_x)
        shape = raster(yy, xx, cy, cx)
        fg = rng.uniform(*spec.fg_intensity_range)
        clean[shape] = np.maximum(clean[shape], fg)
        label |= shape
    frac = label.mean()
    if not FG_FRACTION_RANGE[0] <= frac <= FG_FRACTION_RANGE[1]:
        return None
    return clean, label


def gaussian_blur(image, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with kernel radius ceil(3 sigma) and clamped edges."""
    if sigma <= 0:
        return np.array(image, dtype=np.float64)
    radius = int(math.ceil(3.0 * sigma))
    out = gaussian_filter1d(np.asarray(image, dtype=np.float64), sigma, axis=0, mode="nearest", radius=radius)
    return gaussian_filter1d(out, sigma, axis=1, mode="nearest", radius=radius)


def generate_phantom(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(image, label)`` for ``spec``; deterministic in ``spec.seed``.

    The image is in raw intensity units (not normalized).
    """
    rng = np.random.default_rng(spec.seed)
    for _ in range(MAX_ATTEMPTS):
        placed = _place_label(spec, rng)
        if placed is not None:
            break
    else:
        raise PhantomError(
            f"could not place {spec.n_structures} structure(s) in a {spec.height}x{spec.width} grid "
            f"after {MAX_ATTEMPTS} attempts"
        )
    clean, label = placed
    image = gaussian_blur(clean, spec.blur_sigma)
    if spec.noise_scale is not None:
        image = rng.poisson(image * spec.noise_scale) / spec.noise_scale
    return image.astype(np.float64), label.astype(np.uint8)


@dataclass(frozen=True)
class ManifestItem:
    image_path: str
    label_path: Optional[str]
    seed: int
    split: str


@dataclass
class DatasetManifest:
    items: list[ManifestItem]
    spec: dict = field(default_factory=dict)
    format_version: int = MANIFEST_VERSION
    root: Path = field(default=Path("."), compare=False)

    def split(self, name: str) -> list[ManifestItem]:
        return [it for it in self.items if it.split == name]

    def has_labels(self, split: str) -> bool:
        items = self.split(split)
        return bool(items) and all(it.label_path for it in items)

    def load_image(self, item: ManifestItem) -> np.ndarray:
        """Normalized image for ``item``."""
        return normalize(io.read_raw(self.root / item.image_path))

    def load_label(self, item: ManifestItem) -> np.ndarray:
        if not item.label_path:
            raise ValueError(f"item {item.image_path} has no label")
        return io.read_mask(self.root / item.label_path)

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "spec": self.spec,
            "items": [asdict(it) for it in self.items],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def save(self, path=None) -> Path:
        path = Path(path) if path else self.root / MANIFEST_NAME
        path.write_text(self.dumps())
        return path

    def validate(self) -> None:
        splits = {"train": set(), "test": set()}
        for it in self.items:
            if it.split not in splits:
                raise ValueError(f"unknown split {it.split!r} for {it.image_path}")
            splits[it.split].add(it.image_path)
            h, w = io.read_raw_meta(self.root / it.image_path)
            if self.spec and (h, w) != (self.spec.get("height", h), self.spec.get("width", w)):
                raise ValueError(f"{it.image_path}: shape {(h, w)} does not match manifest spec")
            if it.label_path and io.read_raw_meta(self.root / it.label_path) != (h, w):
                raise ValueError(f"{it.label_path}: shape does not match its image")
        if splits["train"] & splits["test"]:
            raise ValueError("train and test splits overlap")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        d = json.loads(path.read_text())
        if d.get("format_version") != MANIFEST_VERSION:
            raise ValueError(f"{path}: unsupported manifest version {d.get('format_version')!r}")
        items = [ManifestItem(**it) for it in d["items"]]
        manifest = cls(items=items, spec=d.get("spec", {}), root=path.parent)
        manifest.validate()
        return manifest


def _write_item(spec: PhantomSpec, index: int, out_dir: Path) -> tuple[str, str]:
    image, label = generate_phantom(spec.with_seed(spec.seed + index))
    img_rel = f"images/img_{index:05d}.f32"
    lbl_rel = f"labels/lbl_{index:05d}.f32"
    for rel, arr in ((img_rel, image), (lbl_rel, label)):
        try:
            io.write_raw(out_dir / rel, arr)
        except OSError as exc:
            raise OSError(f"failed writing {out_dir / rel}: {exc}") from exc
    return img_rel, lbl_rel


def generate_dataset(spec: PhantomSpec, n_train: int, n_test: int, out_dir, workers: int = 1) -> DatasetManifest:
    """Write ``n_train + n_test`` phantom pairs plus ``manifest.json`` under ``out_dir``.

    Item ``k`` uses seed ``spec.seed + k``; the first ``n_train`` items form the
    train split.  Output is identical for any ``workers`` count.
    """
    if n_train < 0 or n_test < 0:
        raise ValueError("item counts must be >= 0")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out_dir}: {exc}") from exc
    total = n_train + n_test
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            paths = list(pool.map(lambda k: _write_item(spec, k, out_dir), range(total)))
    else:
        paths = [_write_item(spec, k, out_dir) for k in range(total)]
    items = [
        ManifestItem(img, lbl, spec.seed + k, "train" if k < n_train else "test")
        for k, (img, lbl) in enumerate(paths)
    ]
    manifest = DatasetManifest(items=items, spec=spec.to_dict(), root=out_dir)
    try:
        manifest.save()
    except OSError as exc:
        raise OSError(f"failed writing {out_dir / MANIFEST_NAME}: {exc}") from exc
    return manifest
