"""DSC and timing harness plus qualitative galleries.

Standard deviations are population standard deviations (ddof=0) across
images; report headers say so.
"""
from __future__ import annotations

import csv
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np
import torch
from PIL import Image as PILImage

from . import levelset
from .core import dice, threshold
from .network import RCNN, as_batch
from .phantom import DatasetManifest

Predictor = Union[RCNN, Callable[[np.ndarray], np.ndarray]]
STD_NOTE = "mean ± population std (ddof=0) across images"


@dataclass
class DscSummary:
    mean: float
    std: float
    per_item: list[tuple[str, float]]

    @property
    def values(self) -> list[float]:
        return [v for _, v in self.per_item]

    @classmethod
    def from_items(cls, per_item: list[tuple[str, float]]) -> "DscSummary":
        vals = np.array([v for _, v in per_item], dtype=np.float64)
        return cls(mean=float(vals.mean()), std=float(vals.std()), per_item=list(per_item))


def predict_scores(net: RCNN, images, batch_size: int = 16) -> np.ndarray:
    """Eval-mode score fields for a stack of normalized images."""
    net.eval()
    images = np.asarray(images)
    out = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            out.append(net(as_batch(images[start:start + batch_size]))[:, 0].numpy())
    return np.concatenate(out).astype(np.float64)


def _scores_for(predictor: Predictor, images) -> np.ndarray:
    if isinstance(predictor, RCNN):
        return predict_scores(predictor, images)
    return np.stack([np.asarray(predictor(img), dtype=np.float64) for img in images])


def evaluate_dsc(predictor: Predictor, manifest: DatasetManifest, split: str = "test") -> DscSummary:
    """Per-image DSC of ``threshold(predictor(image))`` against the ground truth."""
    items = manifest.split(split)
    if not items:
        raise ValueError(f"split {split!r} is empty")
    if not manifest.has_labels(split):
        raise ValueError(f"split {split!r} has items without labels")
    images = np.stack([manifest.load_image(it) for it in items])
    scores = _scores_for(predictor, images)
    per_item = [
        (it.image_path, dice(threshold(s), manifest.load_label(it))) for it, s in zip(items, scores)
    ]
    return DscSummary.from_items(per_item)


def evaluate_levelset(manifest: DatasetManifest, split: str, params: levelset.LevelSetParams):
    """Run the level-set baseline over a split; returns (summary or None, per-image records)."""
    items = manifest.split(split)
    if not items:
        raise ValueError(f"split {split!r} is empty")
    labelled = manifest.has_labels(split)
    records, per_item = [], []
    for it in items:
        result = levelset.run(manifest.load_image(it), params)
        dsc = dice(result.mask, manifest.load_label(it)) if labelled else None
        records.append({"image": it.image_path, **result.record(dsc)})
        if dsc is not None:
            per_item.append((it.image_path, dsc))
    return (DscSummary.from_items(per_item) if per_item else None), records


@dataclass
class MethodTiming:
    mean: float
    std: float
    samples: list[float]


@dataclass
class TimingTable:
    network: MethodTiming
    levelset: MethodTiming
    n_images: int
    repeats: int
    warnings: list[str] = field(default_factory=list)

    @property
    def ratio(self) -> float:
        return self.levelset.mean / self.network.mean


def _timing(samples: list[float], repeats: int) -> MethodTiming:
    arr = np.asarray(samples)
    std = float(arr.std()) if repeats > 1 else 0.0
    return MethodTiming(mean=float(arr.mean()), std=std, samples=list(samples))


def benchmark_timing(
    net: RCNN,
    manifest: DatasetManifest,
    ls_params: Optional[levelset.LevelSetParams] = None,
    repeats: int = 5,
    split: str = "test",
    max_images: Optional[int] = None,
) -> TimingTable:
    """Wall time per image for network inference (+threshold) and for the level-set solver.

    Images are loaded before timing; one untimed warm-up pass per method runs
    first.  With ``repeats < 2`` the std is reported as 0.
    """
    ls_params = ls_params or levelset.LevelSetParams()
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    items = manifest.split(split)[:max_images]
    if len(items) < 10:
        raise ValueError(f"timing needs at least 10 images, split {split!r} has {len(items)}")
    images = [manifest.load_image(it) for it in items]
    batches = [as_batch(img) for img in images]
    net.eval()

    def run_net(batch):
        with torch.no_grad():
            return threshold(net(batch)[0, 0].numpy())

    run_net(batches[0])
    levelset.run(images[0], ls_params)

    net_t, ls_t = [], []
    for _ in range(repeats):
        for img, batch in zip(images, batches):
            t0 = time.perf_counter()
            run_net(batch)
            net_t.append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            levelset.run(img, ls_params)
            ls_t.append(time.perf_counter() - t0)
    notes = []
    if repeats < 2:
        notes.append(f"low sample count: repeats={repeats}, std not estimated")
        warnings.warn(notes[-1], RuntimeWarning, stacklevel=2)
    return TimingTable(_timing(net_t, repeats), _timing(ls_t, repeats), len(items), repeats, notes)


# -- reports -------------------------------------------------------------------


def write_dsc_csv(summary: DscSummary, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image", "dsc"])
        for name, v in summary.per_item:
            w.writerow([name, f"{v:.6f}"])
        w.writerow(["mean", f"{summary.mean:.6f}"])
        w.writerow(["std", f"{summary.std:.6f}"])
    return path


def dsc_markdown(results: dict[str, DscSummary]) -> str:
    """One-row table with a column per method, like the DSC comparison table."""
    names = list(results)
    cells = [f"{results[n].mean:.3f}±{results[n].std:.3f}" for n in names]
    return "\n".join([
        f"<!-- {STD_NOTE} -->",
        "| | " + " | ".join(names) + " |",
        "|---|" + "---|" * len(names),
        "| DSC | " + " | ".join(cells) + " |",
        "",
    ])


def write_timing_csv(table: TimingTable, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "mean_s", "std_s", "samples", "ratio"])
        w.writerow(["network", f"{table.network.mean:.6g}", f"{table.network.std:.6g}", len(table.network.samples), "1"])
        w.writerow(["levelset", f"{table.levelset.mean:.6g}", f"{table.levelset.std:.6g}",
                    len(table.levelset.samples), f"{table.ratio:.3f}"])
    return path


def timing_markdown(table: TimingTable) -> str:
    lines = [
        f"<!-- {STD_NOTE}; {table.n_images} images x {table.repeats} repeats, warm-up excluded -->",
        "| | Network | Level Set ACWE | Ratio |",
        "|---|---|---|---|",
        f"| Time (s) | {table.network.mean:.4f}±{table.network.std:.4f} | "
        f"{table.levelset.mean:.4f}±{table.levelset.std:.4f} | {table.ratio:.1f}x |",
    ]
    lines += [f"<!-- warning: {w} -->" for w in table.warnings]
    return "\n".join(lines) + "\n"


# -- galleries -----------------------------------------------------------------


def _gray_rgb(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    lo, hi = img.min(), img.max()
    scaled = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    gray = (scaled * 255.0).round().astype(np.uint8)
    return np.repeat(gray[..., None], 3, axis=2)


def _overlay(base: np.ndarray, mask, color) -> np.ndarray:
    out = base.astype(np.float64)
    m = np.asarray(mask).astype(bool)
    out[m] = 0.5 * out[m] + 0.5 * np.asarray(color, dtype=np.float64)
    return out.round().astype(np.uint8)


def render_gallery(images, predictions, labels=None, out_dir=".", fmt: str = "png") -> list[Path]:
    """Write one side-by-side panel per case: input | prediction overlay | ground-truth overlay."""
    if len(images) != len(predictions) or (labels is not None and len(labels) != len(images)):
        raise ValueError("images, predictions and labels must be aligned")
    if fmt not in ("png", "ppm"):
        raise ValueError("fmt must be 'png' or 'ppm'")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out_dir}: {exc}") from exc
    width = len(str(max(len(images) - 1, 0)))
    width = max(width, 3)
    paths = []
    for k, (img, pred) in enumerate(zip(images, predictions)):
        base = _gray_rgb(img)
        sep = np.full((base.shape[0], 2, 3), 255, dtype=np.uint8)
        panels = [base, sep, _overlay(base, pred, (255, 0, 0))]
        if labels is not None:
            panels += [sep, _overlay(base, labels[k], (0, 255, 0))]
        path = out_dir / f"case_{k:0{width}d}.{fmt}"
        try:
            PILImage.fromarray(np.concatenate(panels, axis=1)).save(path)
        except OSError as exc:
            raise OSError(f"failed writing {path}: {exc}") from exc
        paths.append(path)
    return paths
