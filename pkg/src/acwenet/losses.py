"""Chan-Vese (ACWE) loss on a score field, the label loss, and their combination.

All functions take a single 2D score field and return the loss value together
with its exact gradient with respect to the scores, in float64.

The hard indicator ``score > 0`` is relaxed to ``s = sigmoid(beta * score)``.
The region means c1/c2 are the ``s``-weighted means and are held constant when
differentiating; since they minimize the fit terms for fixed ``s`` this is also
the full derivative of the loss value.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit

from .core import HyperParams, check_same_shape, region_means


@dataclass(frozen=True)
class LossReport:
    total: float
    acwe_term: float
    label_term: float
    area_term: float
    inside_residual: float
    outside_residual: float
    c1: float
    c2: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @staticmethod
    def mean(reports: list["LossReport"]) -> "LossReport":
        if not reports:
            raise ValueError("no reports to average")
        keys = LossReport.__dataclass_fields__
        return LossReport(**{k: float(np.mean([getattr(r, k) for r in reports])) for k in keys})


def _finite(name, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError(f"{name}: non-finite input")


def acwe_terms(score, image, hp: HyperParams):
    """Return ``(area, inside, outside, c1, c2, grad)`` of the relaxed ACWE loss."""
    f = np.asarray(score, dtype=np.float64)
    g = np.asarray(image, dtype=np.float64)
    check_same_shape(f, g, "score and image")
    _finite("acwe_loss", f, g)
    s = expit(hp.beta * f)
    stats = region_means(g, s)
    r_in = (g - stats.c1) ** 2
    r_out = (g - stats.c2) ** 2
    area = hp.nu * s.sum()
    inside = hp.lambda1 * (s * r_in).sum()
    outside = hp.lambda2 * ((1.0 - s) * r_out).sum()
    grad = hp.beta * s * (1.0 - s) * (hp.nu + hp.lambda1 * r_in - hp.lambda2 * r_out)
    return float(area), float(inside), float(outside), stats.c1, stats.c2, grad


def acwe_loss(score, image, hp: HyperParams) -> tuple[float, np.ndarray]:
    area, inside, outside, _, _, grad = acwe_terms(score, image, hp)
    return area + inside + outside, grad


def forward_diff(f):
    """Forward differences along x (columns) and y (rows), zero at the far edge."""
    dx = np.zeros_like(f)
    dy = np.zeros_like(f)
    dx[:, :-1] = f[:, 1:] - f[:, :-1]
    dy[:-1, :] = f[1:, :] - f[:-1, :]
    return dx, dy


def region_factor(label) -> np.ndarray:
    u = np.asarray(label, dtype=np.float64)
    return (1.0 - u) ** 2 - (0.0 - u) ** 2


def label_loss(score, label, hp: HyperParams) -> tuple[float, np.ndarray]:
    """Smoothed total variation of the scores plus the label-weighted score sum."""
    f = np.asarray(score, dtype=np.float64)
    u = np.asarray(label, dtype=np.float64)
    check_same_shape(f, u, "score and label")
    _finite("label_loss", f, u)
    dx, dy = forward_diff(f)
    mag = np.sqrt(dx * dx + dy * dy + hp.eps_tv)
    weight = region_factor(u)
    value = mag.sum() + (weight * f).sum()

    nx = dx / mag
    ny = dy / mag
    grad = weight - nx - ny
    grad[:, 1:] += nx[:, :-1]
    grad[1:, :] += ny[:-1, :]
    return float(value), grad


def loss_terms(score, image, label, hp: HyperParams):
    """Report plus the separate ACWE and label gradients (label gradient is None without a label)."""
    area, inside, outside, c1, c2, g_acwe = acwe_terms(score, image, hp)
    acwe = area + inside + outside
    if label is None:
        lab, g_label = 0.0, None
    else:
        lab, g_label = label_loss(score, label, hp)
    report = LossReport(
        total=acwe + hp.alpha * lab,
        acwe_term=acwe,
        label_term=lab,
        area_term=area,
        inside_residual=inside,
        outside_residual=outside,
        c1=c1,
        c2=c2,
    )
    return report, g_acwe, g_label


def combined_loss(score, image, label, hp: HyperParams) -> tuple[LossReport, np.ndarray]:
    """``acwe + alpha * label`` (ACWE alone when ``label`` is None) and its gradient."""
    report, g_acwe, g_label = loss_terms(score, image, label, hp)
    grad = g_acwe if g_label is None else g_acwe + hp.alpha * g_label
    return report, grad
