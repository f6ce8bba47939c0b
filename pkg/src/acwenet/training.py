"""Training modes.

* mode1 -- self-supervised: minimize the ACWE loss over all training images.
* mode2 / mode3 -- mode1, then fine-tune with the label loss on a labelled
  subset of 10 / 80 training images.
* mode4 -- minimize ACWE + alpha * label over all labelled training images,
  from scratch.

Gradients of the losses with respect to the score field come from
:mod:`acwenet.losses` in closed form and are pushed back through the network
with ``scores.backward(grad)``.

The ACWE loss cannot tell foreground from its complement except through the
small area term, so ACWE-only epochs end with an orientation check that
negates the score field when the thresholded inside covers more than half the
image (logged as an ``orientation_flip`` event).
"""
from __future__ import annotations

import json
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .core import HyperParams
from .evaluation import evaluate_dsc
from .losses import LossReport, loss_terms
from .network import RCNN, NetworkConfig, as_batch, init_params
from .phantom import DatasetManifest, ManifestItem

MODES = ("mode1", "mode2", "mode3", "mode4")
DEFAULT_BUDGETS = {"mode2": 10, "mode3": 80}


def parse_mode(mode) -> str:
    m = str(mode).lower()
    if m in ("1", "2", "3", "4"):
        m = "mode" + m
    if m not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES} or 1-4")
    return m


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "mode1"
    label_budget: Optional[int] = None  # None -> mode default (10 / 80 / all)
    epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 1e-3
    fine_tune_epochs: int = 10
    fine_tune_loss: str = "label"  # or "combined"
    seed: int = 0
    hp: HyperParams = field(default_factory=HyperParams)
    network: Optional[NetworkConfig] = None  # None -> NetworkConfig(seed=seed)
    validate: bool = True
    threads: Optional[int] = 1  # torch intra-op threads; 1 keeps runs reproducible

    def __post_init__(self):
        object.__setattr__(self, "mode", parse_mode(self.mode))
        if self.epochs < 0 or self.fine_tune_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.fine_tune_loss not in ("label", "combined"):
            raise ValueError("fine_tune_loss must be 'label' or 'combined'")
        default = DEFAULT_BUDGETS.get(self.mode)
        if self.label_budget is not None and self.label_budget < 1:
            raise ValueError("label_budget must be >= 1")
        if default is not None and self.label_budget not in (None, default):
            warnings.warn(
                f"{self.mode} normally uses {default} labels; overriding with {self.label_budget}",
                UserWarning,
                stacklevel=3,
            )

    @property
    def budget(self) -> Optional[int]:
        """Number of labels used; None means every training label (mode4) or none (mode1)."""
        if self.mode in DEFAULT_BUDGETS:
            return self.label_budget or DEFAULT_BUDGETS[self.mode]
        if self.mode == "mode4":
            return self.label_budget
        return None

    @property
    def network_config(self) -> NetworkConfig:
        return self.network or NetworkConfig(seed=self.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["network"] = self.network_config.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("hp"), dict):
            d["hp"] = HyperParams(**d["hp"])
        if isinstance(d.get("network"), dict):
            d["network"] = NetworkConfig(**d["network"])
        return cls(**d)


@dataclass
class TrainHistory:
    epochs: list[dict] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)
    checkpoint: Optional[str] = None

    def losses(self, key: str = "objective") -> list[float]:
        return [e.get(key, 0.0) for e in self.epochs]


def select_label_subset(manifest: DatasetManifest, budget: int, seed: int) -> list[ManifestItem]:
    """Seeded uniform sample without replacement from the train split.

    The order comes from one permutation per seed, so smaller budgets are
    prefixes of larger ones.
    """
    items = manifest.split("train")
    if budget > len(items):
        raise ValueError(f"label budget {budget} exceeds the {len(items)} training items")
    if budget < 0:
        raise ValueError("label budget must be >= 0")
    order = np.random.default_rng(seed).permutation(len(items))
    return [items[i] for i in order[:budget]]


class _Logger:
    def __init__(self, path):
        self.fh = open(path, "w") if path else None

    def write(self, record: dict) -> None:
        if self.fh:
            self.fh.write(json.dumps(record, sort_keys=True) + "\n")
            self.fh.flush()

    def close(self) -> None:
        if self.fh:
            self.fh.close()


def _load(manifest: DatasetManifest, items, with_labels: bool):
    images = np.stack([manifest.load_image(it) for it in items])
    labels = np.stack([manifest.load_label(it) for it in items]) if with_labels else None
    return images, labels


def _check_labels(manifest: DatasetManifest, config: TrainConfig) -> None:
    if config.mode == "mode1":
        return
    train_items = manifest.split("train")
    if config.mode == "mode4" and config.budget is None:
        needed = train_items
    else:
        needed = select_label_subset(manifest, config.budget, config.seed)
    missing = [it.image_path for it in needed if not it.label_path]
    if missing:
        raise ValueError(f"{config.mode} needs labels but {len(missing)} training item(s) lack them, e.g. {missing[0]}")


def _report_fields(report: LossReport, labelled: bool) -> dict:
    # unlabelled phases carry no label term at all rather than a placeholder 0
    d = report.to_dict()
    if not labelled:
        d.pop("label_term")
    return d


class _Trainer:
    def __init__(self, net: RCNN, config: TrainConfig, val, logger: _Logger, history: TrainHistory):
        self.net = net
        self.config = config
        self.val = val
        self.log = logger
        self.history = history
        self.rng = np.random.default_rng(config.seed)
        self.t0 = time.perf_counter()

    def phase(self, name: str, images, labels, objective: str, epochs: int) -> None:
        if epochs == 0 or len(images) == 0:
            return
        event = {"event": "phase", "phase": name, "objective": objective, "n_items": len(images),
                 "epoch": len(self.history.epochs)}
        self.history.events.append(event)
        self.log.write(event)
        opt = torch.optim.Adam(self.net.parameters(), lr=self.config.learning_rate, eps=1e-8)
        hp = self.config.hp
        bs = self.config.batch_size
        for phase_epoch in range(epochs):
            order = self.rng.permutation(len(images))
            reports, objectives = [], []
            positive = 0
            for step, start in enumerate(range(0, len(order), bs)):
                idx = order[start:start + bs]
                self.net.train()
                scores = self.net(as_batch(images[idx]))
                f = scores.detach()[:, 0].double().numpy()
                positive += int(np.count_nonzero(f > 0))
                grads = np.empty_like(f)
                batch_reports, batch_obj = [], []
                for b, k in enumerate(idx):
                    report, g_acwe, g_label = loss_terms(f[b], images[k], None if labels is None else labels[k], hp)
                    if objective == "acwe":
                        grads[b], obj = g_acwe, report.acwe_term
                    elif objective == "label":
                        grads[b], obj = g_label, report.label_term
                    else:
                        grads[b], obj = g_acwe + hp.alpha * g_label, report.total
                    batch_reports.append(report)
                    batch_obj.append(obj)
                grad = torch.from_numpy(grads / len(idx)).to(scores.dtype)[:, None]
                opt.zero_grad(set_to_none=True)
                scores.backward(grad)
                opt.step()
                self.log.write({"event": "step", "phase": name, "epoch": len(self.history.epochs), "step": step,
                                "objective": float(np.mean(batch_obj)),
                                **_report_fields(LossReport.mean(batch_reports), labels is not None)})
                reports.extend(batch_reports)
                objectives.extend(batch_obj)
            record = {
                "event": "epoch",
                "epoch": len(self.history.epochs),
                "phase": name,
                "phase_epoch": phase_epoch,
                "objective": float(np.mean(objectives)),
                **_report_fields(LossReport.mean(reports), labels is not None),
                "val_dsc": evaluate_dsc(self.net, *self.val).mean if self.val else None,
                "wall_time": time.perf_counter() - self.t0,
            }
            self.history.epochs.append(record)
            self.log.write(record)
            if objective == "acwe":
                self._orient(opt, positive / images.size)

    def _orient(self, opt, inside: float) -> None:
        """Negate the score field when that lowers the hard ACWE energy.

        The data terms of the energy are unchanged by f -> -f (inside and
        outside swap), so only the area term decides: flip when the
        thresholded inside region covers more than half of the pixels.
        Gradient descent cannot cross between the two orientations on its
        own.  The soft area is no guide here since it sits near one half in
        both orientations while scores are small.  Negating the last
        normalization's affine flips every score's sign because PReLU
        preserves sign for positive slopes.
        """
        hp = self.config.hp
        norm = self.net.layers[-1].norm
        if hp.nu <= 0 or inside <= 0.5 or (norm.slope <= 0).any():
            return
        with torch.no_grad():
            for p in (norm.weight, norm.bias):
                p.neg_()
                state = opt.state.get(p)
                if state and "exp_avg" in state:
                    state["exp_avg"].neg_()
        event = {"event": "orientation_flip", "epoch": len(self.history.epochs) - 1, "inside_fraction": inside}
        self.history.events.append(event)
        self.log.write(event)


def train(
    manifest: DatasetManifest,
    config: TrainConfig,
    pretrained: Optional[RCNN] = None,
    log_path=None,
) -> tuple[RCNN, TrainHistory]:
    """Train a network in one of the four modes.

    ``pretrained`` (modes 2 and 3) skips the self-supervised stage and
    fine-tunes a copy of the given mode1 network instead.
    """
    if config.threads:
        torch.set_num_threads(config.threads)
    train_items = manifest.split("train")
    _check_labels(manifest, config)
    val = (manifest, "test") if config.validate and manifest.has_labels("test") else None

    history = TrainHistory()
    logger = _Logger(log_path)
    try:
        if pretrained is not None:
            if config.mode not in DEFAULT_BUDGETS:
                raise ValueError("pretrained networks are only used by mode2/mode3")
            net = init_params(pretrained.config)
            net.load_state_dict(pretrained.state_dict())
        else:
            net = init_params(config.network_config)
        trainer = _Trainer(net, config, val, logger, history)

        if config.mode == "mode4":
            items = train_items if config.budget is None else select_label_subset(manifest, config.budget, config.seed)
            images, labels = _load(manifest, items, with_labels=True)
            trainer.phase("joint", images, labels, "combined", config.epochs)
        else:
            if pretrained is None:
                images, _ = _load(manifest, train_items, with_labels=False) if train_items else ([], None)
                trainer.phase("self-supervised", images, None, "acwe", config.epochs)
            if config.mode in DEFAULT_BUDGETS:
                subset = select_label_subset(manifest, config.budget, config.seed)
                images, labels = _load(manifest, subset, with_labels=True)
                objective = "label" if config.fine_tune_loss == "label" else "combined"
                trainer.phase("fine-tune", images, labels, objective, config.fine_tune_epochs)
    finally:
        logger.close()
    return net, history


def save_resolved_config(config: TrainConfig, out_dir, extra: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.resolved.json"
    payload = {"train": config.to_dict(), **(extra or {})}
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return path


def with_overrides(config: TrainConfig, **overrides) -> TrainConfig:
    """Copy of ``config`` with non-None keyword overrides applied."""
    clean = {k: v for k, v in overrides.items() if v is not None}
    return replace(config, **clean)
