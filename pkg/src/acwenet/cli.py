"""Command-line entry point: ``acwenet <command> [flags]``.

Commands: gen-data, train, segment, baseline, eval, bench.  Every command
accepts ``--config FILE`` (JSON) and ``--threads N``.  Config keys use the
flag names with dashes replaced by underscores, either at the top level or in
a section named after the command; explicit flags win over the file.  The
merged settings are written to ``config.resolved.json`` in each output
directory.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage

from . import evaluation, io, levelset
from .core import HyperParams, normalize, threshold
from .network import NetworkConfig, forward, load_checkpoint, save_checkpoint
from .phantom import DatasetManifest, PhantomSpec, generate_dataset
from .training import TrainConfig, train

# defaults shared by --help and the config merge
DEFAULTS = {
    "gen-data": {
        "n_train": 200, "n_test": 50, "size": 64, "noise_scale": 50.0, "blur_sigma": 1.0,
        "n_structures": 3, "seed": 0,
    },
    "train": {
        "mode": "1", "epochs": 20, "batch": 8, "lr": 1e-3, "alpha": 0.4, "nu": 0.004, "mu": 0.0,
        "lambda1": 1.0, "lambda2": 1.0, "beta": 1.0, "label_budget": None, "fine_tune_epochs": 10,
        "fine_tune_loss": "label", "channels": 32, "time_steps": 3, "seed": 0, "log": None,
        "pretrained": None, "no_validate": False,
    },
    "segment": {},
    "baseline": {
        "split": "test", "mu": 0.1, "nu": 0.0, "lambda1": 1.0, "lambda2": 1.0, "epsilon": 1.0,
        "dt": 2.0, "max_iters": 500, "tol": 1e-4, "init": "checkerboard",
    },
    "eval": {"split": "test", "gallery": 0},
    "bench": {
        "split": "test", "repeats": 5, "max_images": None, "mu": 0.1, "max_iters": 500, "dt": 2.0,
    },
}


class UsageError(Exception):
    pass


def _flag(parser, command, name, type=None, help="", **kw):
    dest = name.lstrip("-").replace("-", "_")
    default = DEFAULTS[command].get(dest)
    parser.add_argument(name, dest=dest, type=type, default=None, help=f"{help} (default: {default})", **kw)


def _common(parser):
    parser.add_argument("--config", type=Path, help="JSON file with default flag values")
    parser.add_argument("--threads", type=int, default=None, help="torch/numpy worker threads (default: 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="acwenet", description=__doc__.split("\n")[0])
    _common(parser)
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("gen-data", help="write a synthetic phantom dataset and manifest")
    _common(p)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    _flag(p, "gen-data", "--n-train", int, "training items")
    _flag(p, "gen-data", "--n-test", int, "test items")
    _flag(p, "gen-data", "--size", int, "image side in pixels")
    _flag(p, "gen-data", "--noise-scale", float, "Poisson scale; 0 disables noise")
    _flag(p, "gen-data", "--blur-sigma", float, "Gaussian blur sigma in pixels")
    _flag(p, "gen-data", "--n-structures", int, "shapes per phantom")
    _flag(p, "gen-data", "--seed", int, "seed of item 0; item k uses seed+k")

    p = sub.add_parser("train", help="train the recurrent network in one of four modes")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory or manifest.json")
    p.add_argument("--out-ckpt", type=Path, required=True, help="checkpoint path to write")
    _flag(p, "train", "--mode", str, "1 self-supervised, 2/3 fine-tuned on 10/80 labels, 4 joint",
          choices=["1", "2", "3", "4"])
    _flag(p, "train", "--epochs", int, "epochs of the main phase")
    _flag(p, "train", "--batch", int, "batch size")
    _flag(p, "train", "--lr", float, "Adam learning rate")
    _flag(p, "train", "--alpha", float, "weight of the label loss")
    _flag(p, "train", "--nu", float, "area penalty")
    _flag(p, "train", "--mu", float, "length penalty")
    _flag(p, "train", "--lambda1", float, "inside fit weight")
    _flag(p, "train", "--lambda2", float, "outside fit weight")
    _flag(p, "train", "--beta", float, "sigmoid sharpness of the soft mask")
    _flag(p, "train", "--label-budget", int, "labels for fine-tuning; mode default 10/80, all for mode 4")
    _flag(p, "train", "--fine-tune-epochs", int, "epochs of the fine-tune phase (modes 2, 3)")
    _flag(p, "train", "--fine-tune-loss", str, "fine-tune objective", choices=["label", "combined"])
    _flag(p, "train", "--channels", int, "feature channels")
    _flag(p, "train", "--time-steps", int, "recurrent iterations per layer")
    _flag(p, "train", "--seed", int, "seed for weights, shuffling and label subset")
    _flag(p, "train", "--log", Path, "JSON-lines log; defaults to <ckpt>.log.jsonl")
    _flag(p, "train", "--pretrained", Path, "mode-1 checkpoint to fine-tune (modes 2, 3)")
    p.add_argument("--no-validate", action="store_true", default=None,
                   help="skip per-epoch test DSC (default: False)")

    p = sub.add_parser("segment", help="segment one image with a trained network")
    _common(p)
    p.add_argument("--ckpt", type=Path, required=True, help="checkpoint file")
    p.add_argument("--image", type=Path, required=True, help="raw .f32 image with sidecar, or PGM/PNG")
    p.add_argument("--out-mask", required=True, help="mask path (.pgm, .png or raw .f32); '-' for PGM on stdout")

    p = sub.add_parser("baseline", help="run the level-set solver over a dataset split")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory or manifest.json")
    p.add_argument("--out", type=Path, required=True, help="report directory")
    _flag(p, "baseline", "--split", str, "manifest split")
    _flag(p, "baseline", "--mu", float, "length penalty")
    _flag(p, "baseline", "--nu", float, "area penalty")
    _flag(p, "baseline", "--lambda1", float, "inside fit weight")
    _flag(p, "baseline", "--lambda2", float, "outside fit weight")
    _flag(p, "baseline", "--epsilon", float, "Heaviside/Dirac width")
    _flag(p, "baseline", "--dt", float, "nominal time step")
    _flag(p, "baseline", "--max-iters", int, "iteration cap")
    _flag(p, "baseline", "--tol", float, "stop when mean |delta phi| falls below this")
    _flag(p, "baseline", "--init", str, "initial contour", choices=list(levelset.INIT_SCHEMES))

    p = sub.add_parser("eval", help="DSC report for a trained network")
    _common(p)
    p.add_argument("--ckpt", type=Path, required=True, help="checkpoint file")
    p.add_argument("--data", type=Path, required=True, help="dataset directory or manifest.json")
    p.add_argument("--out", type=Path, required=True, help="report directory")
    _flag(p, "eval", "--split", str, "manifest split")
    _flag(p, "eval", "--gallery", int, "number of overlay panels to render")

    p = sub.add_parser("bench", help="timing of network inference against the level-set solver")
    _common(p)
    p.add_argument("--ckpt", type=Path, required=True, help="checkpoint file")
    p.add_argument("--data", type=Path, required=True, help="dataset directory or manifest.json")
    p.add_argument("--out", type=Path, required=True, help="report directory")
    _flag(p, "bench", "--split", str, "manifest split")
    _flag(p, "bench", "--repeats", int, "timed passes over the images")
    _flag(p, "bench", "--max-images", int, "cap on images timed")
    _flag(p, "bench", "--mu", float, "level-set length penalty")
    _flag(p, "bench", "--max-iters", int, "level-set iteration cap")
    _flag(p, "bench", "--dt", float, "level-set nominal time step")
    return parser


def resolve(args) -> dict:
    """Merge defaults < config file < explicit flags."""
    command = args.command
    file_cfg = {}
    if args.config is not None:
        try:
            raw = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(raw, dict):
            raise UsageError(f"config {args.config} must hold a JSON object")
        section = raw.get(command, {})
        file_cfg = {k: v for k, v in raw.items() if not isinstance(v, dict)}
        file_cfg.update(section)
    known = set(DEFAULTS[command]) | {"threads"}
    unknown = set(file_cfg) - known
    if unknown:
        raise UsageError(f"unknown config key(s) for {command}: {', '.join(sorted(unknown))}")
    merged = {"threads": 1, **DEFAULTS[command], **file_cfg}
    for key, value in vars(args).items():
        if key in ("command", "config", "func"):
            continue
        if value is not None:
            merged[key] = value
    return merged


def _write_resolved(out_dir: Path, command: str, cfg: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, **{k: (str(v) if isinstance(v, Path) else v) for k, v in cfg.items()}}
    (out_dir / "config.resolved.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _require_positive(cfg, *keys):
    for key in keys:
        if cfg[key] is not None and cfg[key] < 1:
            raise UsageError(f"--{key.replace('_', '-')} must be >= 1")


# -- commands ------------------------------------------------------------------


def cmd_gen_data(cfg: dict) -> int:
    _require_positive(cfg, "size")
    if cfg["n_train"] < 0 or cfg["n_test"] < 0:
        raise UsageError("--n-train and --n-test must be >= 0")
    noise = cfg["noise_scale"]
    try:
        spec = PhantomSpec(
            height=cfg["size"], width=cfg["size"], n_structures=cfg["n_structures"],
            blur_sigma=cfg["blur_sigma"], noise_scale=noise if noise else None, seed=cfg["seed"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    manifest = generate_dataset(spec, cfg["n_train"], cfg["n_test"], cfg["out"], workers=cfg["threads"])
    _write_resolved(Path(cfg["out"]), "gen-data", cfg)
    print(f"wrote {len(manifest.items)} items to {cfg['out']}")
    return 0


def _train_config(cfg: dict) -> TrainConfig:
    hp = HyperParams(mu=cfg["mu"], nu=cfg["nu"], lambda1=cfg["lambda1"], lambda2=cfg["lambda2"],
                     alpha=cfg["alpha"], beta=cfg["beta"])
    net_cfg = NetworkConfig(feature_channels=cfg["channels"], time_steps=cfg["time_steps"], seed=cfg["seed"])
    return TrainConfig(
        mode=cfg["mode"], label_budget=cfg["label_budget"], epochs=cfg["epochs"], batch_size=cfg["batch"],
        learning_rate=cfg["lr"], fine_tune_epochs=cfg["fine_tune_epochs"], fine_tune_loss=cfg["fine_tune_loss"],
        seed=cfg["seed"], hp=hp, network=net_cfg, validate=not cfg["no_validate"], threads=cfg["threads"],
    )


def cmd_train(cfg: dict) -> int:
    try:
        config = _train_config(cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    manifest = DatasetManifest.load(cfg["data"])
    pretrained = load_checkpoint(cfg["pretrained"]) if cfg["pretrained"] else None
    ckpt = Path(cfg["out_ckpt"])
    log = Path(cfg["log"]) if cfg["log"] else ckpt.with_suffix(".log.jsonl")
    cfg["log"] = log
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    log.parent.mkdir(parents=True, exist_ok=True)
    net, history = train(manifest, config, pretrained=pretrained, log_path=log)
    save_checkpoint(net, ckpt, extra={"train": config.to_dict()})
    _write_resolved(ckpt.parent, "train", {**cfg, "resolved_train_config": config.to_dict()})
    last = history.epochs[-1] if history.epochs else {}
    print(f"wrote {ckpt} after {len(history.epochs)} epoch(s); final objective {last.get('objective', float('nan')):.6g}")
    return 0


def _read_image(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".f32":
        return io.read_raw(path)
    with PILImage.open(path) as im:
        return np.asarray(im.convert("F"), dtype=np.float64)


def _write_mask(target: str, mask: np.ndarray) -> None:
    suffix = Path(target).suffix.lower()
    if target == "-" or suffix == ".pgm":
        io.write_pgm(target, mask)
    elif suffix in (".png", ".bmp", ".tif", ".tiff"):
        Path(target).parent.mkdir(parents=True, exist_ok=True)
        PILImage.fromarray((mask * 255).astype(np.uint8)).save(target)
    else:
        io.write_raw(target, mask.astype(np.float32))


def cmd_segment(cfg: dict) -> int:
    net = load_checkpoint(cfg["ckpt"])
    image = normalize(_read_image(Path(cfg["image"])))
    mask = threshold(forward(net, image[None])[0])
    _write_mask(cfg["out_mask"], mask)
    if cfg["out_mask"] != "-":
        _write_resolved(Path(cfg["out_mask"]).parent, "segment", cfg)
    return 0


def _ls_params(cfg: dict) -> levelset.LevelSetParams:
    keys = {"mu": "mu", "nu": "nu", "lambda1": "lambda1", "lambda2": "lambda2", "epsilon": "epsilon",
            "dt": "dt", "max_iters": "max_iters", "tol": "tol", "init": "init_scheme"}
    try:
        return levelset.LevelSetParams(**{v: cfg[k] for k, v in keys.items() if k in cfg})
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_baseline(cfg: dict) -> int:
    params = _ls_params(cfg)
    manifest = DatasetManifest.load(cfg["data"])
    summary, records = evaluation.evaluate_levelset(manifest, cfg["split"], params)
    out = Path(cfg["out"])
    _write_resolved(out, "baseline", cfg)
    with open(out / "baseline.jsonl", "w") as fh:
        for rec in records:
            line = json.dumps(rec, sort_keys=True)
            fh.write(line + "\n")
            print(line)
    if summary is not None:
        evaluation.write_dsc_csv(summary, out / "dsc.csv")
        (out / "dsc.md").write_text(evaluation.dsc_markdown({"Level Set ACWE": summary}))
    return 0


def cmd_eval(cfg: dict) -> int:
    net = load_checkpoint(cfg["ckpt"])
    manifest = DatasetManifest.load(cfg["data"])
    summary = evaluation.evaluate_dsc(net, manifest, cfg["split"])
    out = Path(cfg["out"])
    _write_resolved(out, "eval", cfg)
    evaluation.write_dsc_csv(summary, out / "dsc.csv")
    (out / "dsc.md").write_text(evaluation.dsc_markdown({Path(cfg["ckpt"]).stem: summary}))
    if cfg["gallery"]:
        items = manifest.split(cfg["split"])[: cfg["gallery"]]
        images = np.stack([manifest.load_image(it) for it in items])
        preds = [threshold(s) for s in evaluation.predict_scores(net, images)]
        labels = [manifest.load_label(it) for it in items]
        evaluation.render_gallery(images, preds, labels, out / "gallery")
    print(f"DSC {summary.mean:.4f} ± {summary.std:.4f} over {len(summary.per_item)} images")
    return 0


def cmd_bench(cfg: dict) -> int:
    _require_positive(cfg, "repeats", "max_images")
    net = load_checkpoint(cfg["ckpt"])
    manifest = DatasetManifest.load(cfg["data"])
    params = _ls_params(cfg)
    table = evaluation.benchmark_timing(net, manifest, params, repeats=cfg["repeats"], split=cfg["split"],
                                        max_images=cfg["max_images"])
    out = Path(cfg["out"])
    _write_resolved(out, "bench", cfg)
    evaluation.write_timing_csv(table, out / "timing.csv")
    text = evaluation.timing_markdown(table)
    (out / "timing.md").write_text(text)
    print(text, end="")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "segment": cmd_segment,
    "baseline": cmd_baseline,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve(args)
        if cfg["threads"] < 1:
            raise UsageError("--threads must be >= 1")
        torch.set_num_threads(cfg["threads"])
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"acwenet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"acwenet {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
