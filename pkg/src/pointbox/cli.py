"""Command-line entry point.

Subcommands: synth (build a synthetic dataset), train (fit the predictor),
genlabels (points -> pseudo boxes/masks), eval (score pseudo boxes, with an
optional lambda sweep), density (copy-paste density study) and gradcheck
(finite-difference verification of the loss gradients).

Configuration comes from an optional JSON file (--config) with flag
overrides winning; unknown config keys are rejected. Every command is
deterministic given --seed. Exit codes: 0 success, 2 usage/config error,
1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import core
from .core import ImageGrid, stream_rng, write_pgm
from .features import FilterBankSpec, extract_features
from .semantic import load_checkpoint, save_checkpoint
from .losses import (
    build_affinity,
    color_prior_loss,
    grad_check,
    negative_loss,
    positive_loss,
    total_loss,
)
from .instances import LabelGenConfig, likelihood_maps, generate_instance_labels
from .metrics import evaluate
from .scenes import SceneSpec, generate_scene, scene_to_annotations
from .studies import LAMBDA_GRID, density_study, lambda_sweep, write_study_csv
from .training import TrainConfig, TrainSample, TrainedModel, train, write_training_log
from .errors import ConfigError, PointboxError, ValidationError

__all__ = ["main"]


# ---------------------------------------------------------------------------
# Config loading
# ---------------------------------------------------------------------------

_SECTIONS = {
    "seed", "scene", "synth", "features", "train", "labeling", "density",
}
_SCENE_KEYS = {
    "height", "width", "categories", "shape_families", "scale_range",
    "min_gap", "background", "noise_sigma", "color_jitter", "clutter",
}
_SYNTH_KEYS = {"n_images", "single_object_fraction", "object_count"}
_FEATURE_KEYS = {"sigmas", "gradients", "color", "stride"}
_TRAIN_KEYS = {
    "epochs", "lr", "decay_epochs", "decay_factor", "gamma", "alpha2",
    "use_negative", "use_color", "sfg", "bank_mode", "momentum",
    "miou_subset", "affinity_threshold", "affinity_sigma",
}
_LABELING_KEYS = {"lambda", "tau", "connectivity"}
_DENSITY_KEYS = {"counts", "gaps", "seeds", "mode", "obj_size", "margin"}


def _check_keys(section: dict, allowed: set, where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys(cfg, _SECTIONS, "config")
    for key, allowed in (
        ("scene", _SCENE_KEYS), ("synth", _SYNTH_KEYS), ("features", _FEATURE_KEYS),
        ("train", _TRAIN_KEYS), ("labeling", _LABELING_KEYS), ("density", _DENSITY_KEYS),
    ):
        if key in cfg:
            _check_keys(cfg[key], allowed, f"config.{key}")
    return cfg


def _scene_spec(cfg: dict, seed: int, object_count: int) -> SceneSpec:
    section = dict(cfg.get("scene", {}))
    families = section.pop("shape_families", None)
    kwargs = {}
    for key in ("height", "width", "min_gap", "color_jitter", "clutter"):
        if key in section:
            kwargs[key] = int(section[key])
    if "categories" in section:
        kwargs["categories"] = tuple(int(c) for c in section["categories"])
    if "scale_range" in section:
        lo, hi = section["scale_range"]
        kwargs["scale_range"] = (int(lo), int(hi))
    if "background" in section:
        kwargs["background"] = str(section["background"])
    if "noise_sigma" in section:
        kwargs["noise_sigma"] = float(section["noise_sigma"])
    if families is not None:
        kwargs["shape_families"] = {int(k): str(v) for k, v in families.items()}
    else:
        cats = kwargs.get("categories", (1, 2))
        default_cycle = ("rect", "ellipse", "L")
        kwargs["shape_families"] = {
            c: default_cycle[i % len(default_cycle)] for i, c in enumerate(cats)
        }
        kwargs.setdefault("categories", cats)
    return SceneSpec(seed=seed, object_count=object_count, **kwargs)


def _feature_spec(cfg: dict) -> FilterBankSpec:
    section = cfg.get("features", {})
    return FilterBankSpec(
        gaussian_sigmas=tuple(float(s) for s in section.get("sigmas", (0.0, 2.0))),
        include_gradients=bool(section.get("gradients", True)),
        include_color=bool(section.get("color", True)),
        stride=int(section.get("stride", 1)),
    )


def _labeling_config(cfg: dict, args) -> LabelGenConfig:
    section = cfg.get("labeling", {})
    lam = section.get("lambda", 0.5)
    tau = section.get("tau", 0.5)
    conn = section.get("connectivity", 8)
    if getattr(args, "lam_override", None) is not None:
        lam = args.lam_override
    if getattr(args, "tau", None) is not None:
        tau = args.tau
    return LabelGenConfig(float(lam), float(tau), int(conn))


def _train_config(cfg: dict, args, seed: int) -> TrainConfig:
    section = dict(cfg.get("train", {}))
    kwargs = {}
    for key in ("lr", "decay_factor", "gamma", "alpha2", "momentum",
                "affinity_threshold", "affinity_sigma"):
        if key in section:
            kwargs[key] = float(section[key])
    for key in ("epochs", "miou_subset"):
        if key in section:
            kwargs[key] = int(section[key])
    for key in ("use_negative", "use_color", "sfg"):
        if key in section:
            kwargs[key] = bool(section[key])
    if "bank_mode" in section:
        kwargs["bank_mode"] = str(section["bank_mode"])
    if "decay_epochs" in section:
        kwargs["decay_epochs"] = tuple(int(e) for e in section["decay_epochs"])
    if getattr(args, "epochs", None) is not None:
        kwargs["epochs"] = args.epochs
    return TrainConfig(seed=seed, labeling=_labeling_config(cfg, args), **kwargs)


def _resolve_seed(cfg: dict, args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    return int(cfg.get("seed", 0))


# ---------------------------------------------------------------------------
# Dataset plumbing
# ---------------------------------------------------------------------------


def _load_dataset(dataset_dir) -> tuple[list, list[ImageGrid]]:
    root = Path(dataset_dir)
    ann_path = root / "annotations.json"
    if not ann_path.exists():
        raise ValidationError(f"no annotations.json under {root}")
    annotations = core.load_annotations(ann_path)
    images = []
    for ann in annotations:
        img = core.load_image(root / ann.file)
        if (img.height, img.width) != (ann.height, ann.width):
            raise ValidationError(
                f"{ann.file}: image is {img.width}x{img.height}, "
                f"annotations declare {ann.width}x{ann.height}"
            )
        images.append(img)
    return annotations, images


def _build_samples(annotations, images, feature_spec: FilterBankSpec) -> list[TrainSample]:
    samples = []
    for ann, img in zip(annotations, images):
        samples.append(
            TrainSample(
                image_id=ann.file,
                image=img,
                features=extract_features(img, feature_spec),
                points=ann.points,
                gt_boxes=ann.gt_boxes,
            )
        )
    return samples


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _load_config(args.config)
    seed = _resolve_seed(cfg, args)
    synth = cfg.get("synth", {})
    n_images = args.n_images if args.n_images is not None else int(synth.get("n_images", 20))
    single_fraction = float(synth.get("single_object_fraction", 0.25))
    count_spec = synth.get("object_count", [3, 7])

    out = Path(args.out)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}")

    rng = stream_rng(seed, "synth-plan")
    annotations = []
    for i in range(n_images):
        if isinstance(count_spec, (list, tuple)):
            count = int(rng.integers(int(count_spec[0]), int(count_spec[1]) + 1))
        else:
            count = int(count_spec)
        if rng.random() < single_fraction:
            count = 1
        spec = _scene_spec(cfg, stream_rng(seed, "scene", i).integers(2**31), count)
        scene = generate_scene(spec)
        rel = f"images/img_{i:05d}.ppm"
        core.save_image(out / rel, scene.image)
        annotations.append(scene_to_annotations(scene, rel))
    core.write_annotations(annotations, out / "annotations.json")
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump({"n_images": n_images, "seed": seed}, fh, indent=1)
        fh.write("\n")
    print(f"wrote {n_images} images under {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    seed = _resolve_seed(cfg, args)
    annotations, images = _load_dataset(args.dataset)
    if any(not ann.points for ann in annotations):
        raise ValidationError("every training image needs at least one point")
    feature_spec = _feature_spec(cfg)
    samples = _build_samples(annotations, images, feature_spec)
    config = _train_config(cfg, args, seed)
    result = train(samples, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.bin", result.model.agg, result.model.pred,
                    result.model.bank)
    write_training_log(result.log, out / "train_log.jsonl")
    print(f"checkpoint and log written under {out}")
    return 0


def _load_model(checkpoint, sfg: bool | None) -> TrainedModel:
    path = Path(checkpoint)
    if not path.exists():
        raise ValidationError(f"checkpoint not found: {path}")
    agg, pred, bank = load_checkpoint(path)
    if sfg is None:
        sfg = bool(bank.counts.sum() > 0)
    return TrainedModel(agg, pred, bank, sfg)


def cmd_genlabels(args) -> int:
    cfg = _load_config(args.config)
    model = _load_model(args.checkpoint, False if args.plain else None)
    annotations, images = _load_dataset(args.dataset)
    feature_spec = _feature_spec(cfg)
    labeling = _labeling_config(cfg, args)
    from .training import predict_scores

    pseudo = []
    heat_dir = Path(args.heatmap_dir) if args.heatmaps else None
    if heat_dir is not None:
        heat_dir.mkdir(parents=True, exist_ok=True)
    for ann, img in zip(annotations, images):
        features = extract_features(img, feature_spec)
        sem = predict_scores(model, features)
        result = generate_instance_labels(img, sem, ann.points, labeling)
        pseudo.append([
            (inst.box, core.rle_encode(inst.mask), inst.degenerate)
            for inst in result.instances
        ])
        if heat_dir is not None:
            stem = Path(ann.file).stem
            for cm, pmap in zip(result.cost_maps, likelihood_maps(result.cost_maps)):
                write_pgm(heat_dir / f"{stem}_inst{cm.instance_id}_pmap.pgm",
                          np.rint(255.0 * pmap).astype(np.uint8))
            sem_full = sem.scores
            for c in range(sem_full.shape[2]):
                write_pgm(heat_dir / f"{stem}_cat{c + 1}_sem.pgm",
                          np.rint(255.0 * sem_full[..., c]).astype(np.uint8))
            labels = result.assignment.labels
            if labels.max(initial=0) > 255:
                raise ValidationError("more than 255 instances; PGM export unsupported")
            write_pgm(heat_dir / f"{stem}_assign.pgm", labels.astype(np.uint8))
    core.write_annotations(annotations, args.out, pseudo=pseudo)
    n_boxes = sum(len(p) for p in pseudo)
    print(f"wrote {n_boxes} pseudo boxes to {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    if args.lambda_sweep:
        return _eval_sweep(cfg, args)
    if not args.pseudo:
        raise ConfigError("eval needs --pseudo (or --lambda-sweep)")
    annotations, pseudo = core.load_pseudo_labels(args.pseudo)
    if args.annotations:
        gt_source = core.load_annotations(args.annotations)
    else:
        gt_source = annotations
    if any(ann.gt_boxes is None for ann in gt_source):
        raise ValidationError("ground-truth boxes missing from the annotations")
    report = evaluate(pseudo, [list(ann.gt_boxes) for ann in gt_source])
    payload = json.dumps(report.to_json(), indent=1)
    if args.out:
        Path(args.out).write_text(payload + "\n", encoding="utf-8")
    print(payload)
    return 0


def _eval_sweep(cfg: dict, args) -> int:
    if not args.checkpoint or not args.dataset:
        raise ConfigError("--lambda-sweep needs --checkpoint and --dataset")
    model = _load_model(args.checkpoint, False if args.plain else None)
    annotations, images = _load_dataset(args.dataset)
    if any(ann.gt_boxes is None for ann in annotations):
        raise ValidationError("ground-truth boxes missing from the annotations")
    feature_spec = _feature_spec(cfg)
    labeling = _labeling_config(cfg, args)

    # reuse the study helper by presenting the dataset as scene-like records
    from .scenes import Scene

    scenes = []
    for ann, img in zip(annotations, images):
        scenes.append(
            Scene(img, img.data, tuple(), tuple(ann.gt_boxes), tuple(ann.points))
        )
    rows = lambda_sweep(model, scenes, feature_spec, labeling, LAMBDA_GRID)
    fields = ("lambda", "miou", "miou_s", "miou_m", "miou_l")
    write_study_csv(rows, args.out, fields=fields)
    for row in rows:
        print(f"lambda={row['lambda']:<4} miou={row['miou']:.4f}")
    return 0


def cmd_density(args) -> int:
    cfg = _load_config(args.config)
    seed = _resolve_seed(cfg, args)
    model = _load_model(args.checkpoint, False if args.plain else None)
    section = cfg.get("density", {})
    counts = [int(c) for c in section.get("counts", (1, 2, 4, 8))]
    gaps = [int(g) for g in section.get("gaps", (2, 6))]
    seeds = [int(s) for s in section.get("seeds", (seed,))]
    mode = args.mode or str(section.get("mode", "dense"))
    obj_size = tuple(int(v) for v in section.get("obj_size", (12, 12)))
    margin = int(section.get("margin", 4))
    base_spec = _scene_spec(cfg, seed, 1)
    rows = density_study(
        model, base_spec, counts, gaps, seeds,
        _feature_spec(cfg), _labeling_config(cfg, args),
        mode=mode, obj_size=obj_size, margin=margin,
    )
    write_study_csv(rows, args.out)
    print(f"wrote {len(rows)} study rows to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    rng = stream_rng(seed, "gradcheck")
    worst = {"positive": 0.0, "negative": 0.0, "color_prior": 0.0, "total": 0.0}
    from .core import PointAnnotation

    for trial in range(args.trials):
        h, w, c = (int(rng.integers(2, 9)), int(rng.integers(2, 9)), int(rng.integers(1, 4)))
        scores = rng.uniform(0.05, 0.95, size=(h, w, c))
        n_pts = int(rng.integers(1, min(3, h * w) + 1))
        cells = rng.choice(h * w, size=n_pts, replace=False)
        points = [
            PointAnnotation(int(cell % w), int(cell // w), int(rng.integers(1, c + 1)), i + 1)
            for i, cell in enumerate(cells)
        ]
        noise = np.clip(rng.normal(120, 40, size=(h, w, 3)), 0, 255).astype(np.uint8)
        image = ImageGrid(noise)
        affinity = build_affinity(image)

        def wrap(fn):
            def inner(flat):
                value, grad = fn(flat.reshape(h, w, c))
                return value, grad.ravel()
            return inner

        checks = {
            "positive": wrap(lambda s: positive_loss(s, points)),
            "negative": wrap(lambda s: negative_loss(s, points)),
            "color_prior": wrap(lambda s: color_prior_loss(s, affinity)),
            "total": wrap(lambda s: _total_value_grad(s, points, affinity)),
        }
        for name, fn in checks.items():
            err = grad_check(fn, scores.ravel(), max_coords=12,
                             rng=stream_rng(seed, "coords", trial))
            worst[name] = max(worst[name], err)
    ok = all(v < args.tolerance for v in worst.values())
    for name, v in worst.items():
        print(f"{name:<12} max relative error {v:.3e}")
    print("OK" if ok else f"FAILED tolerance {args.tolerance}")
    return 0 if ok else 1


def _total_value_grad(scores, points, affinity):
    report, grad = total_loss(scores, points, affinity=affinity)
    return report.total, grad


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pointbox",
        description="Upgrade single-point object annotations into pseudo boxes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--seed", type=int, help="master random seed")
        p.add_argument("--jobs", type=int, default=1,
                       help="accepted for interface compatibility (runs single-threaded)")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--n-images", type=int, dest="n_images")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train the semantic predictor")
    common(p)
    p.add_argument("--dataset", required=True, help="dataset directory from synth")
    p.add_argument("--out", required=True, help="directory for checkpoint + log")
    p.add_argument("--epochs", type=int)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("genlabels", help="generate pseudo boxes and masks")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="pseudo-label JSON path")
    p.add_argument("--heatmaps", action="store_true", help="export PGM heatmaps")
    p.add_argument("--heatmap-dir", default="heatmaps")
    p.add_argument("--plain", action="store_true", help="ignore prototypes (ablation)")
    p.add_argument("--lambda", type=float, dest="lam_override")
    p.add_argument("--tau", type=float)
    p.set_defaults(fn=cmd_genlabels)

    p = sub.add_parser("eval", help="score pseudo boxes against ground truth")
    common(p)
    p.add_argument("--pseudo", help="pseudo-label JSON from genlabels")
    p.add_argument("--annotations", help="ground-truth annotations (defaults to --pseudo)")
    p.add_argument("--out", help="write the report/CSV here")
    p.add_argument("--lambda-sweep", action="store_true", dest="lambda_sweep",
                   help="regenerate labels over the lambda grid and emit a CSV")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--plain", action="store_true")
    p.add_argument("--tau", type=float)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("density", help="copy-paste density study")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--mode", choices=("dense", "control"))
    p.add_argument("--plain", action="store_true")
    p.add_argument("--lambda", type=float, dest="lam_override")
    p.add_argument("--tau", type=float)
    p.set_defaults(fn=cmd_density)

    p = sub.add_parser("gradcheck", help="verify loss gradients numerically")
    common(p)
    p.add_argument("--trials", type=int, default=25)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.jobs < 1:
            raise ConfigError(f"--jobs must be >= 1, got {args.jobs}")
        return args.fn(args)
    except (ConfigError, ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PointboxError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
