"""Command-line pipeline: gen, train, infer, eval, tree-fit, ablate, count.

Every run writes its artifacts plus a JSON report embedding the verbatim
config text, the seed, and sha256 hashes of the artifacts, so identical
inputs are checkable for byte-identical outputs.  Exit codes: 0 success,
1 usage/config error, 2 data error.  LGSEG_THREADS caps worker fan-out for
per-tile inference (absent means 1, the deterministic single-thread default;
results are byte-identical for any worker count).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import counting, evaluation, raster, tree
from .config import ConfigError, RunConfig, default_config, parse_config
from .engine import load_checkpoint, save_checkpoint
from .network import Blank, LgSegModel, build_model, train
from .raster import DataError
from .rng import SplitMix64
from .sampling import (grid_centers, image_window, make_triplet, stitch,
                       valid_center_range)
from .synth import synth_scene


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_report(out_dir: Path, command: str, cfg: RunConfig, seed,
                  artifacts, extras=None) -> Path:
    report = {
        "command": command,
        "seed": seed,
        "config": cfg.raw_text,
        "artifacts": {p.name: _sha256(p) for p in artifacts},
    }
    if extras:
        report.update(extras)
    path = out_dir / f"{command.replace('-', '_')}_run.json"
    path.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    return path


def _worker_count() -> int:
    raw = os.environ.get("LGSEG_THREADS")
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"LGSEG_THREADS must be a positive integer, got '{raw}'") from None
    if n < 1:
        raise ConfigError(f"LGSEG_THREADS must be a positive integer, got '{raw}'")
    return n


def _parallel_map(fn, items):
    workers = _worker_count()
    if workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _load_model(cfg: RunConfig, checkpoint_path) -> LgSegModel:
    local_spec, global_spec, hidden = cfg.model_specs()
    model = build_model(local_spec, global_spec, hidden, seed=cfg.get("model", "init_seed"))
    tensors = load_checkpoint(checkpoint_path)
    try:
        model.load_params(tensors)
    except ValueError as exc:
        raise DataError(f"{checkpoint_path}: {exc}") from None
    return model


def _read_prob(path: Path) -> np.ndarray:
    if path.suffix == ".lgprob":
        return raster.read_prob_sidecar(path)
    return raster.raster_to_prob(raster.read_raster(path))


def _scene_pairs(data_dir: Path):
    scenes = sorted(data_dir.glob("scene_*.ppm"))
    if not scenes:
        raise DataError(f"{data_dir}: no scene_*.ppm files found")
    pairs = []
    for scene_path in scenes:
        label_path = data_dir / scene_path.name.replace("scene_", "labels_").replace(".ppm", ".pgm")
        if not label_path.exists():
            raise DataError(f"{label_path}: missing label map for {scene_path.name}")
        pairs.append((scene_path, label_path))
    return pairs


def _balanced_centers(labels, count: int, positive_fraction: float, rng: SplitMix64):
    """Training centres: a seeded mix of house-pixel-anchored and uniform draws."""
    rmin, rmax, cmin, cmax = valid_center_range(labels.height, labels.width)
    positives = np.argwhere(labels.labels == 1)
    n_pos = int(round(positive_fraction * count)) if len(positives) else 0
    centers = []
    for i in range(count):
        if i < n_pos:
            r, c = positives[rng.below(len(positives))]
            centers.append((min(max(int(r), rmin), rmax), min(max(int(c), cmin), cmax)))
        else:
            centers.append((rng.int_range(rmin, rmax), rng.int_range(cmin, cmax)))
    return centers


def _infer_map(model: LgSegModel, img: raster.Raster, blank: Blank = Blank.NONE) -> np.ndarray:
    shape = (img.height, img.width)
    centers = grid_centers(shape)

    def predict(center):
        local = image_window(img.pixels, center, 64) if model.local_spec is not None else None
        global_ = image_window(img.pixels, center, 256) if model.global_spec is not None else None
        if blank is Blank.NONE:
            return model.forward(local, global_)
        return model.ablate(local, global_, blank)

    patches = _parallel_map(predict, centers)
    return stitch(centers, patches, shape)


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = SplitMix64(args.seed)
    artifacts = []
    for i in range(cfg.get("scene", "count")):
        spec = cfg.scene_spec(seed=rng.next_u64())
        img, labels, boxes = synth_scene(spec)
        scene_path = out / f"scene_{i:03d}.ppm"
        label_path = out / f"labels_{i:03d}.pgm"
        boxes_path = out / f"boxes_{i:03d}.csv"
        raster.write_raster(img, scene_path)
        raster.write_label(labels, label_path)
        counting.write_boxes_csv(boxes, boxes_path)
        artifacts += [scene_path, label_path, boxes_path]
    _write_report(out, "gen", cfg, args.seed, artifacts)
    return 0


def _cmd_train(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pairs = _scene_pairs(Path(args.data))
    per_scene = cfg.get("train", "samples_per_scene")
    positive_fraction = cfg.get("train", "positive_fraction")
    use_grid = cfg.get("train", "sampler") == "grid"
    sampler = SplitMix64(cfg.get("train", "seed"))
    triplets = []
    for scene_path, label_path in pairs:
        img = raster.read_raster(scene_path)
        labels = raster.read_label(label_path)
        if (img.width, img.height) != (labels.width, labels.height):
            raise DataError(f"{label_path}: extents do not match {scene_path.name}")
        rng = sampler.split()
        if use_grid:
            centers = grid_centers((labels.height, labels.width))
        else:
            centers = _balanced_centers(labels, per_scene, positive_fraction, rng)
        for center in centers:
            triplets.append(make_triplet(img, labels, center))

    local_spec, global_spec, hidden = cfg.model_specs()
    model = build_model(local_spec, global_spec, hidden, seed=cfg.get("model", "init_seed"))
    t0 = time.perf_counter()
    report = train(model, triplets, cfg.train_config(epochs=args.epochs))
    print(f"trained {len(report.epoch_losses)} epochs on {len(triplets)} triplets "
          f"in {time.perf_counter() - t0:.1f}s; final mean per-pixel loss "
          f"{report.epoch_losses[-1]:.5f}", file=sys.stderr)

    ckpt_path = out / "model.ckpt"
    save_checkpoint(ckpt_path, model.params)
    _write_report(out, "train", cfg, cfg.get("train", "seed"), [ckpt_path],
                  extras={"epoch_losses": report.epoch_losses,
                          "triplets": len(triplets)})
    return 0


def _cmd_infer(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = _load_model(cfg, args.model)
    img = raster.read_raster(args.image)
    prob = _infer_map(model, img)
    base = args.name or Path(args.image).stem
    pgm_path = out / f"{base}_prob.pgm"
    raster.write_raster(raster.prob_to_raster(prob), pgm_path)
    artifacts = [pgm_path]
    if args.sidecar:
        sidecar_path = out / f"{base}_prob.lgprob"
        raster.write_prob_sidecar(prob, sidecar_path)
        artifacts.append(sidecar_path)
    _write_report(out, "infer", cfg, cfg.get("model", "init_seed"), artifacts,
                  extras={"image": Path(args.image).name})
    return 0


def _cmd_eval(args, cfg: RunConfig) -> int:
    if len(args.pred) != len(args.gt):
        raise ConfigError(f"{len(args.pred)} predictions but {len(args.gt)} ground truths")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    probs = [_read_prob(Path(p)) for p in args.pred]
    gts = [raster.read_label(p).labels for p in args.gt]
    rho = cfg.get("eval", "rho")
    curve = evaluation.set_curve(probs, gts, rho, thresholds=cfg.eval_thresholds(),
                                 aggregate=cfg.get("eval", "aggregate"))
    best_t, best_f = evaluation.max_f(curve)
    csv_path = out / "pr_curve.csv"
    evaluation.write_pr_csv(curve, csv_path)
    maxf_path = out / "max_f.json"
    maxf_path.write_text(json.dumps({"threshold": best_t, "f": best_f, "rho": rho,
                                     "aggregate": cfg.get("eval", "aggregate"),
                                     "images": len(probs)},
                                    sort_keys=True, indent=2) + "\n")
    _write_report(out, "eval", cfg, None, [csv_path, maxf_path])
    return 0


def _cmd_tree_fit(args, cfg: RunConfig) -> int:
    if not (len(args.image) == len(args.prob) == len(args.gt)):
        raise ConfigError("tree-fit needs equally many --image, --prob, and --gt")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = _load_model(cfg, args.model)
    validation = []
    for image_path, prob_path, gt_path in zip(args.image, args.prob, args.gt):
        img = raster.read_raster(image_path)
        ra = tree.ra_scores_from_model(model, img)
        prob = _read_prob(Path(prob_path))
        if prob.shape != (img.height, img.width):
            raise DataError(f"{prob_path}: extents do not match {Path(image_path).name}")
        validation.append((tree.TreeInput(ra, prob), raster.read_label(gt_path)))
    result = tree.fit_thresholds(
        validation,
        rho=cfg.get("eval", "rho"),
        min_houses=cfg.get("tree", "min_houses"),
        step=cfg.get("tree", "grid_step"),
        tol=cfg.get("tree", "tol"),
        max_cycles=cfg.get("tree", "max_cycles"),
    )
    tree_path = out / "tree.json"
    tree_path.write_text(json.dumps({
        "t1": result.thresholds.t1, "t2": result.thresholds.t2, "t3": result.thresholds.t3,
        "f_trace": result.trace, "leaf_order_ok": result.leaf_order_ok,
    }, sort_keys=True, indent=2) + "\n")
    _write_report(out, "tree-fit", cfg, None, [tree_path])
    return 0


def _cmd_ablate(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = _load_model(cfg, args.model)
    if not model.is_dual():
        raise ConfigError("ablate requires a dual-pathway model")
    img = raster.read_raster(args.image)
    base = args.name or Path(args.image).stem
    artifacts = []
    # local_only: the local pathway sees real data (global blanked), and so on
    for tag, blank in (("full", Blank.NONE), ("local_only", Blank.GLOBAL),
                       ("global_only", Blank.LOCAL)):
        prob = _infer_map(model, img, blank)
        pgm_path = out / f"{base}_{tag}.pgm"
        raster.write_raster(raster.prob_to_raster(prob), pgm_path)
        sidecar_path = out / f"{base}_{tag}.lgprob"
        raster.write_prob_sidecar(prob, sidecar_path)
        artifacts += [pgm_path, sidecar_path]
    _write_report(out, "ablate", cfg, None, artifacts, extras={"image": Path(args.image).name})
    return 0


def _cmd_count(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.tallies:
        with open(args.tallies) as fh:
            tallies = json.load(fh)
        try:
            tp, fp = int(tallies["tp"]), int(tallies["fp"])
            fn, residential = int(tallies["fn"]), int(tallies["residential"])
        except KeyError as exc:
            raise DataError(f"{args.tallies}: missing tally {exc}") from None
        precision, recall = counting.count_metrics(tp, fp, fn, residential)
        report_path = out / "count_report.json"
        report_path.write_text(json.dumps({
            "tp": tp, "fp": fp, "fn": fn, "residential": residential,
            "precision": round(precision, 4), "recall": round(recall, 4),
        }, sort_keys=True, indent=2) + "\n")
        _write_report(out, "count", cfg, None, [report_path])
        return 0

    if not args.prob:
        raise ConfigError("count needs --prob (or --tallies)")
    prob = _read_prob(Path(args.prob))
    threshold = args.threshold if args.threshold is not None else cfg.get("count", "threshold")
    manual = counting.read_boxes_csv(args.boxes) if args.boxes else None
    boxes, match = counting.count_pipeline(
        prob, threshold,
        erode_radius=cfg.get("count", "erode_radius"),
        erode_iterations=cfg.get("count", "erode_iterations"),
        manual=manual,
        connectivity=cfg.get("count", "connectivity"),
        iou_threshold=cfg.get("count", "iou_threshold"),
        strict=cfg.get("count", "strict_iou"),
    )
    det_path = out / "detections.csv"
    counting.write_boxes_csv(boxes, det_path)
    artifacts = [det_path]
    payload = {"threshold": threshold, "machine_count": len(boxes)}
    if match is not None:
        payload.update({
            "human_count": match.human_count, "tp": match.tp, "fp": match.fp,
            "fn": match.fn, "residential": match.residential,
            "residential_houses": match.residential_houses,
            "precision": round(match.precision, 4), "recall": round(match.recall, 4),
        })
    report_path = out / "count_report.json"
    report_path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    artifacts.append(report_path)
    _write_report(out, "count", cfg, None, artifacts)
    return 0


# ---------------------------------------------------------------------------
# argument plumbing


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lgseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", default=None, required=config_required,
                       help="config file (omit for all defaults)")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen", help="generate synthetic scenes")
    common(p)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a model on generated scenes")
    common(p)
    p.add_argument("--data", required=True, help="directory of scene_*.ppm / labels_*.pgm")
    p.add_argument("--epochs", type=int, default=None, help="override [train] epochs")

    p = sub.add_parser("infer", help="stitched probability map for one image")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--name", default=None, help="artifact base name (default: image stem)")
    p.add_argument("--sidecar", action="store_true", help="also write the exact float map")

    p = sub.add_parser("eval", help="relaxed PR curve and max F over image pairs")
    common(p)
    p.add_argument("--pred", action="append", required=True, help="prob map (.lgprob or .pgm)")
    p.add_argument("--gt", action="append", required=True, help="label map (.pgm)")

    p = sub.add_parser("tree-fit", help="fit the classifier-tree thresholds")
    common(p)
    p.add_argument("--model", required=True, help="checkpoint providing RA scores")
    p.add_argument("--image", action="append", required=True)
    p.add_argument("--prob", action="append", required=True)
    p.add_argument("--gt", action="append", required=True)

    p = sub.add_parser("ablate", help="pathway-blanking probability maps")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--name", default=None)

    p = sub.add_parser("count", help="detect, box, and count houses")
    common(p)
    p.add_argument("--prob", default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--boxes", default=None, help="manual boxes CSV for matching")
    p.add_argument("--tallies", default=None, help="JSON tallies file (tp/fp/fn/residential)")

    return parser


_COMMANDS = {
    "gen": _cmd_gen,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "tree-fit": _cmd_tree_fit,
    "ablate": _cmd_ablate,
    "count": _cmd_count,
}


def dispatch(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        cfg = parse_config(args.config) if args.config else default_config()
        return _COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"lgseg {args.command}: {exc}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError) as exc:
        print(f"lgseg {args.command}: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"lgseg {args.command}: {exc}", file=sys.stderr)
        return 2


def main(argv=None) -> int:
    return dispatch(argv)


if __name__ == "__main__":
    sys.exit(main())
