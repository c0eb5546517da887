"""Command-line entry point.

Exit codes: 0 success, 1 selftest failure, 2 bad usage or unreadable config /
input, 3 runtime or protocol error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import Scene, SceneConfig, export_scene, gen_dataset, gen_video, load_scene
from .evaluate import FssEpisode, evaluate_fss, make_fss_episodes
from .formats import config_hash, read_mask, read_pgm, read_ppm, write_json, write_mask, write_pgm, write_ppm
from .inference import BACKGROUND_THRESHOLD, PRESENCE_THRESHOLD, SCORE_THRESHOLD, decode_id, decode_instances, decode_semantic
from .interaction import InContextExample
from .memory import DEFAULT_CAPACITY, DEFAULT_DECAY, track_video
from .metrics import jf_score
from .model import predict
from .params import load_params
from .selftest import CHECKS, run_all
from .train import TrainConfig, run_training, save_checkpoint

log = logging.getLogger("incontext_seg")

EXIT_OK, EXIT_SELFTEST, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    """Bad flags, unreadable config or missing input file."""


def _read_config(path, kind: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{kind} file not found: {p}")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{kind} file {p} is not valid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise UsageError(f"{kind} file {p} must hold a JSON object")
    return d


def _scene_config(path) -> SceneConfig:
    try:
        return SceneConfig.from_dict(_read_config(path, "scene config"))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid scene config {path}: {exc}") from exc


def _train_config(path) -> TrainConfig:
    try:
        return TrainConfig.from_dict(_read_config(path, "training config"))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config {path}: {exc}") from exc


def _checkpoint(path):
    try:
        params = load_params(path)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from exc
    meta = json.loads((Path(path) / "model.json").read_text())
    return params, meta


def _scene(path) -> Scene:
    try:
        return load_scene(path)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(str(exc)) from exc


def _scene_dirs(root) -> list[Path]:
    d = Path(root)
    if not d.is_dir():
        raise UsageError(f"data directory not found: {d}")
    dirs = sorted(p for p in d.iterdir() if (p / "manifest.json").is_file())
    if not dirs:
        raise UsageError(f"no scenes (directories with manifest.json) under {d}")
    return dirs


def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _read(reader, path, what: str):
    p = _require(path, what)
    try:
        return reader(p)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read {what} {p}: {exc}") from exc


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = _scene_config(args.config)
    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    seed = cfg.seed if args.seed is None else args.seed
    scenes = gen_dataset(cfg, args.count, seed)
    out = Path(args.out)
    names = []
    for k, s in enumerate(scenes):
        name = f"scene_{k:04d}"
        export_scene(s, out / name)
        names.append(name)
    manifest = {"config": cfg.to_dict(), "config_hash": config_hash({**cfg.to_dict(), "seed": seed, "count": args.count}), "scenes": names, "dropped": sum(s.dropped for s in scenes)}
    if args.episodes:
        eps = make_fss_episodes(scenes, args.episodes, seed)
        write_json(out / "episodes.json", {"episodes": [{"reference": names[e.reference], "target": names[e.target], "category": e.category} for e in eps]})
    write_json(out / "dataset.json", manifest)
    print(f"wrote {len(scenes)} scenes to {out}")
    return EXIT_OK


def cmd_synth_video(args) -> int:
    cfg = _scene_config(args.config)
    if args.frames < 1:
        raise UsageError(f"--frames must be >= 1, got {args.frames}")
    video = gen_video(cfg, args.frames, args.seed, brightness_drift=args.drift)
    out = Path(args.out)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    for t, (frame, masks) in enumerate(zip(video.frames, video.masks)):
        write_ppm(out / f"frame_{t:03d}.ppm", frame)
        write_pgm(out / "gt" / f"frame_{t:03d}.pgm", _label_map(masks, frame.shape[:2]))
    export_scene(Scene(video.frames[0], video.masks[0], video.categories, args.seed), out / "ann")
    write_json(out / "video.json", {"frames": args.frames, "objects": len(video.categories), "categories": video.categories, "seed": args.seed, "drift": args.drift})
    print(f"wrote {args.frames}-frame video with {len(video.categories)} objects to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _train_config(args.config)
    if args.steps is not None:
        try:
            cfg = TrainConfig.from_dict({**cfg.to_dict(), "steps": args.steps})
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    scenes = [_scene(d) for d in _scene_dirs(args.data)]
    params, state, curve = run_training(cfg, scenes)
    save_checkpoint(args.out, params, state, cfg, curve)
    losses = [r["loss"] for r in curve]
    k = min(10, len(losses))
    report = {
        "config_hash": config_hash(cfg.to_dict()),
        "scenes": len(scenes),
        "steps": cfg.steps,
        "initial_loss_mean": float(np.mean(losses[:k])),
        "final_loss_mean": float(np.mean(losses[-k:])),
    }
    write_json(Path(args.out) / "train_report.json", report)
    print(f"trained {cfg.steps} steps: loss {report['initial_loss_mean']:.4f} -> {report['final_loss_mean']:.4f}")
    return EXIT_OK


def _reference(args) -> InContextExample:
    ref = Path(args.ref)
    if ref.is_dir():
        return _scene(ref).example()
    image = _read(read_ppm, ref, "reference image")
    if not args.masks:
        raise UsageError("an image reference needs --masks (and --categories)")
    masks = [_read(read_mask, m, "reference mask file") for m in args.masks]
    cats = args.categories or [1] * len(masks)
    if len(cats) != len(masks):
        raise UsageError(f"{len(masks)} masks but {len(cats)} categories")
    try:
        return InContextExample(image, np.stack(masks), cats)
    except ValueError as exc:
        raise UsageError(f"invalid reference annotation: {exc}") from exc


def cmd_predict(args) -> int:
    params, meta = _checkpoint(args.ckpt)
    ref = _reference(args)
    target = _read(read_ppm, args.target, "target image")
    patch, seed = _encoder_settings(meta)
    pred, grouped = predict(params, ref, target, patch, seed, params.dims.heads)
    size = target.shape[:2]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ids = {o.index: o for o in decode_id(pred, args.presence_thresh, size)}
    id_scores = []
    for i in range(ref.num_instances):  # every reference object gets a file, empty if absent
        o = ids.get(i)
        write_mask(out / f"id_{i:03d}.pgm", o.mask if o else np.zeros(size, dtype=bool))
        id_scores.append(o.score if o else 0.0)
    instances = []
    for k, o in enumerate(decode_instances(pred, args.score_thresh, grouped.sem_categories, size)):
        name = f"instance_{k:03d}.pgm"
        write_mask(out / name, o.mask)
        instances.append({"category": o.category, "score": o.score, "mask_file": name})
    write_json(out / "instances.json", instances)
    write_pgm(out / "semantic.pgm", decode_semantic(pred, grouped.sem_categories, size, args.background_thresh))
    settings = {"checkpoint": meta.get("config_hash"), "presence_thresh": args.presence_thresh, "score_thresh": args.score_thresh, "background_thresh": args.background_thresh}
    write_json(out / "predict_report.json", {"config_hash": config_hash(settings), **settings, "id_scores": id_scores, "instances": len(instances)})
    print(f"wrote {ref.num_instances} ID masks, {len(instances)} instances and a semantic map to {out}")
    return EXIT_OK


def _encoder_settings(meta: dict) -> tuple[int, int]:
    conf = meta.get("train_config", {})
    return int(conf.get("patch", 4)), int(conf.get("encoder_seed", 0))


def cmd_eval_fss(args) -> int:
    params, meta = _checkpoint(args.ckpt)
    path = _require(args.episodes, "episodes file")
    spec = _read_config(path, "episodes")
    try:
        entries = spec["episodes"]
        dirs = sorted({e["reference"] for e in entries} | {e["target"] for e in entries})
        index = {d: k for k, d in enumerate(dirs)}
        scenes = [_scene(path.parent / d) for d in dirs]
        episodes = [FssEpisode(index[e["reference"]], index[e["target"]], int(e["category"])) for e in entries]
    except (KeyError, TypeError) as exc:
        raise UsageError(f"malformed episodes file {path}: {exc}") from exc
    if not episodes:
        raise UsageError(f"episodes file {path} lists no episodes")
    patch, seed = _encoder_settings(meta)
    result = evaluate_fss(params, scenes, episodes, patch, seed, params.dims.heads)
    settings = {"checkpoint": meta.get("config_hash"), "episodes": _file_hash(path)}
    _write_report(args.out, {"config_hash": config_hash(settings), **settings, **result})
    print(f"one-shot mIoU {result['miou']:.4f} over {len(episodes)} episodes")
    return EXIT_OK


def _label_map(masks, size) -> np.ndarray:
    lab = np.zeros(size, dtype=np.uint8)
    for k, m in enumerate(masks):
        lab[np.asarray(m, dtype=bool)] = k + 1
    return lab


def cmd_eval_vos(args) -> int:
    params, meta = _checkpoint(args.ckpt)
    vdir = Path(args.video)
    if not vdir.is_dir():
        raise UsageError(f"video directory not found: {vdir}")
    frame_files = sorted(vdir.glob("*.ppm"))
    if not frame_files:
        raise UsageError(f"no .ppm frames in {vdir}")
    if args.K < 1 or not 0.0 < args.decay <= 1.0:
        raise UsageError(f"need K >= 1 and lambda in (0, 1], got K={args.K}, lambda={args.decay}")
    frames = [_read(read_ppm, f, "video frame") for f in frame_files]
    ann = _scene(args.ann).example()
    patch, seed = _encoder_settings(meta)
    result = track_video(frames, ann, params, args.K, args.decay, patch, seed, args.presence_thresh, params.dims.heads)
    out = Path(args.out)
    mask_dir = Path(args.masks_out) if args.masks_out else out.parent / f"{out.stem}_masks"
    mask_dir.mkdir(parents=True, exist_ok=True)
    for f, masks in zip(frame_files, result.masks):
        write_pgm(mask_dir / f"{f.stem}.pgm", _label_map(masks, frames[0].shape[:2]))
    settings = {"checkpoint": meta.get("config_hash"), "K": args.K, "lambda": args.decay, "presence_thresh": args.presence_thresh, "frames": [_file_hash(f) for f in frame_files]}
    report = {"config_hash": config_hash(settings), "K": args.K, "lambda": args.decay, "frames": len(frames), "objects": ann.num_instances, "scores": result.scores}
    gt_dir = vdir / "gt"
    if gt_dir.is_dir():
        gts = []
        for f in frame_files[1:]:
            lab = _read(read_pgm, gt_dir / f"{f.stem}.pgm", "ground-truth label map")
            gts.append([lab == k + 1 for k in range(ann.num_instances)])
        if gts:
            j, fm, jf = jf_score(result.masks[1:], gts)
            report.update({"J": j, "F": fm, "J&F": jf})
    _write_report(out, report)
    print(f"tracked {ann.num_instances} objects over {len(frames)} frames" + (f": J&F {report['J&F']:.4f}" if "J&F" in report else ""))
    return EXIT_OK


def cmd_selftest(args) -> int:
    names = args.only or None
    if names:
        unknown = [n for n in names if n not in CHECKS]
        if unknown:
            raise UsageError(f"unknown checks {unknown}; choose from {sorted(CHECKS)}")
    results = run_all(names)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_SELFTEST if failed else EXIT_OK


def _write_report(path, report: dict) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    write_json(p, report)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="incontext-seg", description="In-context segmentation at desk scale.")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene dataset")
    p.add_argument("--config", required=True, help="scene config JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, help="base seed (defaults to the config's)")
    p.add_argument("--episodes", type=int, default=0, help="also write this many one-shot episodes")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("synth-video", help="generate a synthetic video with ground truth")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--drift", type=float, default=0.0, help="max per-frame brightness change per object")
    p.set_defaults(func=cmd_synth_video)

    p = sub.add_parser("train", help="train a model on a synthetic dataset")
    p.add_argument("--config", required=True, help="training config JSON")
    p.add_argument("--data", required=True, help="directory written by synth")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--steps", type=int, help="override the configured step count")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="segment a target image given an in-context example")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--ref", required=True, help="scene directory, or a PPM image used with --masks")
    p.add_argument("--masks", nargs="+", help="reference mask PGMs (image reference only)")
    p.add_argument("--categories", nargs="+", type=int, help="category id per reference mask")
    p.add_argument("--target", required=True, help="target PPM image")
    p.add_argument("--out", required=True)
    p.add_argument("--presence-thresh", type=float, default=PRESENCE_THRESHOLD)
    p.add_argument("--score-thresh", type=float, default=SCORE_THRESHOLD)
    p.add_argument("--background-thresh", type=float, default=BACKGROUND_THRESHOLD)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval-fss", help="episodic one-shot semantic evaluation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--episodes", required=True, help="JSON {episodes: [{reference, target, category}]}")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_fss)

    p = sub.add_parser("eval-vos", help="semi-supervised video tracking")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--video", required=True, help="directory of numbered PPM frames (optional gt/ label maps)")
    p.add_argument("--ann", required=True, help="scene directory annotating frame 0")
    p.add_argument("--K", type=int, default=DEFAULT_CAPACITY, help="memory capacity per object")
    p.add_argument("--lambda", dest="decay", type=float, default=DEFAULT_DECAY, help="per-frame score decay")
    p.add_argument("--presence-thresh", type=float, default=PRESENCE_THRESHOLD)
    p.add_argument("--out", required=True)
    p.add_argument("--masks-out", help="directory for per-frame label maps")
    p.set_defaults(func=cmd_eval_vos)

    p = sub.add_parser("selftest", help="run the oracle and invariant checks")
    p.add_argument("--only", nargs="+", help=f"subset of {sorted(CHECKS)}")
    p.set_defaults(func=cmd_selftest)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
