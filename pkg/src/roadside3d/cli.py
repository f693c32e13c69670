"""Command-line frontend.

Exit codes: 0 success, 1 usage error, 2 data or invariant error. Every
subcommand is deterministic given its inputs, flags and ``--seed``.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import calib, camgeo, evaluation, occlusion, pipeline, robustness, synth
from .model import (DataError, InvariantError, RotatedRect2D, camera_to_dict,
                    clips_to_records, load_annotations, load_detections, load_scene, read_jsonl,
                    save_annotations, save_scene, scene_to_dict, write_jsonl)

log = logging.getLogger("roadside3d")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
META = {"command", "func", "config", "show_config", "error_json", "verbose"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# IO helpers


def _emit(data, args, default_format: str = "json") -> None:
    fmt = args.format or default_format
    if fmt == "jsonl":
        records = data if isinstance(data, list) else [data]
        text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    else:
        text = json.dumps(data, indent=1, sort_keys=True) + "\n"
    if args.out:
        tmp = f"{args.out}.tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, args.out)
    else:
        sys.stdout.write(text)


def _require(args, *names):
    for name in names:
        if getattr(args, name, None) in (None, ""):
            raise UsageError(f"--{name.replace('_', '-')} is required for '{args.command}'")


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None


def _jobs(args) -> int:
    return args.jobs if args.jobs and args.jobs > 0 else (os.cpu_count() or 1)


def _map(fn, items, jobs: int):
    """Order-preserving map, in worker processes when ``jobs > 1``."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(fn, items))


def uav_record_to_dict(rec: pipeline.UavRecord) -> dict:
    out = {"clip": rec.clip, "timestamp": rec.timestamp, "track": rec.track, "class": rec.cls,
           "center": list(rec.rect.center), "length": rec.rect.length, "width": rec.rect.width,
           "angle": rec.rect.angle}
    if rec.offset is not None:
        out["offset"] = rec.offset
    return out


def uav_record_from_dict(d: dict, lineno: int = 0) -> pipeline.UavRecord:
    try:
        rect = RotatedRect2D(d["center"], d["length"], d["width"], d["angle"], "uav")
        return pipeline.UavRecord(float(d["timestamp"]), d.get("track"), d["class"], rect,
                                  str(d.get("clip", "0")), d.get("offset"))
    except (KeyError, TypeError) as exc:
        raise DataError(f"UAV record {lineno}: missing or malformed field {exc}") from None


def _rect_list(rects) -> list[list[float]]:
    return [[r.center[0], r.center[1], r.length, r.width] for r in rects]


# ---------------------------------------------------------------------------
# subcommands


def _synth_config(args) -> synth.SynthConfig:
    return synth.SynthConfig(
        seed=args.seed, poles=args.poles, cameras_per_pole=args.cameras_per_pole,
        camera_height=args.camera_height, lanes=args.lanes, vehicles=tuple(args.vehicles),
        speed_range=tuple(args.speed_range), clip_length=args.clip_length, rate=args.rate,
        terrain=args.terrain, congestion=args.congestion,
        uav_projective=tuple(args.uav_projective), uav_perspective=args.uav_perspective,
        uav_height=args.uav_height)


def _synth_one(job):
    cfg, scene, clip_id, time_shift, observations = job
    out = synth.generate_clip(scene, cfg, clip_id)
    obs = []
    if observations:
        for cam_id, frames in out.camera_stream(time_shift).items():
            for t, rects in frames:
                obs.append({"clip": out.clip.id, "camera": cam_id, "timestamp": t, "rects": _rect_list(rects)})
    return out.clip, [uav_record_to_dict(r) for r in out.uav_records], obs


def cmd_synth(args) -> int:
    _require(args, "seed", "out")
    cfg = _synth_config(args)
    scene = synth.generate_scene(cfg)
    os.makedirs(args.out, exist_ok=True)
    jobs = [(cfg, scene, str(i), args.time_shift, args.observations) for i in range(args.clips)]
    results = _map(_synth_one, jobs, _jobs(args))
    save_scene(scene, os.path.join(args.out, "scene.json"))
    save_annotations([r[0] for r in results], os.path.join(args.out, "annotations.jsonl"))
    write_jsonl([u for r in results for u in r[1]], os.path.join(args.out, "uav.jsonl"))
    with open(os.path.join(args.out, "homography.json"), "w", encoding="utf-8") as fh:
        json.dump({"uav_to_world": synth.uav_world_to_image(cfg).inverse().H.tolist()}, fh, indent=1)
        fh.write("\n")
    if args.observations:
        write_jsonl([o for r in results for o in r[2]], os.path.join(args.out, "observations.jsonl"))
    return EXIT_OK


def _load_homography(path) -> camgeo.Homography:
    data = _read_json(path)
    try:
        return camgeo.Homography(np.array(data["uav_to_world"], dtype=float))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: expected a 3x3 'uav_to_world' matrix ({exc})") from None


def cmd_lift(args) -> int:
    _require(args, "scene", "in_path", "homography")
    scene = load_scene(args.scene)
    H = _load_homography(args.homography)
    records = [uav_record_from_dict(d, i) for i, d in enumerate(read_jsonl(args.in_path), 1)]
    clips = pipeline.lift_uav_records(records, H, scene, rate=args.rate, uav_height=args.uav_height,
                                      velocity_from_tracks=not args.no_velocity)
    clips.sort(key=lambda c: c.id)
    _emit(clips_to_records(clips), args, "jsonl")
    return EXIT_OK


def cmd_project(args) -> int:
    _require(args, "scene", "in_path")
    scene = load_scene(args.scene)
    out = []
    for clip in load_annotations(args.in_path):
        for k, sample in enumerate(clip.samples):
            per_cam = pipeline.project_annotations(scene, sample, clip=not args.no_clip)
            for cam_id, projs in per_cam.items():
                for p in projs:
                    out.append({"clip": clip.id, "sample": k, "timestamp": sample.timestamp,
                                "camera": cam_id, "box": p.index, "track": sample.boxes[p.index].track,
                                "polygon": p.polygon.vertices.tolist(), "partial": p.partial})
    _emit(out, args, "jsonl")
    return EXIT_OK


def _occ_one(job):
    scene, clip, metric = job
    records = []
    for k, s in enumerate(clip.samples):
        rep = occlusion.occlusion_report(scene, s, metric)
        for i, box in enumerate(s.boxes):
            head = {"clip": clip.id, "sample": k, "box": i, "track": box.track}
            for c, cam_id in enumerate(rep.camera_ids):
                records.append({**head, "camera": cam_id, "occ": float(rep.occ[i, c])})
            records.append({**head, "occ": float(rep.m_occ[i])})
    vals = [r["occ"] for r in records if "camera" not in r]
    return records, (float(np.mean(vals)) if vals else None)


def cmd_occ(args) -> int:
    _require(args, "scene", "in_path")
    scene = load_scene(args.scene)
    clips = load_annotations(args.in_path)
    results = _map(_occ_one, [(scene, c, args.metric) for c in clips], _jobs(args))
    _emit([r for recs, _ in results for r in recs], args, "jsonl")
    if args.summary:
        summary = {"metric": args.metric,
                   "clips": {c.id: v for c, (_, v) in zip(clips, results)}}
        with open(args.summary, "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=1, sort_keys=True)
            fh.write("\n")
    return EXIT_OK


def _clip_occlusions(path) -> list[tuple[str, float]]:
    """Clip-level occlusion from an ``occ`` summary JSON or its per-box JSONL."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        data = None
    if isinstance(data, dict) and "clips" in data:
        return [(str(c), float(v)) for c, v in data["clips"].items() if v is not None]
    per_clip: dict[str, list[float]] = {}
    for i, rec in enumerate(read_jsonl(path), 1):
        if "camera" in rec:
            continue
        try:
            per_clip.setdefault(str(rec["clip"]), []).append(float(rec["occ"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"record {i}: missing or malformed field {exc}") from None
    return [(c, float(np.mean(v))) for c, v in per_clip.items()]


def cmd_split(args) -> int:
    _require(args, "in_path")
    res = occlusion.split_dataset(_clip_occlusions(args.in_path), args.easy_frac, args.hard_frac)
    _emit(res.as_dict(), args)
    return EXIT_OK


def cmd_eval(args) -> int:
    _require(args, "gt", "in_path")
    cfg = evaluation.EvalConfig(dist_thresholds=tuple(args.dist_thresholds), tp_threshold=args.tp_threshold,
                                max_boxes_per_sample=args.max_boxes_per_sample, score_floor=args.score_floor)
    res = evaluation.evaluate(load_annotations(args.gt), load_detections(args.in_path), cfg)
    out = res.as_dict()
    out["config"]["dist_thresholds"] = list(cfg.dist_thresholds)
    out["config"]["tp_metrics"] = list(cfg.tp_metrics)
    _emit(out, args)
    return EXIT_OK


def cmd_eval_mono(args) -> int:
    _require(args, "gt", "in_path")
    cfg = evaluation.Mono3DConfig(score_floor=args.score_floor, max_dets_per_image=args.max_dets_per_image)
    key = lambda clips: {(c.id, k): list(s.boxes) for c in clips for k, s in enumerate(c.samples)}
    gts, dets = key(load_annotations(args.gt)), key(load_detections(args.in_path))
    classes = [args.cls] if args.cls else sorted({b.cls for v in gts.values() for b in v})
    out = {}
    for cls in classes:
        ap = evaluation.ap40(gts, dets, args.iou_threshold, cls, config=cfg)
        out[cls] = None if math.isnan(ap) else ap
    _emit({"ap40": out, "iou_threshold": args.iou_threshold}, args)
    return EXIT_OK


def cmd_track_refine(args) -> int:
    _require(args, "in_path")
    clips = [pipeline.refine_tracks(c, args.min_duration) for c in load_annotations(args.in_path)]
    _emit(clips_to_records(clips), args, "jsonl")
    return EXIT_OK


def cmd_sync(args) -> int:
    _require(args, "scene", "in_path", "observations")
    scene = load_scene(args.scene)
    cfg = pipeline.SyncConfig(tuple(args.shift_range), args.shift_step)
    obs: dict[str, dict[str, list]] = {}
    for i, rec in enumerate(read_jsonl(args.observations), 1):
        try:
            rects = [RotatedRect2D((r[0], r[1]), r[2], r[3], 0.0, "image") for r in rec["rects"]]
            obs.setdefault(str(rec["clip"]), {}).setdefault(rec["camera"], []).append(
                (float(rec["timestamp"]), rects))
        except (KeyError, TypeError, IndexError) as exc:
            raise DataError(f"observation {i}: missing or malformed field {exc}") from None
    out = {}
    for clip in load_annotations(args.in_path):
        if clip.id not in obs:
            raise DataError(f"no camera observations for clip {clip.id}")
        scores = pipeline.time_shift_scores(clip, obs[clip.id], scene, cfg)
        best = pipeline.estimate_time_shift(clip, obs[clip.id], scene, cfg)
        out[clip.id] = {"shift": best, "scores": {f"{s:g}": v for s, v in sorted(scores.items())}}
    _emit(out, args)
    return EXIT_OK


def cmd_calib(args) -> int:
    _require(args, "in_path")
    data = _read_json(args.in_path)
    if not isinstance(data, list) or not data:
        raise DataError(f"{args.in_path}: expected a non-empty JSON list of correspondences")
    try:
        if "source" in data[0]:
            src = np.array([p["source"] for p in data], dtype=float)
            dst = np.array([p["target"] for p in data], dtype=float)
            H = calib.estimate_homography(src, dst)
            err = calib.transfer_error(H, src, dst)
            out = {"homography": H.H.tolist(), "max_transfer_error": float(err.max()),
                   "rms_transfer_error": float(np.sqrt(np.mean(err ** 2)))}
        else:
            _require(args, "scene", "camera")
            try:
                cam = load_scene(args.scene).camera(args.camera)
            except KeyError:
                raise DataError(f"camera {args.camera!r} not in scene") from None
            corr = [calib.Correspondence2D3D(c["world"], c["pixel"]) for c in data]
            opts = calib.RefineOptions(refine_focal=args.refine_focal, max_iterations=args.max_iterations)
            fit = calib.refine_pose(cam, corr, opts)
            out = {"camera": camera_to_dict(fit.camera), "rmse": fit.rmse, "initial_rmse": fit.initial_rmse,
                   "iterations": fit.iterations, "converged": fit.converged}
    except (KeyError, TypeError) as exc:
        raise DataError(f"{args.in_path}: missing or malformed field {exc}") from None
    _emit(out, args)
    return EXIT_OK


def cmd_perturb(args) -> int:
    _require(args, "scene", "seed")
    scene = load_scene(args.scene)
    rng = np.random.default_rng(args.seed)
    out = []
    params = robustness.PerturbParams(args.pan_sigma, args.tilt_sigma, args.zoom_mean, args.zoom_sigma)
    for i in range(args.variants):
        if args.mode == "drop":
            variant = robustness.drop_cameras(scene, args.k, rng)
        else:
            variant = robustness.perturb_cameras(scene, params, rng)
        d = scene_to_dict(variant)
        d["variant"] = i
        out.append(d)
    _emit(out, args, "jsonl")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--scene", help="scene.json path")
    common.add_argument("--in", dest="in_path", help="input path")
    common.add_argument("--out", help="output path (stdout when omitted)")
    common.add_argument("--seed", type=int, help="RNG seed (required by stochastic subcommands)")
    common.add_argument("--jobs", type=int, default=0, help="worker processes over clips (0 = all cores)")
    common.add_argument("--config", help="JSON file of flag defaults; explicit flags win")
    common.add_argument("--format", choices=("json", "jsonl"), help="output encoding")
    common.add_argument("--show-config", action="store_true", help="print the effective configuration and exit")
    common.add_argument("--error-json", action="store_true", help="report errors as JSON on stderr")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = _Parser(prog="roadside3d", description="Roadside multi-camera 3D annotation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "generate a synthetic scene and clips (--out is a directory)")
    d = synth.SynthConfig()
    p.add_argument("--clips", type=int, default=1)
    p.add_argument("--poles", type=int, default=d.poles)
    p.add_argument("--cameras-per-pole", type=int, default=d.cameras_per_pole)
    p.add_argument("--camera-height", type=float, default=d.camera_height)
    p.add_argument("--lanes", type=int, default=d.lanes)
    p.add_argument("--vehicles", type=int, nargs=2, default=list(d.vehicles), metavar=("LO", "HI"))
    p.add_argument("--speed-range", type=float, nargs=2, default=list(d.speed_range), metavar=("LO", "HI"))
    p.add_argument("--clip-length", type=int, default=d.clip_length)
    p.add_argument("--rate", type=float, default=d.rate)
    p.add_argument("--terrain", choices=synth.TERRAIN_MODES, default=d.terrain)
    p.add_argument("--congestion", type=float, default=d.congestion)
    p.add_argument("--uav-projective", type=float, nargs=2, default=list(d.uav_projective), metavar=("P1", "P2"))
    p.add_argument("--uav-perspective", action="store_true")
    p.add_argument("--uav-height", type=float, default=d.uav_height)
    p.add_argument("--time-shift", type=float, default=0.0, help="camera clock offset for observations")
    p.add_argument("--observations", action="store_true", help="also write per-camera image boxes")

    p = add("lift", cmd_lift, "UAV-plane rectangles -> 3D annotations")
    p.add_argument("--homography", help="JSON with a 3x3 'uav_to_world' matrix")
    p.add_argument("--rate", type=float, default=2.0)
    p.add_argument("--uav-height", type=float, help="enable length refinement with this UAV height")
    p.add_argument("--no-velocity", action="store_true")

    p = add("project", cmd_project, "3D annotations -> per-camera image polygons")
    p.add_argument("--no-clip", action="store_true", help="do not clip polygons to the image")

    p = add("occ", cmd_occ, "monocular and multi-view occlusion reports")
    p.add_argument("--metric", choices=occlusion.DISTANCE_METRICS, default="center")
    p.add_argument("--summary", help="also write clip-level occlusion JSON here")

    p = add("split", cmd_split, "train/easy/hard split from clip occlusion")
    p.add_argument("--easy-frac", type=float, default=0.1)
    p.add_argument("--hard-frac", type=float, default=0.1)

    e = evaluation.EvalConfig()
    p = add("eval", cmd_eval, "multi-view detection metrics (mAP, TP errors, NDS)")
    p.add_argument("--gt", help="ground-truth annotations")
    p.add_argument("--dist-thresholds", type=float, nargs="+", default=list(e.dist_thresholds))
    p.add_argument("--tp-threshold", type=float, default=e.tp_threshold)
    p.add_argument("--max-boxes-per-sample", type=int, default=e.max_boxes_per_sample)
    p.add_argument("--score-floor", type=float, default=e.score_floor)

    m = evaluation.Mono3DConfig()
    p = add("eval-mono", cmd_eval_mono, "monocular AP40 by 3D IoU")
    p.add_argument("--gt", help="ground-truth annotations")
    p.add_argument("--iou-threshold", type=float, default=0.5)
    p.add_argument("--cls", choices=synth.VEHICLE_CLASSES)
    p.add_argument("--score-floor", type=float, default=m.score_floor)
    p.add_argument("--max-dets-per-image", type=int, default=m.max_dets_per_image)

    p = add("track-refine", cmd_track_refine, "prune short tracks and fill gaps")
    p.add_argument("--min-duration", type=float, default=1.0)

    s = pipeline.SyncConfig()
    p = add("sync", cmd_sync, "estimate the camera/UAV time shift per clip")
    p.add_argument("--observations", help="per-camera image boxes (jsonl)")
    p.add_argument("--shift-range", type=float, nargs=2, default=list(s.shift_range), metavar=("LO", "HI"))
    p.add_argument("--shift-step", type=float, default=s.shift_step)

    p = add("calib", cmd_calib, "homography or camera pose from correspondences")
    p.add_argument("--camera", help="initial camera id in --scene (pose refinement)")
    p.add_argument("--refine-focal", action="store_true")
    p.add_argument("--max-iterations", type=int, default=100)

    r = robustness.PerturbParams()
    p = add("perturb", cmd_perturb, "scene variants with dropped or shaken cameras")
    p.add_argument("--mode", choices=("drop", "shake"), default="shake")
    p.add_argument("--k", type=int, default=1, help="cameras to drop")
    p.add_argument("--variants", type=int, default=1)
    p.add_argument("--pan-sigma", type=float, default=r.pan_sigma)
    p.add_argument("--tilt-sigma", type=float, default=r.tilt_sigma)
    p.add_argument("--zoom-mean", type=float, default=r.zoom_mean)
    p.add_argument("--zoom-sigma", type=float, default=r.zoom_sigma)
    return parser


def _parse(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        cfg = _read_json(args.config)
        if not isinstance(cfg, dict):
            raise DataError(f"{args.config}: expected a JSON object")
        known = set(vars(args)) - META
        unknown = sorted(k for k in cfg if k.replace("-", "_") not in known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
        args = parser.parse_args(argv)
    return args


def _report(exc: Exception, code: int, as_json: bool) -> int:
    if as_json:
        payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
        if isinstance(exc, InvariantError):
            payload["path"] = exc.path
        sys.stderr.write(json.dumps(payload) + "\n")
    else:
        sys.stderr.write(f"roadside3d: error: {exc}\n")
    return code


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    as_json = "--error-json" in argv
    try:
        args = _parse(argv)
    except UsageError as exc:
        return _report(exc, EXIT_USAGE, as_json)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (DataError, OSError) as exc:
        return _report(exc, EXIT_DATA, as_json)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    if args.show_config:
        shown = {k: v for k, v in sorted(vars(args).items()) if k not in META}
        sys.stdout.write(json.dumps({"command": args.command, **shown}, indent=1, sort_keys=True) + "\n")
        return EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        return _report(exc, EXIT_USAGE, as_json)
    except (DataError, ValueError, KeyError, IndexError, OSError) as exc:
        return _report(exc, EXIT_DATA, as_json)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
