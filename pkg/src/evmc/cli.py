"""evmc command line.

Every machine-readable output is JSON with sorted keys and no timestamps, so
reruns with identical inputs are byte-identical (EVMC_THREADS=0 keeps all
reductions single-threaded).
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import losses, metrics, render, synth
from .egomotion import Pose, euler_to_rotation
from .events import CameraIntrinsics, StereoRig, load_calibration, load_events, save_calibration, save_events
from .optimize import OBJECTIVES, MotionModel, OptimizeConfig, expand_model, fit_staged, model_disparity
from .voxel import build_volume, save_volume
from .warp import FlowField, accumulate, count_image, propagate_events, timestamp_images


class CliError(Exception):
    pass


# -- small helpers ---------------------------------------------------------

def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _commit(path, save):
    """Run ``save(tmp_path)`` then rename, so a failed run leaves no partial artifact."""
    path = Path(path)
    tmp = path.with_name(path.stem + ".part" + path.suffix)
    try:
        save(tmp)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def _write_text(path, text: str):
    _commit(path, lambda p: p.write_text(text, encoding="utf-8"))


def _write_npy(path, arr):
    def save(p):
        with open(p, "wb") as f:
            np.save(f, arr)
    _commit(path, save)


def _write_image(path, arr):
    _commit(path, lambda p: render.save_image(p, arr))


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        H, W = int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {text!r}")
    if H < 1 or W < 1:
        raise argparse.ArgumentTypeError("size must be positive")
    return H, W


def _floats(n: int | None = None):
    def parse(text: str):
        try:
            vals = tuple(float(v) for v in text.split(","))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
        if n is not None and len(vals) != n:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {len(vals)}")
        if not all(math.isfinite(v) for v in vals):
            raise argparse.ArgumentTypeError("values must be finite")
        return vals
    return parse


def _read_json(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise CliError(f"{path}: invalid JSON ({e})")


def _events(path, max_events=None):
    ev = load_events(path)
    if max_events is not None:
        if max_events < 1:
            raise CliError("--max-events must be >= 1")
        ev = ev.head(max_events)
    for w in ev.warnings:
        print(f"evmc: warning: {path}: {w}", file=sys.stderr)
    return ev


def _camera_dict(K: CameraIntrinsics) -> dict:
    return {"fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy, "width": K.width, "height": K.height}


def _camera_from(d: dict) -> CameraIntrinsics:
    return CameraIntrinsics(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]))


def _rig(args) -> StereoRig:
    """Calibration file if given, otherwise a centred pinhole of --size and --focal."""
    if getattr(args, "calib", None):
        rig = load_calibration(args.calib)
        for w in rig.warnings:
            print(f"evmc: warning: {args.calib}: {w}", file=sys.stderr)
        if getattr(args, "size", None) and args.size != (rig.left.height, rig.left.width):
            raise CliError(f"--size {args.size} disagrees with the calibration resolution")
        return rig
    if not getattr(args, "size", None):
        raise CliError("either --calib or --size is required")
    H, W = args.size
    return StereoRig.monocular(CameraIntrinsics.centered(args.focal, W, H))


def _load_flow(path, expect=None) -> FlowField:
    """A (2, H, W) .npy field, or a fit result / synth sidecar JSON."""
    if str(path).endswith(".json"):
        d = _read_json(path)
        if "model" in d and "camera" in d:
            cam = _camera_from(d["camera"])
            rig = StereoRig(cam, cam, d.get("baseline_m", 1.0))
            return expand_model(MotionModel.from_dict(d["model"]), rig, d.get("B", 9))
        if d.get("kind") == "constant_flow":
            if expect is None:
                expect = (d["H"], d["W"])
            return FlowField.constant(d["flow"][0], d["flow"][1], *expect)
        if d.get("kind") == "rigid":
            cam = _camera_from(d["K"])
            model = MotionModel("rigid_planar", [*Pose.from_dict(d["pose"]).as_vector(), 1.0 / d["depth_m"]])
            return expand_model(model, cam, d["B"])
        raise CliError(f"{path}: neither a fit result nor a ground-truth sidecar")
    flow = FlowField.load(path)
    if expect is not None and flow.shape != tuple(expect):
        raise CliError(f"{path}: flow is {flow.shape[0]}x{flow.shape[1]}, expected {expect[0]}x{expect[1]}")
    return flow


# -- subcommands -----------------------------------------------------------

def cmd_voxelize(args):
    ev = _events(args.events, args.max_events)
    H, W = args.size
    vol = build_volume(ev, args.bins, H, W)
    if vol.dropped:
        print(f"evmc: warning: {vol.dropped} events outside the {H}x{W} frame were dropped", file=sys.stderr)
    _commit(args.out, lambda p: save_volume(vol, p))
    if args.pgm_prefix:
        for k, img in enumerate(render.volume_bins_gray8(vol)):
            _write_image(f"{args.pgm_prefix}_bin{k}.pgm", img)


def cmd_deblur(args):
    ev = _events(args.events, args.max_events)
    if args.model:
        flow = _load_flow(args.model)
    else:
        flow = _load_flow(args.flow, args.size)
    H, W = flow.shape
    tp = 0.0 if args.t_prime == "start" else float(args.bins - 1)
    w = propagate_events(ev, flow, tp, args.bins)
    counts = count_image(w, H, W)
    ts = timestamp_images(w, H, W)
    prefix = args.out_prefix
    _write_npy(f"{prefix}_count.npy", counts)
    _write_npy(f"{prefix}_time.npy", np.stack([ts.T_plus, ts.T_minus]))
    _write_image(f"{prefix}_count.pgm", render.to_gray8(counts))
    _write_image(f"{prefix}_time_pos.pgm", render.to_gray8(ts.T_plus, 0.0, 1.0))
    _write_image(f"{prefix}_time_neg.pgm", render.to_gray8(ts.T_minus, 0.0, 1.0))


def _weights(args):
    w = args.weights
    if any(v < 0 for v in w):
        raise CliError("loss weights must be >= 0")
    return w


def cmd_loss(args):
    ev = _events(args.events, args.max_events)
    flow = _load_flow(args.flow, args.size)
    w = _weights(args)
    report = losses.total_flow_loss(ev, flow, lam1=w[0], eps=args.eps, B=args.bins)
    out = _dumps(report.to_dict())
    if args.out:
        _write_text(args.out, out)
    sys.stdout.write(out)


def _config(args, objective=None) -> OptimizeConfig:
    return OptimizeConfig(
        max_iters=args.max_iters, tol=args.tol, objective=objective, weights=_weights(args), eps=args.eps,
        B=args.bins, seed=args.seed, n_starts=args.starts,
        coarse_grid="auto" if args.grid == "auto" else None,
    )


def _fit_result(model: MotionModel, traces, config, rig: StereoRig, loss_report) -> dict:
    return {
        "model": model.to_dict(),
        "trace": [float(x) for x in traces[-1]],
        "stages": [[float(x) for x in t] for t in traces],
        "config": config.to_dict(),
        "camera": _camera_dict(rig.left),
        "baseline_m": rig.baseline_m,
        "B": config.B,
        "loss": loss_report.to_dict(),
    }


def cmd_fit_flow(args):
    ev = _events(args.events, args.max_events)
    rig = _rig(args)
    kind = {"constant": "constant_flow", "affine": "affine_flow"}[args.model]
    config = _config(args, args.objective)
    init = MotionModel.zeros(kind)
    if args.init is not None:
        if len(args.init) != init.params.size:
            raise CliError(f"{kind} --init needs {init.params.size} values")
        init = init.with_params(args.init)
    model, traces = fit_staged(init, ev, config, rig)
    flow = expand_model(model, rig, config.B)
    report = losses.total_flow_loss(ev, flow, lam1=config.weights[0], eps=config.eps, B=config.B)
    result = _fit_result(model, traces, config, rig, report)
    if args.flow_out:
        _write_npy(args.flow_out, np.stack([flow.u, flow.v]))
    _write_text(args.out, _dumps(result))


def cmd_fit_egomotion(args):
    ev = _events(args.events, args.max_events)
    rig = _rig(args)
    slices = ev if args.right is None else (ev, _events(args.right, args.max_events))
    if args.model == "rotation":
        init = MotionModel.zeros("rotation_only")
    else:
        if not args.init_depth > 0:
            raise CliError("--init-depth must be > 0")
        init = MotionModel("rigid_planar", [0, 0, 0, 0, 0, 0, 1.0 / args.init_depth])
    if args.init_pose is not None:
        n = 6 if init.kind == "rigid_planar" else 3
        if len(args.init_pose) not in (3, n):
            raise CliError(f"--init-pose needs 3 angles{' or 6 values' if n == 6 else ''}")
        p = init.params.copy()
        p[: len(args.init_pose)] = args.init_pose
        init = init.with_params(p)
    config = _config(args, args.objective)
    model, traces = fit_staged(init, slices, config, rig)
    flow = expand_model(model, rig, config.B)
    report = losses.total_flow_loss(ev, flow, lam1=config.weights[0], eps=config.eps, B=config.B)
    result = _fit_result(model, traces, config, rig, report)
    if model.kind == "rigid_planar":
        rho = float(model.params[6])
        result["depth_m"] = 1.0 / rho if rho > 0 else None
        result["disparity_px"] = rig.left.fx * rig.baseline_m * rho
    if args.disparity_out:
        if model.kind != "rigid_planar":
            raise CliError("--disparity-out needs --model rigid")
        disp = model_disparity(model, rig)
        if str(args.disparity_out).lower().endswith(".pgm"):
            _write_image(args.disparity_out, render.to_gray8(disp.d, 0.0, float(disp.shape[1])))
        else:
            _commit(args.disparity_out, disp.save)
    _write_text(args.out, _dumps(result))


def _save_events(ev, path):
    fmt = "binary" if str(path).endswith(".bin") else "csv"
    _commit(path, lambda p: save_events(ev, p, fmt))


def _save_truth(scene, path, extra=None):
    _commit(path, lambda p: synth.write_ground_truth(scene, p, extra))


def cmd_synth(args):
    prefix = args.out_prefix
    ext = ".bin" if args.format == "binary" else ".csv"
    H, W = args.size
    n, m = args.sources, args.events_per_source
    if args.kind == "flow":
        scene = synth.make_constant_flow_scene(n, m, args.flow, args.bins, H, W, args.seed, args.noise_rate,
                                               args.duration)
        _save_events(synth.render_scene(scene), f"{prefix}{ext}")
        _save_truth(scene, f"{prefix}.json")
        return
    K = CameraIntrinsics.centered(args.focal, W, H)
    pose = Pose.from_vector(args.pose)
    if args.kind == "rigid":
        scene = synth.make_rigid_scene(pose, args.depth, K, args.bins, n, m, args.seed, args.noise_rate,
                                       args.duration)
        _save_events(synth.render_scene(scene), f"{prefix}{ext}")
        _commit(f"{prefix}_calib.txt", lambda p: save_calibration(StereoRig.monocular(K), p))
        _save_truth(scene, f"{prefix}.json")
        return
    rig = StereoRig(K, K, args.baseline)
    d = K.fx * args.baseline / args.depth
    scene = synth.make_rigid_scene(pose, args.depth, K, args.bins, n, m, args.seed, args.noise_rate,
                                   args.duration, disparity_px=d)
    left, right, _ = synth.gen_stereo_pair(scene, rig, d, args.seed)
    _save_events(left, f"{prefix}_left{ext}")
    _save_events(right, f"{prefix}_right{ext}")
    _commit(f"{prefix}_calib.txt", lambda p: save_calibration(rig, p))
    _save_truth(scene, f"{prefix}.json", {"disparity_px": d, "baseline_m": args.baseline})


def cmd_eval_flow(args):
    gt_path = args.gt
    if str(gt_path).endswith(".json"):
        gt_json = _read_json(gt_path)
        shape = (gt_json["H"], gt_json["W"]) if "H" in gt_json else None
    else:
        shape = None
    pred = _load_flow(args.pred)
    gt = _load_flow(gt_path, shape or pred.shape)
    if pred.shape != gt.shape:
        raise CliError(f"prediction is {pred.shape} but ground truth is {gt.shape}")
    mask = np.ones(gt.shape, dtype=bool)
    if gt.valid is not None:
        mask &= np.asarray(gt.valid, dtype=bool)
    if args.events:
        mask &= metrics.event_mask(_events(args.events), *gt.shape)
    units = "px/bin"
    if args.dt is not None:
        window = (0.0, args.window) if args.window is not None else (0.0, args.dt)
        pred = metrics.flow_to_displacement(pred, args.bins, args.dt, window)
        gt = metrics.flow_to_displacement(gt, args.bins, args.dt, window)
        units = "px"
    a, out = metrics.aee(pred, gt, mask)
    report = {"aee": a, "outlier_fraction": out, "pixels": int(mask.sum()), "units": units}
    if args.out:
        _write_text(args.out, _dumps(report))
    print(f"{'AEE':>10} {'%Outlier':>10}")
    print(f"{a:10.4f} {100 * out:10.2f}")


def _pose_of(d: dict) -> Pose:
    if "pose" in d and isinstance(d["pose"], dict):
        return Pose.from_dict(d["pose"])
    if "model" in d:
        return MotionModel.from_dict(d["model"]).pose()
    raise CliError("no pose found")


def cmd_eval_pose(args):
    pred_d = _read_json(args.pred)
    gt_d = _read_json(args.gt)
    pred = _pose_of(pred_d)
    gt = _pose_of(gt_d)
    R_p = euler_to_rotation(*pred.angles)
    R_g = euler_to_rotation(*gt.angles)
    r = metrics.rre(R_p, R_g)
    try:
        t = metrics.rpe(pred.T, gt.T)
        rpe_deg = math.degrees(t)
    except ValueError:
        rpe_deg = None  # a zero translation has no direction
    report = {"rre_rad": r, "rpe_deg": rpe_deg,
              "angle_error_deg": [math.degrees(a - b) for a, b in zip(pred.angles, gt.angles)]}
    out = _dumps(report)
    if args.out:
        _write_text(args.out, out)
    sys.stdout.write(out)


def cmd_render(args):
    if args.flow or args.model:
        flow = _load_flow(args.model) if args.model else _load_flow(args.flow)
        mask = None
        if args.events:
            mask = metrics.event_mask(_events(args.events), *flow.shape)
        img = render.flow_to_rgb(flow, args.max_magnitude, mask)
        if Path(args.out).suffix.lower() == ".pgm":
            raise CliError("colour flow needs .png or .ppm output")
    elif args.events:
        if not args.size:
            raise CliError("--size is required to render events")
        ev = _events(args.events)
        img = render.to_gray8(accumulate(ev.x, ev.y, np.ones(len(ev)), *args.size))
    else:
        raise CliError("render needs --flow, --model or --events")
    _write_image(args.out, img)


# -- parser ----------------------------------------------------------------

def _add_loss_opts(p):
    p.add_argument("--weights", type=_floats(4), default=losses.DEFAULT_WEIGHTS,
                   help="lambda_1..lambda_4 (default 1.0,1.0,0.1,0.2)")
    p.add_argument("--eps", type=float, default=losses.DEFAULT_EPS, help="Charbonnier epsilon")
    p.add_argument("--bins", type=int, default=9, help="temporal bins B (default 9)")


def _add_fit_opts(p):
    _add_loss_opts(p)
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--tol", type=float, default=1e-7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--starts", type=int, default=3, help="descents seeded from the best lattice points")
    p.add_argument("--grid", choices=("auto", "none"), default="auto", help="seeding lattice")
    p.add_argument("--objective", choices=OBJECTIVES, default=None, help="default: variance (sfm for stereo)")
    p.add_argument("--max-events", type=int, default=None)
    p.add_argument("--out", required=True, help="result JSON")


def _add_camera_opts(p, size_required=False):
    p.add_argument("--calib", help="calibration file (key = value)")
    p.add_argument("--size", type=_size, required=size_required, help="HxW")
    p.add_argument("--focal", type=float, default=200.0, help="focal length when no --calib (px)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="evmc", description="Event-camera motion compensation tools.")
    sub = ap.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("voxelize", help="build a discretized event volume")
    p.add_argument("--events", required=True)
    p.add_argument("--bins", type=int, default=9)
    p.add_argument("--size", type=_size, required=True, help="HxW")
    p.add_argument("--out", required=True)
    p.add_argument("--max-events", type=int, default=30000, help="keep the first N events (default 30000)")
    p.add_argument("--pgm-prefix", help="also write one PGM per bin as <prefix>_bin<k>.pgm")
    p.set_defaults(func=cmd_voxelize)

    p = sub.add_parser("deblur", help="warp events and write count/timestamp images")
    p.add_argument("--events", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--flow", help="(2, H, W) .npy flow in px/bin")
    g.add_argument("--model", help="fit result JSON")
    p.add_argument("--t-prime", choices=("start", "end"), default="start")
    p.add_argument("--bins", type=int, default=9)
    p.add_argument("--size", type=_size, help="expected HxW of --flow")
    p.add_argument("--max-events", type=int, default=None)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_deblur)

    p = sub.add_parser("loss", help="print the flow loss report as JSON")
    p.add_argument("--events", required=True)
    p.add_argument("--flow", required=True, help=".npy flow or JSON model/ground truth")
    p.add_argument("--size", type=_size, help="expected HxW")
    p.add_argument("--max-events", type=int, default=None)
    p.add_argument("--out", help="also write the JSON here")
    _add_loss_opts(p)
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("fit-flow", help="fit a constant or affine flow model")
    p.add_argument("--events", required=True)
    p.add_argument("--model", choices=("constant", "affine"), default="constant")
    p.add_argument("--init", type=_floats(), default=None)
    p.add_argument("--flow-out", help="also write the dense flow (.npy)")
    _add_camera_opts(p)
    _add_fit_opts(p)
    p.set_defaults(func=cmd_fit_flow)

    p = sub.add_parser("fit-egomotion", help="fit a rotation or rigid planar motion")
    p.add_argument("--events", required=True, help="(left) events")
    p.add_argument("--right", help="right-camera events; enables the stereo terms")
    p.add_argument("--model", choices=("rotation", "rigid"), default="rotation")
    p.add_argument("--init-depth", type=float, default=3.0, help="initial plane depth (m)")
    p.add_argument("--init-pose", type=_floats(), default=None, help="psi,beta,phi[,tx,ty,tz]")
    p.add_argument("--disparity-out", help="rigid only: disparity map as .pgm (0..W) or flat binary")
    _add_camera_opts(p)
    _add_fit_opts(p)
    p.set_defaults(func=cmd_fit_egomotion)

    p = sub.add_parser("synth", help="generate a synthetic scene with ground truth")
    p.add_argument("--kind", choices=("flow", "rigid", "stereo"), default="flow")
    p.add_argument("--flow", type=_floats(2), default=(2.0, -1.0), help="u,v px/bin")
    p.add_argument("--pose", type=_floats(6), default=(0.0, 0.0, 0.0, 0.0, 0.0, 0.0),
                   help="psi,beta,phi,tx,ty,tz (rad, m)")
    p.add_argument("--depth", type=float, default=5.0, help="plane depth (m)")
    p.add_argument("--baseline", type=float, default=0.1, help="stereo baseline (m)")
    p.add_argument("--focal", type=float, default=200.0)
    p.add_argument("--size", type=_size, default=(64, 64))
    p.add_argument("--bins", type=int, default=9)
    p.add_argument("--sources", type=int, default=30)
    p.add_argument("--events-per-source", type=int, default=40)
    p.add_argument("--noise-rate", type=float, default=0.0, help="spurious events per second")
    p.add_argument("--duration", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("csv", "binary"), default="csv")
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval-flow", help="AEE and outlier fraction against ground truth")
    p.add_argument("--pred", required=True, help="fit result JSON or .npy flow")
    p.add_argument("--gt", required=True, help="ground-truth sidecar JSON or .npy flow")
    p.add_argument("--events", help="restrict to pixels with at least one event")
    p.add_argument("--bins", type=int, default=9)
    p.add_argument("--dt", type=float, default=None, help="report displacement over dt seconds (px)")
    p.add_argument("--window", type=float, default=None, help="window duration in seconds (default dt)")
    p.add_argument("--out", help="also write the JSON report")
    p.set_defaults(func=cmd_eval_flow)

    p = sub.add_parser("eval-pose", help="RPE/RRE against a ground-truth pose")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_pose)

    p = sub.add_parser("render", help="export images (PGM/PNG)")
    p.add_argument("--flow")
    p.add_argument("--model")
    p.add_argument("--events")
    p.add_argument("--size", type=_size)
    p.add_argument("--max-magnitude", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)
    return ap


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        args.func(args)
    except (CliError, OSError, ValueError, KeyError, TypeError) as e:
        msg = f"missing key {e}" if isinstance(e, KeyError) else str(e)
        print(f"evmc {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
