"""Command-line front end: synth, init, reconstruct, render, mesh, eval, ttopt.

Exit codes: 0 success, 2 invalid input, 3 numerical divergence, 4 I/O failure.
Every subcommand writes its effective configuration next to its outputs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

EXIT_OK, EXIT_VALIDATION, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4

_TRAIN_HELP = {
    "iters": "optimization steps [count]",
    "lr_center": "initial center learning rate [fraction of scene extent per step]",
    "lr_center_final": "final center learning rate [fraction of scene extent per step]",
    "lr_quat": "rotation learning rate [quaternion units per step]",
    "lr_scale": "log-scale learning rate [log units per step]",
    "lr_opacity": "opacity-logit learning rate [logit units per step]",
    "lr_sh": "SH DC learning rate [color units per step]",
    "sh_rest_div": "divisor of lr_sh for higher SH bands [ratio]",
    "lr_pose": "initial pose learning rate [rad or world units per step]",
    "pose_decay": "final/initial pose learning-rate ratio [ratio]",
    "optimize_poses": "refine camera poses jointly [bool]",
    "beta1": "Adam first-moment decay [unitless]",
    "beta2": "Adam second-moment decay [unitless]",
    "eps": "Adam epsilon [unitless]",
    "photo": "photometric loss weight [unitless]",
    "corr": "correspondence loss weight [unitless]",
    "ssim_mix": "SSIM share of the photometric loss [fraction]",
    "distortion": "depth distortion weight [unitless]",
    "normal": "depth-normal consistency weight [unitless]",
    "var_enabled": "use the color variance loss [bool]",
    "corr_enabled": "use the correspondence loss [bool]",
    "tile_size": "rasterizer tile edge [pixels]",
    "dtype": "render precision [float32|float64]",
    "background": "background color [r,g,b in 0..1]",
    "checkpoint_every": "checkpoint period, 0 disables [steps]",
    "prune": "drop transparent surfels periodically [bool]",
    "prune_threshold": "opacity below which surfels are pruned [0..1]",
    "prune_every": "pruning period [steps]",
    "seed": "random seed [integer]",
    "extent": "scene extent override, default from cameras [world units]",
}


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_VALIDATION):
        super().__init__(message)
        self.code = code


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _floats(text: str):
    return [float(x) for x in str(text).split(",")]


# ---------------------------------------------------------------------------
# Configuration plumbing
# ---------------------------------------------------------------------------

def _effective(args, defaults: dict) -> dict:
    """Merge flag > config file > default; unknown config keys are an error."""
    from_file = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise CliError(f"config file {path} not found", EXIT_IO)
        try:
            from_file = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise CliError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(from_file, dict):
            raise CliError(f"{path}: expected a JSON object")
        unknown = set(from_file) - set(defaults)
        if unknown:
            raise CliError(f"{path}: unknown keys {sorted(unknown)}")
    out = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        out[key] = flag if flag is not None else from_file.get(key, default)
    return out


def _echo(cfg: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True, default=list) + "\n")


def _defaults(parser: argparse.ArgumentParser) -> dict:
    return dict(parser._defaults_table)


def _add(parser, flag, default, help, **kw):
    """Register a flag whose argparse default is None so file values can fill it."""
    dest = flag.lstrip("-").replace("-", "_")
    parser._defaults_table[dest] = default
    unit_help = f"{help} (default: {default})"
    parser.add_argument(flag, dest=dest, default=None, help=unit_help, **kw)


def _new_sub(subs, name, help):
    p = subs.add_parser(name, help=help, description=help)
    p._defaults_table = {}
    p.add_argument("--config", help="JSON file whose keys mirror this command's flags [path]")
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS/OpenMP threads [count]")
    return p


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _load_checkpoint(path):
    from .scene_io import read_checkpoint

    path = Path(path)
    if not path.is_file():
        raise CliError(f"checkpoint {path} not found", EXIT_IO)
    cloud, poses, intr = read_checkpoint(path)
    if intr is None:
        raise CliError(f"{path}: checkpoint carries no camera intrinsics")
    return cloud, poses, intr


def cmd_synth(cfg: dict) -> None:
    from .synthetic import SyntheticSpec, generate_synthetic, write_synthetic

    spec_dict = {}
    if cfg["spec"]:
        p = Path(cfg["spec"])
        if not p.is_file():
            raise CliError(f"spec file {p} not found", EXIT_IO)
        spec_dict = json.loads(p.read_text())
    if cfg["seed"] is not None:
        spec_dict["seed"] = cfg["seed"]
    try:
        spec = SyntheticSpec.from_dict(spec_dict)
        spec.validate()
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid synthetic spec: {exc}") from exc
    out = Path(cfg["out"])
    scene = generate_synthetic(spec)
    write_synthetic(scene, out)
    _echo({**cfg, "resolved_spec": asdict(spec)}, out / "config.json")


def _initialize(bundle, cfg: dict):
    """Aligned scene, poses, intrinsics and initial surfels for a bundle."""
    from .geometry import Intrinsics
    from .pointmap_align import aligned_from_poses, build_graph, estimate_pose_and_focal, global_align
    from .surfel_init import InitConfig, init_cloud

    if not bundle.pairs:
        raise CliError("bundle has no pointmaps; initialization needs pointmaps/ and conf/")
    w, h = bundle.resolution
    graph = build_graph(bundle.pairs, bundle.num_views)
    skip = cfg["skip_align"] or bundle.posed
    if skip:
        if bundle.cameras is None:
            raise CliError("--skip-align needs cameras.json in the bundle")
        poses = [c.pose for c in bundle.cameras]
        K = bundle.cameras[0].K
        aligned = aligned_from_poses(graph, poses, K.fx)
    else:
        aligned = global_align(graph, iters=cfg["align_iters"])
        poses, _, focal = estimate_pose_and_focal(aligned, graph, w, h)
        K = Intrinsics.centered(focal, w, h)
    icfg = InitConfig(k=cfg["knn"], opacity=cfg["opacity"], sh_degree=cfg["sh_degree"], stride=cfg["stride"])
    cloud = init_cloud(aligned, bundle.images, icfg)
    return aligned, poses, K, cloud


def cmd_init(cfg: dict) -> None:
    from . import formats
    from .scene_io import Camera, read_bundle, write_cameras, write_checkpoint

    bundle = read_bundle(cfg["bundle"])
    out = Path(cfg["out"])
    aligned, poses, K, cloud = _initialize(bundle, cfg)
    (out / "aligned").mkdir(parents=True, exist_ok=True)
    for v, (chi, conf) in enumerate(zip(aligned.chi, aligned.conf)):
        formats.write_pfm(out / "aligned" / f"{v:03d}_pts.pfm", chi)
        formats.write_pfm(out / "aligned" / f"{v:03d}_conf.pfm", conf)
    write_cameras(out / "cameras.json", [Camera(p, K) for p in poses])
    write_checkpoint(cloud, poses, out / "init.ply", [K] * len(poses))
    _echo(cfg, out / "config.json")


def cmd_reconstruct(cfg: dict) -> None:
    from .optimizer import TrainConfig, TrainingScene, reconstruct
    from .scene_io import read_bundle, write_checkpoint

    bundle = read_bundle(cfg["bundle"])
    out = Path(cfg["out"])
    train = {k: cfg[k] for k in _TRAIN_HELP}
    train["background"] = tuple(train["background"])
    try:
        tcfg = TrainConfig.from_dict(train)
        tcfg.validate()
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid training config: {exc}") from exc
    if cfg["init"]:
        cloud, poses, intr = _load_checkpoint(cfg["init"])
        K = intr[0]
    else:
        init_cfg = {"skip_align": cfg["skip_align"], "align_iters": 300, "knn": 20, "opacity": 0.8,
                    "sh_degree": 3, "stride": 1}
        _, poses, K, cloud = _initialize(bundle, init_cfg)
    if len(poses) != bundle.num_views:
        raise CliError(f"initial state has {len(poses)} cameras but the bundle has {bundle.num_views} views")
    if bundle.posed and tcfg.corr_enabled:
        tcfg.corr_enabled = False
    scene = TrainingScene(cloud, poses, K, bundle.images, bundle.correspondences)
    _echo({**cfg, "resolved": tcfg.to_dict()}, out / "config.json")
    result = reconstruct(scene, tcfg, out_dir=out)
    write_checkpoint(result.cloud, result.poses, out / "checkpoint.ply", [K] * len(result.poses))
    with open(out / "variance_trace.csv", "w") as f:
        f.write("step,var,w_var\n")
        for step, rep in enumerate(result.history):
            row = rep.row()
            f.write(f"{step},{row['var']!r},{row['w_var']!r}\n")


def cmd_render(cfg: dict) -> None:
    import numpy as np

    from . import formats
    from .render import RenderConfig, render
    from .scene_io import read_cameras

    cloud, poses, intr = _load_checkpoint(cfg["checkpoint"])
    buffers = [b.strip() for b in cfg["buffers"].split(",") if b.strip()]
    bad = set(buffers) - {"color", "depth", "normal", "acc", "var"}
    if bad:
        raise CliError(f"unknown buffers {sorted(bad)}")
    if cfg["pose_file"]:
        cams = read_cameras(cfg["pose_file"])
        views = [(i, c.pose, c.K) for i, c in enumerate(cams)]
    else:
        v = int(cfg["view"])
        if not 0 <= v < len(poses):
            raise CliError(f"--view {v} out of range for {len(poses)} cameras")
        views = [(v, poses[v], intr[v])]
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    rcfg = RenderConfig(dtype=cfg["dtype"], tile_size=cfg["tile_size"])
    for i, pose, K in views:
        tgt = render(cloud, pose, K, rcfg)
        stem = f"{i:03d}"
        if "color" in buffers:
            formats.write_png(out / f"{stem}_color.png", np.clip(tgt.color, 0, 1))
        if "depth" in buffers:
            formats.write_pfm(out / f"{stem}_depth.pfm", np.where(tgt.acc > 0, tgt.depth, 0))
        if "normal" in buffers:
            formats.write_pfm(out / f"{stem}_normal.pfm", tgt.normal)
        if "acc" in buffers:
            formats.write_pfm(out / f"{stem}_acc.pfm", tgt.acc)
        if "var" in buffers:
            formats.write_pfm(out / f"{stem}_var.pfm", tgt.variance)
    _echo(cfg, out / "config.json")


def _read_masks(folder, count):
    from . import formats

    folder = Path(folder)
    files = sorted(folder.glob("*.png"))
    if len(files) != count:
        raise CliError(f"{folder}: expected {count} mask images, found {len(files)}")
    return [formats.read_png(f) >= 0.5 for f in files]


def cmd_mesh(cfg: dict) -> None:
    import numpy as np

    from .meshing import TsdfVolume, clean_with_masks, extract_mesh, integrate, write_mesh
    from .optimizer import scene_extent
    from .render import RenderConfig, render

    cloud, poses, intr = _load_checkpoint(cfg["checkpoint"])
    extent = scene_extent(poses)
    voxel = cfg["voxel"] if cfg["voxel"] is not None else extent / cfg["resolution"]
    trunc = cfg["trunc"] if cfg["trunc"] is not None else 4.0 * voxel
    if voxel <= 0 or trunc < voxel:
        raise CliError(f"need voxel > 0 and trunc >= voxel, got voxel={voxel}, trunc={trunc}")
    lo = cloud.centers.min(axis=0) - trunc - 2 * voxel
    hi = cloud.centers.max(axis=0) + trunc + 2 * voxel
    dims = np.ceil((hi - lo) / voxel) + 1
    if float(np.prod(dims)) > cfg["max_voxels"]:
        raise CliError(f"volume of {int(np.prod(dims))} voxels exceeds --max-voxels {cfg['max_voxels']}")
    vol = TsdfVolume.from_bounds(lo, hi, voxel, trunc)
    rcfg = RenderConfig(dtype="float64")
    for pose, K in zip(poses, intr):
        tgt = render(cloud, pose, K, rcfg)
        integrate(vol, tgt.depth, tgt.acc, pose, K)
    mesh = extract_mesh(vol)
    if cfg["masks"]:
        mesh = clean_with_masks(mesh, _read_masks(cfg["masks"], len(poses)), poses, intr[0])
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    write_mesh(mesh, out)
    _echo({**cfg, "resolved_voxel": voxel, "resolved_trunc": trunc}, out.with_suffix(".config.json"))


def cmd_eval(cfg: dict) -> None:
    import numpy as np

    from . import formats
    from .meshing import read_mesh, rasterize_mesh
    from .metrics import DepthEval, TrajectoryEval, ate, normal_consistency, psnr_ssim, rel_error, scene_report, \
        write_aggregate_csv, write_report
    from .render import RenderConfig, render
    from .scene_io import read_bundle, read_cameras

    pred = Path(cfg["pred"])
    gt_root = Path(cfg["gt"])
    gt_dir = gt_root / "gt" if (gt_root / "gt").is_dir() else gt_root
    bundle_root = gt_dir.parent if gt_dir.name == "gt" else gt_root
    mesh_path = pred / cfg["mesh_name"]
    if not mesh_path.is_file():
        raise CliError(f"{mesh_path} not found", EXIT_IO)
    cloud, poses, intr = _load_checkpoint(pred / cfg["checkpoint_name"])
    mesh = read_mesh(mesh_path)
    gt_cams = read_cameras(gt_dir / "cameras.json")
    if len(gt_cams) != len(poses):
        raise CliError(f"{len(poses)} predicted cameras vs {len(gt_cams)} ground-truth cameras")
    bundle = read_bundle(bundle_root)
    align = cfg["align_scale"] == "on"
    gate = cfg["gate"]
    if gate == "mask" and bundle.masks is None:
        raise CliError("--gate mask needs masks/ in the ground-truth bundle")
    per_view = []
    rcfg = RenderConfig(dtype="float64")
    for v, (pose, K) in enumerate(zip(poses, intr)):
        gt_depth = formats.read_pfm(gt_dir / "depth" / f"{v:03d}.pfm").astype(np.float64)
        valid = None if gate == "gt" else bundle.masks[v]
        d, n, hit = rasterize_mesh(mesh, pose, K)
        entry = {"view": v}
        try:
            entry["rel"] = rel_error(DepthEval(np.where(hit, d, np.nan), gt_depth,
                                               hit if valid is None else hit & valid), align)
            entry["nc"] = normal_consistency(n, gt_depth, K, hit if valid is None else hit & valid)
        except ValueError:
            entry["rel"] = entry["nc"] = None
        img = render(cloud, pose, K, rcfg).color
        p, s = psnr_ssim(np.clip(img, 0, 1), bundle.images[v])
        entry["psnr"], entry["ssim"] = p, s
        per_view.append(entry)
    ate_value = ate(TrajectoryEval.from_poses(poses, [c.pose for c in gt_cams]))
    report = scene_report(per_view, ate_value, align, gate)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(report, out)
    if cfg["csv"]:
        write_aggregate_csv({cfg["scene_name"]: report}, Path(cfg["csv"]))
    _echo(cfg, out.with_suffix(".config.json"))


def cmd_ttopt(cfg: dict) -> None:
    from . import formats
    from .optimizer import test_time_camera_opt
    from .render import RenderConfig
    from .scene_io import Camera, read_cameras, write_cameras

    cloud, poses, intr = _load_checkpoint(cfg["checkpoint"])
    folder = Path(cfg["images"])
    files = sorted(folder.glob("*.png"))
    if not files:
        raise CliError(f"{folder}: no PNG images", EXIT_IO)
    images = [formats.read_png(f) for f in files]
    if cfg["init_poses"]:
        cams = read_cameras(cfg["init_poses"])
        init = [c.pose for c in cams]
        K = cams[0].K
    else:
        if len(images) > len(poses):
            raise CliError(f"{len(images)} images but only {len(poses)} checkpoint cameras; pass --init-poses")
        init, K = poses[:len(images)], intr[0]
    if len(init) != len(images):
        raise CliError(f"{len(images)} images for {len(init)} initial poses")
    if images[0].shape[:2] != (K.height, K.width):
        raise CliError(f"images are {images[0].shape[1]}x{images[0].shape[0]}, cameras expect {K.width}x{K.height}")
    rcfg = RenderConfig(dtype=cfg["dtype"])
    out_poses, losses = test_time_camera_opt(cloud, images, init, K, iters=cfg["iters"], lr=cfg["lr"],
                                             decay=cfg["decay"], rcfg=rcfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_cameras(out / "cameras.json", [Camera(p, K) for p in out_poses])
    with open(out / "ttopt_log.csv", "w") as f:
        f.write("step,l1\n")
        for i, l in enumerate(losses):
            f.write(f"{i},{l!r}\n")
    _echo(cfg, out / "config.json")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from .optimizer import TrainConfig

    parser = argparse.ArgumentParser(prog="surfelba", description="2D Gaussian surfel reconstruction toolkit")
    subs = parser.add_subparsers(dest="command", required=True)

    p = _new_sub(subs, "synth", "write a synthetic scene bundle with ground truth")
    _add(p, "--spec", None, "synthetic scene spec JSON [path]")
    _add(p, "--out", None, "output bundle directory [path]")
    _add(p, "--seed", None, "overrides the spec seed [integer]", type=int)
    p.set_defaults(func=cmd_synth, required=("out",))

    init_flags = [
        ("--skip-align", False, "take poses from cameras.json instead of aligning pointmaps [bool]", _bool),
        ("--align-iters", 300, "global alignment iterations [count]", int),
        ("--knn", 20, "neighbours for PCA normals [count]", int),
        ("--opacity", 0.8, "initial surfel opacity [0..1]", float),
        ("--sh-degree", 3, "spherical harmonics degree [0..3]", int),
        ("--stride", 1, "keep every n-th pointmap pixel per axis [pixels]", int),
    ]
    p = _new_sub(subs, "init", "align pointmaps, estimate cameras and seed surfels")
    _add(p, "--bundle", None, "input scene bundle [path]")
    _add(p, "--out", None, "output directory [path]")
    _add(p, "--seed", 0, "random seed [integer]", type=int)
    for flag, default, help, typ in init_flags:
        _add(p, flag, default, help, type=typ)
    p.set_defaults(func=cmd_init, required=("bundle", "out"))

    p = _new_sub(subs, "reconstruct", "joint surfel and camera optimization")
    _add(p, "--bundle", None, "input scene bundle [path]")
    _add(p, "--init", None, "initial checkpoint from `init`; computed in-process when omitted [path]")
    _add(p, "--out", None, "output directory [path]")
    _add(p, "--skip-align", False, "in-process init takes poses from cameras.json [bool]", type=_bool)
    defaults = TrainConfig()
    for f in fields(TrainConfig):
        val = getattr(defaults, f.name)
        if isinstance(val, bool):
            typ = _bool
        elif isinstance(val, tuple):
            typ, val = _floats, list(val)
        elif f.name == "extent":
            typ = float
        else:
            typ = type(val)
        _add(p, "--" + f.name.replace("_", "-"), val, _TRAIN_HELP[f.name], type=typ)
    p.set_defaults(func=cmd_reconstruct, required=("bundle", "out"))

    p = _new_sub(subs, "render", "render buffers of a checkpoint")
    _add(p, "--checkpoint", None, "checkpoint PLY [path]")
    _add(p, "--view", 0, "checkpoint camera index [integer]", type=int)
    _add(p, "--pose-file", None, "cameras.json with poses to render instead of --view [path]")
    _add(p, "--out", None, "output directory [path]")
    _add(p, "--buffers", "color,depth,normal,var", "comma list of color,depth,normal,acc,var [names]")
    _add(p, "--dtype", "float64", "render precision [float32|float64]")
    _add(p, "--tile-size", 16, "rasterizer tile edge [pixels]", type=int)
    p.set_defaults(func=cmd_render, required=("checkpoint", "out"))

    p = _new_sub(subs, "mesh", "fuse rendered depth into a TSDF and extract a mesh")
    _add(p, "--checkpoint", None, "checkpoint PLY [path]")
    _add(p, "--out", None, "output mesh PLY [path]")
    _add(p, "--voxel", None, "voxel edge, default extent/resolution [world units]", type=float)
    _add(p, "--trunc", None, "truncation distance, default 4 voxels [world units]", type=float)
    _add(p, "--resolution", 256, "voxels across the scene extent when --voxel is unset [count]", type=int)
    _add(p, "--max-voxels", 2.0e8, "refuse volumes larger than this [count]", type=float)
    _add(p, "--masks", None, "directory of training-view mask PNGs for cleaning [path]")
    p.set_defaults(func=cmd_mesh, required=("checkpoint", "out"))

    p = _new_sub(subs, "eval", "score a reconstruction against ground truth")
    _add(p, "--pred", None, "reconstruction directory holding the checkpoint and mesh [path]")
    _add(p, "--gt", None, "synthetic scene root or its gt/ directory [path]")
    _add(p, "--out", None, "report JSON [path]")
    _add(p, "--align-scale", "on", "median depth scale alignment [on|off]", choices=("on", "off"))
    _add(p, "--gate", "gt", "valid-pixel gate: gt depth only, or also bundle masks [gt|mask]",
         choices=("gt", "mask"))
    _add(p, "--mesh-name", "mesh.ply", "mesh file inside --pred [name]")
    _add(p, "--checkpoint-name", "checkpoint.ply", "checkpoint file inside --pred [name]")
    _add(p, "--csv", None, "also write an aggregate CSV [path]")
    _add(p, "--scene-name", "scene", "row label in the aggregate CSV [name]")
    p.set_defaults(func=cmd_eval, required=("pred", "gt", "out"))

    p = _new_sub(subs, "ttopt", "optimize test cameras against frozen surfels")
    _add(p, "--checkpoint", None, "checkpoint PLY [path]")
    _add(p, "--images", None, "directory of test-view PNGs [path]")
    _add(p, "--init-poses", None, "cameras.json with initial test poses [path]")
    _add(p, "--out", None, "output directory [path]")
    _add(p, "--iters", 1000, "optimization steps [count]", type=int)
    _add(p, "--lr", 1e-3, "initial pose learning rate [rad or world units per step]", type=float)
    _add(p, "--decay", 0.01, "final/initial learning-rate ratio [ratio]", type=float)
    _add(p, "--dtype", "float32", "render precision [float32|float64]")
    p.set_defaults(func=cmd_ttopt, required=("checkpoint", "images", "out"))
    return parser


def _set_threads(n) -> None:
    if n is None:
        return
    if n < 1:
        raise CliError("--threads must be >= 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "exit_code": code, "message": message}) + "\n")
    return code


def _threads_from_argv(argv):
    """``--threads`` value, read before the parser so it precedes the first numpy import."""
    for i, arg in enumerate(argv):
        text = arg.split("=", 1)[1] if arg.startswith("--threads=") else None
        if arg == "--threads" and i + 1 < len(argv):
            text = argv[i + 1]
        if text is not None:
            try:
                return int(text)
            except ValueError:
                return None  # the full parser reports it
    return None


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        _set_threads(_threads_from_argv(argv))
        parser = build_parser()
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:
            return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
        sub = parser._subparsers._group_actions[0].choices[args.command]
        cfg = _effective(args, _defaults(sub))
        missing = [k for k in args.required if cfg.get(k) in (None, "")]
        if missing:
            raise CliError(f"{args.command}: missing required option(s) "
                           + ", ".join("--" + m.replace("_", "-") for m in missing))
        args.func(cfg)
        return EXIT_OK
    except CliError as exc:
        return _fail(exc.code, "usage" if exc.code == EXIT_VALIDATION else "io", str(exc))
    except Exception as exc:  # map library errors onto the documented exit codes
        from .formats import FormatError
        from .pointmap_align import AlignmentDivergedError
        from .scene_io import SchemaError

        if isinstance(exc, SchemaError):
            return _fail(EXIT_VALIDATION, "schema", str(exc))
        if isinstance(exc, FormatError):
            return _fail(EXIT_IO, "format", str(exc))
        if isinstance(exc, OSError):
            return _fail(EXIT_IO, "io", str(exc))
        if isinstance(exc, (FloatingPointError, AlignmentDivergedError)):
            return _fail(EXIT_DIVERGED, "diverged", str(exc))
        if isinstance(exc, ValueError):
            return _fail(EXIT_VALIDATION, "validation", str(exc))
        raise


if __name__ == "__main__":
    sys.exit(main())
