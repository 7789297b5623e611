"""Command-line front end: ``tdfmatch <subcommand> ...``.

Every subcommand accepts ``--seed`` and ``--config``.  Errors print one
``tdfmatch: error: ...`` line to stderr and exit with status 1; argument
errors exit with status 2 and the usage text.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import Config, load_config
from .evaluation import fpr_at_recall, read_fragment_benchmark, read_scores, registration_pr
from .fileio import load_frame, read_ply, read_pose, write_ply, write_pose
from .geometry import RigidTransform
from .net import default_spec, describe_batch, desk_spec, init_xavier, load_checkpoint, save_checkpoint, train
from .registration import (
    DescriptorSet,
    MatchSet,
    describe_keypoints,
    mutual_nearest,
    register_clouds,
    sample_keypoints,
    surface_correspondence_heat,
)
from .sampling import build_dataset, load_scene_dir, read_manifest
from .synthetic import PatchBenchConfig, generate_synthetic_benchmark
from .tdf import TdfConfig, extract_patch, read_tdf, write_tdf

ARCHITECTURES = {"default": default_spec, "desk": desk_spec}


def _num(v: float) -> str:
    return f"{v:.6f}"


# ----------------------------------------------------------------- file helpers

def _read_points(path) -> np.ndarray:
    vals = np.array(Path(path).read_text().split(), dtype=np.float64)
    if vals.size == 0 or vals.size % 3:
        raise ValueError(f"{path}: expected lines of 'x y z'")
    return vals.reshape(-1, 3)


def write_descriptors(path, ds: DescriptorSet) -> None:
    rows = np.hstack([ds.keypoints, ds.descriptors])
    Path(path).write_text("".join(" ".join(f"{v:.9g}" for v in r) + "\n" for r in rows))


def read_descriptors(path) -> DescriptorSet:
    rows = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not rows or len({len(r) for r in rows}) != 1 or len(rows[0]) < 4:
        raise ValueError(f"{path}: expected equal-length lines of 'x y z d1 ... dk'")
    try:
        arr = np.array(rows, dtype=np.float64)
    except ValueError:
        raise ValueError(f"{path}: non-numeric descriptor entry") from None
    return DescriptorSet(arr[:, :3], arr[:, 3:])


def write_matches(path, m: MatchSet) -> None:
    Path(path).write_text("".join(f"{a} {b} {d:.9g}\n" for a, b, d in zip(m.a, m.b, m.distance)))


def _write_result(out: Path, result) -> str:
    write_pose(out, result.transform)
    summary = result.summary()
    Path(f"{out}.summary").write_text(summary + "\n")
    return summary


def _load_net(path):
    return load_checkpoint(path)


# ------------------------------------------------------------------ commands

def cmd_voxelize(args, cfg: Config):
    tdf_cfg = cfg.tdf
    if args.cloud:
        source = read_ply(args.cloud)
    else:
        if not (args.depth and args.intrinsics and args.pose):
            raise ValueError("voxelize needs --cloud or all of --depth, --intrinsics, --pose")
        source = load_frame(args.depth, args.intrinsics, args.pose, args.world_to_camera)
    patch = extract_patch(source, np.array(args.keypoint), tdf_cfg)
    write_tdf(args.out, patch)
    print(f"wrote {args.out} max {_num(float(patch.values.max()))}")


def cmd_sample_corr(args, cfg: Config):
    recs = [load_scene_dir(d, args.world_to_camera) for d in args.scenes]
    path = build_dataset(recs, args.pairs, cfg.tdf, args.seed, args.out, cfg.sampling.occ_tol)
    print(path)


def cmd_gen_bench(args, cfg: Config):
    b = cfg.bench
    patch_cfg = PatchBenchConfig(n_matches=b.n_matches, n_non_matches=b.n_non_matches, noise=b.noise)
    print(generate_synthetic_benchmark(args.seed, args.out, patch_cfg, b.n_scenes, cfg.tdf))


def _manifest_grids(path):
    pairs = read_manifest(path)
    if not pairs:
        raise ValueError(f"{path}: empty manifest")
    a = np.stack([read_tdf(p).values for p, _, _ in pairs])
    b = np.stack([read_tdf(q).values for _, q, _ in pairs])
    return a, b, np.array([lab for _, _, lab in pairs], dtype=bool)


def cmd_train(args, cfg: Config):
    tcfg = cfg.train
    if args.iterations is not None:
        tcfg = replace(tcfg, max_iterations=args.iterations)
    if args.batch_size is not None:
        tcfg = replace(tcfg, batch_size=args.batch_size)
    if args.learning_rate is not None:
        tcfg = replace(tcfg, learning_rate=args.learning_rate)
    tcfg = replace(tcfg, seed=args.seed)
    if args.init:
        spec, params = _load_net(args.init)
    else:
        spec = ARCHITECTURES[args.arch]()
        params = init_xavier(spec, args.seed)
    a, b, labels = _manifest_grids(args.manifest)
    log_path = Path(args.log) if args.log else Path(f"{args.out}.log")
    with open(log_path, "w") as log:
        params, losses = train(spec, params, a, b, labels, tcfg, log=log)
    save_checkpoint(args.out, spec, params)
    print(f"iterations {len(losses)} final_loss {_num(losses[-1])}")


def cmd_describe(args, cfg: Config):
    spec, params = _load_net(args.checkpoint)
    cloud = read_ply(args.cloud)
    if args.keypoints:
        kps = _read_points(args.keypoints)
    else:
        kps = sample_keypoints(cloud, args.n_keypoints or cfg.register.n_keypoints, args.seed)
    ds = describe_keypoints(cloud, kps, spec, params, cfg.tdf)
    write_descriptors(args.out, ds)
    print(f"descriptors {len(ds)} dim {ds.descriptors.shape[1]}")


def cmd_match(args, cfg: Config):
    m = mutual_nearest(read_descriptors(args.a), read_descriptors(args.b))
    write_matches(args.out, m)
    print(f"matches {len(m)}")


def cmd_register(args, cfg: Config):
    spec, params = _load_net(args.checkpoint)
    n_kp = args.n_keypoints or cfg.register.n_keypoints
    ransac = replace(cfg.ransac, seed=args.seed)
    if args.bench_meta:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        pairs = read_fragment_benchmark(args.bench_meta)
        for i, fp in enumerate(pairs):
            res = register_clouds(fp.cloud_a, fp.cloud_b, spec, params, n_kp, cfg.tdf, ransac, seed=args.seed + i)[0]
            print(f"pair {i} " + _write_result(out_dir / f"pair-{i:03d}.pose.txt", res))
        return
    if not (args.a and args.b):
        raise ValueError("register needs --a and --b (or --bench-meta)")
    res = register_clouds(read_ply(args.a), read_ply(args.b), spec, params, n_kp, cfg.tdf, ransac, seed=args.seed)[0]
    print(_write_result(Path(args.out), res))


def cmd_eval_keypoints(args, cfg: Config):
    if args.scores:
        d, labels = read_scores(args.scores)
    else:
        if not (args.manifest and args.checkpoint):
            raise ValueError("eval-keypoints needs --scores or both --manifest and --checkpoint")
        spec, params = _load_net(args.checkpoint)
        a, b, labels = _manifest_grids(args.manifest)
        d = np.linalg.norm(describe_batch(spec, params, list(a)) - describe_batch(spec, params, list(b)), axis=1)
    print(f"error_at_95_recall {_num(fpr_at_recall(d, labels, args.recall))}")


def _read_prediction(pose_path: Path):
    """The predicted transform, or None when absent or flagged unconverged."""
    if not pose_path.exists():
        return None
    summary = Path(f"{pose_path}.summary")
    if summary.exists():
        parts = summary.read_text().split()
        try:
            converged = parts[parts.index("converged") + 1]
        except (ValueError, IndexError):
            raise ValueError(f"{summary}: expected 'inliers <k> rmse <r> converged <0|1>'") from None
        if converged == "0":
            return None
    return read_pose(pose_path)


def cmd_eval_registration(args, cfg: Config):
    pairs = read_fragment_benchmark(args.meta)
    pred_dir = Path(args.pred_dir)
    preds = [_read_prediction(pred_dir / f"pair-{i:03d}.pose.txt") for i in range(len(pairs))]
    metrics = registration_pr(preds, pairs, cfg.eval)
    print(metrics.line())


def cmd_surf_corr(args, cfg: Config):
    spec, params = _load_net(args.checkpoint)
    tdf_cfg = cfg.tdf if "tdf.voxel_size" in cfg.explicit else replace(cfg.tdf, voxel_size=0.005)
    tdf_cfg = replace(tdf_cfg, alignment="object")
    query = extract_patch(read_ply(args.query), np.array(args.query_point), tdf_cfg)
    pts, dist = surface_correspondence_heat(query, read_ply(args.target), spec, params, tdf_cfg, args.stride)
    write_ply(args.out, pts, {"heat": dist})
    finite = dist[np.isfinite(dist)]
    best = _num(float(finite.min())) if len(finite) else "inf"
    print(f"points {len(pts)} min_distance {best}")


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="key=value configuration file")

    p = argparse.ArgumentParser(prog="tdfmatch", description="Local 3D descriptors on TDF voxel patches.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("voxelize", parents=[common], help="TDF patch around a keypoint")
    s.add_argument("--cloud", help="ASCII PLY point cloud")
    s.add_argument("--depth")
    s.add_argument("--intrinsics")
    s.add_argument("--pose")
    s.add_argument("--world-to-camera", action="store_true", help="pose file stores world-to-camera")
    s.add_argument("--keypoint", type=float, nargs=3, required=True, metavar=("X", "Y", "Z"))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_voxelize)

    s = sub.add_parser("sample-corr", parents=[common], help="mine training pairs from scene directories")
    s.add_argument("--scenes", nargs="+", required=True)
    s.add_argument("--pairs", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--world-to-camera", action="store_true")
    s.set_defaults(func=cmd_sample_corr)

    s = sub.add_parser("gen-bench", parents=[common], help="write the synthetic benchmarks")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_bench)

    s = sub.add_parser("train", parents=[common], help="train a descriptor network")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--arch", choices=sorted(ARCHITECTURES), default="desk")
    s.add_argument("--init", help="start from this checkpoint")
    s.add_argument("--iterations", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--learning-rate", type=float)
    s.add_argument("--log", help="training log path (default <out>.log)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("describe", parents=[common], help="descriptors at cloud keypoints")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--cloud", required=True)
    s.add_argument("--keypoints", help="text file of 'x y z' lines (default: random cloud points)")
    s.add_argument("--n-keypoints", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_describe)

    s = sub.add_parser("match", parents=[common], help="mutual nearest descriptor matches")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_match)

    s = sub.add_parser("register", parents=[common], help="align cloud A onto cloud B")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--a")
    s.add_argument("--b")
    s.add_argument("--bench-meta", help="register every pair of a fragment benchmark")
    s.add_argument("--n-keypoints", type=int)
    s.add_argument("--out", required=True, help="pose file (or directory with --bench-meta)")
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("eval-keypoints", parents=[common], help="error at 95%% recall")
    s.add_argument("--scores", help="lines of '<distance> <0|1>'")
    s.add_argument("--manifest")
    s.add_argument("--checkpoint")
    s.add_argument("--recall", type=float, default=0.95)
    s.set_defaults(func=cmd_eval_keypoints)

    s = sub.add_parser("eval-registration", parents=[common], help="fragment registration recall/precision")
    s.add_argument("--meta", required=True)
    s.add_argument("--pred-dir", required=True)
    s.set_defaults(func=cmd_eval_registration)

    s = sub.add_parser("surf-corr", parents=[common], help="descriptor-distance heat over a target cloud")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--query", required=True)
    s.add_argument("--query-point", type=float, nargs=3, required=True, metavar=("X", "Y", "Z"))
    s.add_argument("--target", required=True)
    s.add_argument("--stride", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_surf_corr)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        args.func(args, cfg)
    except Exception as exc:  # one-line diagnostic, no traceback
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"tdfmatch: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
