"""Procedural scenes, a ray-cast depth camera and the desk-scale benchmarks.

The patch benchmark observes simple local geometries (planes, dihedral
edges, trihedral corners, spheres, cylinders) from two nearby viewpoints
and voxelizes each view in its own camera axes.  The fragment benchmark
renders small rooms with furniture-like primitives from two cameras and
keeps each view's cloud in its camera frame, with the relative pose as
ground truth.
"""

from __future__ import annotations

import os
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .evaluation import FragmentPair, overlap_fraction_of
from .fileio import write_depth_pgm, write_intrinsics, write_ply, write_pose
from .geometry import (
    CameraIntrinsics,
    DepthFrame,
    RigidTransform,
    back_project,
    compose,
    invert,
    random_rotation,
    rotation_about,
)
from .tdf import TdfConfig, extract_patch, write_tdf

DEPTH_NOISE = 0.002
PATCH_CAMERA = CameraIntrinsics(220.0, 220.0, 47.5, 47.5, 96, 96)
SCENE_CAMERA = CameraIntrinsics(180.0, 180.0, 99.5, 74.5, 200, 150)
PRIMITIVE_KINDS = ("plane", "edge", "corner", "sphere", "cylinder")

_EPS = 1e-9


# ------------------------------------------------------------------ primitives

@dataclass(frozen=True)
class Plane:
    normal: np.ndarray
    offset: float  # normal · x = offset

    def intersect(self, o, d):
        nd = d @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.offset - o @ self.normal) / nd
        return np.where(np.abs(nd) > _EPS, t, np.inf)


@dataclass(frozen=True)
class Box:
    center: np.ndarray
    rotation: np.ndarray
    half: np.ndarray

    def intersect(self, o, d):
        lo = (o - self.center) @ self.rotation
        ld = d @ self.rotation
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-self.half - lo) / ld
            t2 = (self.half - lo) / ld
        tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
        hit = (tmax >= tmin) & (tmax > 0)
        t = np.where(tmin > 0, tmin, tmax)
        return np.where(hit, t, np.inf)


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float

    def intersect(self, o, d):
        oc = o - self.center
        a = np.sum(d * d, axis=-1)
        b = 2 * (d @ oc)
        c = oc @ oc - self.radius ** 2
        return _smallest_root(a, b, c)


@dataclass(frozen=True)
class Cylinder:
    center: np.ndarray
    rotation: np.ndarray  # third column is the axis
    radius: float
    half_height: float

    def intersect(self, o, d):
        lo = (o - self.center) @ self.rotation
        ld = d @ self.rotation
        a = ld[:, 0] ** 2 + ld[:, 1] ** 2
        b = 2 * (lo[0] * ld[:, 0] + lo[1] * ld[:, 1])
        c = lo[0] ** 2 + lo[1] ** 2 - self.radius ** 2
        disc = b * b - 4 * a * c
        best = np.full(len(d), np.inf)
        ok = (disc >= 0) & (a > _EPS)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        safe_a = np.where(ok, a, 1.0)
        for root in ((-b - sq) / (2 * safe_a), (-b + sq) / (2 * safe_a)):
            z = lo[2] + root * ld[:, 2]
            good = ok & (root > 0) & (np.abs(z) <= self.half_height)
            best = np.where(good & (root < best), root, best)
        for cap in (-self.half_height, self.half_height):
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (cap - lo[2]) / ld[:, 2]
            x = lo[0] + t * ld[:, 0]
            y = lo[1] + t * ld[:, 1]
            good = (t > 0) & (x * x + y * y <= self.radius ** 2) & np.isfinite(t)
            best = np.where(good & (t < best), t, best)
        return best


def _smallest_root(a, b, c):
    disc = b * b - 4 * a * c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    r1 = (-b - sq) / (2 * a)
    r2 = (-b + sq) / (2 * a)
    t = np.where(r1 > 0, r1, np.where(r2 > 0, r2, np.inf))
    return np.where(ok, t, np.inf)


# ------------------------------------------------------------------ rendering

def look_at(eye, target, up) -> RigidTransform:
    """Camera-to-world pose (x right, y down, z forward) looking from ``eye`` at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-6:
        right = np.cross(fwd, [1.0, 0.0, 0.0]) if abs(fwd[0]) < 0.9 else np.cross(fwd, [0.0, 1.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return RigidTransform(np.stack([right, down, fwd], axis=1), eye)


def render_depth(primitives, intrinsics: CameraIntrinsics, pose: RigidTransform,
                 rng: np.random.Generator | None = None, noise: float = 0.0,
                 max_depth: float = 6.0) -> DepthFrame:
    """Ray-cast the nearest primitive for every pixel; optional Gaussian depth noise."""
    k = intrinsics
    v, u = np.mgrid[0:k.height, 0:k.width]
    dirs_cam = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u, dtype=np.float64)], axis=-1)
    dirs = dirs_cam.reshape(-1, 3) @ pose.rotation.T
    origin = pose.translation
    depth = np.full(len(dirs), np.inf)
    for prim in primitives:
        depth = np.minimum(depth, prim.intersect(origin, dirs))
    depth[~(depth < max_depth)] = 0.0
    if noise > 0 and rng is not None:
        valid = depth > 0
        depth[valid] += rng.normal(0.0, noise, size=int(valid.sum()))
        depth = np.maximum(depth, 0.0)
    return DepthFrame(depth.reshape(k.height, k.width), k, pose)


# ------------------------------------------------------------ local geometries

def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def _perpendicular(v, rng):
    a = rng.normal(size=3)
    a -= (a @ v) * v
    return _unit(a)


def local_geometry(kind: str, rng: np.random.Generator, center):
    """Primitives forming one local geometry of ``kind`` around ``center``.

    Returns ``(primitives, keypoint, outward_normal)``; the normal points to
    the side the geometry can be observed from.
    """
    center = np.asarray(center, dtype=np.float64)
    rot = random_rotation(rng)
    if kind == "plane":
        n = rot[:, 2]
        return [Plane(n, float(n @ center))], center, n
    if kind == "edge":
        big = 1.0
        if rng.random() < 0.5:
            # convex edge of a large box
            half = np.array([big, rng.uniform(0.15, 0.6), rng.uniform(0.15, 0.6)])
            corner_dir = np.array([0.0, 1.0, 1.0])
            box_c = center - rot @ (half * corner_dir)
            normal = rot @ _unit(corner_dir)
            return [Box(box_c, rot, half)], center, normal
        # concave edge: box face meeting a floor
        floor_n = rot[:, 2]
        half = np.array([big, rng.uniform(0.15, 0.6), rng.uniform(0.2, 0.6)])
        box_c = center + rot @ np.array([0.0, -half[1], half[2]])
        normal = rot @ _unit([0.0, 1.0, 1.0])
        return [Plane(floor_n, float(floor_n @ center)), Box(box_c, rot, half)], center, normal
    if kind == "corner":
        if rng.random() < 0.5:
            half = rng.uniform(0.15, 0.6, size=3)
            box_c = center - rot @ half
            return [Box(box_c, rot, half)], center, rot @ _unit([1.0, 1.0, 1.0])
        # concave room corner from three planes
        prims = [Plane(rot[:, i], float(rot[:, i] @ center)) for i in range(3)]
        # cameras sit inside the octant, so the first plane hit is always a wall
        return prims, center, rot @ _unit([1.0, 1.0, 1.0])
    if kind == "sphere":
        r = rng.uniform(0.05, 0.3)
        n = rot[:, 2]
        return [Sphere(center - r * n, r)], center, n
    if kind == "cylinder":
        r = rng.uniform(0.03, 0.2)
        n = rot[:, 0]
        axis_rot = rot  # axis is rot[:, 2]
        return [Cylinder(center - r * n, axis_rot, r, rng.uniform(0.2, 0.8))], center, n
    raise ValueError(f"unknown geometry kind {kind!r}")


def _view_direction(normal, rng, max_tilt_deg):
    tilt = np.radians(rng.uniform(0.0, max_tilt_deg))
    return rotation_about(_perpendicular(normal, rng), tilt) @ normal


@dataclass
class PatchView:
    frame: DepthFrame
    keypoint_world: np.ndarray


def _observe(prims, keypoint, direction, up, rng, cam, noise, distance_range):
    from .sampling import visibility_check

    dist = rng.uniform(*distance_range)
    pose = look_at(keypoint + dist * direction, keypoint, up)
    frame = render_depth(prims, cam, pose, rng, noise)
    if visibility_check(frame, keypoint, 0.03) is None:
        return None
    return PatchView(frame, keypoint)


@dataclass(frozen=True)
class PatchBenchConfig:
    n_matches: int = 300
    n_non_matches: int = 300
    noise: float = DEPTH_NOISE
    max_tilt_deg: float = 35.0
    view_angle_deg: tuple[float, float] = (10.0, 30.0)
    distance: tuple[float, float] = (0.8, 1.4)
    keypoint_jitter: float = 0.0


def _geometry_views(rng, kind, center, n_views, cfg: PatchBenchConfig, cam=PATCH_CAMERA):
    """Sample one geometry instance and ``n_views`` visible observations of its keypoint."""
    for _ in range(100):
        prims, kp, normal = local_geometry(kind, rng, center)
        up = _perpendicular(normal, rng)
        d1 = _view_direction(normal, rng, cfg.max_tilt_deg)
        dirs = [d1]
        if n_views == 2:
            ang = np.radians(rng.uniform(*cfg.view_angle_deg))
            d2 = rotation_about(_perpendicular(d1, rng), ang) @ d1
            if d2 @ normal < np.cos(np.radians(70.0)):
                continue
            dirs.append(d2)
        views = [_observe(prims, kp, d, up, rng, cam, cfg.noise, cfg.distance) for d in dirs]
        if all(v is not None for v in views):
            return views
    raise RuntimeError(f"could not find visible views for a {kind} geometry")


def _view_patch(view: PatchView, tdf_cfg: TdfConfig, keypoint=None):
    kp = view.keypoint_world if keypoint is None else keypoint
    return extract_patch(view.frame, kp, tdf_cfg)


@dataclass
class PatchPairRecord:
    patch_a: object
    patch_b: object
    label: bool
    world_a: np.ndarray
    world_b: np.ndarray
    kinds: tuple[str, str]


def generate_patch_pairs(seed: int, cfg: PatchBenchConfig = PatchBenchConfig(),
                         tdf_cfg: TdfConfig = TdfConfig()) -> list[PatchPairRecord]:
    """Match and non-match patch pairs, alternating labels while both remain."""
    ss = np.random.SeedSequence(seed)
    match_rng, non_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    records = []
    spacing = 10.0
    slot = 0
    matches = []
    for _ in range(cfg.n_matches):
        kind = PRIMITIVE_KINDS[match_rng.integers(len(PRIMITIVE_KINDS))]
        center = np.array([spacing * slot, 0.0, 0.0])
        slot += 1
        va, vb = _geometry_views(match_rng, kind, center, 2, cfg)
        kp_b = vb.keypoint_world
        if cfg.keypoint_jitter > 0:
            kp_b = kp_b + match_rng.uniform(-cfg.keypoint_jitter, cfg.keypoint_jitter, size=3)
        matches.append(PatchPairRecord(
            _view_patch(va, tdf_cfg), _view_patch(vb, tdf_cfg, kp_b), True,
            va.keypoint_world, kp_b, (kind, kind)))
    non_matches = []
    for _ in range(cfg.n_non_matches):
        kinds = [PRIMITIVE_KINDS[k] for k in non_rng.integers(len(PRIMITIVE_KINDS), size=2)]
        views = []
        for kind in kinds:
            center = np.array([spacing * slot, 0.0, 0.0])
            slot += 1
            views.append(_geometry_views(non_rng, kind, center, 1, cfg)[0])
        non_matches.append(PatchPairRecord(
            _view_patch(views[0], tdf_cfg), _view_patch(views[1], tdf_cfg), False,
            views[0].keypoint_world, views[1].keypoint_world, tuple(kinds)))
    # interleave so any prefix is balanced
    i = j = 0
    while i < len(matches) or j < len(non_matches):
        if i < len(matches):
            records.append(matches[i])
            i += 1
        if j < len(non_matches):
            records.append(non_matches[j])
            j += 1
    return records


# ------------------------------------------------------------------ scenes

def room_scene(rng: np.random.Generator, n_objects: int | None = None):
    """Floor, two walls and a handful of boxes, spheres and cylinders."""
    prims = [
        Plane(np.array([0.0, 0.0, 1.0]), 0.0),
        Plane(np.array([1.0, 0.0, 0.0]), -1.2),
        Plane(np.array([0.0, 1.0, 0.0]), -1.2),
    ]
    n_objects = int(rng.integers(5, 9)) if n_objects is None else n_objects
    for _ in range(n_objects):
        kind = rng.integers(3)
        xy = rng.uniform(-0.9, 0.9, size=2)
        yaw = rotation_about([0, 0, 1], rng.uniform(0, 2 * np.pi))
        if kind == 0:
            half = rng.uniform(0.08, 0.3, size=3)
            prims.append(Box(np.array([xy[0], xy[1], half[2]]), yaw, half))
        elif kind == 1:
            r = rng.uniform(0.08, 0.25)
            prims.append(Sphere(np.array([xy[0], xy[1], r + rng.uniform(0, 0.3)]), r))
        else:
            r, hh = rng.uniform(0.05, 0.18), rng.uniform(0.1, 0.4)
            tilt = np.eye(3) if rng.random() < 0.6 else rotation_about([1, 0, 0], np.pi / 2)
            z = hh if tilt[2, 2] == 1 else r
            prims.append(Cylinder(np.array([xy[0], xy[1], z]), yaw @ tilt, r, hh))
    return prims


def _scene_camera(rng, yaw, radius=None, height=None, target=None):
    radius = rng.uniform(1.8, 2.4) if radius is None else radius
    height = rng.uniform(1.0, 1.6) if height is None else height
    target = np.array([0.0, 0.0, 0.2]) + rng.uniform(-0.2, 0.2, size=3) * [1, 1, 0.5] if target is None else target
    eye = np.array([radius * np.cos(yaw), radius * np.sin(yaw), height])
    return look_at(eye, target, np.array([0.0, 0.0, 1.0]))


def generate_fragment_pairs(seed: int, n_scenes: int = 10, noise: float = DEPTH_NOISE,
                            yaw_gap_deg: tuple[float, float] = (15.0, 30.0),
                            n_correspondences: int = 500, overlap_distance: float = 0.03):
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    pairs = []
    for _ in range(n_scenes):
        prims = room_scene(rng)
        yaw_a = rng.uniform(np.radians(15), np.radians(75))
        gap = np.radians(rng.uniform(*yaw_gap_deg)) * (1 if rng.random() < 0.5 else -1)
        frame_a = render_depth(prims, SCENE_CAMERA, _scene_camera(rng, yaw_a), rng, noise)
        frame_b = render_depth(prims, SCENE_CAMERA, _scene_camera(rng, yaw_a + gap), rng, noise)
        a, b = back_project(frame_a), back_project(frame_b)
        gt = compose(invert(frame_b.pose), frame_a.pose)
        moved = gt.apply(a)
        d, _ = cKDTree(b).query(moved)
        shared = np.flatnonzero(d <= overlap_distance)
        pick = np.sort(rng.choice(shared, min(n_correspondences, len(shared)), replace=False))
        corr = np.stack([a[pick], moved[pick]], axis=1)
        overlap = overlap_fraction_of(gt, a, b, overlap_distance)
        pairs.append(FragmentPair(a, b, gt, corr, overlap >= 0.3))
    return pairs


def render_reconstruction(seed: int, n_frames: int = 6, noise: float = DEPTH_NOISE,
                          intrinsics: CameraIntrinsics = SCENE_CAMERA):
    """Posed depth frames of one room, cameras spread on an arc (wide baselines)."""
    from .sampling import Reconstruction

    rng = np.random.default_rng(seed)
    prims = room_scene(rng)
    yaws = np.linspace(np.radians(5), np.radians(85), n_frames)
    frames = []
    for yaw in yaws:
        pose = _scene_camera(rng, yaw, radius=2.2, height=1.4, target=np.array([0.0, 0.0, 0.2]))
        frames.append(render_depth(prims, intrinsics, pose, rng, noise))
    return Reconstruction(tuple(frames), f"synthetic-{seed}")


def write_scene_dir(rec, out_dir) -> Path:
    """Write a reconstruction in the frame-NNNNNN.{depth.pgm,pose.txt} layout."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_intrinsics(out / "camera-intrinsics.txt", rec.frames[0].intrinsics)
    for i, frame in enumerate(rec.frames):
        write_depth_pgm(out / f"frame-{i:06d}.depth.pgm", frame.depth)
        write_pose(out / f"frame-{i:06d}.pose.txt", frame.pose)
    return out


# --------------------------------------------------------------- benchmark I/O

def _fmt(v: float) -> str:
    return f"{v:.9f}"


def write_patch_benchmark(records, out_dir, prefix="patches") -> Path:
    out = Path(out_dir)
    (out / prefix).mkdir(parents=True, exist_ok=True)
    lines, meta = [], []
    for i, rec in enumerate(records):
        pa, pb = f"{prefix}/{i:06d}-a.tdf", f"{prefix}/{i:06d}-b.tdf"
        write_tdf(out / pa, rec.patch_a)
        write_tdf(out / pb, rec.patch_b)
        lines.append(f"{pa} {pb} {int(rec.label)}")
        meta.append(" ".join(_fmt(v) for v in (*rec.world_a, *rec.world_b)) + f" {rec.kinds[0]} {rec.kinds[1]}")
    (out / f"{prefix}.txt").write_text("\n".join(lines) + "\n")
    (out / f"{prefix}.meta.txt").write_text("\n".join(meta) + "\n")
    return out / f"{prefix}.txt"


def write_fragment_benchmark(pairs, out_dir) -> Path:
    out = Path(out_dir)
    (out / "fragments").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, fp in enumerate(pairs):
        base = f"fragments/scene-{i:02d}"
        write_ply(out / f"{base}-a.ply", fp.cloud_a)
        write_ply(out / f"{base}-b.ply", fp.cloud_b)
        write_pose(out / f"{base}-gt.pose.txt", fp.gt_transform)
        corr = [" ".join(_fmt(v) for v in (*p, *q)) for p, q in fp.gt_correspondences]
        (out / f"{base}-gt.corr.txt").write_text("\n".join(corr) + "\n")
        lines.append(f"{base}-a.ply {base}-b.ply {base}-gt.pose.txt {base}-gt.corr.txt {int(fp.overlap_gt)}")
    (out / "fragments.txt").write_text("\n".join(lines) + "\n")
    return out / "fragments.txt"


def generate_synthetic_benchmark(seed: int, out_dir, patch_cfg: PatchBenchConfig = PatchBenchConfig(),
                                 n_scenes: int = 10, tdf_cfg: TdfConfig = TdfConfig()) -> Path:
    """Write the patch-pair and fragment benchmarks under ``out_dir``.

    Output is staged in a temporary sibling directory and moved into place,
    so a failure leaves nothing behind.  Returns the patch manifest path.
    """
    out = Path(out_dir)
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.exists() and any(out.iterdir()):
        raise FileExistsError(f"{out}: output directory is not empty")
    stage = Path(tempfile.mkdtemp(prefix=".gen-bench-", dir=out.parent))
    try:
        records = generate_patch_pairs(seed, patch_cfg, tdf_cfg)
        write_patch_benchmark(records, stage)
        write_fragment_benchmark(generate_fragment_pairs(seed, n_scenes), stage)
        if out.exists():
            out.rmdir()
        os.replace(stage, out)
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    return out / "patches.txt"
