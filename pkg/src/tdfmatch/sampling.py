"""Self-supervised mining of matching and non-matching patch pairs from posed depth frames.

A match is one world surface point seen from two frames whose camera
centers are at least ``min_baseline`` apart; a non-match is two surface
points at least ``min_separation`` apart, each cut from a frame that sees
it.  Interest points are drawn uniformly from the union of all
back-projected frame points.
"""

from __future__ import annotations

import os
import shutil
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .fileio import load_frame
from .geometry import DepthFrame, as_point, back_project
from .tdf import TdfConfig, TdfPatch, extract_patch, write_tdf

OCCLUSION_TOL = 0.03
MIN_BASELINE = 1.0
MIN_SEPARATION = 0.1
BUDGET_FACTOR = 100


class SamplingError(RuntimeError):
    def __init__(self, message: str, found: int):
        super().__init__(message)
        self.found = found


@dataclass(frozen=True)
class Reconstruction:
    frames: tuple[DepthFrame, ...]
    name: str = "scene"

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        if len(self.frames) < 2:
            raise ValueError("a reconstruction needs at least two frames")


@dataclass
class InterestPoint:
    position: np.ndarray
    visible_frames: list[tuple[int, int, int]]


@dataclass
class CorrespondencePair:
    patch_a: TdfPatch
    patch_b: TdfPatch
    label: bool
    meta: dict = field(default_factory=dict)


def visibility_check(frame: DepthFrame, world_point, occ_tol: float = OCCLUSION_TOL):
    """Pixel ``(u, v)`` where ``frame`` observes ``world_point`` unoccluded, else ``None``."""
    p = as_point(world_point)
    cam = (p - frame.pose.translation) @ frame.pose.rotation
    if cam[2] <= 0:
        return None
    k = frame.intrinsics
    u, v = k.project(cam)
    ui, vi = int(np.floor(u + 0.5)), int(np.floor(v + 0.5))
    if not (0 <= ui < k.width and 0 <= vi < k.height):
        return None
    measured = frame.depth[vi, ui]
    if measured <= 0 or abs(measured - cam[2]) > occ_tol:
        return None
    return ui, vi


class _FrameCache:
    """Back-projected clouds per frame plus the pooled world points."""

    def __init__(self, rec: Reconstruction):
        self.rec = rec
        self.cam = [back_project(f) for f in rec.frames]
        world = [f.pose.apply(c) for f, c in zip(rec.frames, self.cam)]
        self.world = np.concatenate(world) if world else np.zeros((0, 3))
        self.centers = np.array([f.camera_center for f in rec.frames])

    def interest_point(self, rng, occ_tol) -> InterestPoint:
        p = self.world[rng.integers(len(self.world))]
        vis = []
        for i, frame in enumerate(self.rec.frames):
            px = visibility_check(frame, p, occ_tol)
            if px is not None:
                vis.append((i, px[0], px[1]))
        return InterestPoint(p, vis)

    def patch(self, i: int, p, cfg: TdfConfig) -> TdfPatch:
        frame = self.rec.frames[i]
        if cfg.alignment == "object":
            return extract_patch(frame.pose.apply(self.cam[i]), p, cfg)
        k_cam = (p - frame.pose.translation) @ frame.pose.rotation
        patch = extract_patch(self.cam[i], k_cam, cfg)
        return replace(patch, origin=frame.pose.apply(patch.origin), axes=frame.pose.rotation)


def _budget(n: int, budget: int | None) -> int:
    return BUDGET_FACTOR * n if budget is None else budget


def sample_matches(rec: Reconstruction, n: int, cfg: TdfConfig = TdfConfig(), seed=0,
                   occ_tol: float = OCCLUSION_TOL, min_baseline: float = MIN_BASELINE,
                   budget: int | None = None, _cache: _FrameCache | None = None) -> list[CorrespondencePair]:
    if n <= 0:
        raise ValueError("pair count must be positive")
    rng = np.random.default_rng(seed)
    cache = _cache or _FrameCache(rec)
    if len(cache.world) == 0:
        raise SamplingError("reconstruction has no valid depth", 0)
    out: list[CorrespondencePair] = []
    for _ in range(_budget(n, budget)):
        ip = cache.interest_point(rng, occ_tol)
        frames = [f for f, _, _ in ip.visible_frames]
        cands = [(a, b) for k, a in enumerate(frames) for b in frames[k + 1:]
                 if np.linalg.norm(cache.centers[a] - cache.centers[b]) >= min_baseline]
        if not cands:
            continue
        a, b = cands[rng.integers(len(cands))]
        try:
            pa, pb = cache.patch(a, ip.position, cfg), cache.patch(b, ip.position, cfg)
        except ValueError:
            continue
        out.append(CorrespondencePair(pa, pb, True, {
            "frames": (a, b),
            "world": (ip.position.copy(), ip.position.copy()),
            "centers": (cache.centers[a].copy(), cache.centers[b].copy()),
        }))
        if len(out) == n:
            return out
    raise SamplingError(f"attempt budget exhausted: found {len(out)} of {n} match pairs", len(out))


def sample_non_matches(rec: Reconstruction, n: int, cfg: TdfConfig = TdfConfig(), seed=0,
                       occ_tol: float = OCCLUSION_TOL, min_separation: float = MIN_SEPARATION,
                       budget: int | None = None, _cache: _FrameCache | None = None) -> list[CorrespondencePair]:
    if n <= 0:
        raise ValueError("pair count must be positive")
    rng = np.random.default_rng(seed)
    cache = _cache or _FrameCache(rec)
    if len(cache.world) == 0:
        raise SamplingError("reconstruction has no valid depth", 0)
    out: list[CorrespondencePair] = []
    for _ in range(_budget(n, budget)):
        p1 = cache.interest_point(rng, occ_tol)
        p2 = cache.interest_point(rng, occ_tol)
        if np.linalg.norm(p1.position - p2.position) < min_separation:
            continue
        if not p1.visible_frames or not p2.visible_frames:
            continue
        fa = p1.visible_frames[rng.integers(len(p1.visible_frames))][0]
        fb = p2.visible_frames[rng.integers(len(p2.visible_frames))][0]
        try:
            pa, pb = cache.patch(fa, p1.position, cfg), cache.patch(fb, p2.position, cfg)
        except ValueError:
            continue
        out.append(CorrespondencePair(pa, pb, False, {
            "frames": (fa, fb),
            "world": (p1.position.copy(), p2.position.copy()),
            "centers": (cache.centers[fa].copy(), cache.centers[fb].copy()),
        }))
        if len(out) == n:
            return out
    raise SamplingError(f"attempt budget exhausted: found {len(out)} of {n} non-match pairs", len(out))


def build_dataset(recs, n_pairs: int, cfg: TdfConfig = TdfConfig(), seed=0, out_dir=".",
                  occ_tol: float = OCCLUSION_TOL) -> Path:
    """Write ``n_pairs`` balanced pairs as TDF files and a ``pairs.txt`` manifest.

    Pair ``i`` of each label comes from reconstruction ``i % len(recs)``.
    Each (reconstruction, label) stream has its own child seed, so shards
    can be sampled independently without changing the result.  Returns the
    manifest path; nothing is left behind on failure.
    """
    if n_pairs <= 0 or n_pairs % 2:
        raise ValueError("pair count must be even")
    recs = list(recs)
    if not recs:
        raise ValueError("no reconstructions given")
    half = n_pairs // 2
    streams = np.random.SeedSequence(seed).spawn(2 * len(recs))
    matches: list[list] = []
    non_matches: list[list] = []
    for r, rec in enumerate(recs):
        count = len(range(r, half, len(recs)))
        cache = _FrameCache(rec)
        if count == 0:
            matches.append([])
            non_matches.append([])
            continue
        matches.append(sample_matches(rec, count, cfg, streams[2 * r], occ_tol, _cache=cache))
        non_matches.append(sample_non_matches(rec, count, cfg, streams[2 * r + 1], occ_tol, _cache=cache))

    out = Path(out_dir)
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.exists() and any(out.iterdir()):
        raise FileExistsError(f"{out}: output directory is not empty")
    stage = Path(tempfile.mkdtemp(prefix=".sample-corr-", dir=out.parent))
    try:
        (stage / "patches").mkdir()
        lines = []
        for i in range(half):
            r, k = i % len(recs), i // len(recs)
            for tag, pair in (("m", matches[r][k]), ("n", non_matches[r][k])):
                a, b = f"patches/{i:06d}{tag}-a.tdf", f"patches/{i:06d}{tag}-b.tdf"
                write_tdf(stage / a, pair.patch_a)
                write_tdf(stage / b, pair.patch_b)
                lines.append(f"{a} {b} {int(pair.label)}")
        (stage / "pairs.txt").write_text("\n".join(lines) + "\n")
        if out.exists():
            out.rmdir()
        os.replace(stage, out)
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    return out / "pairs.txt"


def load_scene_dir(path, world_to_camera: bool = False) -> Reconstruction:
    """Load ``frame-NNNNNN.depth.pgm`` / ``.pose.txt`` pairs plus ``camera-intrinsics.txt``."""
    root = Path(path)
    depth_files = sorted(root.glob("frame-*.depth.pgm"))
    if not depth_files:
        raise FileNotFoundError(f"{root}: no frame-*.depth.pgm files")
    frames = []
    for dp in depth_files:
        stem = dp.name[: -len(".depth.pgm")]
        frames.append(load_frame(dp, root / "camera-intrinsics.txt", root / f"{stem}.pose.txt", world_to_camera))
    return Reconstruction(tuple(frames), root.name)


def read_manifest(path) -> list[tuple[Path, Path, bool]]:
    """Pairs listed in a manifest, with paths resolved against its directory."""
    root = Path(path).parent
    pairs = []
    for n, ln in enumerate(Path(path).read_text().splitlines(), 1):
        parts = ln.split()
        if not parts:
            continue
        if len(parts) != 3 or parts[2] not in ("0", "1"):
            raise ValueError(f"{path}:{n}: expected '<patchA> <patchB> <0|1>'")
        pairs.append((root / parts[0], root / parts[1], parts[2] == "1"))
    return pairs
