"""Descriptor-based rigid registration: keypoints, mutual nearest neighbors, RANSAC."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial.distance import cdist

from .geometry import RigidTransform, as_cloud
from .net import describe_batch
from .tdf import TdfConfig, TdfPatch, extract_patch

# collinear or coincident triples have a second singular value below this
_DEGENERATE_TOL = 1e-9


class DegenerateSampleError(ValueError):
    pass


@dataclass
class DescriptorSet:
    keypoints: np.ndarray
    descriptors: np.ndarray

    def __post_init__(self):
        self.keypoints = as_cloud(self.keypoints)
        self.descriptors = np.atleast_2d(np.asarray(self.descriptors, dtype=np.float64))
        if len(self.keypoints) != len(self.descriptors):
            raise ValueError("keypoints and descriptors differ in length")

    def __len__(self):
        return len(self.keypoints)


@dataclass
class MatchSet:
    a: np.ndarray  # indices into set A
    b: np.ndarray  # indices into set B
    distance: np.ndarray

    def __len__(self):
        return len(self.a)


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 10_000
    inlier_threshold: float = 0.05
    sample_size: int = 3
    min_inliers: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if not self.inlier_threshold > 0:
            raise ValueError("inlier_threshold must be positive")
        if self.sample_size != 3:
            raise ValueError("only minimal 3-point samples are supported")


@dataclass
class RegistrationResult:
    transform: RigidTransform
    inlier_indices: np.ndarray
    inlier_rmse: float
    converged: bool

    def summary(self) -> str:
        return f"inliers {len(self.inlier_indices)} rmse {self.inlier_rmse:.6f} converged {int(self.converged)}"


def sample_keypoints(cloud, n: int, seed=0) -> np.ndarray:
    """``n`` cloud points, without replacement unless ``n`` exceeds the cloud size."""
    return as_cloud(cloud)[sample_keypoint_indices(len(as_cloud(cloud)), n, seed)]


def sample_keypoint_indices(size: int, n: int, seed=0) -> np.ndarray:
    if size == 0:
        raise ValueError("empty cloud")
    rng = np.random.default_rng(seed)
    return rng.choice(size, n, replace=n > size)


def mutual_nearest(a: DescriptorSet, b: DescriptorSet, chunk: int = 1024) -> MatchSet:
    """Pairs whose descriptors are each other's nearest neighbor (ties → lowest index)."""
    da, db = a.descriptors, b.descriptors
    if len(da) == 0 or len(db) == 0:
        raise ValueError("descriptor sets must be non-empty")
    if da.shape[1] != db.shape[1]:
        raise ValueError(f"descriptor dimension mismatch: {da.shape[1]} vs {db.shape[1]}")
    best_b = np.empty(len(da), dtype=np.intp)
    best_ab = np.empty(len(da))
    col_min = np.full(len(db), np.inf)
    best_a = np.zeros(len(db), dtype=np.intp)
    for s in range(0, len(da), chunk):
        d = cdist(da[s:s + chunk], db)
        best_b[s:s + chunk] = np.argmin(d, axis=1)
        best_ab[s:s + chunk] = d[np.arange(len(d)), best_b[s:s + chunk]]
        rows = np.argmin(d, axis=0)
        vals = d[rows, np.arange(len(db))]
        better = vals < col_min  # strict: earlier chunks win ties
        col_min[better] = vals[better]
        best_a[better] = rows[better] + s
    ia = np.flatnonzero(best_a[best_b] == np.arange(len(da)))
    return MatchSet(ia, best_b[ia], best_ab[ia])


# ------------------------------------------------------------------ rigid fit

def _kabsch(src: np.ndarray, dst: np.ndarray):
    """Batched least-squares rotation/translation for ``(B, K, 3)`` point sets."""
    cs, cd = src.mean(axis=1), dst.mean(axis=1)
    s0, d0 = src - cs[:, None], dst - cd[:, None]
    h = np.einsum("bki,bkj->bij", s0, d0)
    u, _, vt = np.linalg.svd(h)
    sign = np.sign(np.linalg.det(np.einsum("bji,bkj->bik", vt, u)))
    sign[sign == 0] = 1.0
    fix = np.ones((len(src), 3))
    fix[:, 2] = sign
    r = np.einsum("bji,bj,bkj->bik", vt, fix, u)
    t = cd - np.einsum("bij,bj->bi", r, cs)
    spread = np.linalg.svd(s0, compute_uv=False)
    scale = np.maximum(spread[:, 0], 1.0)
    ok = spread[:, 1] > _DEGENERATE_TOL * scale
    return r, t, ok


def fit_rigid(src, dst) -> RigidTransform:
    """Rotation and translation minimizing ``Σ‖R·src + t − dst‖²`` (det R = +1)."""
    src, dst = as_cloud(src), as_cloud(dst)
    if len(src) != len(dst) or len(src) < 3:
        raise ValueError("need equal-length point sets with at least 3 points")
    r, t, ok = _kabsch(src[None], dst[None])
    if not ok[0]:
        raise DegenerateSampleError("degenerate sample")
    return RigidTransform(r[0], t[0])


def _distinct_triples(rng, m: int, n: int) -> np.ndarray:
    """``n`` uniformly random triples of distinct indices below ``m``."""
    i = rng.integers(0, m, size=n)
    j = rng.integers(0, m - 1, size=n)
    k = rng.integers(0, m - 2, size=n)
    j = j + (j >= i)
    lo, hi = np.minimum(i, j), np.maximum(i, j)
    k = k + (k >= lo)
    k = k + (k >= hi)
    return np.stack([i, j, k], axis=1)


def ransac_align(a: DescriptorSet | np.ndarray, b: DescriptorSet | np.ndarray, matches: MatchSet | None = None,
                 cfg: RansacConfig = RansacConfig(), chunk: int = 512) -> RegistrationResult:
    """Estimate the transform taking A's keypoints onto B's from putative matches.

    Each iteration fits a rigid transform to three distinct matches and
    counts matches within ``inlier_threshold``.  The best hypothesis (most
    inliers, then lower inlier RMSE, then earliest) is refit on its inliers.
    ``a``/``b`` may be descriptor sets or raw keypoint arrays; without
    ``matches``, row ``i`` of ``a`` is paired with row ``i`` of ``b``.
    """
    pa = a.keypoints if isinstance(a, DescriptorSet) else as_cloud(a)
    pb = b.keypoints if isinstance(b, DescriptorSet) else as_cloud(b)
    if matches is None:
        if len(pa) != len(pb):
            raise ValueError("unmatched point sets differ in length")
        src, dst = pa, pb
    else:
        src, dst = pa[matches.a], pb[matches.b]
    m = len(src)
    if m < 3:
        raise ValueError("insufficient matches")
    rng = np.random.default_rng(cfg.seed)
    triples = _distinct_triples(rng, m, cfg.iterations)
    thr2 = cfg.inlier_threshold ** 2
    best = (-1, np.inf, -1)  # (count, rmse, iteration)
    best_rt = None
    for s in range(0, cfg.iterations, chunk):
        tri = triples[s:s + chunk]
        r, t, ok = _kabsch(src[tri], dst[tri])
        moved = np.einsum("bij,mj->bmi", r, src) + t[:, None]
        err2 = np.sum((moved - dst) ** 2, axis=2)
        inl = err2 <= thr2
        counts = np.where(ok, inl.sum(axis=1), -1)
        sums = np.where(inl, err2, 0.0).sum(axis=1)
        rmse = np.sqrt(sums / np.maximum(counts, 1))
        # lexicographic: max count, then min rmse, then first iteration
        order = np.lexsort((np.arange(len(tri)), rmse, -counts))
        k = order[0]
        cand = (int(counts[k]), float(rmse[k]), s + int(k))
        if cand[0] > best[0] or (cand[0] == best[0] and cand[1] < best[1]):
            best, best_rt = cand, (r[k], t[k], inl[k])
    if best_rt is None or best[0] < 3:
        return RegistrationResult(RigidTransform.identity(), np.zeros(0, dtype=np.intp), float("inf"), False)
    r, t, inl = best_rt
    inliers = np.flatnonzero(inl)
    try:
        final = fit_rigid(src[inliers], dst[inliers])
    except DegenerateSampleError:
        final = RigidTransform(r, t)
    res = final.apply(src[inliers]) - dst[inliers]
    rmse = float(np.sqrt(np.mean(np.sum(res * res, axis=1))))
    return RegistrationResult(final, inliers, rmse, len(inliers) >= cfg.min_inliers)


# ------------------------------------------------------------- end-to-end use

def describe_keypoints(cloud, keypoints, spec, params, cfg: TdfConfig = TdfConfig(), axes=None) -> DescriptorSet:
    """Descriptors of TDF patches around each keypoint (grid axes = cloud axes by default)."""
    cloud = as_cloud(cloud)
    patches = [extract_patch(cloud, k, cfg, axes) for k in as_cloud(keypoints)]
    return DescriptorSet(keypoints, describe_batch(spec, params, patches))


def register_clouds(cloud_a, cloud_b, spec, params, n_keypoints: int = 1000,
                    cfg: TdfConfig = TdfConfig(), ransac: RansacConfig = RansacConfig(), seed=0):
    """Register ``cloud_a`` onto ``cloud_b``; returns ``(result, set_a, set_b, matches)``."""
    ss = np.random.SeedSequence(seed).spawn(2)
    ka = sample_keypoints(cloud_a, n_keypoints, ss[0])
    kb = sample_keypoints(cloud_b, n_keypoints, ss[1])
    set_a = describe_keypoints(cloud_a, ka, spec, params, cfg)
    set_b = describe_keypoints(cloud_b, kb, spec, params, cfg)
    matches = mutual_nearest(set_a, set_b)
    if len(matches) < 3:
        empty = RegistrationResult(RigidTransform.identity(), np.zeros(0, dtype=np.intp), float("inf"), False)
        return empty, set_a, set_b, matches
    return ransac_align(set_a, set_b, matches, ransac), set_a, set_b, matches


def surface_correspondence_heat(query_patch: TdfPatch, target, spec, params,
                                cfg: TdfConfig = TdfConfig(alignment="object"), stride: int = 1):
    """Descriptor distance from the query patch to a patch at every ``stride``-th target point.

    Target patches use the target's own axes.  Points whose patch is empty
    get ``inf``.  Returns ``(evaluated_points, distances)``.
    """
    target = as_cloud(target)
    if len(target) == 0:
        raise ValueError("empty target cloud")
    pts = target[::max(1, stride)]
    q = describe_batch(spec, params, [query_patch])[0]
    dist = np.full(len(pts), np.inf)
    patches, where = [], []
    for i, p in enumerate(pts):
        try:
            patches.append(extract_patch(target, p, replace(cfg, alignment="object")))
            where.append(i)
        except ValueError:
            continue
    if patches:
        desc = describe_batch(spec, params, patches)
        dist[where] = np.sqrt(np.sum((desc - q) ** 2, axis=1))
    return pts, dist
