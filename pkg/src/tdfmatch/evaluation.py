"""Keypoint-matching error at fixed recall and fragment registration recall/precision."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .fileio import read_ply, read_pose
from .geometry import RigidTransform, as_cloud


@dataclass(frozen=True)
class EvalConfig:
    tau: float = 0.2
    overlap_fraction: float = 0.30
    overlap_distance: float = 0.03

    def __post_init__(self):
        if not (self.tau > 0 and self.overlap_distance > 0):
            raise ValueError("tau and overlap_distance must be positive")
        if not 0 < self.overlap_fraction <= 1:
            raise ValueError("overlap_fraction must lie in (0, 1]")


@dataclass
class FragmentPair:
    cloud_a: np.ndarray
    cloud_b: np.ndarray
    gt_transform: RigidTransform  # maps cloud_a coordinates into cloud_b coordinates
    gt_correspondences: np.ndarray  # (K, 2, 3): rows of (p*, q*)
    overlap_gt: bool


def fpr_at_recall(distances, labels, recall_target: float = 0.95) -> float:
    """Fraction of non-matches accepted at the tightest threshold reaching ``recall_target``.

    The threshold is the smallest descriptor distance at which at least
    ``recall_target`` of the matches have distance <= threshold; pairs tied
    with the threshold count as accepted.
    """
    d = np.asarray(distances, dtype=np.float64)
    lab = np.asarray(labels, dtype=bool)
    if d.shape != lab.shape:
        raise ValueError("distances and labels differ in length")
    pos, neg = np.sort(d[lab]), d[~lab]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("need at least one match and one non-match")
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise ValueError("distances must be finite and non-negative")
    # recall at threshold pos[i] counts every match <= pos[i], ties included
    counts = np.searchsorted(pos, pos, side="right")
    ok = counts / len(pos) >= recall_target
    if not ok.any():
        theta = np.inf
    else:
        theta = pos[np.argmax(ok)]
    return float(np.count_nonzero(neg <= theta) / len(neg))


def eval_transform(t: RigidTransform, correspondences, tau: float = 0.2) -> tuple[float, bool]:
    """RMSE of ``t`` over ground-truth ``(p*, q*)`` pairs and whether mean squared error < tau²."""
    corr = np.asarray(correspondences, dtype=np.float64).reshape(-1, 2, 3)
    if len(corr) == 0:
        raise ValueError("empty correspondence set")
    res = t.apply(corr[:, 0]) - corr[:, 1]
    mse = float(np.mean(np.sum(res * res, axis=1)))
    return float(np.sqrt(mse)), mse < tau * tau


def overlap_fraction_of(t: RigidTransform, cloud_a, cloud_b, overlap_distance: float = 0.03) -> float:
    """Fraction of ``t·cloud_a`` lying within ``overlap_distance`` of ``cloud_b``."""
    a, b = as_cloud(cloud_a), as_cloud(cloud_b)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("clouds must be non-empty")
    d, _ = cKDTree(b).query(t.apply(a), distance_upper_bound=overlap_distance * (1 + 1e-12) + 1e-15)
    return float(np.count_nonzero(d <= overlap_distance) / len(a))


@dataclass
class RegistrationMetrics:
    recall: float
    precision: float
    tp: int
    predictions: int
    gt_positives: int
    precision_undefined: bool = False

    def line(self) -> str:
        return (f"recall {self.recall:.6f} precision {self.precision:.6f} tp {self.tp} "
                f"predictions {self.predictions} gt_positives {self.gt_positives}")


def is_true_positive(pred: RigidTransform | None, pair: FragmentPair, cfg: EvalConfig = EvalConfig()) -> bool:
    if pred is None or not pair.overlap_gt:
        return False
    if overlap_fraction_of(pred, pair.cloud_a, pair.cloud_b, cfg.overlap_distance) < cfg.overlap_fraction:
        return False
    return eval_transform(pred, pair.gt_correspondences, cfg.tau)[1]


def registration_pr(predictions, pairs, cfg: EvalConfig = EvalConfig()) -> RegistrationMetrics:
    """Recall and precision of per-pair predictions (``None`` = no prediction).

    A true positive needs a ground-truth overlapping pair, a predicted
    transform that overlaps the clouds by at least ``overlap_fraction`` and
    passes the RMSE test.  With no predictions, precision is reported as 0
    and flagged undefined.
    """
    predictions = list(predictions)
    pairs = list(pairs)
    if len(predictions) != len(pairs):
        raise ValueError("need exactly one prediction slot per fragment pair")
    tp = sum(is_true_positive(p, fp, cfg) for p, fp in zip(predictions, pairs))
    made = sum(p is not None for p in predictions)
    gt_pos = sum(bool(fp.overlap_gt) for fp in pairs)
    recall = tp / gt_pos if gt_pos else 0.0
    precision = tp / made if made else 0.0
    return RegistrationMetrics(recall, precision, tp, made, gt_pos, precision_undefined=made == 0)


# ------------------------------------------------------------------ file I/O

def read_correspondences(path) -> np.ndarray:
    vals = np.array(Path(path).read_text().split(), dtype=np.float64)
    if vals.size == 0 or vals.size % 6:
        raise ValueError(f"{path}: expected lines of 'px py pz qx qy qz'")
    return vals.reshape(-1, 2, 3)


def read_fragment_benchmark(meta_path) -> list[FragmentPair]:
    """Fragment pairs listed as ``<a.ply> <b.ply> <gt.pose.txt> <gt.corr.txt> <overlap_gt>``."""
    root = Path(meta_path).parent
    pairs = []
    for n, ln in enumerate(Path(meta_path).read_text().splitlines(), 1):
        parts = ln.split()
        if not parts:
            continue
        if len(parts) != 5 or parts[4] not in ("0", "1"):
            raise ValueError(f"{meta_path}:{n}: expected '<a.ply> <b.ply> <pose> <corr> <0|1>'")
        a, b, pose, corr, flag = parts
        pairs.append(FragmentPair(
            read_ply(root / a), read_ply(root / b), read_pose(root / pose),
            read_correspondences(root / corr), flag == "1",
        ))
    return pairs


def read_scores(path) -> tuple[np.ndarray, np.ndarray]:
    """Scored pairs as lines ``<distance> <label 0|1>``."""
    d, lab = [], []
    for n, ln in enumerate(Path(path).read_text().splitlines(), 1):
        parts = ln.split()
        if not parts:
            continue
        if len(parts) != 2 or parts[1] not in ("0", "1"):
            raise ValueError(f"{path}:{n}: expected '<distance> <0|1>'")
        d.append(float(parts[0]))
        lab.append(parts[1] == "1")
    return np.array(d), np.array(lab, dtype=bool)
