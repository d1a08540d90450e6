"""Homography estimation (normalized DLT inside RANSAC) and evaluation metrics."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np


class DegenerateGeometryError(ValueError):
    pass


def _normalize_points(pts):
    """Hartley normalization: centroid at origin, mean distance sqrt(2)."""
    pts = np.asarray(pts, dtype=np.float64)
    centroid = pts.mean(axis=0)
    d = np.linalg.norm(pts - centroid, axis=1).mean()
    if d < 1e-12:
        raise DegenerateGeometryError("coincident points")
    s = np.sqrt(2.0) / d
    t = np.array([[s, 0, -s * centroid[0]], [0, s, -s * centroid[1]], [0, 0, 1.0]])
    return (pts - centroid) * s, t


def dlt_homography(points_a, points_b) -> np.ndarray:
    """Direct linear transform from >= 4 point pairs, Hartley-normalized.

    Returns a 3x3 matrix scaled so h33 = 1 when |h33| is not tiny.
    """
    pa = np.asarray(points_a, dtype=np.float64).reshape(-1, 2)
    pb = np.asarray(points_b, dtype=np.float64).reshape(-1, 2)
    if len(pa) < 4 or len(pa) != len(pb):
        raise ValueError("need at least four point pairs")
    na, ta = _normalize_points(pa)
    nb, tb = _normalize_points(pb)
    n = len(na)
    a = np.zeros((2 * n, 9))
    x, y = na[:, 0], na[:, 1]
    u, v = nb[:, 0], nb[:, 1]
    a[0::2, 0] = -x
    a[0::2, 1] = -y
    a[0::2, 2] = -1
    a[0::2, 6] = u * x
    a[0::2, 7] = u * y
    a[0::2, 8] = u
    a[1::2, 3] = -x
    a[1::2, 4] = -y
    a[1::2, 5] = -1
    a[1::2, 6] = v * x
    a[1::2, 7] = v * y
    a[1::2, 8] = v
    _, sv, vt = np.linalg.svd(a)
    if n == 4 and sv[-2] < 1e-10:
        raise DegenerateGeometryError("degenerate minimal configuration")
    hmat = np.linalg.inv(tb) @ vt[-1].reshape(3, 3) @ ta
    if abs(np.linalg.det(hmat)) < 1e-10:
        raise DegenerateGeometryError("non-invertible homography")
    if abs(hmat[2, 2]) > 1e-8:
        hmat = hmat / hmat[2, 2]
    return hmat


def _project(hmat, pts):
    q = np.concatenate([pts, np.ones((len(pts), 1))], axis=1) @ hmat.T
    wcol = q[:, 2:3]
    wcol = np.where(np.abs(wcol) < 1e-12, 1e-12, wcol)
    return q[:, :2] / wcol


def symmetric_transfer_error(hmat, pa, pb):
    """Per-pair sqrt of the mean of forward and backward squared errors."""
    hinv = np.linalg.inv(hmat)
    d1 = np.sum((_project(hmat, pa) - pb) ** 2, axis=1)
    d2 = np.sum((_project(hinv, pb) - pa) ** 2, axis=1)
    return np.sqrt(0.5 * (d1 + d2))


@dataclass
class RansacResult:
    homography: np.ndarray | None
    inlier_mask: np.ndarray
    n_iters: int

    @property
    def success(self):
        return self.homography is not None


def ransac_homography(points_a, points_b, threshold_px=3.0, max_iters=5000,
                      confidence=0.999, rng=None) -> RansacResult:
    """4-point RANSAC with adaptive iteration count and inlier refit."""
    pa = np.asarray(points_a, dtype=np.float64).reshape(-1, 2)
    pb = np.asarray(points_b, dtype=np.float64).reshape(-1, 2)
    n = len(pa)
    if n < 4:
        return RansacResult(None, np.zeros(n, dtype=bool), 0)
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)

    best_mask = np.zeros(n, dtype=bool)
    best_count = 0
    it = 0
    needed = max_iters
    while it < needed and it < max_iters:
        it += 1
        sample = rng.choice(n, size=4, replace=False)
        try:
            hmat = dlt_homography(pa[sample], pb[sample])
        except (DegenerateGeometryError, ValueError):
            continue
        mask = symmetric_transfer_error(hmat, pa, pb) < threshold_px
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask = count, mask
            w = count / n
            if w > 0:
                denom = np.log(max(1e-12, 1.0 - w ** 4))
                if denom < 0:
                    needed = min(max_iters, int(np.ceil(np.log(1 - confidence) / denom)))
    if best_count < 4:
        return RansacResult(None, np.zeros(n, dtype=bool), it)
    try:
        hmat = dlt_homography(pa[best_mask], pb[best_mask])
    except (DegenerateGeometryError, ValueError):
        return RansacResult(None, np.zeros(n, dtype=bool), it)
    final_mask = symmetric_transfer_error(hmat, pa, pb) < threshold_px
    if final_mask.sum() < 4:
        final_mask = best_mask
    return RansacResult(hmat, final_mask, it)


# ----------------------------------------------------------------------
# Metrics
# ----------------------------------------------------------------------

def corner_error(h_est, h_gt, image_size) -> float:
    """Mean distance between the four image corners warped by both matrices."""
    w, h = image_size
    for m in (h_est, h_gt):
        if abs(np.linalg.det(np.asarray(m))) < 1e-10:
            raise DegenerateGeometryError("non-invertible homography")
    corners = np.array([[0, 0], [w - 1, 0], [0, h - 1], [w - 1, h - 1]], dtype=np.float64)
    return float(np.linalg.norm(_project(np.asarray(h_est, dtype=np.float64), corners)
                                - _project(np.asarray(h_gt, dtype=np.float64), corners),
                                axis=1).mean())


def mha(errors, thresholds=(3, 5, 7)) -> dict:
    """Mean homography accuracy: fraction of pairs under each pixel threshold."""
    errs = np.asarray([np.inf if e is None else e for e in errors], dtype=np.float64)
    return {int(t): float((errs <= t).mean()) if len(errs) else 0.0 for t in thresholds}


def mean_inlier_ratio(inlier_mask) -> float:
    mask = np.asarray(inlier_mask)
    if mask.size == 0:
        raise ValueError("empty match set")
    return float(mask.mean())


def inlier_count(inlier_mask) -> int:
    return int(np.asarray(inlier_mask).sum())


@dataclass
class EvalReport:
    mha: dict
    mean_corner_error: float
    mir: float
    inliers: float
    n_pairs: int
    failures: int

    def to_dict(self):
        return {"mha": {str(k): v for k, v in self.mha.items()},
                "mean_corner_error": self.mean_corner_error, "mir": self.mir,
                "inliers": self.inliers, "n_pairs": self.n_pairs,
                "failures": self.failures}


def evaluate_pairs(records, thresholds=(3, 5, 7)) -> EvalReport:
    """Aggregate per-pair (corner_error | None, inlier_mask) records."""
    errors, mirs, counts, failures = [], [], [], 0
    for err, mask in records:
        if err is None:
            failures += 1
            errors.append(None)
            continue
        errors.append(err)
        mirs.append(mean_inlier_ratio(mask))
        counts.append(inlier_count(mask))
    finite = [e for e in errors if e is not None]
    return EvalReport(
        mha=mha(errors, thresholds),
        mean_corner_error=float(np.mean(finite)) if finite else float("inf"),
        mir=float(np.mean(mirs)) if mirs else 0.0,
        inliers=float(np.mean(counts)) if counts else 0.0,
        n_pairs=len(records), failures=failures)


# ----------------------------------------------------------------------
# HPatches layout
# ----------------------------------------------------------------------

def read_hpatches_sequence(seq_dir):
    """(ref, target, H) triples from one HPatches sequence directory."""
    exts = (".ppm", ".pgm", ".png")

    def find(stem):
        for ext in exts:
            p = os.path.join(seq_dir, stem + ext)
            if os.path.exists(p):
                return p
        raise FileNotFoundError(f"no image '{stem}' in {seq_dir}")

    ref = find("1")
    out = []
    for i in range(2, 7):
        hp = os.path.join(seq_dir, f"H_1_{i}")
        if not os.path.exists(hp):
            continue
        vals = np.loadtxt(hp, dtype=np.float64).reshape(3, 3)
        out.append((ref, find(str(i)), vals))
    return out


def read_hpatches(root):
    pairs = []
    for name in sorted(os.listdir(root)):
        seq = os.path.join(root, name)
        if os.path.isdir(seq):
            pairs.extend(read_hpatches_sequence(seq))
    return pairs
