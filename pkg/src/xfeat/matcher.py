"""Descriptor sampling, mutual-nearest-neighbor matching and match refinement."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, no_grad, bicubic_sample, bilinear_resize
from .backbone import XFeatModel, forward_features
from .heads import keypoint_head_forward, reassemble_heatmap, detect_keypoints


@dataclass
class FeatureSet:
    """Extraction result for one image.

    Coordinates are continuous positions in the original image frame with
    pixel centers at integer coordinates.  Descriptors are L2-normalized rows.
    """
    image_size: tuple  # (W, H)
    mode: str  # "sparse" | "semi-dense"
    x: np.ndarray
    y: np.ndarray
    score: np.ndarray
    descriptors: np.ndarray
    reliability: np.ndarray
    scale: np.ndarray | None = None  # semi-dense: source pyramid scale per row

    def __len__(self):
        return len(self.x)


@dataclass
class MatchSet:
    pairs: np.ndarray  # (n, 2) indices into the two feature sets
    coords_a: np.ndarray  # (n, 2) pixel coords in image A
    coords_b: np.ndarray  # (n, 2) pixel coords in image B (refined when refined=True)
    offset_logits: np.ndarray | None = None  # (n, 64)
    confidence: np.ndarray | None = None
    refined: bool = False

    def __len__(self):
        return len(self.pairs)


def sample_descriptors(feat_map, coords_xy) -> np.ndarray:
    """Bicubically sample the descriptor map at continuous image coords.

    `feat_map` is the 1/8-resolution map (C x h x w or 1 x C x h x w);
    image coordinate (x, y), with pixel centers at integers, lands at
    feature coordinate ((x + 0.5) / 8, (y + 0.5) / 8) so that the center of
    cell (i, j) reproduces the stored descriptor.  Rows are L2-normalized.
    """
    data = feat_map.data if isinstance(feat_map, Tensor) else np.asarray(feat_map)
    if data.ndim == 4:
        data = data[0]
    pts = (np.asarray(coords_xy, dtype=np.float64).reshape(-1, 2) + 0.5) / 8.0
    desc = bicubic_sample(data, pts).astype(np.float64)
    if len(desc):
        desc /= np.maximum(np.linalg.norm(desc, axis=1, keepdims=True), 1e-12)
    return desc.astype(np.float32)


def mnn_match(a: FeatureSet, b: FeatureSet, min_cossim=-1.0) -> MatchSet:
    """Mutual nearest neighbors over cosine similarity; ties to lowest index."""
    if len(a) == 0 or len(b) == 0:
        return MatchSet(np.zeros((0, 2), np.int64), np.zeros((0, 2)), np.zeros((0, 2)))
    sim = a.descriptors @ b.descriptors.T
    fwd = sim.argmax(axis=1)
    bwd = sim.argmax(axis=0)
    ia = np.arange(len(a))
    mutual = bwd[fwd] == ia
    ok = mutual & (sim[ia, fwd] >= min_cossim)
    ia, ib = ia[ok], fwd[ok]
    pairs = np.stack([ia, ib], axis=1)
    ca = np.stack([a.x[ia], a.y[ia]], axis=1)
    cb = np.stack([b.x[ib], b.y[ib]], axis=1)
    return MatchSet(pairs, ca, cb)


def refiner_forward(model: XFeatModel, desc_pairs: Tensor) -> Tensor:
    """Offset MLP: (n, 2*descriptor_dim) -> (n, 64) logits over an 8x8 grid."""
    p = model.params
    x = desc_pairs @ p["ref.fc1.w"] + p["ref.fc1.b"]
    x = x.relu()
    x = x @ p["ref.fc2.w"] + p["ref.fc2.b"]
    x = x.relu()
    return x @ p["ref.fc3.w"] + p["ref.fc3.b"]


def offsets_from_logits(logits: np.ndarray):
    """Argmax offset (x, y) in the 8x8 grid plus softmax confidence.

    Logit index i encodes row y = i // 8 and column x = i % 8; both the
    argmax and the confidence are invariant to adding a constant.
    """
    logits = np.asarray(logits)
    z = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=1, keepdims=True)
    idx = logits.argmax(axis=1)
    conf = probs[np.arange(len(logits)), idx]
    return np.stack([idx % 8, idx // 8], axis=1), conf


def refine_matches(matches: MatchSet, a: FeatureSet, b: FeatureSet,
                   model: XFeatModel, conf_threshold=0.2) -> MatchSet:
    """Predict pixel offsets for coarse matches; drop low-confidence pairs.

    The refined target is the center of pixel (x, y) inside the matched
    8x8 cell of image B, i.e. cell_origin + offset in integer-center coords.
    """
    if len(matches) == 0:
        return MatchSet(matches.pairs, matches.coords_a, matches.coords_b,
                        np.zeros((0, 64), np.float32), np.zeros(0, np.float32), refined=True)
    da = a.descriptors[matches.pairs[:, 0]]
    db = b.descriptors[matches.pairs[:, 1]]
    with no_grad():
        logits = refiner_forward(model, Tensor(
            np.concatenate([da, db], axis=1).astype(model.dtype))).data
    offsets, conf = offsets_from_logits(logits)
    cell_origin = np.floor(matches.coords_b / 8.0) * 8.0
    refined_b = cell_origin + offsets
    keep = conf >= conf_threshold
    return MatchSet(matches.pairs[keep], matches.coords_a[keep], refined_b[keep],
                    logits[keep], conf[keep], refined=True)


# ----------------------------------------------------------------------
# Extraction pipelines
# ----------------------------------------------------------------------

def _as_gray2d(image):
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("expected a single-channel H x W image")
    return img


def sparse_extract(model: XFeatModel, image, top_k=4096, nms_radius=2,
                   threshold=0.05, counter=None) -> FeatureSet:
    """Detect up to `top_k` keypoints scored by heatmap * reliability."""
    img = _as_gray2d(image)
    h, w = img.shape
    with no_grad():
        feat, r_logits = forward_features(model, img, counter)
        rel = r_logits.sigmoid()
        k_logits = keypoint_head_forward(model, img, counter)
        heatmap = reassemble_heatmap(k_logits)
    kps = detect_keypoints(heatmap, rel, image_size=(w, h), top_k=top_k,
                           nms_radius=nms_radius, threshold=threshold)
    xs = np.array([kp.x for kp in kps], dtype=np.float32)
    ys = np.array([kp.y for kp in kps], dtype=np.float32)
    scores = np.array([kp.score for kp in kps], dtype=np.float32)
    desc = sample_descriptors(feat, np.stack([xs, ys], axis=1) if len(xs) else np.zeros((0, 2)))
    rel_full = bilinear_resize(Tensor(rel.data), h, w).data[0, 0]
    rel_vals = rel_full[ys.astype(int).clip(0, h - 1), xs.astype(int).clip(0, w - 1)] \
        if len(xs) else np.zeros(0, np.float32)
    return FeatureSet((w, h), "sparse", xs, ys, scores, desc, rel_vals.astype(np.float32))


def _resize_image(img, sh, sw):
    return bilinear_resize(Tensor(img[None, None].astype(np.float32)), sh, sw).data[0, 0]


def semi_dense_extract(model: XFeatModel, image, top_n=10000, scales=(0.65, 1.3),
                       dedup_radius=2.0, counter=None) -> FeatureSet:
    """Two-scale dense candidate extraction budgeted by reliability.

    Every 1/8 cell becomes a candidate at its center, mapped back to the
    original frame; candidates from both scales are merged, deduplicated
    within `dedup_radius` px (higher reliability wins) and cut to `top_n`.
    """
    img = _as_gray2d(image)
    h, w = img.shape
    cand = []
    for s in scales:
        sh, sw = max(int(round(h * s)), 1), max(int(round(w * s)), 1)
        if sh < 32 or sw < 32:
            raise ValueError(f"image too small at scale {s}")
        scaled = _resize_image(img, sh, sw)
        with no_grad():
            feat, r_logits = forward_features(model, scaled, counter)
            rel = r_logits.sigmoid().data[0, 0]
        fmap = feat.data[0]
        ch, cw = fmap.shape[1], fmap.shape[2]
        jj, ii = np.meshgrid(np.arange(cw), np.arange(ch))
        # cell centers mapped back through the scale change (edge-based, then
        # shifted to the integer-center convention)
        cx = (jj.ravel() * 8 + 4) * (w / sw) - 0.5
        cy = (ii.ravel() * 8 + 4) * (h / sh) - 0.5
        inside = (cx >= 0) & (cx <= w - 1) & (cy >= 0) & (cy <= h - 1)
        desc = fmap.reshape(fmap.shape[0], -1).T[inside.ravel()]
        norms = np.maximum(np.linalg.norm(desc, axis=1, keepdims=True), 1e-12)
        cand.append((cx[inside], cy[inside], rel.ravel()[inside],
                     (desc / norms).astype(np.float32),
                     np.full(inside.sum(), s, np.float32)))

    cx = np.concatenate([c[0] for c in cand])
    cy = np.concatenate([c[1] for c in cand])
    rel = np.concatenate([c[2] for c in cand])
    desc = np.vstack([c[3] for c in cand])
    scl = np.concatenate([c[4] for c in cand])

    order = np.lexsort((cy * w + cx, -rel))
    kept = []
    grid = {}
    cell = max(dedup_radius, 1e-6)
    for i in order:
        gx, gy = int(cx[i] // cell), int(cy[i] // cell)
        clash = False
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                for j in grid.get((gx + dx, gy + dy), ()):
                    if max(abs(cx[i] - cx[j]), abs(cy[i] - cy[j])) <= dedup_radius:
                        clash = True
                        break
                if clash:
                    break
            if clash:
                break
        if clash:
            continue
        grid.setdefault((gx, gy), []).append(i)
        kept.append(i)
        if len(kept) >= top_n:
            break
    kept = np.array(kept, dtype=np.int64)
    return FeatureSet((w, h), "semi-dense", cx[kept].astype(np.float32),
                      cy[kept].astype(np.float32), rel[kept].astype(np.float32),
                      desc[kept], rel[kept].astype(np.float32), scale=scl[kept])
