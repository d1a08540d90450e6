"""Keypoint head on space-to-depth features, heatmap reassembly and detection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter

from .tensor import (
    Tensor, FlopCounter, space_to_depth, depth_to_space, bilinear_resize,
    pad_to_multiple,
)
from .backbone import XFeatModel, basic_layer


@dataclass
class Keypoint:
    x: float
    y: float
    score: float
    descriptor: np.ndarray | None = None


def keypoint_head_forward(model: XFeatModel, image, counter: FlopCounter | None = None) -> Tensor:
    """Per-cell 65-way keypoint logits (64 positions + dustbin).

    The image is rearranged into 64-channel cells and passed through four
    1x1 conv layers; output is N x 65 x ceil(H/8) x ceil(W/8).
    """
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    if data.ndim == 2:
        data = data[None, None]
    elif data.ndim == 3:
        data = data[:, None]
    h, w = data.shape[2], data.shape[3]
    x = Tensor(pad_to_multiple(data.astype(model.dtype), 8))
    x = space_to_depth(x, 8)
    x = basic_layer(model, "kp.l1", x, counter=counter)
    x = basic_layer(model, "kp.l2", x, counter=counter)
    x = basic_layer(model, "kp.l3", x, counter=counter)
    x = basic_layer(model, "kp.l4", x, counter=counter, relu=False)
    return x.crop2d(-(-h // 8), -(-w // 8))


def reassemble_heatmap(k_logits: Tensor) -> Tensor:
    """Softmax over the 65 classes, drop the dustbin, expand cells to pixels."""
    if k_logits.shape[1] != 65:
        raise ValueError("expected 65 keypoint channels")
    probs = k_logits.softmax(axis=1)
    n, _, h, w = probs.shape
    body = Tensor(probs.data[:, :64])  # inference path; no gradient needed past here
    return depth_to_space(body, 8)


def detect_keypoints(heatmap, reliability, image_size=None, top_k=4096,
                     nms_radius=2, threshold=0.05):
    """Greedy NMS keypoint detection with score = heatmap * reliability.

    `heatmap` is 1 x 1 x H x W (full resolution), `reliability` the
    sigmoid-activated map at 1/8 resolution (upsampled here for scoring).
    Ties are broken by row-major pixel index; no two detections lie within
    `nms_radius` in Chebyshev distance.
    """
    hm = heatmap.data if isinstance(heatmap, Tensor) else np.asarray(heatmap)
    hm = hm.reshape(hm.shape[-2], hm.shape[-1])
    rel = reliability.data if isinstance(reliability, Tensor) else np.asarray(reliability)
    if rel.ndim > 2:
        rel = rel.reshape(rel.shape[-2], rel.shape[-1])
    if rel.shape != hm.shape:
        rel = bilinear_resize(Tensor(rel[None, None]), hm.shape[0], hm.shape[1]).data[0, 0]

    h, w = hm.shape
    win = 2 * nms_radius + 1
    local_max = hm >= maximum_filter(hm, size=win, mode="constant", cval=-np.inf)
    ys, xs = np.nonzero(local_max & (hm >= threshold))
    if image_size is not None:
        iw, ih = image_size
        keep = (xs < iw) & (ys < ih)
        ys, xs = ys[keep], xs[keep]
    if len(ys) == 0:
        return []

    vals = hm[ys, xs]
    # strongest first; equal values by row-major index
    order = np.lexsort((ys * w + xs, -vals))
    ys, xs, vals = ys[order], xs[order], vals[order]
    accepted = []
    occupied = np.zeros((h, w), dtype=bool)
    for y, x, v in zip(ys, xs, vals):
        y0, y1 = max(0, y - nms_radius), min(h, y + nms_radius + 1)
        x0, x1 = max(0, x - nms_radius), min(w, x + nms_radius + 1)
        if occupied[y0:y1, x0:x1].any():
            continue
        occupied[y, x] = True
        accepted.append((y, x, v))

    kps = [Keypoint(float(x), float(y), float(v * rel[y, x])) for y, x, v in accepted]
    kps.sort(key=lambda kp: (-kp.score, kp.y * w + kp.x))
    return kps[:top_k]
