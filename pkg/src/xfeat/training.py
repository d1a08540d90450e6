"""Losses, synthetic-warp data generation, teacher supervision and training loop."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .tensor import Tensor, no_grad, concat
from .backbone import XFeatModel, forward_features
from .heads import keypoint_head_forward
from .matcher import refiner_forward, sample_descriptors, FeatureSet, mnn_match, refine_matches


# ----------------------------------------------------------------------
# Correspondences
# ----------------------------------------------------------------------

@dataclass
class CorrespondenceSet:
    """Ground-truth pixel matches: rows (x1, y1, x2, y2), integer-center coords."""
    m: np.ndarray

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=np.float64).reshape(-1, 4)

    def __len__(self):
        return len(self.m)

    def cells(self, side):
        """Per-row (cy, cx) 1/8-cell indices for image 1 or 2."""
        col = 0 if side == 1 else 2
        x = np.floor(self.m[:, col]).astype(np.int64)
        y = np.floor(self.m[:, col + 1]).astype(np.int64)
        return y // 8, x // 8

    def gt_offsets(self):
        """Target-pixel offsets (xbar, ybar) inside the image-2 cell."""
        x = np.floor(self.m[:, 2]).astype(np.int64)
        y = np.floor(self.m[:, 3]).astype(np.int64)
        return np.stack([x % 8, y % 8], axis=1)


@dataclass
class LossWeights:
    alpha: float = 1.0  # dual-softmax
    beta: float = 1.0   # reliability
    gamma: float = 1.0  # fine offsets
    delta: float = 1.0  # keypoints

    def __post_init__(self):
        vals = (self.alpha, self.beta, self.gamma, self.delta)
        if min(vals) < 0 or max(vals) <= 0:
            raise ValueError("loss weights must be non-negative with at least one positive")


# ----------------------------------------------------------------------
# Losses
# ----------------------------------------------------------------------

def loss_dual_softmax(f1_rows: Tensor, f2_rows: Tensor, tau=1.0) -> Tensor:
    """Symmetric NLL of the diagonal of the similarity matrix S = F1 F2^T / tau.

    Mean reduction per direction, summed over the two directions.
    """
    if f1_rows.shape[0] < 2:
        raise ValueError("dual-softmax needs at least two correspondences")
    s = (f1_rows @ f2_rows.T) * (1.0 / tau)
    l1 = -(s.log_softmax(axis=1).diag().mean())
    l2 = -(s.T.log_softmax(axis=1).diag().mean())
    return l1 + l2


def dual_softmax_confidence(f1_rows, f2_rows, tau=1.0):
    """Per-row matchability target: product of both directions' row maxima."""
    f1 = f1_rows.data if isinstance(f1_rows, Tensor) else np.asarray(f1_rows)
    f2 = f2_rows.data if isinstance(f2_rows, Tensor) else np.asarray(f2_rows)
    s = (f1 @ f2.T) / tau
    p1 = np.exp(s - s.max(axis=1, keepdims=True))
    p1 /= p1.sum(axis=1, keepdims=True)
    p2 = np.exp(s.T - s.T.max(axis=1, keepdims=True))
    p2 /= p2.sum(axis=1, keepdims=True)
    return p1.max(axis=1) * p2.max(axis=1)


def loss_reliability(r1_rows: Tensor, r2_rows: Tensor, f1_rows, f2_rows,
                     tau=1.0, target=None) -> Tensor:
    """L1 between sigmoid reliabilities and the detached dual-softmax target.

    Gradients flow only into the reliability logits; the descriptor inputs
    are treated as constants.  A precomputed `target` array can be supplied
    (e.g. to hold the stop-gradient branch fixed during finite-difference
    checks).
    """
    if target is None:
        target = dual_softmax_confidence(f1_rows, f2_rows, tau)
    target = Tensor(np.asarray(target))
    return (r1_rows.sigmoid() - target).abs().mean() + \
           (r2_rows.sigmoid() - target).abs().mean()


def loss_fine(offset_logits: Tensor, gt_offsets) -> Tensor:
    """NLL of the 8x8 offset distribution at (ybar * 8 + xbar)."""
    gt = np.asarray(gt_offsets, dtype=np.int64).reshape(-1, 2)
    if gt.min() < 0 or gt.max() > 7:
        raise ValueError("ground-truth offsets must lie in [0, 7]")
    idx = gt[:, 1] * 8 + gt[:, 0]
    return -(offset_logits.log_softmax(axis=1).gather_cols(idx).mean())


def loss_keypoint(k_logits: Tensor, t_idx_map, rng=None, dustbin_cap_ratio=1.0) -> Tensor:
    """Distillation NLL over 65-way cell logits with dustbin subsampling.

    `t_idx_map` is an int array (n, h, w) (or (h, w)) with values 0..63 for
    teacher keypoints and 64 for the dustbin; dustbin cells are uniformly
    subsampled so their count stays <= cap_ratio * keypoint cells.
    """
    t_idx = np.asarray(t_idx_map, dtype=np.int64)
    if t_idx.ndim == 2:
        t_idx = t_idx[None]
    if t_idx.min() < 0 or t_idx.max() > 64:
        raise ValueError("teacher indices must lie in [0, 64]")
    n, _, h, w = k_logits.shape
    flat_t = t_idx.reshape(-1)
    pos = np.nonzero(flat_t < 64)[0]
    neg = np.nonzero(flat_t == 64)[0]
    cap = int(np.ceil(dustbin_cap_ratio * max(len(pos), 1)))
    if len(neg) > cap:
        rng = rng or np.random.default_rng(0)
        neg = np.sort(rng.choice(neg, size=cap, replace=False))
    sel = np.concatenate([pos, neg])
    rows = k_logits.transpose((0, 2, 3, 1)).reshape(n * h * w, 65).gather_rows(sel)
    return -(rows.log_softmax(axis=1).gather_cols(flat_t[sel]).mean())


def total_loss(parts: dict, weights: LossWeights) -> Tensor:
    for name, p in parts.items():
        if not np.isfinite(p.data).all():
            raise FloatingPointError(f"non-finite loss part '{name}'")
    return (parts["ds"] * weights.alpha + parts["rel"] * weights.beta
            + parts["fine"] * weights.gamma + parts["kp"] * weights.delta)


# ----------------------------------------------------------------------
# Teacher oracle
# ----------------------------------------------------------------------

class HarrisTeacher:
    """Per-cell corner supervision from a Harris response map.

    Any object with `label_cells(image) -> (h/8, w/8) int array` (values
    0..63, dustbin 64) can stand in; precomputed label maps can be supplied
    directly to the training loop.
    """

    def __init__(self, k=0.04, sigma=1.5, rel_threshold=1e-3):
        self.k = k
        self.sigma = sigma
        self.rel_threshold = rel_threshold

    def response(self, image):
        img = np.asarray(image, dtype=np.float64)
        iy, ix = np.gradient(img)
        sxx = gaussian_filter(ix * ix, self.sigma)
        syy = gaussian_filter(iy * iy, self.sigma)
        sxy = gaussian_filter(ix * iy, self.sigma)
        det = sxx * syy - sxy * sxy
        tr = sxx + syy
        return det - self.k * tr * tr

    def label_cells(self, image):
        img = np.asarray(image)
        h, w = img.shape
        ch, cw = h // 8, w // 8
        r = self.response(img)[:ch * 8, :cw * 8]
        cells = r.reshape(ch, 8, cw, 8).transpose(0, 2, 1, 3).reshape(ch, cw, 64)
        best = cells.argmax(axis=2)
        cutoff = self.rel_threshold * max(r.max(), 1e-12)
        labels = np.where(cells.max(axis=2) > cutoff, best, 64)
        return labels.astype(np.int64)


# ----------------------------------------------------------------------
# Synthetic warps and procedural textures
# ----------------------------------------------------------------------

def _random_homography(rng, w, h, max_rot_deg=30.0, scale_range=(0.8, 1.2),
                       max_translation=0.1, perspective_jitter=1e-4):
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    for _ in range(100):
        ang = np.deg2rad(rng.uniform(-max_rot_deg, max_rot_deg))
        sc = rng.uniform(*scale_range)
        tx = rng.uniform(-max_translation, max_translation) * w
        ty = rng.uniform(-max_translation, max_translation) * h
        ca, sa = np.cos(ang) * sc, np.sin(ang) * sc
        center = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1.0]])
        rot = np.array([[ca, -sa, 0], [sa, ca, 0], [0, 0, 1.0]])
        back = np.array([[1, 0, cx + tx], [0, 1, cy + ty], [0, 0, 1.0]])
        hmat = back @ rot @ center
        hmat[2, 0] += rng.uniform(-perspective_jitter, perspective_jitter)
        hmat[2, 1] += rng.uniform(-perspective_jitter, perspective_jitter)
        if abs(np.linalg.det(hmat[:2, :2])) >= 1e-3:
            return hmat
    raise RuntimeError("failed to sample a non-degenerate homography")


def apply_homography(hmat, pts):
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    q = np.concatenate([pts, np.ones((len(pts), 1))], axis=1) @ np.asarray(hmat).T
    return q[:, :2] / q[:, 2:3]


def warp_image(image, hmat):
    """Inverse-map bilinear warp: output pixel p2 samples the input at H^-1 p2."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    ys, xs = np.mgrid[0:h, 0:w]
    src = apply_homography(np.linalg.inv(hmat), np.stack([xs.ravel(), ys.ravel()], axis=1))
    out = map_coordinates(img, [src[:, 1], src[:, 0]], order=1, mode="nearest")
    return out.reshape(h, w)


def synth_warp_pair(image, rng, grid_step=8, photometric=True, homography=None):
    """Warped training pair with dense grid correspondences.

    Returns (I1, I2, H_gt, CorrespondenceSet); correspondence rows are grid
    points of I1 mapped through H_gt, out-of-bounds rows dropped.  The grid
    is anchored at the 1/8-cell centers (x = step/2 - 0.5) so each source
    point sits at a consistent subcell position; the offset of its target
    inside the matched cell is then a well-posed function of the two cell
    descriptors, which is what the refinement MLP is trained to predict.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    if h < 128 or w < 128:
        raise ValueError("image must be at least 128 x 128")
    hmat = _random_homography(rng, w, h) if homography is None else np.asarray(homography)
    i2 = warp_image(img, hmat)
    if photometric:
        i2 = (i2 - 0.5) * rng.uniform(0.8, 1.25) + 0.5 + rng.uniform(-0.2, 0.2)
        i2 = i2 + rng.normal(0.0, rng.uniform(0.0, 0.02), size=i2.shape)
        i2 = np.clip(i2, 0.0, 1.0)
    start = grid_step / 2.0 - 0.5
    ys, xs = np.mgrid[start:h:grid_step, start:w:grid_step]
    p1 = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    p2 = apply_homography(hmat, p1)
    ok = (p2[:, 0] >= 0) & (p2[:, 0] <= w - 1) & (p2[:, 1] >= 0) & (p2[:, 1] <= h - 1)
    m = np.concatenate([p1[ok], p2[ok]], axis=1)
    return img, i2, hmat, CorrespondenceSet(m)


def procedural_texture(rng, size=256, octaves=4):
    """Multi-octave smoothed-noise texture with enough structure to match on."""
    img = np.zeros((size, size))
    for o in range(octaves):
        cell = max(size >> (o + 2), 2)
        noise = rng.standard_normal((size, size))
        img += gaussian_filter(noise, cell / 2.0) * (cell ** 0.75)
    img += 0.3 * (rng.standard_normal((size, size)) > 1.2)  # sparse speckles
    img -= img.min()
    img /= max(img.max(), 1e-12)
    return img


# ----------------------------------------------------------------------
# Optimizer and loop
# ----------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 10
    lr: float = 3e-4
    lr_decay: float = 0.5
    lr_decay_every: int = 30000
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    image_size: tuple = (800, 600)  # (W, H)
    synthetic_fraction: float = 0.4
    corr_cap: int = 1024
    tau: float = 0.1
    weights: LossWeights = field(default_factory=LossWeights)
    dustbin_cap_ratio: float = 1.0

    def lr_at(self, step):
        return self.lr * self.lr_decay ** (step // self.lr_decay_every)


class Adam:
    def __init__(self, params: dict, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr):
        self.t += 1
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / (1 - self.b1 ** self.t)
            vhat = self.v[k] / (1 - self.b2 ** self.t)
            p.data -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def _sample_corrs(corrs: CorrespondenceSet, rng, cap):
    """Cap and deduplicate correspondences so each source/target cell is unique."""
    m = corrs.m
    idx = rng.permutation(len(m))
    c1 = (np.floor(m[idx, 1]) // 8).astype(np.int64) * 10000 + (np.floor(m[idx, 0]) // 8).astype(np.int64)
    c2 = (np.floor(m[idx, 3]) // 8).astype(np.int64) * 10000 + (np.floor(m[idx, 2]) // 8).astype(np.int64)
    _, first1 = np.unique(c1, return_index=True)
    _, first2 = np.unique(c2, return_index=True)
    keep = np.intersect1d(first1, first2)
    keep = keep[np.argsort(keep)][:cap]
    return CorrespondenceSet(m[idx[keep]])


def pair_losses(model: XFeatModel, i1, i2, corrs: CorrespondenceSet,
                cfg: TrainConfig, rng, teacher=None, teacher_labels=None,
                rel_target=None, out_aux=None) -> dict:
    """All four loss parts for one image pair (training-mode forward)."""
    corrs = _sample_corrs(corrs, rng, cfg.corr_cap)
    if len(corrs) < 2:
        raise ValueError("pair has fewer than two usable correspondences")
    stack = np.stack([np.asarray(i1), np.asarray(i2)]).astype(model.dtype)
    feat, r_logits = forward_features(model, stack)
    n, c, h, w = feat.shape

    cy1, cx1 = corrs.cells(1)
    cy2, cx2 = corrs.cells(2)
    flat = feat.transpose((0, 2, 3, 1)).reshape(2 * h * w, c)
    f1 = flat.gather_rows(cy1 * w + cx1).l2_normalize(axis=1)
    f2 = flat.gather_rows(h * w + cy2 * w + cx2).l2_normalize(axis=1)
    rflat = r_logits.reshape(2 * h * w, 1)
    r1 = rflat.gather_rows(cy1 * w + cx1).reshape(-1)
    r2 = rflat.gather_rows(h * w + cy2 * w + cx2).reshape(-1)

    if rel_target is None:
        rel_target = dual_softmax_confidence(f1, f2, cfg.tau)
    if out_aux is not None:
        out_aux["rel_target"] = rel_target
    parts = {
        "ds": loss_dual_softmax(f1, f2, cfg.tau),
        "rel": loss_reliability(r1, r2, f1, f2, cfg.tau, target=rel_target),
        "fine": loss_fine(refiner_forward(model, concat([f1, f2], axis=1)),
                          corrs.gt_offsets()),
    }

    k_logits = keypoint_head_forward(model, stack)
    if teacher_labels is None:
        teacher = teacher or HarrisTeacher()
        teacher_labels = np.stack([teacher.label_cells(np.asarray(i1)),
                                   teacher.label_cells(np.asarray(i2))])
    parts["kp"] = loss_keypoint(k_logits, teacher_labels, rng=rng,
                                dustbin_cap_ratio=cfg.dustbin_cap_ratio)
    return parts


def train_step(model: XFeatModel, batch, cfg: TrainConfig, opt: Adam, step, rng,
               teacher=None, teacher_labels=None) -> dict:
    """One optimizer update over a batch of (I1, I2, CorrespondenceSet) pairs.

    All images in the batch are forwarded as a single stack, so batch
    normalization pools its statistics across every pair.  With per-pair
    forwards the batch moments are dominated by each pair's own texture,
    and the network can exploit that pair-specific normalization; the
    resulting features do not transfer to inference, where the running
    averages are used.  Pooled statistics stay close to those averages,
    which matters most for the offset head: it must read sub-cell phase
    from descriptors computed under the same normalization at train and
    test time.
    """
    model.train()
    opt.zero_grad()
    report = {"ds": 0.0, "rel": 0.0, "fine": 0.0, "kp": 0.0, "total": 0.0}
    imgs, kept, labels = [], [], []
    for i, (i1, i2, corrs) in enumerate(batch):
        sampled = _sample_corrs(corrs, rng, cfg.corr_cap)
        if len(sampled) < 2:
            continue
        imgs.extend([np.asarray(i1), np.asarray(i2)])
        kept.append(sampled)
        if teacher_labels is not None:
            labels.append(teacher_labels[i])
        else:
            teacher = teacher or HarrisTeacher()
            labels.append(np.stack([teacher.label_cells(np.asarray(i1)),
                                    teacher.label_cells(np.asarray(i2))]))
    used = len(kept)
    if used == 0:
        return report
    stack = np.stack(imgs).astype(model.dtype)
    feat, r_logits = forward_features(model, stack)
    n, c, h, w = feat.shape
    flat = feat.transpose((0, 2, 3, 1)).reshape(n * h * w, c)
    rflat = r_logits.reshape(n * h * w, 1)
    total = None
    for k, corrs in enumerate(kept):
        cy1, cx1 = corrs.cells(1)
        cy2, cx2 = corrs.cells(2)
        i1_rows = (2 * k) * h * w + cy1 * w + cx1
        i2_rows = (2 * k + 1) * h * w + cy2 * w + cx2
        f1 = flat.gather_rows(i1_rows).l2_normalize(axis=1)
        f2 = flat.gather_rows(i2_rows).l2_normalize(axis=1)
        r1 = rflat.gather_rows(i1_rows).reshape(-1)
        r2 = rflat.gather_rows(i2_rows).reshape(-1)
        parts = {
            "ds": loss_dual_softmax(f1, f2, cfg.tau),
            "rel": loss_reliability(r1, r2, f1, f2, cfg.tau,
                                    target=dual_softmax_confidence(f1, f2, cfg.tau)),
            "fine": loss_fine(refiner_forward(model, concat([f1, f2], axis=1)),
                              corrs.gt_offsets()),
        }
        t = (parts["ds"] * cfg.weights.alpha + parts["rel"] * cfg.weights.beta
             + parts["fine"] * cfg.weights.gamma)
        total = t if total is None else total + t
        for key in parts:
            report[key] += parts[key].item()
    k_logits = keypoint_head_forward(model, stack)
    kp = loss_keypoint(k_logits, np.concatenate(labels), rng=rng,
                       dustbin_cap_ratio=cfg.dustbin_cap_ratio)
    total = total * (1.0 / used) + kp * cfg.weights.delta
    total.backward()
    opt.step(cfg.lr_at(step))
    for key in ("ds", "rel", "fine"):
        report[key] /= used
    report["kp"] = kp.item()
    report["total"] = (report["ds"] * cfg.weights.alpha + report["rel"] * cfg.weights.beta
                       + report["fine"] * cfg.weights.gamma + report["kp"] * cfg.weights.delta)
    return report


def make_training_pairs(images, rng, n_pairs, grid_step=8):
    """Fixed set of synthetic-warp pairs drawn from an image corpus."""
    pairs = []
    for _ in range(n_pairs):
        img = images[rng.integers(len(images))]
        i1, i2, hmat, corrs = synth_warp_pair(img, rng, grid_step=grid_step)
        pairs.append((i1, i2, hmat, corrs))
    return pairs


def train(model: XFeatModel, pairs, cfg: TrainConfig, teacher=None,
          log_every=0, on_step=None):
    """Train over a fixed pool of (I1, I2, H, CorrespondenceSet) pairs.

    Batches are drawn uniformly (seeded); returns the per-step loss history.
    """
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.params, betas=cfg.adam_betas, eps=cfg.adam_eps)
    teacher = teacher or HarrisTeacher()
    label_cache = {}
    history = []

    def labels_for(idx):
        if idx not in label_cache:
            i1, i2 = pairs[idx][0], pairs[idx][1]
            label_cache[idx] = np.stack([teacher.label_cells(i1), teacher.label_cells(i2)])
        return label_cache[idx]

    for step in range(cfg.steps):
        picks = rng.integers(len(pairs), size=cfg.batch_size)
        batch = [(pairs[idx][0], pairs[idx][1], pairs[idx][3]) for idx in picks]
        labels = [labels_for(int(idx)) for idx in picks]
        report = train_step(model, batch, cfg, opt, step, rng,
                            teacher_labels=labels)
        report["step"] = step
        report["lr"] = cfg.lr_at(step)
        history.append(report)
        if log_every and step % log_every == 0:
            print(f"step {step}: total={report['total']:.4f} ds={report['ds']:.4f} "
                  f"fine={report['fine']:.4f} kp={report['kp']:.4f} rel={report['rel']:.4f}")
        if on_step is not None:
            on_step(step, report)
    model.eval()
    return history


# ----------------------------------------------------------------------
# Hold-out evaluation (cell-grid matching against a known homography)
# ----------------------------------------------------------------------

def cell_grid_features(model: XFeatModel, image) -> FeatureSet:
    """One candidate per 1/8 cell at its center, with normalized descriptors."""
    img = np.asarray(image)
    h, w = img.shape
    with no_grad():
        feat, r_logits = forward_features(model, img)
        rel = r_logits.sigmoid().data[0, 0]
    fmap = feat.data[0]
    ch, cw = fmap.shape[1], fmap.shape[2]
    jj, ii = np.meshgrid(np.arange(cw), np.arange(ch))
    cx = (jj.ravel() * 8 + 3.5).astype(np.float32)
    cy = (ii.ravel() * 8 + 3.5).astype(np.float32)
    inside = (cx < w) & (cy < h)
    desc = fmap.reshape(fmap.shape[0], -1).T[inside]
    desc = desc / np.maximum(np.linalg.norm(desc, axis=1, keepdims=True), 1e-12)
    r = rel.ravel()[inside].astype(np.float32)
    return FeatureSet((w, h), "semi-dense", cx[inside], cy[inside], r,
                      desc.astype(np.float32), r)


def holdout_matching_report(model: XFeatModel, i1, i2, hmat, precision_px=8.0):
    """MNN precision and coarse vs refined end-point error under a known H."""
    fa = cell_grid_features(model, i1)
    fb = cell_grid_features(model, i2)
    matches = mnn_match(fa, fb)
    if len(matches) == 0:
        return {"n_matches": 0, "precision": 0.0, "coarse_epe": np.nan, "refined_epe": np.nan}
    gt = apply_homography(hmat, matches.coords_a)
    err = np.linalg.norm(matches.coords_b - gt, axis=1)
    w, h = fb.image_size
    visible = (gt[:, 0] >= 0) & (gt[:, 0] <= w - 1) & (gt[:, 1] >= 0) & (gt[:, 1] <= h - 1)
    correct = err <= precision_px
    precision = float(correct[visible].mean()) if visible.any() else 0.0

    refined = refine_matches(matches, fa, fb, model, conf_threshold=0.0)
    gt_r = apply_homography(hmat, refined.coords_a)
    err_r = np.linalg.norm(refined.coords_b - gt_r, axis=1)
    mask = correct & visible
    return {
        "n_matches": int(len(matches)),
        "precision": precision,
        "coarse_epe": float(err[mask].mean()) if mask.any() else np.nan,
        "refined_epe": float(err_r[mask].mean()) if mask.any() else np.nan,
    }
