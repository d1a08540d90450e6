"""Keypoint head tests: heatmap reassembly and non-maximum suppression."""

import numpy as np

from xfeat.backbone import build_model, reduced_config
from xfeat.heads import detect_keypoints, keypoint_head_forward, reassemble_heatmap
from xfeat.tensor import Tensor, no_grad


class TestHeatmap:
    def test_uniform_logits_give_uniform_heatmap(self):
        k = Tensor(np.zeros((1, 65, 2, 3)))
        hm = reassemble_heatmap(k).data
        assert hm.shape == (1, 1, 16, 24)
        assert np.allclose(hm, 1.0 / 65.0, atol=1e-10)

    def test_cell_mass_plus_dustbin_is_one(self):
        rng = np.random.default_rng(17)
        k = Tensor(rng.normal(size=(1, 65, 3, 4)))
        hm = reassemble_heatmap(k).data[0, 0]
        dust = k.softmax(axis=1).data[0, 64]
        for i in range(3):
            for j in range(4):
                cell = hm[8 * i:8 * i + 8, 8 * j:8 * j + 8].sum()
                assert abs(cell + dust[i, j] - 1.0) < 1e-8

    def test_peak_lands_in_the_right_pixel(self):
        # boost class 8*3+5 of cell (1, 2): pixel (8*1+3, 8*2+5) = (11, 21)
        logits = np.zeros((1, 65, 3, 4))
        logits[0, 8 * 3 + 5, 1, 2] = 50.0
        hm = reassemble_heatmap(Tensor(logits)).data[0, 0]
        assert np.unravel_index(hm.argmax(), hm.shape) == (11, 21)
        assert hm[11, 21] > 0.99

    def test_head_shape_on_model(self):
        model = build_model(reduced_config(), rng_seed=0).eval()
        with no_grad():
            k = keypoint_head_forward(model, np.zeros((40, 56), dtype=np.float32))
        assert k.shape == (1, 65, 5, 7)


def run_nms(hm, **kw):
    rel = np.ones_like(hm)
    return detect_keypoints(hm[None, None], rel[None, None], **kw)


class TestNMS:
    def test_isolated_peaks_survive(self):
        hm = np.zeros((32, 32))
        peaks = [(4, 4, 0.9), (20, 8, 0.8), (10, 25, 0.7)]
        for y, x, v in peaks:
            hm[y, x] = v
        kps = run_nms(hm)
        got = sorted((kp.y, kp.x, kp.score) for kp in kps)
        assert got == sorted((float(y), float(x), v) for y, x, v in peaks)

    def test_nearby_weaker_peak_suppressed(self):
        hm = np.zeros((32, 32))
        hm[10, 10] = 0.9
        hm[12, 12] = 0.8  # Chebyshev distance 2 <= radius
        kps = run_nms(hm, nms_radius=2)
        assert len(kps) == 1
        assert (kps[0].y, kps[0].x) == (10.0, 10.0)

    def test_peak_outside_radius_kept(self):
        hm = np.zeros((32, 32))
        hm[10, 10] = 0.9
        hm[10, 15] = 0.8
        kps = run_nms(hm, nms_radius=2)
        assert len(kps) == 2

    def test_tie_break_row_major(self):
        hm = np.zeros((16, 16))
        hm[5, 5] = 0.5
        hm[5, 6] = 0.5  # equal scores, within radius: first in row-major wins
        kps = run_nms(hm, nms_radius=2)
        assert len(kps) == 1
        assert (kps[0].y, kps[0].x) == (5.0, 5.0)

    def test_threshold_filters(self):
        hm = np.zeros((16, 16))
        hm[3, 3] = 0.04
        hm[8, 8] = 0.06
        kps = run_nms(hm, threshold=0.05)
        assert [(kp.y, kp.x) for kp in kps] == [(8.0, 8.0)]

    def test_top_k_truncates_by_score(self):
        hm = np.zeros((64, 64))
        rng = np.random.default_rng(18)
        ys = np.arange(2, 62, 6)
        vals = {}
        for y in ys:
            for x in ys:
                v = float(rng.uniform(0.1, 1.0))
                hm[y, x] = v
                vals[(y, x)] = v
        kps = run_nms(hm, top_k=10)
        assert len(kps) == 10
        kept = sorted(vals.values(), reverse=True)[:10]
        assert sorted((kp.score for kp in kps), reverse=True) == sorted(kept, reverse=True)

    def test_matches_bruteforce_greedy_oracle(self):
        rng = np.random.default_rng(19)
        hm = rng.random((40, 40))
        radius = 2
        kps = run_nms(hm, nms_radius=radius, threshold=0.0, top_k=10000)
        # quadratic oracle: window local maxima, then greedy suppression

        def is_local_max(y, x):
            for dy in range(-radius, radius + 1):
                for dx in range(-radius, radius + 1):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < 40 and 0 <= xx < 40 and hm[yy, xx] > hm[y, x]:
                        return False
            return True

        order = sorted(((y, x) for y in range(40) for x in range(40)
                        if is_local_max(y, x)),
                       key=lambda p: (-hm[p], p[0] * 40 + p[1]))
        chosen = []
        for y, x in order:
            if all(max(abs(y - cy), abs(x - cx)) > radius for cy, cx in chosen):
                chosen.append((y, x))
        assert sorted((int(kp.y), int(kp.x)) for kp in kps) == sorted(chosen)

    def test_reliability_weights_score(self):
        hm = np.zeros((16, 16))
        hm[4, 4] = 0.5
        rel = np.full((2, 2), 0.25)  # 1/8 resolution map, constant
        kps = detect_keypoints(hm[None, None], rel[None, None], threshold=0.05)
        assert len(kps) == 1
        assert abs(kps[0].score - 0.5 * 0.25) < 1e-6

    def test_image_size_crop(self):
        hm = np.zeros((16, 16))
        hm[2, 14] = 0.9  # inside padded area but outside the true image
        hm[2, 2] = 0.5
        kps = run_nms(hm, image_size=(12, 12))
        assert [(kp.y, kp.x) for kp in kps] == [(2.0, 2.0)]
