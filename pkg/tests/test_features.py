import numpy as np
import pytest

from printid.features import (
    DetectorParams,
    IntegralImage,
    Match,
    MatchRateMatrix,
    describe,
    descriptor_distance,
    detect_keypoints,
    match_knn,
    match_rate_matrix,
    ratio_test,
)
from printid.geometry import InfillPattern, InfillSpec, Pose, generate_infill
from printid.render import OpticalParams, TransmissionImage, render


def rendered_cube(pattern=InfillPattern.DIAMOND_FILL, density=0.10, seed=3, res=256):
    spec = InfillSpec(pattern, density, seed=seed)
    geom = generate_infill(spec)
    optics = OpticalParams(mu_solid=0.08, diffusion_sigma=1.0)
    return render(geom, optics, Pose(), res, res, 50.0 / 0.8 / res)


def blob_image(cx=48.3, cy=47.6, sigma=4.0, size=96):
    yy, xx = np.mgrid[0:size, 0:size]
    vals = 0.9 - 0.6 * np.exp(-(((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma**2)))
    return TransmissionImage(np.clip(vals, 0.0, 1.0), 1.0)


def blob_field(shape, seed=0):
    """Smoothed random field: dense blob structure across the whole frame."""
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(seed)
    field = gaussian_filter(rng.uniform(size=shape), sigma=3.0)
    lo, hi = field.min(), field.max()
    return 0.1 + 0.8 * (field - lo) / (hi - lo)


class TestIntegralImage:
    def test_all_zero(self):
        ii = IntegralImage(TransmissionImage(np.zeros((4, 4)), 1.0))
        assert np.all(ii.table == 0.0)

    def test_all_ones_full_query(self):
        ii = IntegralImage(TransmissionImage(np.ones((4, 4)), 1.0))
        assert ii.box_sum(0, 0, 4, 4) == 16.0

    def test_zero_row_and_column(self):
        ii = IntegralImage(TransmissionImage(np.random.default_rng(0).uniform(size=(5, 7)), 1.0))
        assert np.all(ii.table[0, :] == 0.0)
        assert np.all(ii.table[:, 0] == 0.0)

    def test_random_queries_match_direct_sums(self):
        rng = np.random.default_rng(1)
        arr = rng.uniform(size=(16, 16))
        ii = IntegralImage(TransmissionImage(arr, 1.0))
        for _ in range(100):
            x0, x1 = sorted(rng.integers(0, 17, 2))
            y0, y1 = sorted(rng.integers(0, 17, 2))
            direct = arr[y0:y1, x0:x1].sum()
            assert ii.box_sum(x0, y0, x1, y1) == pytest.approx(direct, rel=1e-9, abs=1e-12)


class TestDetector:
    def test_constant_image_has_no_keypoints(self):
        img = TransmissionImage(np.full((64, 64), 0.43), 1.0)
        assert detect_keypoints(img) == []

    def test_rejects_small_images(self):
        with pytest.raises(ValueError):
            detect_keypoints(TransmissionImage(np.zeros((16, 16)), 1.0))

    def test_single_blob_found_once(self):
        kps = detect_keypoints(blob_image(), threshold=1e-4)
        assert len(kps) == 1
        kp = kps[0]
        assert np.hypot(kp.x - 48.3, kp.y - 47.6) < 1.5
        assert kp.sign > 0  # dark blob on bright field

    def test_blob_against_exhaustive_scan_oracle(self):
        # oracle: the detector's own response stack maximum must sit at the
        # blob center; verify via brute-force evaluation of the determinant
        # of Hessian over every pixel at the best filter size
        img = blob_image()
        ii = IntegralImage(img)
        from printid.features import _hessian_responses, _octave_filter_sizes

        best = (-np.inf, None, None)
        for octave in (1, 2):
            for size in _octave_filter_sizes(octave):
                rows = np.arange(0, 96)
                cols = np.arange(0, 96)
                det, _ = _hessian_responses(ii, size, rows, cols)
                idx = np.unravel_index(np.argmax(det), det.shape)
                if det[idx] > best[0]:
                    best = (det[idx], idx[1], idx[0])
        _, bx, by = best
        assert np.hypot(bx - 48.3, by - 47.6) < 1.5

    def test_rendered_cube_count_in_expected_range(self):
        kps = detect_keypoints(rendered_cube())
        assert 100 <= len(kps) <= 400

    def test_sorted_by_response(self):
        kps = detect_keypoints(rendered_cube())
        responses = [k.response for k in kps]
        assert responses == sorted(responses, reverse=True)

    def test_determinism(self):
        img = rendered_cube()
        assert detect_keypoints(img) == detect_keypoints(img)

    def test_translation_equivariance(self):
        # embed the same content in two windows shifted by 8 px; keypoints
        # away from both borders must appear shifted by exactly the offset
        canvas = blob_field((360, 360), seed=4)
        a = TransmissionImage(canvas[30:286, 30:286], 1.0)
        b = TransmissionImage(canvas[38:294, 38:294], 1.0)
        ka = detect_keypoints(a, octaves=2)
        kb = detect_keypoints(b, octaves=2)
        margin = 45.0
        interior = [k for k in ka
                    if margin < k.x - 8 and k.x < 256 - margin
                    and margin < k.y - 8 and k.y < 256 - margin]
        assert len(interior) >= 15
        for k in interior:
            matched = any(
                abs(k2.x - (k.x - 8)) <= 0.5 and abs(k2.y - (k.y - 8)) <= 0.5
                for k2 in kb)
            assert matched, f"no counterpart for keypoint at ({k.x:.1f}, {k.y:.1f})"


class TestDescriptor:
    def test_determinism_and_normalization(self):
        img = rendered_cube()
        kps = detect_keypoints(img)
        kept1, d1 = describe(img, kps)
        kept2, d2 = describe(img, kps)
        assert np.array_equal(d1, d2)
        assert kept1 == kept2
        norms = np.linalg.norm(d1, axis=1)
        assert np.abs(norms - 1.0).max() < 1e-6

    def test_flat_patch_dropped(self):
        from printid.features import Keypoint

        img = TransmissionImage(np.full((64, 64), 0.5), 1.0)
        fake = [Keypoint(32.0, 32.0, 2.0, 1.0, 1)]
        kept, descs = describe(img, fake)
        assert kept == [] and descs.shape == (0, 64)

    def test_shifted_copy_descriptors_close(self):
        canvas = blob_field((360, 360), seed=6)
        a = TransmissionImage(canvas[30:286, 30:286], 1.0)
        b = TransmissionImage(canvas[38:294, 38:294], 1.0)
        ka, da = describe(a, detect_keypoints(a, octaves=2))
        kb, db = describe(b, detect_keypoints(b, octaves=2))
        pairs = 0
        for i, k in enumerate(ka):
            if not (60 < k.x < 210 and 60 < k.y < 210):
                continue
            for j, k2 in enumerate(kb):
                if abs(k2.x - (k.x - 8)) <= 0.5 and abs(k2.y - (k.y - 8)) <= 0.5:
                    assert descriptor_distance(da[i], db[j]) < 0.1
                    pairs += 1
                    break
        assert pairs >= 10


class TestMatching:
    def test_self_match_zero_distance(self):
        rng = np.random.default_rng(0)
        descs = rng.uniform(size=(30, 64))
        descs /= np.linalg.norm(descs, axis=1, keepdims=True)
        matches = match_knn(descs, descs)
        for m in matches:
            assert m.best_idx == m.ref_idx
            assert m.d1 == 0.0

    def test_empty_target(self):
        assert match_knn(np.zeros((3, 64)), np.zeros((0, 64))) == []

    def test_against_brute_force_oracle(self):
        rng = np.random.default_rng(5)
        ref = rng.uniform(size=(100, 64))
        tgt = rng.uniform(size=(80, 64))
        matches = match_knn(ref, tgt)
        for m in matches:
            dists = np.array([descriptor_distance(ref[m.ref_idx], t) for t in tgt])
            order = np.argsort(dists, kind="stable")
            assert m.best_idx == order[0]
            assert m.second_idx == order[1]
            assert m.d1 == pytest.approx(dists[order[0]], abs=1e-12)
            assert m.d2 == pytest.approx(dists[order[1]], abs=1e-12)

    def test_distance_symmetry_exact(self):
        rng = np.random.default_rng(9)
        a = rng.uniform(size=64)
        b = rng.uniform(size=64)
        assert descriptor_distance(a, b) == descriptor_distance(b, a)

    def test_single_target_rejected_by_ratio(self):
        matches = match_knn(np.ones((2, 64)), np.ones((1, 64)))
        assert all(m.second_idx == -1 for m in matches)
        assert ratio_test(matches, 0.7) == []


class TestRatioTest:
    def test_direct_inequality(self):
        m = Match(0, 1, 0.2, 2, 0.9)
        assert ratio_test([m], 0.7) == [m]

    def test_boundary_rejected(self):
        m = Match(0, 1, 0.63, 2, 0.9)
        assert ratio_test([m], 0.7) == []  # requires strict d1 < ratio*d2

    def test_zero_second_distance_convention(self):
        dup = Match(0, 1, 0.0, 2, 0.0)
        near = Match(1, 1, 0.1, 2, 0.0)
        assert ratio_test([dup, near], 0.7) == [dup]

    def test_monotonicity_in_ratio(self):
        rng = np.random.default_rng(2)
        ref = rng.uniform(size=(60, 64))
        tgt = rng.uniform(size=(60, 64))
        matches = match_knn(ref, tgt)
        r1 = {m.ref_idx for m in ratio_test(matches, 0.55)}
        r2 = {m.ref_idx for m in ratio_test(matches, 0.75)}
        r3 = {m.ref_idx for m in ratio_test(matches, 0.95)}
        assert r1 <= r2 <= r3

    def test_order_preserved(self):
        rng = np.random.default_rng(3)
        ref = rng.uniform(size=(40, 64))
        tgt = rng.uniform(size=(40, 64))
        survivors = ratio_test(match_knn(ref, tgt), 0.95)
        idx = [m.ref_idx for m in survivors]
        assert idx == sorted(idx)


class TestMatchRateMatrix:
    def test_requires_two_images(self):
        with pytest.raises(ValueError):
            match_rate_matrix([rendered_cube()])

    def test_identical_images_match_everywhere(self):
        img = rendered_cube()
        m = match_rate_matrix([img, img])
        rates = m.rates()
        assert np.all(m.matched.diagonal() == m.total.diagonal())
        assert rates[0, 1] > 0.95 and rates[1, 0] > 0.95

    def test_cross_pattern_below_diagonal(self):
        imgs = [rendered_cube(InfillPattern.DIAMOND_FILL, seed=1),
                rendered_cube(InfillPattern.LINEAR, seed=2),
                rendered_cube(InfillPattern.HEXAGONAL, seed=3)]
        m = match_rate_matrix(imgs, ["dia", "lin", "hex"])
        rates = m.rates()
        assert np.all(m.matched.diagonal() == m.total.diagonal())
        off = rates[~np.eye(3, dtype=bool)]
        assert off.max() < 0.6  # cross-pattern matching collapses

    def test_same_spec_between_cross_and_diagonal(self):
        cross = match_rate_matrix(
            [rendered_cube(InfillPattern.DIAMOND_FILL, seed=1),
             rendered_cube(InfillPattern.LINEAR, seed=2)]).off_diagonal_mean()
        same = match_rate_matrix(
            [rendered_cube(seed=10), rendered_cube(seed=11)]).off_diagonal_mean()
        assert cross < same < 1.0

    def test_csv_round_trip(self):
        m = MatchRateMatrix(["a", "b"], np.array([[10, 3], [4, 12]]),
                            np.array([[10, 10], [12, 12]]))
        again = MatchRateMatrix.from_csv(m.to_csv())
        assert again.labels == m.labels
        assert np.array_equal(again.matched, m.matched)
        assert np.array_equal(again.total, m.total)

    def test_json_round_trip(self):
        m = MatchRateMatrix(["a", "b"], np.array([[5, 1], [2, 6]]),
                            np.array([[5, 5], [6, 6]]))
        again = MatchRateMatrix.from_json(m.to_json())
        assert again.labels == m.labels
        assert np.array_equal(again.matched, m.matched)

    def test_matched_bounded_by_total(self):
        with pytest.raises(ValueError):
            MatchRateMatrix(["a", "b"], np.array([[5, 11], [0, 6]]),
                            np.array([[5, 5], [6, 6]]))
