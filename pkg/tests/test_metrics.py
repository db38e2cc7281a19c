import numpy as np
import pytest
from skimage.metrics import structural_similarity as skimage_ssim

from intrinseg import metrics as M


# -- independent brute-force references --------------------------------------


def mse_ref(j, j_hat):
    total = 0.0
    for a, b in zip(j.ravel(), j_hat.ravel()):
        total += (a - b) ** 2
    return total / j.size


def smse_ref(j, j_hat):
    num = den = 0.0
    for a, b in zip(j.ravel(), j_hat.ravel()):
        num += a * b
        den += a * a
    alpha = num / den
    return mse_ref(alpha * j, j_hat)


def lmse_ref(j, j_hat, k, stride):
    h, w = j.shape[-2:]
    values = []
    for y in range(0, h - k + 1, stride):
        for x in range(0, w - k + 1, stride):
            jw = j[..., y : y + k, x : x + k]
            tw = j_hat[..., y : y + k, x : x + k]
            if np.sum(jw * jw) == 0:
                values.append(np.mean(tw ** 2))
            else:
                values.append(smse_ref(jw, tw))
    return float(np.mean(values))


def confusion_ref(pred, truth, c):
    counts = np.zeros((c, c), dtype=np.int64)
    for p, t in zip(pred.ravel(), truth.ravel()):
        counts[t, p] += 1
    return counts


def seg_scores_ref(counts):
    total = counts.sum()
    diag = np.diag(counts)
    global_acc = diag.sum() / total
    class_accs, ious = [], []
    for c in range(counts.shape[0]):
        row, col = counts[c].sum(), counts[:, c].sum()
        if row > 0:
            class_accs.append(counts[c, c] / row)
        if row + col - counts[c, c] > 0:
            ious.append(counts[c, c] / (row + col - counts[c, c]))
    return global_acc, float(np.mean(class_accs)), float(np.mean(ious))


class TestOracleEquivalence:
    def test_mse_smse_random(self, rng):
        for _ in range(100):
            j = rng.random((3, 6, 8)) + 0.05
            j_hat = rng.random((3, 6, 8))
            assert abs(M.mse(j, j_hat) - mse_ref(j, j_hat)) <= 1e-9
            assert abs(M.smse(j, j_hat) - smse_ref(j, j_hat)) <= 1e-9

    def test_lmse_forty_by_forty(self, rng):
        for _ in range(10):
            j = rng.random((40, 40)) + 0.05
            j_hat = rng.random((40, 40))
            ours = M.lmse(j, j_hat, k=20)
            ref = lmse_ref(j, j_hat, k=20, stride=10)
            assert abs(ours - ref) <= 1e-9

    def test_confusion_and_scores_random(self, rng):
        for _ in range(100):
            c = int(rng.integers(2, 6))
            pred = rng.integers(0, c, (5, 7))
            truth = rng.integers(0, c, (5, 7))
            cm = M.confusion(pred, truth, c)
            ref = confusion_ref(pred, truth, c)
            assert np.array_equal(cm.counts, ref)
            ours = M.seg_scores(cm)
            expected = seg_scores_ref(ref)
            assert np.allclose(ours, expected, atol=1e-9)


class TestBrightnessAdjustedMse:
    def test_scale_removed(self, rng):
        j_hat = rng.random((3, 4, 4)) + 0.1
        assert M.mse_brightness_adjusted(2 * j_hat, j_hat) == pytest.approx(0.0, abs=1e-15)

    def test_equal(self, rng):
        j = rng.random((3, 4, 4)) + 0.1
        assert M.mse_brightness_adjusted(j, j) == pytest.approx(0.0, abs=1e-15)

    def test_hand_value(self):
        j = np.array([[1.0], [2.0]])
        j_hat = np.array([[2.0], [2.0]])
        assert M.mse_brightness_adjusted(j, j_hat) == pytest.approx(0.4)

    def test_zero_prediction_falls_back_to_zero_scale_error(self, rng):
        j_hat = rng.random((2, 4, 4))
        value = M.mse_brightness_adjusted(np.zeros_like(j_hat), j_hat)
        assert value == pytest.approx(np.mean(j_hat ** 2))

    def test_never_above_mse(self, rng):
        for _ in range(50):
            j = rng.normal(size=(3, 4)) + 0.01
            j_hat = rng.normal(size=(3, 4))
            assert M.mse_brightness_adjusted(j, j_hat) <= M.mse(j, j_hat) + 1e-12


class TestLmse:
    def test_equal(self, rng):
        j = rng.random((40, 40)) + 0.1
        assert M.lmse(j, j, k=20) == pytest.approx(0.0, abs=1e-15)

    def test_global_scale(self, rng):
        j_hat = rng.random((40, 40)) + 0.1
        assert M.lmse(3.0 * j_hat, j_hat, k=20) == pytest.approx(0.0, abs=1e-12)

    def test_too_small_image(self):
        with pytest.raises(ValueError, match="smaller than window"):
            M.lmse(np.ones((10, 10)), np.ones((10, 10)), k=20)


class TestDssim:
    def test_equal_images(self, rng):
        j = rng.random((3, 16, 16))
        assert M.dssim(j, j) == pytest.approx(0.0, abs=1e-12)

    def test_constant_images(self):
        j = np.full((1, 16, 16), 0.5)
        assert M.dssim(j, j) == pytest.approx(0.0, abs=1e-12)

    def test_checkerboard_inversion_against_skimage(self):
        yy, xx = np.mgrid[0:24, 0:24]
        board = ((yy + xx) % 2).astype(np.float64)
        ours = M.ssim(board, 1.0 - board)
        golden = skimage_ssim(
            board,
            1.0 - board,
            data_range=1.0,
            gaussian_weights=True,
            sigma=1.5,
            use_sample_covariance=False,
        )
        assert ours == pytest.approx(golden, abs=1e-7)
        assert 0.0 < M.dssim(board, 1.0 - board) <= 1.0

    def test_random_images_against_skimage(self, rng):
        for _ in range(5):
            a = rng.random((20, 24))
            b = rng.random((20, 24))
            golden = skimage_ssim(
                a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                use_sample_covariance=False,
            )
            assert M.ssim(a, b) == pytest.approx(golden, abs=1e-7)

    def test_symmetry(self, rng):
        a, b = rng.random((16, 16)), rng.random((16, 16))
        assert abs(M.dssim(a, b) - M.dssim(b, a)) <= 1e-12

    def test_range(self, rng):
        for _ in range(10):
            a, b = rng.random((3, 12, 12)), rng.random((3, 12, 12))
            assert 0.0 <= M.dssim(a, b) <= 1.0

    def test_too_small(self):
        with pytest.raises(ValueError, match="smaller than SSIM window"):
            M.dssim(np.ones((4, 4)), np.ones((4, 4)))


class TestConfusion:
    def test_perfect_diagonal(self, rng):
        truth = rng.integers(0, 3, (6, 6))
        cm = M.confusion(truth, truth, 3)
        assert np.array_equal(np.diag(np.diag(cm.counts)), cm.counts)
        assert cm.counts.sum() == 36

    def test_all_wrong_binary(self):
        truth = np.zeros((2, 3), dtype=int)
        pred = np.ones((2, 3), dtype=int)
        cm = M.confusion(pred, truth, 2)
        assert cm.counts[0, 1] == 6 and cm.counts.sum() == 6

    def test_hand_case(self):
        truth = np.array([[0, 0], [1, 1]])
        pred = np.array([[0, 1], [1, 1]])
        cm = M.confusion(pred, truth, 2)
        assert cm.counts.tolist() == [[1, 1], [0, 2]]

    def test_range_violation(self):
        with pytest.raises(ValueError, match=">= C"):
            M.confusion(np.array([[2]]), np.array([[0]]), 2)

    def test_permutation_equivariance(self, rng):
        c = 4
        pred = rng.integers(0, c, (8, 8))
        truth = rng.integers(0, c, (8, 8))
        perm = rng.permutation(c)
        base = M.confusion(pred, truth, c).counts
        permuted = M.confusion(perm[pred], perm[truth], c).counts
        for t in range(c):
            for p in range(c):
                assert permuted[perm[t], perm[p]] == base[t, p]


class TestSegScores:
    def test_perfect(self):
        cm = M.ConfusionMatrix(np.diag([5, 3, 2]))
        assert M.seg_scores(cm) == (1.0, 1.0, 1.0)

    def test_hand_case(self):
        cm = M.ConfusionMatrix(np.array([[1, 1], [0, 2]]))
        g, c, miou = M.seg_scores(cm)
        assert g == pytest.approx(0.75)
        assert c == pytest.approx(0.75)
        assert miou == pytest.approx((0.5 + 2 / 3) / 2)

    def test_all_wrong_binary(self):
        cm = M.ConfusionMatrix(np.array([[0, 3], [4, 0]]))
        assert M.seg_scores(cm) == (0.0, 0.0, 0.0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            M.seg_scores(M.ConfusionMatrix(np.zeros((2, 2), dtype=int)))


class TestEvaluate:
    def make_pair(self, rng, perfect=False):
        truth = {
            "reflectance": rng.random((3, 24, 24)) + 0.05,
            "shading": rng.random((1, 24, 24)) + 0.05,
            "labels": rng.integers(0, 3, (24, 24)),
        }
        if perfect:
            return dict(truth), truth
        pred = {
            "reflectance": rng.random((3, 24, 24)) + 0.05,
            "shading": rng.random((1, 24, 24)) + 0.05,
            "labels": rng.integers(0, 3, (24, 24)),
        }
        return pred, truth

    def test_perfect_predictions(self, rng):
        pred, truth = self.make_pair(rng, perfect=True)
        report = M.evaluate([pred], [truth], num_classes=3, lmse_window=20)
        for comp in ("reflectance", "shading"):
            for metric in ("mse", "lmse", "dssim"):
                mean, std = report.intrinsic[comp][metric]
                assert mean == pytest.approx(0.0, abs=1e-12)
        assert report.segmentation["global"] == 1.0
        assert report.segmentation["miou"] == 1.0

    def test_single_image_std_zero(self, rng):
        pred, truth = self.make_pair(rng)
        report = M.evaluate([pred], [truth], num_classes=3, lmse_window=20)
        for stats in report.intrinsic.values():
            for _, std in stats.values():
                assert std == 0.0

    def test_two_image_aggregation(self, rng):
        pairs = [self.make_pair(rng) for _ in range(2)]
        preds = [p for p, _ in pairs]
        truths = [t for _, t in pairs]
        report = M.evaluate(preds, truths, num_classes=3, lmse_window=20)
        a = M.mse_brightness_adjusted(preds[0]["reflectance"], truths[0]["reflectance"])
        b = M.mse_brightness_adjusted(preds[1]["reflectance"], truths[1]["reflectance"])
        mean, std = report.intrinsic["reflectance"]["mse"]
        assert mean == pytest.approx((a + b) / 2)
        assert std == pytest.approx(abs(a - b) / 2)

    def test_pooled_confusion(self, rng):
        pairs = [self.make_pair(rng) for _ in range(3)]
        report = M.evaluate(
            [p for p, _ in pairs], [t for _, t in pairs], num_classes=3, lmse_window=20
        )
        assert report.confusion_matrix.counts.sum() == 3 * 24 * 24

    def test_kv_roundtrip_text(self, rng):
        pred, truth = self.make_pair(rng)
        report = M.evaluate([pred], [truth], num_classes=3, lmse_window=20)
        kv = report.to_kv()
        assert "seg_miou=" in kv and "reflectance_mse_mean=" in kv
        assert "evaluation over 1 images" in report.to_text()
