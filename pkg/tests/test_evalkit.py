import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cddgan.errors import DataError
from cddgan.evalkit import (
    collect_embeddings, evaluate_dir, export_embeddings, gaussian_window, project_2d, psnr,
    silhouette, ssim,
)
from cddgan.imaging import save_image
from cddgan.networks import GeneratorSpec, NetworkSpec, build_networks


def psnr_oracle(a, b):
    diff = (np.asarray(a, float) - np.asarray(b, float)).ravel()
    return 10 * math.log10(1.0 / (sum(d * d for d in diff) / len(diff)))


def ssim_oracle(a, b):
    """Direct window loop: weighted statistics for every valid window."""
    g = gaussian_window()
    w = np.outer(g, g)
    k = len(g)
    vals = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        for i in range(x.shape[0] - k + 1):
            for j in range(x.shape[1] - k + 1):
                px, py = x[i:i + k, j:j + k], y[i:i + k, j:j + k]
                mx, my = (w * px).sum(), (w * py).sum()
                vx = (w * (px - mx) ** 2).sum()
                vy = (w * (py - my) ** 2).sum()
                cxy = (w * (px - mx) * (py - my)).sum()
                vals.append((2 * mx * my + 1e-4) * (2 * cxy + 9e-4)
                            / ((mx ** 2 + my ** 2 + 1e-4) * (vx + vy + 9e-4)))
    return float(np.mean(vals))


class TestPSNR:
    def test_identical_is_capped(self, rng):
        a = rng.random((8, 8, 3))
        assert psnr(a, a) == 99.0

    def test_known_mse(self):
        a = np.zeros((4, 4, 3))
        assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)

    def test_matches_oracle(self, rng):
        for _ in range(5):
            a, b = rng.random((6, 7, 3)), rng.random((6, 7, 3))
            assert psnr(a, b) == pytest.approx(psnr_oracle(a, b), abs=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_symmetric(self, seed):
        r = np.random.default_rng(seed)
        a, b = r.random((5, 5, 3)), r.random((5, 5, 3))
        assert psnr(a, b) == psnr(b, a)

    def test_decreases_with_noise(self, rng):
        a = 0.25 + 0.5 * rng.random((32, 32, 3))
        noise = rng.standard_normal(a.shape)
        scores = [psnr(a, np.clip(a + s * noise, 0, 1)) for s in (0.01, 0.02, 0.05, 0.1, 0.2)]
        assert all(x > y for x, y in zip(scores, scores[1:]))

    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


class TestSSIM:
    def test_identical_is_one(self, rng):
        a = rng.random((16, 16, 3))
        assert ssim(a, a) == 1.0

    def test_constant_images_closed_form(self):
        a, b = np.full((16, 16, 3), 0.2), np.full((16, 16, 3), 0.8)
        expected = (2 * 0.2 * 0.8 + 1e-4) / (0.2 ** 2 + 0.8 ** 2 + 1e-4)
        assert ssim(a, b) == pytest.approx(expected, abs=1e-12)

    def test_matches_window_loop(self, rng):
        a = rng.random((14, 15, 3))
        b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
        assert ssim(a, b) == pytest.approx(ssim_oracle(a, b), abs=1e-9)

    def test_symmetric(self, rng):
        a, b = rng.random((12, 12, 3)), rng.random((12, 12, 3))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)

    def test_too_small(self):
        with pytest.raises(DataError):
            ssim(np.zeros((10, 10, 3)), np.zeros((10, 10, 3)))


def test_evaluate_dir(tmp_path, rng):
    for i in range(5):
        gt = rng.random((16, 16, 3))
        save_image(gt, tmp_path / "gt" / f"{i}.png")
        noisy = np.clip(gt + 0.05 * rng.standard_normal(gt.shape), 0, 1)
        save_image(noisy, tmp_path / "pred" / f"{i}.png")
    rows = evaluate_dir(tmp_path / "pred", tmp_path / "gt", tmp_path / "m.csv")
    assert len(rows) == 6 and rows[-1].id == "mean"
    assert rows[-1].psnr_db == pytest.approx(np.mean([r.psnr_db for r in rows[:5]]), abs=1e-9)
    assert rows[-1].ssim == pytest.approx(np.mean([r.ssim for r in rows[:5]]), abs=1e-9)
    lines = list(csv.reader(open(tmp_path / "m.csv")))
    assert lines[0] == ["id", "psnr_db", "ssim"] and len(lines) == 7


def test_evaluate_dir_missing_ground_truth(tmp_path, rng):
    save_image(rng.random((16, 16, 3)), tmp_path / "pred" / "a.png")
    (tmp_path / "gt").mkdir()
    with pytest.raises(DataError):
        evaluate_dir(tmp_path / "pred", tmp_path / "gt")


@pytest.fixture(scope="module")
def small_nets():
    spec = NetworkSpec(GeneratorSpec(ngf=4), ndf=4, embed_dim=8, noise_dim=4)
    return build_networks(spec, seed=0)


class TestEmbeddings:
    def test_export_cardinality(self, tmp_path, small_nets, rng):
        hazy = [rng.random((32, 32, 3)) for _ in range(10)]
        clean = [rng.random((32, 32, 3)) for _ in range(10)]
        dump, coords, score = export_embeddings(small_nets, hazy, clean, tmp_path, 64)
        assert len(dump) == 2 * 10 * 64 * 5
        assert coords.shape == (len(dump), 2)
        assert -1 <= score <= 1
        rows = list(csv.reader(open(tmp_path / "embeddings.csv")))
        assert len(rows) == len(dump) + 1 and len(rows[0]) == 2 + 8
        assert (tmp_path / "projection.png").stat().st_size > 0
        assert len(list(csv.reader(open(tmp_path / "projection.csv")))) == len(dump) + 1

    def test_identical_inputs_warn(self, small_nets):
        img = np.full((16, 16, 3), 0.5)
        with pytest.warns(RuntimeWarning, match="zero variance"):
            collect_embeddings(small_nets, [img], [img], 8)

    def test_pca_deterministic_and_centered(self, rng):
        v = rng.standard_normal((50, 6))
        a, b = project_2d(v), project_2d(v.copy())
        assert np.array_equal(a, b)
        np.testing.assert_allclose(a.mean(axis=0), 0, atol=1e-12)
        assert a[:, 0].var() >= a[:, 1].var()

    def test_tsne_shape(self, rng):
        assert project_2d(rng.standard_normal((40, 5)), "tsne").shape == (40, 2)

    def test_silhouette_separated_clusters(self, rng):
        pts = np.concatenate([rng.normal(0, 0.1, (20, 2)), rng.normal(5, 0.1, (20, 2))])
        labels = np.array(["hazy"] * 20 + ["clean"] * 20)
        assert silhouette(pts, labels) > 0.9
        assert silhouette(np.zeros((4, 2)), labels[:4]) == 0.0

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            project_2d(np.zeros((3, 3)), "umap")


def test_embeddings_are_unit_norm(small_nets, rng):
    dump = collect_embeddings(small_nets, [rng.random((16, 16, 3))], [rng.random((16, 16, 3))], 4)
    np.testing.assert_allclose(np.linalg.norm(dump.vectors, axis=1), 1.0, atol=1e-5)
    assert set(dump.domains) == {"hazy", "clean"}
    assert sorted(set(dump.taps)) == [1, 5, 9, 13, 17]
