"""Quality metrics, folder evaluation and embedding export."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .errors import DataError
from .imaging import check_image, list_images, load_image, to_internal
from .networks import sample_locations

PSNR_CAP = 99.0
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _pair(a, b):
    a, b = check_image(a, "a"), check_image(b, "b")
    if a.shape != b.shape:
        raise DataError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for peak value 1, capped at 99 dB."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img, g):
    r = len(g) // 2
    out = ndimage.correlate1d(img, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def ssim(a, b) -> float:
    """Mean structural similarity over all valid 11x11 Gaussian windows
    (sigma 1.5) and channels, with C1 = 0.01^2 and C2 = 0.03^2."""
    a, b = _pair(a, b)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise DataError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    g = gaussian_window()
    vals = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
        den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


@dataclass
class MetricRow:
    id: str
    psnr_db: float
    ssim: float


def evaluate_pairs(pairs) -> list[MetricRow]:
    """``pairs`` yields ``(id, prediction, ground_truth)``; the last row is the mean."""
    rows = [MetricRow(name, psnr(p, g), ssim(p, g)) for name, p, g in pairs]
    if not rows:
        raise DataError("nothing to evaluate")
    rows.append(MetricRow("mean", float(np.mean([r.psnr_db for r in rows])),
                          float(np.mean([r.ssim for r in rows]))))
    return rows


def evaluate_dir(pred_dir, gt_dir, out_csv=None) -> list[MetricRow]:
    """Score every prediction against the ground truth with the same filename.

    Returns one row per image followed by a ``mean`` row, and writes them to
    ``out_csv`` (header ``id,psnr_db,ssim``) when given.
    """
    preds = list_images(pred_dir)
    if not preds:
        raise DataError(f"no images in {pred_dir}")
    gt_dir = Path(gt_dir)
    missing = [p.name for p in preds if not (gt_dir / p.name).is_file()]
    if missing:
        raise DataError(f"no ground truth for: {', '.join(missing[:5])}")
    rows = evaluate_pairs((p.name, load_image(p), load_image(gt_dir / p.name)) for p in preds)
    if out_csv is not None:
        write_metrics_csv(rows, out_csv)
    return rows


def write_metrics_csv(rows, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "psnr_db", "ssim"])
        for r in rows:
            w.writerow([r.id, f"{r.psnr_db:.6f}", f"{r.ssim:.6f}"])


# ---------------------------------------------------------------- embeddings


@dataclass
class EmbeddingDump:
    domains: np.ndarray   # (R,) str, "hazy" or "clean"
    taps: np.ndarray      # (R,) int, 1-based encoder layer index
    vectors: np.ndarray   # (R, d)

    def __len__(self):
        return len(self.domains)


@torch.no_grad()
def collect_embeddings(nets, hazy_images, clean_images, num_patches=64, seed=0,
                       dtype=torch.float32) -> EmbeddingDump:
    """Project encoder taps of the hazy -> clean generator at ``num_patches``
    seeded locations per tap for every image of both domains."""
    gen = nets.G
    heads = nets.heads_G
    taps = gen.spec.taps
    domains, tap_col, vecs = [], [], []
    locs = None
    for label, images in (("hazy", hazy_images), ("clean", clean_images)):
        for img in images:
            _, feats = gen.encode(to_internal(img, dtype))
            if locs is None:
                locs = sample_locations(feats, num_patches, torch.Generator().manual_seed(seed))
            for tap, emb in zip(taps, heads(feats, locs)):
                e = emb[0].double().numpy()
                vecs.append(e)
                domains += [label] * len(e)
                tap_col += [tap] * len(e)
    if not vecs:
        raise DataError("no images to embed")
    dump = EmbeddingDump(np.array(domains), np.array(tap_col), np.concatenate(vecs))
    if np.allclose(dump.vectors.var(axis=0), 0.0):
        warnings.warn("embeddings have zero variance; inputs may be identical", RuntimeWarning)
    return dump


def project_2d(vectors, method="pca", seed=0) -> np.ndarray:
    """2-D coordinates: PCA by default (deterministic), t-SNE on request."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if method == "pca":
        centered = vectors - vectors.mean(axis=0)
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        comps = vt[:2]
        # fix sign so the projection is reproducible across LAPACK builds
        signs = np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(axis=1)])
        signs[signs == 0] = 1.0
        coords = centered @ (comps * signs[:, None]).T
        if coords.shape[1] < 2:
            coords = np.pad(coords, ((0, 0), (0, 2 - coords.shape[1])))
        return coords
    if method == "tsne":
        from sklearn.manifold import TSNE
        return TSNE(n_components=2, random_state=seed, init="pca").fit_transform(vectors)
    raise ValueError(f"unknown projection method {method!r}")


def silhouette(coords, labels) -> float:
    from sklearn.metrics import silhouette_score
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2 or np.allclose(coords, coords[0]):
        return 0.0
    return float(silhouette_score(coords, labels))


def export_embeddings(nets, hazy_images, clean_images, out_dir, num_patches=64,
                      method="pca", seed=0, dtype=torch.float32, plot=True):
    """Write ``embeddings.csv`` (domain,tap,dim0..), ``projection.csv``
    (domain,x,y) and ``projection.png``. Returns ``(dump, coords, silhouette)``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump = collect_embeddings(nets, hazy_images, clean_images, num_patches, seed, dtype)
    coords = project_2d(dump.vectors, method, seed)
    score = silhouette(coords, dump.domains)
    dim = dump.vectors.shape[1]
    with open(out_dir / "embeddings.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["domain", "tap"] + [f"dim{i}" for i in range(dim)])
        for dom, tap, vec in zip(dump.domains, dump.taps, dump.vectors):
            w.writerow([dom, int(tap)] + [f"{v:.7g}" for v in vec])
    with open(out_dir / "projection.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["domain", "x", "y"])
        for dom, (x, y) in zip(dump.domains, coords):
            w.writerow([dom, f"{x:.7g}", f"{y:.7g}"])
    if plot:
        _plot(coords, dump.domains, out_dir / "projection.png", f"{method}, silhouette {score:.3f}")
    return dump, coords, score


def _plot(coords, labels, path, title):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5), dpi=100)
    for label, color in (("clean", "tab:blue"), ("hazy", "tab:red")):
        m = labels == label
        ax.scatter(coords[m, 0], coords[m, 1], s=3, c=color, label=label, alpha=0.5)
    ax.legend()
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
