"""Evaluation metrics and the per-bin evaluation harness.

All pixel metrics are computed on whole images mapped to [0, 1] (the usual
reporting convention): L1 as a percentage, PSNR against a unit data range
capped at 100 dB, and gaussian-windowed SSIM on the valid interior. FID is
exposed as a Fréchet distance over caller-supplied feature vectors so any
embedding network can be plugged in.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy import linalg

from .data import MASK_BINS, generate_irregular_mask
from .errors import InputError

PSNR_CAP = 100.0

SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11-tap window
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _to_unit(img: np.ndarray | torch.Tensor) -> np.ndarray:
    """[-1, 1] CHW -> float64 [0, 1] CHW, clipped."""
    if isinstance(img, torch.Tensor):
        img = img.detach().cpu().numpy()
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3:
        raise InputError(f"expected (C, H, W) image, got {arr.shape}")
    return np.clip((arr + 1.0) / 2.0, 0.0, 1.0)


def l1_percent(pred, target) -> float:
    """Mean absolute error in [0, 1], as a percentage of the full range."""
    p, t = _to_unit(pred), _to_unit(target)
    if p.shape != t.shape:
        raise InputError(f"shape mismatch: {p.shape} vs {t.shape}")
    return float(np.abs(p - t).mean() * 100.0)


def psnr(pred, target) -> float:
    """Peak signal-to-noise ratio against a unit range, capped at 100 dB."""
    p, t = _to_unit(pred), _to_unit(target)
    if p.shape != t.shape:
        raise InputError(f"shape mismatch: {p.shape} vs {t.shape}")
    mse = float(((p - t) ** 2).mean())
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _gaussian_window(radius: int, sigma: float) -> torch.Tensor:
    x = torch.arange(-radius, radius + 1, dtype=torch.float64)
    w = torch.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def _window_mean(x: torch.Tensor, win: torch.Tensor) -> torch.Tensor:
    """Separable valid-mode gaussian windowing of (N, 1, H, W) maps."""
    k = win.numel()
    x = F.conv2d(x, win.view(1, 1, k, 1))
    return F.conv2d(x, win.view(1, 1, 1, k))


def ssim(pred, target) -> float:
    """Structural similarity with an 11x11 gaussian window (sigma 1.5).

    Weighted means/variances use direct (population) moments and only window
    positions fully inside the image count, i.e. the score is the mean over
    the valid interior, averaged across channels.
    """
    p, t = _to_unit(pred), _to_unit(target)
    if p.shape != t.shape:
        raise InputError(f"shape mismatch: {p.shape} vs {t.shape}")
    if p.shape[1] < 2 * SSIM_RADIUS + 1 or p.shape[2] < 2 * SSIM_RADIUS + 1:
        raise InputError(f"image {p.shape} smaller than the {2 * SSIM_RADIUS + 1}-tap window")
    win = _gaussian_window(SSIM_RADIUS, SSIM_SIGMA)
    x = torch.from_numpy(p).unsqueeze(1)  # channels as batch
    y = torch.from_numpy(t).unsqueeze(1)
    mu_x = _window_mean(x, win)
    mu_y = _window_mean(y, win)
    var_x = _window_mean(x * x, win) - mu_x * mu_x
    var_y = _window_mean(y * y, win) - mu_y * mu_y
    cov = _window_mean(x * y, win) - mu_x * mu_y
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
    return float((num / den).mean())


# ---------------------------------------------------------------------------
# FID hook
# ---------------------------------------------------------------------------

def feature_statistics(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of an (N, D) feature matrix."""
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise InputError(f"need an (N >= 2, D) feature matrix, got {feats.shape}")
    mu = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False)
    return mu, np.atleast_2d(cov)


def frechet_distance(mu1, cov1, mu2, cov2, eps: float = 1e-6) -> float:
    """Fréchet distance between two gaussians (the quantity behind FID)."""
    mu1, mu2 = np.asarray(mu1, dtype=np.float64), np.asarray(mu2, dtype=np.float64)
    cov1, cov2 = np.atleast_2d(cov1).astype(np.float64), np.atleast_2d(cov2).astype(np.float64)
    diff = mu1 - mu2
    covmean, _ = linalg.sqrtm(cov1 @ cov2, disp=False)
    if not np.isfinite(covmean).all():
        # singular product: retry with a small diagonal ridge
        offset = np.eye(cov1.shape[0]) * eps
        covmean, _ = linalg.sqrtm((cov1 + offset) @ (cov2 + offset), disp=False)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    dist = diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * np.trace(covmean)
    return float(max(dist, 0.0))


def fid_from_features(real_feats: np.ndarray, fake_feats: np.ndarray) -> float:
    """FID over caller-supplied embeddings (use an Inception network to
    reproduce published numbers; any (N, D) embedding works for tracking)."""
    mu_r, cov_r = feature_statistics(real_feats)
    mu_f, cov_f = feature_statistics(fake_feats)
    return frechet_distance(mu_r, cov_r, mu_f, cov_f)


def pooled_features(extractor, images: torch.Tensor) -> np.ndarray:
    """Global-average-pool the deepest extractor stage into (N, D) vectors."""
    with torch.no_grad():
        feats = extractor(images)[-1]
    return feats.mean(dim=(2, 3)).cpu().numpy()


# ---------------------------------------------------------------------------
# evaluation harness
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    """Per-bin metric means plus sample counts; renders as a table or JSON."""

    rows: dict[str, dict[str, float]] = field(default_factory=dict)

    def table(self) -> str:
        cols = ["bin", "n", "l1%", "psnr", "ssim", "fid"]
        lines = ["  ".join(f"{c:>8}" for c in cols)]
        for name, row in self.rows.items():
            fid = f"{row['fid']:8.3f}" if row.get("fid") is not None else " " * 8
            lines.append(
                f"{name:>8}  {int(row['n']):>8}  {row['l1']:8.3f}  "
                f"{row['psnr']:8.3f}  {row['ssim']:8.4f}  {fid}"
            )
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps(self.rows, indent=2, sort_keys=True)


def evaluate(
    generator,
    dataset,
    bins: dict[str, tuple[float, float]] | None = None,
    samples_per_bin: int = 8,
    seed: int = 0,
    feature_fn=None,
) -> EvalReport:
    """Score composited outputs per hole-ratio bin.

    Each bin draws its own masks (seeded independently of training) over the
    first ``samples_per_bin`` dataset images, cycling if the dataset is
    smaller. ``feature_fn`` maps a (N, 3, H, W) batch to (N, D) embeddings;
    when given, per-bin FID between ground truth and outputs is included.
    """
    bins = dict(bins) if bins is not None else dict(MASK_BINS)
    generator.eval()
    report = EvalReport()
    h, w = None, None
    for bi, (name, (lo, hi)) in enumerate(sorted(bins.items())):
        l1s, psnrs, ssims = [], [], []
        gt_batch, out_batch = [], []
        for i in range(samples_per_bin):
            image, _ = dataset.image_pair(i % len(dataset))
            if h is None:
                h, w = image.shape[-2:]
            rng = np.random.default_rng([seed, 29, bi, i])
            mask = torch.from_numpy(generate_irregular_mask(h, w, (lo, hi), rng)[None])
            with torch.no_grad():
                result = generator(image[None], mask[None])
            out = result.composited[0]
            l1s.append(l1_percent(out, image))
            psnrs.append(psnr(out, image))
            ssims.append(ssim(out, image))
            gt_batch.append(image)
            out_batch.append(out)
        row = {
            "n": float(samples_per_bin),
            "l1": float(np.mean(l1s)),
            "psnr": float(np.mean(psnrs)),
            "ssim": float(np.mean(ssims)),
            "fid": None,
        }
        if feature_fn is not None and samples_per_bin >= 2:
            row["fid"] = fid_from_features(
                feature_fn(torch.stack(gt_batch)), feature_fn(torch.stack(out_batch))
            )
        report.rows[name] = row
    return report
