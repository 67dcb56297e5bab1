"""Quantitative evaluation: PSNR, SSIM, mu-law HDR compression and the
per-channel scale alignment needed because the recovered radiance field is
only defined up to a per-channel factor.

The evaluation protocol splits held-out views into LDR-OE (test poses at
exposure times seen in training), LDR-NE (a never-trained exposure) and HDR
(linear renders, scale-aligned, mu-law compressed, then compared against the
ground truth).
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

from .errors import InputError
from .io import DatasetBundle
from .model import ModelBundle
from .render import render_image


def psnr(a, b, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); +inf for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError(f"psnr: shapes differ ({a.shape} vs {b.shape})")
    if not peak > 0:
        raise InputError(f"psnr: peak must be positive, got {peak}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def ssim(a, b, peak: float = 1.0, k1: float = 0.01, k2: float = 0.03,
         window_size: int = 11, sigma: float = 1.5) -> float:
    """Mean structural similarity with a Gaussian window (valid region only).

    Channels are averaged; images must be at least window_size on each side.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError(f"ssim: shapes differ ({a.shape} vs {b.shape})")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if a.ndim != 3:
        raise InputError(f"ssim expects [h, w] or [h, w, c] images, got {a.shape}")
    if a.shape[0] < window_size or a.shape[1] < window_size:
        raise InputError(f"ssim: image {a.shape[:2]} smaller than the {window_size}x{window_size} window")
    kernel = _gaussian_kernel(window_size, sigma)
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2

    def smooth(img):
        return convolve2d(img, kernel, mode="valid")

    scores = []
    for c in range(a.shape[2]):
        x, y = a[:, :, c], b[:, :, c]
        mu_x, mu_y = smooth(x), smooth(y)
        var_x = smooth(x * x) - mu_x * mu_x
        var_y = smooth(y * y) - mu_y * mu_y
        cov = smooth(x * y) - mu_x * mu_y
        score = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
            (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
        )
        scores.append(float(score.mean()))
    return float(np.mean(scores))


def mu_law(e, mu: float = 5000.0) -> np.ndarray:
    """log(1 + mu E) / log(1 + mu) elementwise; E must lie in [0, 1]."""
    e = np.asarray(e, dtype=np.float64)
    if np.any(e < 0.0) or np.any(e > 1.0):
        raise InputError("mu-law input must be scaled to [0, 1]")
    return np.log1p(mu * e) / np.log1p(mu)


@dataclass
class ScaleAlignment:
    """Per-channel factors relating recovered radiance to the reference."""

    alpha: np.ndarray  # [3]


def align_scale(pred_hdr, gt_hdr, eps: float = 1e-6) -> tuple[ScaleAlignment, np.ndarray]:
    """Per-channel scale minimizing mean squared log error on valid pixels.

    alpha_c = exp(mean(ln gt - ln pred)) over pixels where both sides exceed
    eps; returns the alignment and alpha * pred.
    """
    pred = np.asarray(pred_hdr, dtype=np.float64)
    gt = np.asarray(gt_hdr, dtype=np.float64)
    if pred.shape != gt.shape:
        raise InputError(f"align_scale: shapes differ ({pred.shape} vs {gt.shape})")
    if pred.shape[-1] != 3:
        raise InputError("align_scale expects trailing RGB channels")
    flat_p = pred.reshape(-1, 3)
    flat_g = gt.reshape(-1, 3)
    alpha = np.empty(3)
    for c in range(3):
        mask = (flat_p[:, c] > eps) & (flat_g[:, c] > eps)
        if not np.any(mask):
            raise InputError(f"align_scale: no valid pixels in channel {c}")
        alpha[c] = math.exp(float(np.mean(np.log(flat_g[mask, c]) - np.log(flat_p[mask, c]))))
    return ScaleAlignment(alpha=alpha), pred * alpha


# ---------------------------------------------------------------------------
# dataset evaluation


@dataclass
class EvalResult:
    rows: list  # (split, metric, value)
    notes: list

    def value(self, split: str, metric: str) -> float:
        for s, m, v in self.rows:
            if s == split and m == metric:
                return v
        raise KeyError(f"no row for ({split}, {metric})")

    def csv(self) -> str:
        lines = ["split,metric,value"]
        for s, m, v in self.rows:
            lines.append(f"{s},{m},{v!r}")
        return "\n".join(lines) + "\n"


def evaluate(
    bundle: ModelBundle,
    dataset: DatasetBundle,
    *,
    n_coarse: int = 32,
    n_importance: int = 32,
    mu: float = 5000.0,
    chunk: int = 1024,
    progress=None,
) -> EvalResult:
    """Render every held-out view and score it against the ground truth.

    LDR-OE rows cover test views whose exposure time also occurs in training;
    LDR-NE covers test views at held-out exposures. The HDR row scale-aligns
    the linear renders per channel (one pooled alpha per channel across all
    test poses), normalizes both sides by each pose's ground-truth max,
    mu-law compresses and then computes PSNR/SSIM. "hdr-unaligned" repeats
    that without the scale alignment, which exposes any drift of the absolute
    per-channel radiance scale.
    """
    test_views = dataset.test_views()
    if not test_views:
        raise InputError("dataset has no test views")
    train_dts = dataset.train_exposures()

    ldr_scores: dict[str, list] = {"ldr-oe": [], "ldr-ne": []}
    notes = []
    for v in test_views:
        split = "ldr-oe" if v.camera.exposure_time_s in train_dts else "ldr-ne"
        img = render_image(
            v.camera, bundle, dataset.near, dataset.far, mode="ldr",
            n_coarse=n_coarse, n_importance=n_importance, chunk=chunk,
        )
        gt = dataset.load_image(v)
        ldr_scores[split].append((psnr(img, gt, 1.0), ssim(img, gt, 1.0)))
        if progress is not None:
            progress(f"ldr {v.file}: psnr {ldr_scores[split][-1][0]:.2f}")

    rows = []
    for split in ("ldr-oe", "ldr-ne"):
        scores = ldr_scores[split]
        if not scores:
            notes.append(f"no views for {split}; row omitted")
            continue
        rows.append((split, "psnr", float(np.mean([s[0] for s in scores]))))
        rows.append((split, "ssim", float(np.mean([s[1] for s in scores]))))

    # HDR: one render per unique test pose
    poses: dict[str, object] = {}
    for v in test_views:
        poses.setdefault(v.pose_tag, v)
    preds, gts = [], []
    for tag, v in sorted(poses.items()):
        gt = dataset.hdr_ground_truth(v)
        if gt is None:
            notes.append(f"no HDR ground truth for pose {tag}; skipped")
            continue
        pred = render_image(
            v.camera, bundle, dataset.near, dataset.far, mode="hdr",
            n_coarse=n_coarse, n_importance=n_importance, chunk=chunk,
        )
        preds.append(pred)
        gts.append(gt)
        if progress is not None:
            progress(f"hdr {tag} rendered")
    if not preds:
        notes.append("HDR rows omitted (no ground truth)")
        return EvalResult(rows=rows, notes=notes)

    stack_p = np.stack(preds)
    stack_g = np.stack(gts)
    alignment, aligned = align_scale(stack_p, stack_g)
    for split, predictions in (("hdr", aligned), ("hdr-unaligned", stack_p)):
        scores = []
        for i in range(predictions.shape[0]):
            white = float(stack_g[i].max())
            pm = mu_law(np.clip(predictions[i] / white, 0.0, 1.0), mu)
            gm = mu_law(np.clip(stack_g[i] / white, 0.0, 1.0), mu)
            scores.append((psnr(pm, gm, 1.0), ssim(pm, gm, 1.0)))
        rows.append((split, "psnr", float(np.mean([s[0] for s in scores]))))
        rows.append((split, "ssim", float(np.mean([s[1] for s in scores]))))
    notes.append(
        "hdr scale alignment alpha = ["
        + ", ".join(f"{a:.4f}" for a in alignment.alpha)
        + "]"
    )
    return EvalResult(rows=rows, notes=notes)
