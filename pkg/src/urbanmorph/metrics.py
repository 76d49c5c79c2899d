"""Forecast- and image-quality metrics with report serialisation.

Forecast side: rmse, per-target r_squared, dynamic time warping with an
L1 local cost.  Image side: Frechet distance between feature clouds
(features from a fixed seeded random conv stack, no pretrained weights)
and windowed SSIM for pixel structure.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T

# fixed seed for the random feature extractor: changing it changes Frechet
# values, so it is a module constant, not a config knob
FEATURE_SEED = 713


def rmse(y_true, y_pred) -> float:
    """Root mean squared error over all elements."""
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"rmse: shapes differ: {y_true.shape} vs {y_pred.shape}")
    return float(np.sqrt(np.mean((y_true - y_pred) ** 2)))


def r_squared(y_true, y_pred):
    """Coefficient of determination, per target column then averaged.

    Returns (mean over defined targets, per-target array).  A target whose
    true values are constant has no variance to explain and is reported as
    NaN and excluded from the mean.
    """
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"r_squared: shapes differ: {y_true.shape} vs {y_pred.shape}")
    if y_true.ndim == 1:
        y_true = y_true[:, None]
        y_pred = y_pred[:, None]
    y_true = y_true.reshape(-1, y_true.shape[-1])
    y_pred = y_pred.reshape(-1, y_pred.shape[-1])
    ss_res = ((y_true - y_pred) ** 2).sum(axis=0)
    ss_tot = ((y_true - y_true.mean(axis=0)) ** 2).sum(axis=0)
    per_target = np.full(y_true.shape[1], np.nan)
    defined = ss_tot > 0
    per_target[defined] = 1.0 - ss_res[defined] / ss_tot[defined]
    overall = float(np.nanmean(per_target)) if defined.any() else float("nan")
    return overall, per_target


def _dtw_local_cost(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # L1 distance between every pair of time steps: (n, m)
    return np.abs(a[:, None, :] - b[None, :, :]).sum(axis=2)


def dtw(a, b, return_path: bool = False):
    """Dynamic time warping distance with L1 local cost.

    Steps are (1,0), (0,1), (1,1) with no step weighting.  Sequences are
    (n,) scalars or (n, d) vectors.  With return_path=True also returns the
    optimal alignment as a list of (i, j) index pairs, ties broken
    diagonal-first for determinism.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64).T).T
    b = np.atleast_2d(np.asarray(b, dtype=np.float64).T).T
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"dtw: incompatible shapes {a.shape} vs {b.shape}")
    n, m = a.shape[0], b.shape[0]
    if n == 0 or m == 0:
        raise ValueError("dtw: empty sequence")
    cost = _dtw_local_cost(a, b)
    acc = np.full((n, m), np.inf)
    acc[0, 0] = cost[0, 0]
    for i in range(1, n):
        acc[i, 0] = acc[i - 1, 0] + cost[i, 0]
    for j in range(1, m):
        acc[0, j] = acc[0, j - 1] + cost[0, j]
    for i in range(1, n):
        for j in range(1, m):
            acc[i, j] = cost[i, j] + min(acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1])
    dist = float(acc[n - 1, m - 1])
    if not return_path:
        return dist
    path = [(n - 1, m - 1)]
    i, j = n - 1, m - 1
    while (i, j) != (0, 0):
        if i == 0:
            j -= 1
        elif j == 0:
            i -= 1
        else:
            candidates = [(acc[i - 1, j - 1], (i - 1, j - 1)),
                          (acc[i - 1, j], (i - 1, j)),
                          (acc[i, j - 1], (i, j - 1))]
            _, (i, j) = min(candidates, key=lambda c: c[0])
        path.append((i, j))
    path.reverse()
    return dist, path


def _psd_sqrt_trace(cov_a: np.ndarray, cov_b: np.ndarray) -> float:
    # tr((Sa Sb)^1/2) via eigendecomposition of the symmetrised product
    # Sa^1/2 Sb Sa^1/2; negative eigenvalues from round-off are clipped
    vals_a, vecs_a = np.linalg.eigh((cov_a + cov_a.T) / 2.0)
    root_a = (vecs_a * np.sqrt(np.clip(vals_a, 0.0, None))) @ vecs_a.T
    inner = root_a @ cov_b @ root_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    return float(np.sqrt(np.clip(vals, 0.0, None)).sum())


def frechet_distance(feats_a, feats_b) -> float:
    """Frechet distance between two Gaussian fits of feature clouds.

    ||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa Sb)^1/2), covariance with the
    1/(n-1) convention.  Inputs are (n, F) with n >= 2 and equal F.
    """
    feats_a = np.asarray(feats_a, dtype=np.float64)
    feats_b = np.asarray(feats_b, dtype=np.float64)
    if feats_a.ndim != 2 or feats_b.ndim != 2 or feats_a.shape[1] != feats_b.shape[1]:
        raise ValueError(f"frechet: incompatible shapes {feats_a.shape} vs {feats_b.shape}")
    if feats_a.shape[0] < 2 or feats_b.shape[0] < 2:
        raise ValueError("frechet: need at least 2 samples per side")
    mu_a, mu_b = feats_a.mean(axis=0), feats_b.mean(axis=0)
    cov_a = np.cov(feats_a, rowvar=False).reshape(feats_a.shape[1], feats_a.shape[1])
    cov_b = np.cov(feats_b, rowvar=False).reshape(feats_b.shape[1], feats_b.shape[1])
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b)
                  - 2.0 * _psd_sqrt_trace(cov_a, cov_b))
    return max(value, 0.0) if abs(value) < 1e-10 else value


_extractor_cache: dict = {}


def _random_conv_weights(c_in: int, n_features: int):
    rng = np.random.default_rng(FEATURE_SEED)
    widths = [c_in, 16, 32, n_features]
    layers = []
    for cin, cout in zip(widths[:-1], widths[1:]):
        fan_in = cin * 9
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, 3, 3))
        layers.append(w)
    return layers


def extract_features(images, method: str = "random_conv", n_features: int = 64) -> np.ndarray:
    """Map images (N, C, H, W) in [-1, 1] to deterministic (N, F) features.

    random_conv: a fixed-seed strided conv stack with relu, global mean
    pooled.  downsample: grayscale average-pooled to 8x8 (F = 64).  Both
    are pretrained-weight-free so runs are reproducible offline.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise ValueError(f"extract_features: expected (N, C, H, W), got {images.shape}")
    n, c, h, w = images.shape
    if method == "downsample":
        gray = images.mean(axis=1)
        if h % 8 or w % 8:
            raise ValueError(f"extract_features: spatial dims {h}x{w} not divisible by 8")
        pooled = gray.reshape(n, 8, h // 8, 8, w // 8).mean(axis=(2, 4))
        return pooled.reshape(n, 64)
    if method != "random_conv":
        raise ValueError(f"extract_features: unknown method {method!r}")
    key = (c, n_features)
    if key not in _extractor_cache:
        _extractor_cache[key] = _random_conv_weights(c, n_features)
    layers = _extractor_cache[key]
    with T.no_grad():
        x = T.Tensor(images)
        for wgt in layers:
            x = T.relu(T.conv2d(x, T.Tensor(wgt), stride=2, padding=1))
        feats = x.data.mean(axis=(2, 3))
    return feats


def ssim(img_a, img_b, window: int = 8, value_range: float = 2.0) -> float:
    """Mean structural similarity over non-overlapping windows.

    Uniform window x window patches at stride window (no Gaussian
    weighting), C1 = (0.01 L)^2, C2 = (0.03 L)^2 with L = value_range
    (images in [-1, 1] span 2).  Accepts (H, W) or (C, H, W); multi-channel
    scores average over channels.
    """
    img_a = np.asarray(img_a, dtype=np.float64)
    img_b = np.asarray(img_b, dtype=np.float64)
    if img_a.shape != img_b.shape:
        raise ValueError(f"ssim: shapes differ: {img_a.shape} vs {img_b.shape}")
    if img_a.ndim == 2:
        img_a, img_b = img_a[None], img_b[None]
    if img_a.ndim != 3:
        raise ValueError(f"ssim: expected (H, W) or (C, H, W), got {img_a.shape}")
    c, h, w = img_a.shape
    if h < window or w < window:
        raise ValueError(f"ssim: image {h}x{w} smaller than window {window}")
    c1 = (0.01 * value_range) ** 2
    c2 = (0.03 * value_range) ** 2
    nh, nw = h // window, w // window
    a = img_a[:, :nh * window, :nw * window].reshape(c, nh, window, nw, window)
    b = img_b[:, :nh * window, :nw * window].reshape(c, nh, window, nw, window)
    a = a.transpose(0, 1, 3, 2, 4).reshape(c, nh * nw, -1)
    b = b.transpose(0, 1, 3, 2, 4).reshape(c, nh * nw, -1)
    mu_a, mu_b = a.mean(axis=2), b.mean(axis=2)
    var_a, var_b = a.var(axis=2), b.var(axis=2)
    cov = ((a - mu_a[..., None]) * (b - mu_b[..., None])).mean(axis=2)
    score = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(score.mean())


@dataclass
class MetricsReport:
    """Tabular evaluation summary serialisable as JSON or aligned text."""

    forecast_rows: list = field(default_factory=list)  # model, rmse, r2, dtw
    image_rows: list = field(default_factory=list)  # latent_dim, fid, ssim
    notes: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {"forecast": self.forecast_rows, "images": self.image_rows, "notes": self.notes},
            indent=2, sort_keys=True)

    def to_text(self) -> str:
        blocks = []
        if self.forecast_rows:
            blocks.append(_format_table(
                ["Model", "RMSE", "R2", "DTW"],
                [[r["model"], _fmt(r["rmse"]), _fmt(r["r2"]), _fmt(r["dtw"])]
                 for r in self.forecast_rows]))
        if self.image_rows:
            blocks.append(_format_table(
                ["Latent Dim", "FID", "SSIM"],
                [[str(r["latent_dim"]), _fmt(r["fid"]), _fmt(r["ssim"])]
                 for r in self.image_rows]))
        for note in self.notes:
            blocks.append(f"note: {note}")
        return "\n\n".join(blocks) + "\n"


def _fmt(x) -> str:
    return "n/a" if x is None or (isinstance(x, float) and np.isnan(x)) else f"{x:.4f}"


def _format_table(header, rows) -> str:
    widths = [max(len(str(cell)) for cell in col) for col in zip(header, *rows)]
    line = " | ".join(h.ljust(w) for h, w in zip(header, widths))
    sep = "-+-".join("-" * w for w in widths)
    body = [" | ".join(str(c).ljust(w) for c, w in zip(row, widths)) for row in rows]
    return "\n".join([line, sep] + body)
