"""Style-bias probe (style / content / relative distance) and the Fréchet
distance between Gaussian fits of embedding sets."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import scipy.linalg
import torch

from .errors import ConfigError, DegenerateMetricError, NumericalError, ShapeError
from .networks import Discriminator, EmbeddingSpec, embed

D_C_FLOOR = 1e-6
MAX_RESAMPLES = 16
REPORT_COLUMNS = ("d_s_mean", "d_c_mean", "rho", "n_pairs", "seed", "model_id")


def cosine_distance(u, v):
    """``1 - cos(u, v)`` for vectors, or row-wise for ``[N, D]`` arrays."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ShapeError(f"shape mismatch {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u, axis=-1)
    nv = np.linalg.norm(v, axis=-1)
    if np.any(nu == 0) or np.any(nv == 0):
        raise DegenerateMetricError("cosine distance of a zero vector is undefined")
    cos = np.sum(u * v, axis=-1) / (nu * nv)
    return 1.0 - np.clip(cos, -1.0, 1.0)


def as_embedder(disc, spec: EmbeddingSpec = None):
    """Turn a discriminator (or any ``images -> [N, D]`` callable) into a
    function returning float64 numpy embeddings."""
    if isinstance(disc, Discriminator):
        spec = spec or EmbeddingSpec()

        def fn(images):
            return embed(disc, images, spec)
    else:
        fn = disc

    def embedder(images):
        with torch.no_grad():
            out = fn(images)
        if isinstance(out, torch.Tensor):
            out = out.detach().double().cpu().numpy()
        return np.asarray(out, dtype=np.float64).reshape(len(images), -1)

    return embedder


def style_distance(disc, stylizer, c, s1, s2, spec=None):
    """``d(T(c, s1), T(c, s2))``; batched inputs give one distance per row."""
    emb = as_embedder(disc, spec)
    single = c.dim() == 3
    if single:
        c, s1, s2 = c[None], s1[None], s2[None]
    with torch.no_grad():
        d = cosine_distance(emb(stylizer(c, s1)), emb(stylizer(c, s2)))
    return float(d[0]) if single else d


def content_distance(disc, stylizer, c1, c2, s, spec=None):
    """``d(T(c1, s), T(c2, s))``."""
    emb = as_embedder(disc, spec)
    single = c1.dim() == 3
    if single:
        c1, c2, s = c1[None], c2[None], s[None]
    with torch.no_grad():
        d = cosine_distance(emb(stylizer(c1, s)), emb(stylizer(c2, s)))
    return float(d[0]) if single else d


@dataclass
class DistanceReport:
    d_s_mean: float
    d_c_mean: float
    rho: float
    n_pairs: int
    seed: int
    content_set_id: str = ""
    style_set_id: str = ""
    model_id: str = ""
    rho_ratio_of_means: float = float("nan")
    resamples: int = 0

    def row(self):
        return {k: getattr(self, k) for k in REPORT_COLUMNS}

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


def relative_distance(disc, stylizer, content_set, style_set, n_pairs=1024, seed=0, spec=None,
                      batch_size=256, content_set_id="", style_set_id="", model_id="",
                      ratio_of_means=False) -> DistanceReport:
    """Estimate ``rho = E[d_s(c1, s1, s2) / d_c(s1, c1, c2)]``.

    Tuples ``(c1, c2, s1, s2)`` are drawn uniformly and independently. A
    tuple whose content distance falls below the floor has ``c2`` redrawn,
    at most 16 times. ``ratio_of_means=True`` reports ``mean(d_s) / mean(d_c)``
    as ``rho`` instead (both are always stored in the report).
    """
    if len(content_set) < 2 or len(style_set) < 2:
        raise ConfigError("need at least two content and two style images")
    if n_pairs < 1:
        raise ConfigError("n_pairs must be >= 1")
    emb = as_embedder(disc, spec)
    rng = np.random.default_rng(seed)
    nc, ns = len(content_set), len(style_set)
    c1 = rng.integers(0, nc, n_pairs)
    c2 = rng.integers(0, nc, n_pairs)
    s1 = rng.integers(0, ns, n_pairs)
    s2 = rng.integers(0, ns, n_pairs)

    def distances(idx_a, idx_b, idx_s, vary_style):
        out = np.empty(len(idx_a))
        for lo in range(0, len(idx_a), batch_size):
            sl = slice(lo, lo + batch_size)
            if vary_style:
                a = stylizer(content_set[idx_a[sl]], style_set[idx_b[sl]])
                b = stylizer(content_set[idx_a[sl]], style_set[idx_s[sl]])
            else:
                a = stylizer(content_set[idx_a[sl]], style_set[idx_s[sl]])
                b = stylizer(content_set[idx_b[sl]], style_set[idx_s[sl]])
            out[sl] = cosine_distance(emb(a), emb(b))
        return out

    with torch.no_grad():
        d_c = distances(c1, c2, s1, vary_style=False)
        resamples = 0
        for _ in range(MAX_RESAMPLES):
            bad = np.flatnonzero(d_c < D_C_FLOOR)
            if not len(bad):
                break
            resamples += len(bad)
            c2[bad] = rng.integers(0, nc, len(bad))
            d_c[bad] = distances(c1[bad], c2[bad], s1[bad], vary_style=False)
        if np.any(d_c < D_C_FLOOR):
            raise DegenerateMetricError(
                f"{int(np.sum(d_c < D_C_FLOOR))} content distances stayed below "
                f"{D_C_FLOOR} after {MAX_RESAMPLES} resamples")
        d_s = distances(c1, s1, s2, vary_style=True)

    rho_mean = float(np.mean(d_s / d_c))
    rho_rom = float(np.mean(d_s) / np.mean(d_c))
    return DistanceReport(float(np.mean(d_s)), float(np.mean(d_c)),
                          rho_rom if ratio_of_means else rho_mean, int(n_pairs), int(seed),
                          content_set_id, style_set_id, model_id, rho_rom, resamples)


def write_reports(reports, csv_path=None, jsonl_path=None):
    """Append reports to a CSV table and/or a JSON-lines log."""
    if csv_path is not None:
        csv_path = Path(csv_path)
        new = not csv_path.exists()
        with open(csv_path, "a", newline="") as f:
            w = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
            if new:
                w.writeheader()
            for r in reports:
                w.writerow(r.row())
    if jsonl_path is not None:
        with open(jsonl_path, "a") as f:
            for r in reports:
                f.write(r.to_json() + "\n")


# -- Fréchet distance ---------------------------------------------------------

@dataclass
class GaussianSummary:
    mean: np.ndarray
    cov: np.ndarray
    n: int = 0


def summarize_embeddings(extractor, images, batch_size=256) -> GaussianSummary:
    """Mean and unbiased (``n - 1``) covariance of ``extractor(images)``.

    ``images`` may also be a precomputed ``[N, D]`` embedding array when
    ``extractor`` is ``None``.
    """
    if extractor is None:
        feats = np.asarray(images, dtype=np.float64)
    else:
        if len(images) == 0:
            raise ConfigError("cannot summarize an empty image set")
        emb = as_embedder(extractor)
        feats = np.concatenate([emb(images[i:i + batch_size])
                                for i in range(0, len(images), batch_size)])
    if feats.ndim != 2 or len(feats) == 0:
        raise ConfigError("need a nonempty [N, D] embedding set")
    n, dim = feats.shape
    if n < dim + 1:
        warnings.warn(f"{n} samples for {dim}-dim embeddings: covariance is rank deficient")
    mean = feats.mean(axis=0)
    if n > 1:
        cov = np.cov(feats, rowvar=False).reshape(dim, dim)
    else:
        cov = np.zeros((dim, dim))
    return GaussianSummary(mean, (cov + cov.T) / 2, n)


def frechet_distance(a: GaussianSummary, b: GaussianSummary, tol=1e-6) -> float:
    """``||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})``."""
    if a.mean.shape != b.mean.shape or a.cov.shape != b.cov.shape:
        raise ShapeError(f"dimension mismatch {a.mean.shape} vs {b.mean.shape}")
    diff = a.mean - b.mean
    covmean, _ = scipy.linalg.sqrtm(a.cov @ b.cov, disp=False)
    if not np.all(np.isfinite(covmean)):
        # singular product: regularize both factors slightly
        offset = np.eye(len(a.cov)) * tol
        covmean = scipy.linalg.sqrtm((a.cov + offset) @ (b.cov + offset))
        if not np.all(np.isfinite(covmean)):
            raise NumericalError("matrix square root failed")
    if np.iscomplexobj(covmean):
        if np.max(np.abs(covmean.imag)) > 1e-3:
            raise NumericalError(f"imaginary component {np.max(np.abs(covmean.imag)):.3g} "
                                 "in matrix square root")
        covmean = covmean.real
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2 * np.trace(covmean))
    if value < -tol:
        raise NumericalError(f"negative Fréchet distance {value}")
    return max(value, 0.0)


def frechet_between(extractor, images_a, images_b) -> float:
    return frechet_distance(summarize_embeddings(extractor, images_a),
                            summarize_embeddings(extractor, images_b))
