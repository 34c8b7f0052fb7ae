"""Stationary Matern Gaussian random fields on uniform grids.

Sampling uses circulant embedding of the covariance on a doubled periodic
grid (exact when the embedding is nonnegative definite); a dense
eigendecomposition fallback covers small grids whose embedding fails.
"""

from __future__ import annotations

import warnings

import numpy as np

from .fields import Grid2D

_EMBED_TOL = 1e-8


class EmbeddingFallbackWarning(UserWarning):
    """Circulant embedding was indefinite; dense eigendecomposition used."""


def matern25_correlation(r: np.ndarray, ell: float) -> np.ndarray:
    """Matern nu = 5/2 correlation at distance r, unit variance."""
    s = np.sqrt(5.0) * np.asarray(r, dtype=np.float64) / ell
    return (1.0 + s + s**2 / 3.0) * np.exp(-s)


def _torus_covariance(grid: Grid2D, ell: float) -> np.ndarray:
    my, mx = 2 * grid.n_y, 2 * grid.n_x
    iy = np.arange(my)
    ix = np.arange(mx)
    dy = grid.h * np.minimum(iy, my - iy)[:, None]
    dx = grid.h * np.minimum(ix, mx - ix)[None, :]
    return matern25_correlation(np.hypot(dy, dx), ell)


def _sample_circulant(
    lam: np.ndarray, n_y: int, n_x: int, rng: np.random.Generator, n_samples: int
) -> np.ndarray:
    my, mx = lam.shape
    root = np.sqrt(lam)
    out = np.empty((n_samples, n_y, n_x), dtype=np.float64)
    # each complex draw yields two independent real fields
    for i in range(0, n_samples, 2):
        xi = rng.standard_normal((my, mx)) + 1j * rng.standard_normal((my, mx))
        w = np.fft.fft2(root * xi) / np.sqrt(mx * my)
        out[i] = w.real[:n_y, :n_x]
        if i + 1 < n_samples:
            out[i + 1] = w.imag[:n_y, :n_x]
    return out


def _sample_dense(
    grid: Grid2D, ell: float, rng: np.random.Generator, n_samples: int
) -> np.ndarray:
    y, x = grid.coords()
    pts = np.stack([y.ravel(), x.ravel()], axis=1)
    d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    cov = matern25_correlation(d, ell)
    vals, vecs = np.linalg.eigh(cov)
    if vals.min() < -_EMBED_TOL * vals.max():
        warnings.warn(
            "dense covariance had negative eigenvalues; clipped",
            EmbeddingFallbackWarning,
        )
    vals = np.clip(vals, 0.0, None)
    root = vecs * np.sqrt(vals)[None, :]
    z = rng.standard_normal((n_samples, pts.shape[0]))
    return (z @ root.T).reshape(n_samples, grid.n_y, grid.n_x)


def sample_matern_grf(
    grid: Grid2D,
    ell: float = 0.1,
    seed: int = 0,
    n_samples: int = 1,
    method: str = "auto",
) -> np.ndarray:
    """Zero-mean unit-variance Matern-2.5 samples, [n_samples, n_y, n_x].

    method: "auto" tries circulant embedding and falls back to the dense
    route for grids up to 64x64; "circulant" and "dense" force a route.
    """
    if ell <= 0:
        raise ValueError(f"correlation length must be positive, got {ell}")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    if method not in ("auto", "circulant", "dense"):
        raise ValueError(f"unknown method {method!r}")
    if method != "dense":
        lam = np.fft.fft2(_torus_covariance(grid, ell)).real
        if lam.min() >= -_EMBED_TOL * lam.max():
            return _sample_circulant(
                np.clip(lam, 0.0, None), grid.n_y, grid.n_x, rng, n_samples
            )
        if method == "circulant":
            raise ValueError("circulant embedding of the covariance is indefinite")
        if max(grid.n_x, grid.n_y) > 64:
            raise ValueError(
                "circulant embedding indefinite and grid too large for dense fallback"
            )
        warnings.warn(
            "circulant embedding indefinite; using dense eigendecomposition",
            EmbeddingFallbackWarning,
        )
    return _sample_dense(grid, ell, rng, n_samples)
