"""Dataset generators: Darcy flow pairs, point-charge potentials, turbulence
fixtures.

All generators are deterministic per seed and produce samples that satisfy
their own residual operators to tight tolerances. For Darcy this requires
care: the non-divergence-form interior operator A(K) (with Neumann boundary
rows eliminated) is singular with a K-dependent left null vector w(K), so a
fixed source is generically incompatible with the discrete system. The
generator therefore micro-adjusts each permeability, K <- K exp(theta g)
with a fixed smooth bump g, choosing theta so that w(K)^T f = 0; the solve
is then exactly consistent and residuals sit at solver roundoff.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
import torch

from .fields import DatasetContainer, Grid2D
from .grf import sample_matern_grf
from .residuals import darcy_residual, laplacian_interior, poisson_residual

# Source amplitude calibrated so pressures land near 1e-4: real32 storage of
# p then perturbs the residual by (K/h^2) ulp32(p), comfortably below the
# 1e-6 dataset tolerance at 64x64.
DARCY_SOURCE_AMP = 0.05
_BUMP_CENTERS = ((0.25, 0.25), (0.75, 0.75))
_BUMP_WIDTH = 0.05


def darcy_source(grid: Grid2D, amplitude: float = DARCY_SOURCE_AMP) -> np.ndarray:
    """Fixed two-bump source with exactly zero discrete integral.

    A positive Gaussian bump at (0.25, 0.25) and a negative one at
    (0.75, 0.75), width 0.05; each is normalized to unit discrete mass
    before differencing, so the sum cancels exactly up to float roundoff.
    """
    y, x = grid.coords()
    bumps = []
    for cy, cx in _BUMP_CENTERS:
        g = np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2.0 * _BUMP_WIDTH**2))
        bumps.append(g / g.sum())
    raw = bumps[0] - bumps[1]
    return amplitude * raw / np.abs(raw).max()


def _darcy_interior_matrix(K: np.ndarray, h: float) -> sp.csr_matrix:
    """Interior product-rule operator with Neumann boundary rows eliminated.

    Boundary nodes are identified with their adjacent interior nodes (the
    one-sided difference conditions), which folds out-of-range stencil
    coefficients onto the center node.
    """
    K = np.asarray(K, dtype=np.float64)
    ny, nx = K.shape
    niy, nix = ny - 2, nx - 2
    idx = np.arange(niy * nix).reshape(niy, nix)
    h2 = h * h
    Kc = K[1:-1, 1:-1]
    KE, KW = K[1:-1, 2:], K[1:-1, :-2]
    KN, KS = K[2:, 1:-1], K[:-2, 1:-1]
    ce = -Kc / h2 - (KE - KW) / (4 * h2)
    cw = -Kc / h2 + (KE - KW) / (4 * h2)
    cn = -Kc / h2 - (KN - KS) / (4 * h2)
    cs = -Kc / h2 + (KN - KS) / (4 * h2)
    cc = 4 * Kc / h2

    rows, cols, vals = [], [], []

    def add(r, c, v):
        rows.append(np.ravel(r))
        cols.append(np.ravel(c))
        vals.append(np.ravel(v))

    add(idx[:, :-1], idx[:, 1:], ce[:, :-1])   # east neighbors in range
    add(idx[:, -1], idx[:, -1], ce[:, -1])     # east edge folds to center
    add(idx[:, 1:], idx[:, :-1], cw[:, 1:])
    add(idx[:, 0], idx[:, 0], cw[:, 0])
    add(idx[:-1, :], idx[1:, :], cn[:-1, :])
    add(idx[-1, :], idx[-1, :], cn[-1, :])
    add(idx[1:, :], idx[:-1, :], cs[1:, :])
    add(idx[0, :], idx[0, :], cs[0, :])
    add(idx, idx, cc)
    A = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(niy * nix, niy * nix),
    )
    return A.tocsr()


def _mean_weights(niy: int, nix: int) -> np.ndarray:
    """Full-grid representation weight of each interior node (boundary copies)."""
    w = np.ones((niy, nix))
    w[:, 0] += 1
    w[:, -1] += 1
    w[0, :] += 1
    w[-1, :] += 1
    for i in (0, -1):
        for j in (0, -1):
            w[i, j] += 1
    return w.ravel()


def _embed_neumann(p_int: np.ndarray, ny: int, nx: int) -> np.ndarray:
    """Fill boundary nodes with their adjacent interior values (exact copies)."""
    p = np.empty((ny, nx), dtype=p_int.dtype)
    p[1:-1, 1:-1] = p_int
    p[0, 1:-1] = p[1, 1:-1]
    p[-1, 1:-1] = p[-2, 1:-1]
    p[:, 0] = p[:, 1]
    p[:, -1] = p[:, -2]
    return p


def solve_darcy(K: np.ndarray, f_s: np.ndarray, grid: Grid2D) -> np.ndarray:
    """Pressure solve: interior stencil rows, eliminated Neumann boundary,
    zero-mean closure via a Lagrange multiplier.

    Raises ValueError when the source is discretely incompatible
    (|sum f| > 1e-10 ||f||_1). Residual accuracy matches the compatibility
    of the pair (K, f): generator-adjusted inputs solve to roundoff.
    """
    K = np.asarray(K, dtype=np.float64)
    f_s = np.asarray(f_s, dtype=np.float64)
    if K.shape != grid.shape or f_s.shape != grid.shape:
        raise ValueError("K and f_s must match the grid shape")
    if abs(f_s.sum()) > 1e-10 * np.abs(f_s).sum():
        raise ValueError("incompatible source: discrete integral is not zero")
    ny, nx = grid.shape
    niy, nix = ny - 2, nx - 2
    A = _darcy_interior_matrix(K, grid.h)
    n_int = niy * nix
    ones_col = sp.csr_matrix(np.ones((n_int, 1)))
    w_row = sp.csr_matrix(_mean_weights(niy, nix)[None, :])
    aug = sp.bmat([[A, ones_col], [w_row, None]], format="csc")
    rhs = np.concatenate([f_s[1:-1, 1:-1].ravel(), [0.0]])
    sol = spla.spsolve(aug, rhs)
    p = _embed_neumann(sol[:-1].reshape(niy, nix), ny, nx)
    return p - p.mean()


def _left_null_vector(A: sp.csr_matrix) -> np.ndarray:
    """Exact left null vector of the singular interior operator.

    Rows of A^T sum to zero (constants are a right null vector of A), so
    replacing one row of A^T with a pinning equation and solving yields the
    null vector exactly.
    """
    B = A.T.tolil()
    B[0, :] = 0.0
    B[0, 0] = 1.0
    e0 = np.zeros(A.shape[0])
    e0[0] = 1.0
    return spla.spsolve(B.tocsc(), e0)


def _compatibility_and_gradient(
    K: np.ndarray, f_int: np.ndarray, h: float
) -> tuple[float, np.ndarray]:
    """s(K) = w(K)^T f_int and its exact gradient dK -> ds.

    w solves B w = e0 with B = A^T pinned at row 0; the adjoint v solves
    B^T v = f_int. Since A is linear in K, ds/dK is a fixed bilinear form
    in (w, v) accumulated over the stencil pattern, including the folded
    boundary contributions.
    """
    A = _darcy_interior_matrix(K, h)
    B = A.T.tolil()
    B[0, :] = 0.0
    B[0, 0] = 1.0
    B = B.tocsc()
    e0 = np.zeros(A.shape[0])
    e0[0] = 1.0
    w = spla.spsolve(B, e0)
    s = float(w @ f_int)
    v = spla.spsolve(B.T.tocsc(), f_int)
    v[0] = 0.0  # row 0 of B does not depend on K
    ny, nx = K.shape
    niy, nix = ny - 2, nx - 2
    W = w.reshape(niy, nix)
    V = v.reshape(niy, nix)
    # pairing w_row * v_col for each stencil leg, folds landing on the center
    pe = W * np.concatenate([V[:, 1:], V[:, -1:]], axis=1)
    pw = W * np.concatenate([V[:, :1], V[:, :-1]], axis=1)
    pn = W * np.concatenate([V[1:, :], V[-1:, :]], axis=0)
    ps = W * np.concatenate([V[:1, :], V[:-1, :]], axis=0)
    pc = W * V
    h2 = h * h
    G = np.zeros((ny, nx))
    G[1:-1, 1:-1] += (4.0 * pc - pe - pw - pn - ps) / h2
    G[1:-1, 2:] += -(pe - pw) / (4.0 * h2)
    G[1:-1, :-2] += (pe - pw) / (4.0 * h2)
    G[2:, 1:-1] += -(pn - ps) / (4.0 * h2)
    G[:-2, 1:-1] += (pn - ps) / (4.0 * h2)
    return s, -G


def adjust_permeability(
    K: np.ndarray, f_s: np.ndarray, grid: Grid2D, tol_rel: float = 1e-13,
    max_iter: int = 20,
) -> np.ndarray:
    """Adjust K minimally so the discrete system is compatible with f_s.

    Newton iteration on s(K) = w(K)^T f_int with minimum-norm root steps in
    log K, K <- K exp(-s grad / |grad|^2) with grad = d s / d log K; each
    step costs two sparse solves. Stepping in log space keeps K positive
    and spreads the perturbation as a small relative change along the
    adjoint sensitivity field. Raises RuntimeError on stagnation.
    """
    K = np.asarray(K, dtype=np.float64).copy()
    f_int = np.asarray(f_s, dtype=np.float64)[1:-1, 1:-1].ravel()
    target = tol_rel * np.abs(f_int).sum()
    for _ in range(max_iter):
        s, grad = _compatibility_and_gradient(K, f_int, grid.h)
        if abs(s) <= target:
            return K
        grad = grad * K  # chain rule to log K
        rms = float(np.sqrt(np.mean(grad * grad)))
        if rms == 0.0 or not np.isfinite(rms):
            raise RuntimeError("compatibility gradient vanished")
        # clip the step direction so no single node absorbs the adjustment
        direction = np.clip(grad, -3.0 * rms, 3.0 * rms)
        K = K * np.exp(-(s / float(np.vdot(grad, direction))) * direction)
    raise RuntimeError("permeability compatibility adjustment did not converge")


def generate_darcy_dataset(
    n_samples: int,
    n: int = 64,
    ell: float = 0.1,
    seed: int = 0,
    amplitude: float = DARCY_SOURCE_AMP,
    self_check_tol: float = 1e-9,
) -> DatasetContainer:
    """(K, p) pairs under the fixed two-bump source; float64 in memory.

    Every sample is verified against the Darcy residual operator before it
    is accepted (full-bundle mean absolute residual below self_check_tol).
    """
    grid = Grid2D.unit(n)
    f_s = darcy_source(grid, amplitude)
    logk = sample_matern_grf(grid, ell=ell, seed=seed, n_samples=n_samples)
    out = np.empty((n_samples, 2, n, n), dtype=np.float64)
    for i in range(n_samples):
        K = adjust_permeability(np.exp(logk[i]), f_s, grid)
        p = solve_darcy(K, f_s, grid)
        r = darcy_residual(K, p, f_s, grid).abs_mean().item()
        if r > self_check_tol:
            raise RuntimeError(f"sample {i}: residual MAE {r:.3e} above tolerance")
        out[i, 0] = K
        out[i, 1] = p
    return DatasetContainer(
        task="darcy",
        layout=("K", "p"),
        values=out,
        seed_info=f"seed={seed} ell={ell} n={n} amp={amplitude}",
    )


# ---------------------------------------------------------------------------
# point charges / Poisson


def sample_point_charges(
    grid: Grid2D, seed: int = 0, n_charges: int = 2,
    q_lo: float = 0.5, q_hi: float = 1.5,
) -> np.ndarray:
    """Charge density with exactly n_charges spikes of magnitude q / h^2.

    Spikes land on distinct interior nodes; signs are random, magnitudes
    uniform in [q_lo, q_hi].
    """
    rng = np.random.default_rng(seed)
    ny, nx = grid.shape
    flat = rng.choice((ny - 2) * (nx - 2), size=n_charges, replace=False)
    rho = np.zeros((ny, nx), dtype=np.float64)
    for k in flat:
        i, j = divmod(int(k), nx - 2)
        q = rng.uniform(q_lo, q_hi)
        sign = 1.0 if rng.integers(0, 2) else -1.0
        rho[i + 1, j + 1] += sign * q / (grid.h * grid.h)
    return rho


def _dst1(a: np.ndarray, axis: int) -> np.ndarray:
    """Type-I discrete sine transform via rfft of the odd extension."""
    a = np.moveaxis(a, axis, -1)
    n = a.shape[-1]
    z = np.zeros(a.shape[:-1] + (1,), dtype=a.dtype)
    ext = np.concatenate([z, a, z, -a[..., ::-1]], axis=-1)
    out = -np.fft.rfft(ext, axis=-1).imag[..., 1 : n + 1]
    return np.moveaxis(out, -1, axis)


def solve_poisson_dst(rho: np.ndarray, grid: Grid2D) -> np.ndarray:
    """Solve (-lap U) = rho with zero Dirichlet boundary by sine transform.

    Diagonalizes the 5-point Laplacian in the DST-I basis; the returned U
    has exactly zero boundary entries.
    """
    rho = np.asarray(rho, dtype=np.float64)
    if rho.shape != grid.shape:
        raise ValueError("rho must match the grid shape")
    ny, nx = grid.shape
    niy, nix = ny - 2, nx - 2
    h2 = grid.h * grid.h
    lam_y = (2.0 - 2.0 * np.cos(np.pi * np.arange(1, niy + 1) / (niy + 1))) / h2
    lam_x = (2.0 - 2.0 * np.cos(np.pi * np.arange(1, nix + 1) / (nix + 1))) / h2
    rhat = _dst1(_dst1(rho[1:-1, 1:-1], axis=0), axis=1)
    uhat = rhat / (lam_y[:, None] + lam_x[None, :])
    u_int = _dst1(_dst1(uhat, axis=0), axis=1) / (4.0 * (niy + 1) * (nix + 1))
    U = np.zeros((ny, nx), dtype=np.float64)
    U[1:-1, 1:-1] = u_int
    return U


def dirichlet_laplacian_matrix(grid: Grid2D) -> sp.csr_matrix:
    """Dense-solve oracle operator: 5-point (-lap) on interior nodes."""
    ny, nx = grid.shape
    niy, nix = ny - 2, nx - 2
    h2 = grid.h * grid.h
    ey = np.ones(niy)
    ex = np.ones(nix)
    Ty = sp.diags([-ey[:-1], 2 * ey, -ey[:-1]], [-1, 0, 1])
    Tx = sp.diags([-ex[:-1], 2 * ex, -ex[:-1]], [-1, 0, 1])
    A = sp.kronsum(Tx, Ty) / h2  # acts on row-major interior vectors
    return A.tocsr()


def generate_charge_dataset(
    n_samples: int, n: int = 64, seed: int = 0, n_charges: int = 2
) -> DatasetContainer:
    """(rho, U) pairs, real32, discretely self-consistent after rounding.

    U is solved in float64 and rounded to real32; the stored charge channel
    is recomputed as rho_eff = (-lap U32) with the residual operator's own
    stencil, so the stored pair satisfies the Poisson residual to the
    rounding of rho_eff itself (two spike entries), not the much larger
    1/h^2-amplified rounding of U.
    """
    grid = Grid2D.unit(n)
    out = np.empty((n_samples, 2, n, n), dtype=np.float32)
    rng_seeds = np.random.default_rng(seed).integers(0, 2**63 - 1, size=n_samples)
    for i in range(n_samples):
        rho = sample_point_charges(grid, seed=int(rng_seeds[i]), n_charges=n_charges)
        U = solve_poisson_dst(rho, grid)
        U32 = U.astype(np.float32).astype(np.float64)
        rho_eff = np.zeros_like(U32)
        rho_eff[1:-1, 1:-1] = -laplacian_interior(
            torch.from_numpy(U32), grid.h
        ).numpy()
        out[i, 0] = rho_eff.astype(np.float32)
        out[i, 1] = U32.astype(np.float32)
    return DatasetContainer(
        task="charge",
        layout=("rho", "U"),
        values=out,
        seed_info=f"seed={seed} n={n} charges={n_charges}",
    )


# ---------------------------------------------------------------------------
# near-wall turbulence fixtures


def band_limited_fields(
    n_samples: int, n_y: int, n_x: int, rng: np.random.Generator, k_max: int = 16
) -> tuple[np.ndarray, np.ndarray]:
    """Band-limited random fields vanishing exactly on the wall row (y = 0).

    Returns (fields [n, n_y, n_x], lap_bound [n]) where lap_bound is the
    exact bound on |discrete laplacian| implied by the coefficients: the
    basis functions are 1D eigenfunctions of the second difference, so
    |lap_h u| <= sum |a| (lam_x + lam_y) entrywise (h = 1 index units; the
    caller rescales by 1/h^2).
    """
    i = np.arange(n_y)[:, None]
    j = np.arange(n_x)[None, :]
    ky = np.arange(1, k_max + 1)
    kx = np.arange(0, k_max)
    beta = np.pi * ky / (n_y - 1)
    alpha = 2.0 * np.pi * kx / n_x
    basis_y = np.sin(beta[:, None] * i.T)            # [k_max, n_y]
    basis_c = np.cos(alpha[:, None] * j)             # [k_max, n_x]
    basis_s = np.sin(alpha[:, None] * j)
    decay = 1.0 / (1.0 + kx[None, :] ** 2 + ky[:, None] ** 2)
    lam_y = 2.0 - 2.0 * np.cos(beta)                 # index-space symbols
    lam_x = 2.0 - 2.0 * np.cos(alpha)
    fields = np.empty((n_samples, n_y, n_x))
    bounds = np.empty(n_samples)
    basis_cs = np.stack([basis_c, basis_s], axis=1)  # [k_max, 2, n_x]
    for s in range(n_samples):
        a = rng.standard_normal((k_max, k_max, 2)) * decay[:, :, None]
        u = np.einsum("yi,yxp,xpj->ij", basis_y, a, basis_cs)
        scale = u.std()
        fields[s] = u / scale
        amp = np.abs(a).sum(-1)
        bounds[s] = (amp * (lam_y[:, None] + lam_x[None, :])).sum() / scale
    return fields, bounds


def generate_turbulence_fixture(
    n_samples: int, n_x: int = 128, n_y: int = 48, seed: int = 0, k_max: int = 16
) -> DatasetContainer:
    """Near-wall fluctuation fixtures: wall row exactly zero, band-limited."""
    rng = np.random.default_rng(seed)
    fields, _ = band_limited_fields(n_samples, n_y, n_x, rng, k_max)
    return DatasetContainer(
        task="turbulence",
        layout=("uprime",),
        values=fields[:, None, :, :],
        seed_info=f"seed={seed} kmax={k_max}",
    )
