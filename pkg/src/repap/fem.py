"""Plane-stress FEM machinery for the structure-density task.

Bilinear quadrilateral elements of unit size, E = 1, nu = 0.3, two DOFs per
node. Element densities follow cubic penalization with a floor:
scale(rho) = clamp(rho, rho_min, 1)^3. Node ids run column-major,
id = (nely + 1) * nx + ny, with DOFs (2 id, 2 id + 1) = (x, y); element e is
enumerated column-major as well, e = nx * nely + ny.

Equilibrium residuals are evaluated on free DOFs (constrained rows carry
reaction forces and are excluded by convention).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
import torch

RHO_MIN = 1e-3
PENAL = 3.0


class SingularSupportError(ValueError):
    """Too few constraints to remove rigid-body modes."""


class SingularSystemError(RuntimeError):
    """The stiffness system could not be solved (structurally singular)."""


class DensityRangeWarning(UserWarning):
    """Densities outside [0, 1] were clamped before assembly."""


def element_stiffness(E: float = 1.0, nu: float = 0.3) -> np.ndarray:
    """8x8 stiffness of a unit bilinear quad, plane stress."""
    k = np.array(
        [
            1 / 2 - nu / 6,
            1 / 8 + nu / 8,
            -1 / 4 - nu / 12,
            -1 / 8 + 3 * nu / 8,
            -1 / 4 + nu / 12,
            -1 / 8 - nu / 8,
            nu / 6,
            1 / 8 - 3 * nu / 8,
        ]
    )
    idx = np.array(
        [
            [0, 1, 2, 3, 4, 5, 6, 7],
            [1, 0, 7, 6, 5, 4, 3, 2],
            [2, 7, 0, 5, 6, 3, 4, 1],
            [3, 6, 5, 0, 7, 2, 1, 4],
            [4, 5, 6, 7, 0, 1, 2, 3],
            [5, 4, 3, 2, 1, 0, 7, 6],
            [6, 3, 4, 1, 2, 7, 0, 5],
            [7, 2, 1, 4, 3, 6, 5, 0],
        ]
    )
    return E / (1 - nu**2) * k[idx]


def element_dof_table(nelx: int, nely: int) -> np.ndarray:
    """[n_elem, 8] DOF indices per element, element order column-major."""
    edof = np.zeros((nelx * nely, 8), dtype=np.int64)
    e = 0
    for nx in range(nelx):
        for ny in range(nely):
            n1 = (nely + 1) * nx + ny
            n2 = (nely + 1) * (nx + 1) + ny
            edof[e] = [
                2 * n1, 2 * n1 + 1,
                2 * n2, 2 * n2 + 1,
                2 * n2 + 2, 2 * n2 + 3,
                2 * n1 + 2, 2 * n1 + 3,
            ]
            e += 1
    return edof


def density_scale(rho: torch.Tensor, rho_min: float = RHO_MIN) -> torch.Tensor:
    """Cubic SIMP scaling with a positive-definiteness floor."""
    return rho.clamp(min=rho_min, max=1.0) ** PENAL


def _flatten_rho(rho: np.ndarray | torch.Tensor) -> np.ndarray | torch.Tensor:
    """[nely, nelx] -> [n_elem] in the column-major element order."""
    if isinstance(rho, torch.Tensor):
        return rho.transpose(-2, -1).reshape(*rho.shape[:-2], -1)
    return np.asarray(rho).T.reshape(-1)


@dataclass
class StiffnessSystem:
    """Assembled sparse stiffness plus loads, constraints, and structure tables."""

    nelx: int
    nely: int
    rho: np.ndarray          # [nely, nelx], clamped to [0, 1]
    K: sp.csc_matrix         # [ndof, ndof], symmetric
    f: np.ndarray            # [ndof]
    fixed: np.ndarray        # sorted unique fixed DOF indices
    edof: np.ndarray         # [n_elem, 8]
    ke: np.ndarray           # [8, 8]

    @property
    def ndof(self) -> int:
        return 2 * (self.nelx + 1) * (self.nely + 1)

    @property
    def free(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.ndof), self.fixed)


def _as_fixed_indices(supports, ndof: int) -> np.ndarray:
    s = np.asarray(supports)
    if s.dtype == bool:
        s = np.flatnonzero(s)
    fixed = np.unique(s.astype(np.int64))
    if fixed.size and (fixed[0] < 0 or fixed[-1] >= ndof):
        raise ValueError("support indices out of range")
    return fixed


def assemble_stiffness(rho, loads, supports, rho_min: float = RHO_MIN) -> StiffnessSystem:
    """Assemble K(rho) with penalized element scaling.

    rho: [nely, nelx] densities in [0, 1] (values outside are clamped with a
    warning). loads: dense force vector [ndof]. supports: fixed DOF indices
    or boolean mask; at least 3 fixed DOFs are required.
    """
    rho = np.asarray(rho, dtype=np.float64)
    if rho.ndim != 2:
        raise ValueError(f"rho must be [nely, nelx], got shape {rho.shape}")
    nely, nelx = rho.shape
    ndof = 2 * (nelx + 1) * (nely + 1)
    f = np.asarray(loads, dtype=np.float64).reshape(-1)
    if f.shape[0] != ndof:
        raise ValueError(f"load vector has {f.shape[0]} entries, expected {ndof}")
    fixed = _as_fixed_indices(supports, ndof)
    if fixed.size < 3:
        raise SingularSupportError(
            f"{fixed.size} fixed DOFs cannot remove rigid-body modes (need >= 3)"
        )
    if (rho < 0).any() or (rho > 1).any():
        warnings.warn("densities clamped to [0, 1]", DensityRangeWarning)
        rho = np.clip(rho, 0.0, 1.0)

    ke = element_stiffness()
    edof = element_dof_table(nelx, nely)
    scale = np.clip(_flatten_rho(rho), rho_min, 1.0) ** PENAL
    vals = scale[:, None, None] * ke[None]
    rows = np.repeat(edof, 8, axis=1).reshape(-1)
    cols = np.tile(edof, (1, 8)).reshape(-1)
    K = sp.coo_matrix((vals.reshape(-1), (rows, cols)), shape=(ndof, ndof)).tocsc()
    return StiffnessSystem(
        nelx=nelx, nely=nely, rho=rho, K=K, f=f, fixed=fixed, edof=edof, ke=ke
    )


def stiffness_matvec(rho: torch.Tensor, u: torch.Tensor, sys: StiffnessSystem) -> torch.Tensor:
    """K(rho) @ u as a differentiable torch expression.

    rho: [..., nely, nelx]; u: [..., ndof]. Gradients flow through both.
    """
    edof = torch.from_numpy(sys.edof)
    ke = torch.from_numpy(sys.ke).to(u.dtype)
    scale = density_scale(_flatten_rho(rho))
    batch = rho.shape[:-2]
    rho_flat = scale.reshape(-1, scale.shape[-1]) if batch else scale[None]
    u_flat = u.reshape(-1, u.shape[-1]) if batch else u[None]
    out = torch.zeros_like(u_flat)
    ue = u_flat[:, edof]                                   # [B, n_elem, 8]
    contrib = torch.einsum("ab,neb->nea", ke, ue) * rho_flat[:, :, None]
    out.index_add_(1, edof.reshape(-1), contrib.reshape(contrib.shape[0], -1))
    return out.reshape(*batch, -1) if batch else out[0]


def equilibrium_vector(rho: torch.Tensor, u: torch.Tensor, sys: StiffnessSystem) -> torch.Tensor:
    """(K(rho) u - f) restricted to free DOFs, [..., n_free]."""
    f = torch.from_numpy(sys.f).to(u.dtype)
    free = torch.from_numpy(sys.free)
    r = stiffness_matvec(rho, u, sys) - f
    return r[..., free]


def volume_bound_vector(
    rho: torch.Tensor, v_target: float | torch.Tensor,
    lambda_vol: float = 1.0, lambda_bound: float = 1.0,
) -> torch.Tensor:
    """Stacked volume and box-constraint residual entries, [..., 1 + 2 n_elem].

    Entries: sqrt(lambda_vol) * relu(mean(rho) - V_target), then
    sqrt(lambda_bound) * relu(-rho) and relu(rho - 1) elementwise, so the
    squared norm reproduces the weighted penalty sum.
    """
    mean = rho.mean(dim=(-2, -1))
    if isinstance(v_target, torch.Tensor):
        vol = torch.relu(mean - v_target)
    else:
        vol = torch.relu(mean - float(v_target))
    lo = torch.relu(-rho).flatten(-2)
    hi = torch.relu(rho - 1.0).flatten(-2)
    parts = [
        (lambda_vol ** 0.5) * vol[..., None],
        (lambda_bound ** 0.5) * torch.cat([lo, hi], dim=-1),
    ]
    return torch.cat(parts, dim=-1)


@dataclass
class TopologyResiduals:
    """Scalar residual summary: equilibrium, volume excess, bound violation."""

    r_eq: torch.Tensor
    r_vol: torch.Tensor
    r_bound: torch.Tensor
    lambda_vol: float = 1.0
    lambda_bound: float = 1.0

    def total(self) -> torch.Tensor:
        return self.r_eq + self.lambda_vol * self.r_vol + self.lambda_bound * self.r_bound


def topology_residuals(
    rho, u, sys: StiffnessSystem, v_target: float,
    lambda_vol: float = 1.0, lambda_bound: float = 1.0,
) -> TopologyResiduals:
    """Equilibrium/volume/bound scalar residuals for one density field.

    r_eq = ||(K(rho) u - f)[free]||_2 with the displacement vector supplied
    by the caller (reference displacements or a solve); r_vol and r_bound
    follow the hinge forms.
    """
    rho_t = rho if isinstance(rho, torch.Tensor) else torch.as_tensor(np.asarray(rho))
    u_t = u if isinstance(u, torch.Tensor) else torch.as_tensor(np.asarray(u))
    r_eq = torch.linalg.vector_norm(equilibrium_vector(rho_t, u_t, sys), dim=-1)
    r_vol = torch.relu(rho_t.mean(dim=(-2, -1)) - v_target)
    lo = torch.linalg.vector_norm(torch.relu(-rho_t).flatten(-2), dim=-1)
    hi = torch.linalg.vector_norm(torch.relu(rho_t - 1.0).flatten(-2), dim=-1)
    return TopologyResiduals(
        r_eq=r_eq, r_vol=r_vol, r_bound=lo + hi,
        lambda_vol=lambda_vol, lambda_bound=lambda_bound,
    )


def solve_system(sys: StiffnessSystem) -> np.ndarray:
    """Direct sparse solve for the displacement vector (numpy, float64)."""
    free = sys.free
    Kff = sys.K[free][:, free]
    with warnings.catch_warnings():
        warnings.simplefilter("error", spla.MatrixRankWarning)
        try:
            uf = spla.spsolve(Kff, sys.f[free])
        except (spla.MatrixRankWarning, RuntimeError) as e:
            raise SingularSystemError(str(e)) from e
    if not np.isfinite(uf).all():
        raise SingularSystemError("stiffness solve produced non-finite values")
    # singular factorizations can return finite garbage without warning
    f_norm = np.linalg.norm(sys.f[free])
    if f_norm > 0 and np.linalg.norm(Kff @ uf - sys.f[free]) > 1e-6 * f_norm:
        raise SingularSystemError("stiffness solve left a large residual")
    u = np.zeros(sys.ndof)
    u[free] = uf
    return u


class _DisplacementSolve(torch.autograd.Function):
    """u(rho) = K(rho)^{-1} f on free DOFs; adjoint-method backward."""

    @staticmethod
    def forward(ctx, rho: torch.Tensor, sys: StiffnessSystem):
        rho_np = rho.detach().cpu().numpy().astype(np.float64)
        fresh = assemble_stiffness(rho_np, sys.f, sys.fixed)
        u = solve_system(fresh)
        u_t = torch.from_numpy(u).to(rho.dtype)
        ctx.save_for_backward(rho, u_t)
        ctx.sys = fresh
        return u_t

    @staticmethod
    def backward(ctx, grad_u: torch.Tensor):
        rho, u = ctx.saved_tensors
        sys = ctx.sys
        free = sys.free
        # adjoint: K lam = dL/du (free rows); dL/drho_e = -scale'(rho_e) lam_e^T ke u_e
        Kff = sys.K[free][:, free]
        g = grad_u.detach().cpu().numpy().astype(np.float64)
        lam = np.zeros(sys.ndof)
        lam[free] = spla.spsolve(Kff, g[free])
        edof = sys.edof
        ke = sys.ke
        u_np = u.detach().cpu().numpy().astype(np.float64)
        ue = u_np[edof]                       # [n_elem, 8]
        le = lam[edof]
        ku = ue @ ke.T
        quad = np.einsum("ea,ea->e", le, ku)  # lam_e^T ke u_e
        rho_flat = _flatten_rho(rho.detach().cpu().numpy().astype(np.float64))
        dscale = np.where(
            (rho_flat >= RHO_MIN) & (rho_flat <= 1.0),
            PENAL * np.clip(rho_flat, RHO_MIN, 1.0) ** (PENAL - 1),
            0.0,
        )
        grad_flat = -dscale * quad
        nely, nelx = rho.shape[-2], rho.shape[-1]
        grad_rho = torch.from_numpy(
            grad_flat.reshape(nelx, nely).T.copy()
        ).to(rho.dtype)
        return grad_rho, None


def solve_displacement(rho: torch.Tensor, sys: StiffnessSystem) -> torch.Tensor:
    """Differentiable displacement solve; gradients via the adjoint method."""
    return _DisplacementSolve.apply(rho, sys)


def compliance(rho: torch.Tensor, sys: StiffnessSystem) -> torch.Tensor:
    """f^T u(rho), differentiable through the adjoint solve."""
    u = solve_displacement(rho, sys)
    f = torch.from_numpy(sys.f).to(u.dtype)
    return (f * u).sum()


def coarsen_density(rho: torch.Tensor, max_elems: int = 16) -> torch.Tensor:
    """Average-pool a density grid until both dims are <= max_elems."""
    out = rho
    while out.shape[-1] > max_elems or out.shape[-2] > max_elems:
        if out.shape[-1] % 2 or out.shape[-2] % 2:
            raise ValueError("density grid not divisible by 2 for coarsening")
        x = out[None] if out.ndim == 2 else out
        x = torch.nn.functional.avg_pool2d(x, 2)
        out = x[0] if out.ndim == 2 else x
    return out
