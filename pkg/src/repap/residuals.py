"""Discretized PDE and boundary residual operators.

All operators act on torch tensors shaped [..., H, W] (leading batch
dimensions pass through) and are differentiable, so the same code serves
data self-checks, training losses, and gradient verification. Inputs may
also be numpy arrays or `fields.Field` instances; they are converted.

Interior stencils use the standard 5-point Laplacian and centered first
differences; boundary residuals are one-sided first differences (Neumann)
or raw boundary values (Dirichlet), divided by h where noted.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .fields import Field, Grid2D


class NonPositivePermeabilityWarning(UserWarning):
    """K has non-positive entries; the residual is still evaluated."""


def _to_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    if isinstance(x, Field):
        x = x.values
    a = np.asarray(x)
    if not a.flags.writeable:
        a = a.copy()
    return torch.from_numpy(a)


def _spacing(grid) -> float:
    if isinstance(grid, Grid2D):
        return grid.h
    return float(grid)


@dataclass
class ResidualBundle:
    """Interior and boundary residual blocks of one operator evaluation.

    interior: [..., H_i, W_i] task-shaped PDE residuals.
    boundary: [..., n_b] flattened boundary residuals.
    """

    interior: torch.Tensor
    boundary: torch.Tensor
    h: float

    @property
    def d_r(self) -> int:
        return self.interior.shape[-2] * self.interior.shape[-1] + self.boundary.shape[-1]

    def stacked(self) -> torch.Tensor:
        """Concatenate to [..., d_r]."""
        flat_int = self.interior.flatten(-2)
        return torch.cat([flat_int, self.boundary], dim=-1)

    def sq_norm(self) -> torch.Tensor:
        """Per-sample squared l2 norm over all residual entries."""
        return self.interior.pow(2).sum(dim=(-2, -1)) + self.boundary.pow(2).sum(dim=-1)

    def abs_mean(self) -> torch.Tensor:
        """Per-sample l1 norm divided by d_r."""
        tot = self.interior.abs().sum(dim=(-2, -1)) + self.boundary.abs().sum(dim=-1)
        return tot / self.d_r


def center_pressure(p) -> torch.Tensor:
    """Subtract the spatial mean (per sample, per channel)."""
    p = _to_tensor(p)
    return p - p.mean(dim=(-2, -1), keepdim=True)


def laplacian_interior(u: torch.Tensor, h: float) -> torch.Tensor:
    """5-point discrete Laplacian on interior nodes, [..., H-2, W-2]."""
    c = u[..., 1:-1, 1:-1]
    return (
        u[..., 1:-1, 2:] + u[..., 1:-1, :-2] + u[..., 2:, 1:-1] + u[..., :-2, 1:-1]
        - 4.0 * c
    ) / (h * h)


def darcy_interior(K: torch.Tensor, p: torch.Tensor, h: float) -> torch.Tensor:
    """Interior operator -K lap(p) - grad(K) . grad(p), [..., H-2, W-2]."""
    lap = laplacian_interior(p, h)
    kx = (K[..., 1:-1, 2:] - K[..., 1:-1, :-2]) / (2.0 * h)
    ky = (K[..., 2:, 1:-1] - K[..., :-2, 1:-1]) / (2.0 * h)
    px = (p[..., 1:-1, 2:] - p[..., 1:-1, :-2]) / (2.0 * h)
    py = (p[..., 2:, 1:-1] - p[..., :-2, 1:-1]) / (2.0 * h)
    return -K[..., 1:-1, 1:-1] * lap - kx * px - ky * py


def neumann_edges(p: torch.Tensor, h: float) -> torch.Tensor:
    """One-sided first differences on the four edges, [..., 2H + 2W].

    Order: x-lo column, x-hi column, y-lo row, y-hi row; corners appear in
    two edges each.
    """
    e_xlo = (p[..., :, 0] - p[..., :, 1]) / h
    e_xhi = (p[..., :, -1] - p[..., :, -2]) / h
    e_ylo = (p[..., 0, :] - p[..., 1, :]) / h
    e_yhi = (p[..., -1, :] - p[..., -2, :]) / h
    return torch.cat([e_xlo, e_xhi, e_ylo, e_yhi], dim=-1)


def dirichlet_ring(u: torch.Tensor) -> torch.Tensor:
    """Boundary values with corners counted once, [..., 2H + 2W - 4]."""
    return torch.cat(
        [u[..., 0, :], u[..., -1, :], u[..., 1:-1, 0], u[..., 1:-1, -1]], dim=-1
    )


def darcy_residual(K, p, f_s, grid) -> ResidualBundle:
    """Darcy flow residual with homogeneous Neumann boundary conditions.

    The pressure is centered to zero spatial mean before evaluation, so the
    residual is invariant under p -> p + c. Interior entries discretize
    -div(K grad p) - f via the product rule; boundary entries are the four
    one-sided difference edges (corners counted twice). K <= 0 anywhere
    triggers a warning, not an error.
    """
    K, p, f_s = _to_tensor(K), _to_tensor(p), _to_tensor(f_s)
    h = _spacing(grid)
    if K.shape[-2:] != p.shape[-2:] or f_s.shape[-2:] != p.shape[-2:]:
        raise ValueError(
            f"shape mismatch: K {tuple(K.shape)}, p {tuple(p.shape)}, f {tuple(f_s.shape)}"
        )
    if (K <= 0).any():
        warnings.warn(
            "permeability has non-positive entries", NonPositivePermeabilityWarning
        )
    p0 = center_pressure(p)
    interior = darcy_interior(K, p0, h) - f_s[..., 1:-1, 1:-1]
    return ResidualBundle(interior=interior, boundary=neumann_edges(p0, h), h=h)


def poisson_residual(U, rho, grid) -> ResidualBundle:
    """Poisson residual (-lap U) - rho with homogeneous Dirichlet boundary.

    Boundary entries are the potential values on the boundary ring (corners
    once), so interior + boundary entries tile the full grid.
    """
    U, rho = _to_tensor(U), _to_tensor(rho)
    h = _spacing(grid)
    if U.shape[-2:] != rho.shape[-2:]:
        raise ValueError(f"shape mismatch: U {tuple(U.shape)}, rho {tuple(rho.shape)}")
    interior = -laplacian_interior(U, h) - rho[..., 1:-1, 1:-1]
    return ResidualBundle(interior=interior, boundary=dirichlet_ring(U), h=h)


def turbulence_residual(
    u, grid, bc_weight: float = 1.0, smooth_weight: float = 1.0
) -> ResidualBundle:
    """Near-wall fluctuation residual: wall no-slip row plus interior smoothness.

    Row 0 is the wall: boundary entries are the raw wall values. Interior
    entries are the discrete Laplacian (a smoothness prior, not a PDE).
    Blocks are scaled by their weights so stacked norms implement the
    weighted total residual.
    """
    u = _to_tensor(u)
    h = _spacing(grid)
    interior = smooth_weight * laplacian_interior(u, h)
    boundary = bc_weight * u[..., 0, :]
    return ResidualBundle(interior=interior, boundary=boundary, h=h)


def residual_quadratic_loss(bundle: ResidualBundle, sigma2) -> torch.Tensor:
    """(1/2) ||R||^2 / sigma^2, averaged over leading batch dimensions.

    sigma2 may be a scalar or a tensor broadcastable to the batch shape;
    it must be positive.
    """
    sq = bundle.sq_norm()
    if isinstance(sigma2, torch.Tensor):
        if (sigma2 <= 0).any():
            raise ValueError("sigma2 must be positive")
    elif sigma2 <= 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    loss = 0.5 * sq / sigma2
    return loss.mean() if loss.ndim > 0 else loss
