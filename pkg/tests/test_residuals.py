"""Discretized residual operators: exact identities and block structure."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from repap.fields import Grid2D
from repap.residuals import (
    NonPositivePermeabilityWarning,
    ResidualBundle,
    center_pressure,
    darcy_residual,
    dirichlet_ring,
    laplacian_interior,
    neumann_edges,
    poisson_residual,
    residual_quadratic_loss,
    turbulence_residual,
)


def _mesh(grid):
    y, x = grid.coords()
    return torch.from_numpy(y), torch.from_numpy(x)


class TestStencils:
    def test_laplacian_exact_on_quadratic(self):
        g = Grid2D.unit(9)
        y, x = _mesh(g)
        lap = laplacian_interior(x**2 + 3.0 * y**2, g.h)
        assert torch.allclose(lap, torch.full_like(lap, 8.0), atol=1e-10)

    def test_neumann_edges_layout(self):
        g = Grid2D.unit(5, 7)
        u = torch.zeros(7, 5, dtype=torch.float64)
        u[:, 1] = 1.0
        e = neumann_edges(u, g.h)
        assert e.shape == (2 * 7 + 2 * 5,)
        # x-lo column block first: (u[:,0] - u[:,1]) / h
        assert torch.all(e[:7] == -1.0 / g.h)
        assert torch.all(e[7:14] == 0.0)

    def test_dirichlet_ring_counts_corners_once(self):
        u = torch.ones(6, 4, dtype=torch.float64)
        ring = dirichlet_ring(u)
        assert ring.shape == (2 * 6 + 2 * 4 - 4,)
        assert ring.sum() == 2 * 6 + 2 * 4 - 4

    def test_center_pressure_zero_mean(self):
        p = torch.randn(3, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
        c = center_pressure(p)
        assert torch.allclose(c.mean(dim=(-2, -1)), torch.zeros(3, dtype=torch.float64), atol=1e-14)


class TestDarcy:
    def test_exact_on_linear_pressure(self):
        # p linear and K linear: centered differences are exact, so choosing
        # f = -grad(K).grad(p) zeroes the interior block identically
        g = Grid2D.unit(9)
        y, x = _mesh(g)
        a, b, c = 0.75, -0.5, 0.3
        p = a * x + b * y
        K = 1.0 + c * x
        f = torch.full_like(p, -c * a)
        r = darcy_residual(K, p, f, g)
        assert r.interior.abs().max() < 1e-10
        want = torch.cat(
            [
                torch.full((9,), -a, dtype=torch.float64),
                torch.full((9,), a, dtype=torch.float64),
                torch.full((9,), -b, dtype=torch.float64),
                torch.full((9,), b, dtype=torch.float64),
            ]
        )
        assert torch.allclose(r.boundary, want, atol=1e-10)

    def test_exact_on_quadratic_constant_permeability(self):
        g = Grid2D.unit(9)
        y, x = _mesh(g)
        p = x**2 + y**2
        K = torch.full_like(p, 2.0)
        f = torch.full_like(p, -8.0)
        r = darcy_residual(K, p, f, g)
        assert r.interior.abs().max() < 1e-10

    @given(shift=st.floats(-1e3, 1e3, allow_nan=False))
    @settings(max_examples=25, deadline=None)
    def test_shift_invariance(self, shift):
        g = Grid2D.unit(8)
        gen = torch.Generator().manual_seed(11)
        K = torch.rand(8, 8, generator=gen, dtype=torch.float64) + 0.5
        p = torch.randn(8, 8, generator=gen, dtype=torch.float64)
        f = torch.randn(8, 8, generator=gen, dtype=torch.float64)
        base = darcy_residual(K, p, f, g)
        moved = darcy_residual(K, p + shift, f, g)
        assert torch.allclose(base.stacked(), moved.stacked(), atol=1e-9)

    def test_batch_passthrough(self):
        g = Grid2D.unit(8)
        K = torch.rand(2, 3, 8, 8, dtype=torch.float64) + 0.5
        p = torch.randn(2, 3, 8, 8, dtype=torch.float64)
        f = torch.zeros(2, 3, 8, 8, dtype=torch.float64)
        r = darcy_residual(K, p, f, g)
        assert r.interior.shape == (2, 3, 6, 6)
        assert r.boundary.shape == (2, 3, 32)
        assert r.sq_norm().shape == (2, 3)

    def test_nonpositive_permeability_warns(self):
        g = Grid2D.unit(8)
        K = torch.ones(8, 8, dtype=torch.float64)
        K[2, 2] = 0.0
        with pytest.warns(NonPositivePermeabilityWarning):
            darcy_residual(K, torch.zeros(8, 8), torch.zeros(8, 8), g)

    def test_shape_mismatch_raises(self):
        g = Grid2D.unit(8)
        with pytest.raises(ValueError, match="shape mismatch"):
            darcy_residual(torch.ones(8, 8), torch.zeros(8, 8), torch.zeros(7, 7), g)

    def test_accepts_numpy(self):
        g = Grid2D.unit(8)
        r = darcy_residual(np.ones((8, 8)), np.zeros((8, 8)), np.zeros((8, 8)), g)
        assert isinstance(r.interior, torch.Tensor)
        assert float(r.sq_norm()) == 0.0


class TestPoisson:
    def test_discrete_identity_is_exact_zero(self):
        # rho built from the same stencil must cancel bitwise
        g = Grid2D.unit(10)
        gen = torch.Generator().manual_seed(5)
        U = torch.zeros(10, 10, dtype=torch.float64)
        U[1:-1, 1:-1] = torch.randn(8, 8, generator=gen, dtype=torch.float64)
        rho = torch.zeros_like(U)
        rho[1:-1, 1:-1] = -laplacian_interior(U, g.h)
        r = poisson_residual(U, rho, g)
        assert float(r.sq_norm()) == 0.0

    def test_nonzero_boundary_shows_in_ring(self):
        g = Grid2D.unit(8)
        U = torch.zeros(8, 8, dtype=torch.float64)
        U[0, 3] = 2.5
        r = poisson_residual(U, torch.zeros_like(U), g)
        assert float(r.boundary.abs().max()) == 2.5

    def test_entries_tile_grid(self):
        g = Grid2D.unit(8)
        r = poisson_residual(torch.zeros(8, 8), torch.zeros(8, 8), g)
        assert r.d_r == 8 * 8


class TestTurbulence:
    def test_zero_on_linear_profile(self):
        g = Grid2D.unit(12)
        y, _ = _mesh(g)
        r = turbulence_residual(y, g)
        assert float(r.sq_norm()) == pytest.approx(0.0, abs=1e-20)

    def test_weights_scale_blocks(self):
        g = Grid2D.unit(8)
        u = torch.randn(8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
        base = turbulence_residual(u, g)
        scaled = turbulence_residual(u, g, bc_weight=3.0, smooth_weight=0.5)
        assert torch.allclose(scaled.interior, 0.5 * base.interior)
        assert torch.allclose(scaled.boundary, 3.0 * base.boundary)

    def test_wall_row_is_row_zero(self):
        g = Grid2D.unit(8)
        u = torch.zeros(8, 8, dtype=torch.float64)
        u[0, :] = 7.0
        r = turbulence_residual(u, g)
        assert torch.all(r.boundary == 7.0)


class TestBundle:
    def _bundle(self):
        interior = torch.tensor([[1.0, -2.0], [0.0, 3.0]], dtype=torch.float64)
        boundary = torch.tensor([4.0, -1.0], dtype=torch.float64)
        return ResidualBundle(interior=interior, boundary=boundary, h=0.1)

    def test_d_r(self):
        assert self._bundle().d_r == 6

    def test_sq_norm(self):
        assert float(self._bundle().sq_norm()) == 31.0

    def test_abs_mean(self):
        assert float(self._bundle().abs_mean()) == pytest.approx(11.0 / 6.0, rel=1e-15)

    def test_stacked_order(self):
        got = self._bundle().stacked()
        want = torch.tensor([1.0, -2.0, 0.0, 3.0, 4.0, -1.0], dtype=torch.float64)
        assert torch.equal(got, want)

    def test_quadratic_loss_value(self):
        assert float(residual_quadratic_loss(self._bundle(), 2.0)) == pytest.approx(7.75)

    def test_quadratic_loss_batch_mean(self):
        interior = torch.stack([torch.ones(2, 2), torch.zeros(2, 2)]).double()
        boundary = torch.zeros(2, 3, dtype=torch.float64)
        b = ResidualBundle(interior=interior, boundary=boundary, h=0.1)
        # sample norms 4 and 0, halved and averaged
        assert float(residual_quadratic_loss(b, 1.0)) == pytest.approx(1.0)

    def test_quadratic_loss_rejects_nonpositive_sigma2(self):
        with pytest.raises(ValueError, match="sigma2"):
            residual_quadratic_loss(self._bundle(), 0.0)
        with pytest.raises(ValueError, match="sigma2"):
            residual_quadratic_loss(self._bundle(), torch.tensor([1.0, -1.0]))
