"""Plane-stress FEM assembly, solves, adjoint gradients, and residual vectors."""

import numpy as np
import pytest
import torch

from repap.fem import (
    RHO_MIN,
    DensityRangeWarning,
    SingularSupportError,
    SingularSystemError,
    assemble_stiffness,
    coarsen_density,
    compliance,
    element_dof_table,
    element_stiffness,
    equilibrium_vector,
    solve_displacement,
    solve_system,
    stiffness_matvec,
    topology_residuals,
    volume_bound_vector,
)


def _cantilever(nelx=4, nely=3, rho=None, seed=0):
    """Left edge fully fixed, unit downward load at the bottom-right node."""
    if rho is None:
        rng = np.random.default_rng(seed)
        rho = rng.uniform(0.3, 0.9, size=(nely, nelx))
    ndof = 2 * (nelx + 1) * (nely + 1)
    fixed = np.arange(2 * (nely + 1))
    f = np.zeros(ndof)
    f[2 * ((nely + 1) * nelx + nely) + 1] = -1.0
    return assemble_stiffness(rho, f, fixed)


class TestElementStiffness:
    def test_symmetric(self):
        ke = element_stiffness()
        np.testing.assert_array_equal(ke, ke.T)

    def test_frozen_entries(self):
        ke = element_stiffness()
        assert ke[0, 0] == pytest.approx(4.94505494505494470e-01, rel=1e-14)
        assert ke[0, 1] == pytest.approx(1.78571428571428548e-01, rel=1e-14)

    def test_rigid_body_nullspace(self):
        ke = element_stiffness()
        tx = np.tile([1.0, 0.0], 4)
        ty = np.tile([0.0, 1.0], 4)
        assert np.abs(ke @ tx).max() < 1e-14
        assert np.abs(ke @ ty).max() < 1e-14
        vals = np.linalg.eigvalsh(ke)
        # two translations plus one rotation, the rest strictly stiff
        assert np.all(np.abs(vals[:3]) < 1e-12)
        assert vals[3] > 0.1

    def test_scales_with_modulus(self):
        np.testing.assert_allclose(element_stiffness(E=2.5), 2.5 * element_stiffness())


class TestAssembly:
    def test_dof_table_column_major(self):
        edof = element_dof_table(2, 2)
        assert edof.shape == (4, 8)
        # element 0 at (nx=0, ny=0): nodes 0, 3, 4, 1
        np.testing.assert_array_equal(edof[0], [0, 1, 6, 7, 8, 9, 2, 3])
        # element 1 is one row down, shifted by one node
        np.testing.assert_array_equal(edof[1], edof[0] + 2)

    def test_matvec_matches_sparse(self):
        sys = _cantilever()
        rng = np.random.default_rng(1)
        u = rng.standard_normal(sys.ndof)
        want = sys.K @ u
        got = stiffness_matvec(
            torch.from_numpy(sys.rho), torch.from_numpy(u), sys
        ).numpy()
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_matvec_batched(self):
        sys = _cantilever()
        rng = np.random.default_rng(2)
        rho = torch.from_numpy(rng.uniform(0.2, 1.0, size=(2, 3, 4)))
        u = torch.from_numpy(rng.standard_normal((2, sys.ndof)))
        got = stiffness_matvec(rho, u, sys)
        for i in range(2):
            np.testing.assert_allclose(
                got[i].numpy(),
                stiffness_matvec(rho[i], u[i], sys).numpy(),
                atol=1e-12,
            )

    def test_symmetric_matrix(self):
        sys = _cantilever()
        d = sys.K - sys.K.T
        assert abs(d).max() < 1e-14

    def test_needs_three_fixed_dofs(self):
        rho = np.full((3, 4), 0.5)
        f = np.zeros(40)
        with pytest.raises(SingularSupportError):
            assemble_stiffness(rho, f, [0, 1])

    def test_boolean_support_mask(self):
        rho = np.full((3, 4), 0.5)
        f = np.zeros(40)
        mask = np.zeros(40, dtype=bool)
        mask[:4] = True
        sys = assemble_stiffness(rho, f, mask)
        np.testing.assert_array_equal(sys.fixed, [0, 1, 2, 3])

    def test_out_of_range_density_warns_and_clamps(self):
        rho = np.full((3, 4), 0.5)
        rho[0, 0] = 1.2
        f = np.zeros(40)
        with pytest.warns(DensityRangeWarning):
            sys = assemble_stiffness(rho, f, np.arange(4))
        assert sys.rho.max() <= 1.0

    def test_validates_shapes(self):
        with pytest.raises(ValueError, match="nely"):
            assemble_stiffness(np.full(12, 0.5), np.zeros(40), np.arange(4))
        with pytest.raises(ValueError, match="entries"):
            assemble_stiffness(np.full((3, 4), 0.5), np.zeros(39), np.arange(4))
        with pytest.raises(ValueError, match="out of range"):
            assemble_stiffness(np.full((3, 4), 0.5), np.zeros(40), [0, 1, 99])


class TestSolve:
    def test_equilibrium_at_solution(self):
        sys = _cantilever()
        u = solve_system(sys)
        assert np.abs(sys.K @ u - sys.f)[sys.free].max() < 1e-10
        assert np.abs(u[sys.fixed]).max() == 0.0

    def test_topology_residuals_at_solution(self):
        sys = _cantilever()
        u = solve_system(sys)
        res = topology_residuals(sys.rho, u, sys, v_target=1.0)
        assert float(res.r_eq) < 1e-9
        assert float(res.r_vol) == 0.0
        assert float(res.r_bound) == 0.0

    def test_underconstrained_solve_raises(self):
        # only x-DOFs fixed: vertical translation stays a rigid mode
        rho = np.full((2, 2), 0.5)
        ndof = 2 * 3 * 3
        f = np.zeros(ndof)
        f[1] = 1.0
        sys = assemble_stiffness(rho, f, [0, 2, 4])
        with pytest.raises(SingularSystemError):
            solve_system(sys)

    def test_stiffer_design_deflects_less(self):
        soft = _cantilever(rho=np.full((3, 4), 0.3))
        stiff = _cantilever(rho=np.full((3, 4), 0.9))
        c_soft = float(compliance(torch.from_numpy(soft.rho), soft))
        c_stiff = float(compliance(torch.from_numpy(stiff.rho), stiff))
        assert c_stiff < c_soft


class TestAdjointGradient:
    def test_compliance_gradient_matches_fd(self):
        sys = _cantilever(seed=3)
        rho = torch.from_numpy(sys.rho).clone().requires_grad_(True)
        compliance(rho, sys).backward()
        grad = rho.grad.numpy()

        step = 1e-6
        for iy, ix in [(0, 0), (1, 2), (2, 3)]:
            up = sys.rho.copy()
            dn = sys.rho.copy()
            up[iy, ix] += step
            dn[iy, ix] -= step
            fd = (
                float(compliance(torch.from_numpy(up), sys))
                - float(compliance(torch.from_numpy(dn), sys))
            ) / (2 * step)
            assert grad[iy, ix] == pytest.approx(fd, rel=1e-5)

    def test_gradient_zero_outside_active_range(self):
        sys = _cantilever(rho=np.full((3, 4), 0.5))
        rho = torch.from_numpy(sys.rho).clone()
        rho[0, 0] = RHO_MIN / 2  # below the floor: scaling is flat there
        rho.requires_grad_(True)
        compliance(rho, sys).backward()
        assert float(rho.grad[0, 0]) == 0.0

    def test_solve_displacement_matches_plain_solve(self):
        sys = _cantilever(seed=4)
        u = solve_displacement(torch.from_numpy(sys.rho), sys)
        np.testing.assert_allclose(u.numpy(), solve_system(sys), atol=1e-12)


class TestResidualVectors:
    def test_volume_bound_vector_values(self):
        rho = torch.tensor([[0.5, -0.25], [1.5, 0.25]], dtype=torch.float64)
        out = volume_bound_vector(rho, v_target=0.25, lambda_vol=4.0, lambda_bound=9.0)
        want = torch.tensor(
            [0.5, 0.0, 0.75, 0.0, 0.0, 0.0, 0.0, 1.5, 0.0], dtype=torch.float64
        )
        assert torch.equal(out, want)

    def test_volume_bound_vector_inactive(self):
        rho = torch.full((3, 3), 0.25, dtype=torch.float64)
        out = volume_bound_vector(rho, v_target=0.5)
        assert torch.all(out == 0.0)
        assert out.shape == (1 + 2 * 9,)

    def test_squared_norm_reproduces_penalty(self):
        rho = torch.tensor([[0.5, -0.25], [1.5, 0.25]], dtype=torch.float64)
        out = volume_bound_vector(rho, v_target=0.25, lambda_vol=4.0, lambda_bound=9.0)
        penalty = 4.0 * 0.25**2 + 9.0 * (0.25**2 + 0.5**2)
        assert float(out.pow(2).sum()) == pytest.approx(penalty, rel=1e-15)

    def test_total_combines_weighted_parts(self):
        res = topology_residuals(
            torch.full((2, 2), 2.0),
            torch.zeros(2 * 3 * 3, dtype=torch.float64),
            assemble_stiffness(np.full((2, 2), 0.5), np.zeros(18), np.arange(4)),
            v_target=0.5,
            lambda_vol=2.0,
            lambda_bound=3.0,
        )
        # zero loads and zero u: r_eq = 0; mean 2.0 over target by 1.5;
        # each of 4 elements violates the upper bound by 1.0
        assert float(res.r_eq) == 0.0
        assert float(res.total()) == pytest.approx(2.0 * 1.5 + 3.0 * 2.0, rel=1e-15)

    def test_equilibrium_vector_zero_load_zero_u(self):
        sys = _cantilever()
        r = equilibrium_vector(
            torch.from_numpy(sys.rho), torch.zeros(sys.ndof, dtype=torch.float64), sys
        )
        np.testing.assert_allclose(r.numpy(), -sys.f[sys.free], atol=0)


class TestCoarsen:
    def test_block_average(self):
        rho = torch.arange(16, dtype=torch.float64).reshape(4, 4)
        out = coarsen_density(rho, max_elems=2)
        want = torch.tensor([[2.5, 4.5], [10.5, 12.5]], dtype=torch.float64)
        assert torch.equal(out, want)

    def test_small_passthrough(self):
        rho = torch.rand(8, 8)
        assert coarsen_density(rho, max_elems=16) is rho

    def test_odd_size_raises(self):
        # 34 halves to 17, which is still above the limit but odd
        with pytest.raises(ValueError, match="divisible"):
            coarsen_density(torch.rand(34, 34), max_elems=16)
