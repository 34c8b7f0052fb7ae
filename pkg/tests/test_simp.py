"""SIMP optimization loop and topology fixture packing."""

import numpy as np
import pytest

from repap.fem import RHO_MIN, assemble_stiffness
from repap.fields import Field, Grid2D
from repap.simp import (
    LOAD_AMP,
    TOPOLOGY_LAYOUT,
    bridge_case,
    cantilever_case,
    generate_topology_fixtures,
    optimize_simp,
    pack_sample,
    sample_to_system,
)


class TestLoadCases:
    def test_cantilever_supports_left_edge(self):
        case = cantilever_case(6, 4)
        assert case.fixed.size == 2 * 5
        assert set(case.fixed) == set(range(2 * 5))

    def test_cantilever_load_at_tip(self):
        case = cantilever_case(6, 4, tip_frac=0.0)
        nz = np.flatnonzero(case.f)
        # bottom-right node, straight down
        assert list(nz) == [2 * (5 * 6) + 1]
        assert case.f[nz[0]] == -LOAD_AMP

    def test_cantilever_angle_splits_load(self):
        case = cantilever_case(6, 4, tip_frac=1.0, angle=0.3)
        nz = np.flatnonzero(case.f)
        assert nz.size == 2
        assert np.hypot(*case.f[nz]) == pytest.approx(LOAD_AMP, rel=1e-12)

    def test_cantilever_rejects_bad_tip(self):
        with pytest.raises(ValueError, match="tip_frac"):
            cantilever_case(6, 4, tip_frac=1.5)

    def test_bridge_pins_corners(self):
        case = bridge_case(6, 4)
        corner_hi = 5 * 6
        assert set(case.fixed) == {0, 1, 2 * corner_hi, 2 * corner_hi + 1}
        nz = np.flatnonzero(case.f)
        assert nz.size == 1 and case.f[nz[0]] == -LOAD_AMP

    def test_load_amp_real32_exact(self):
        assert float(np.float32(LOAD_AMP)) == LOAD_AMP


class TestOptimize:
    def test_compliance_decreases(self):
        case = cantilever_case(8, 8, volfrac=0.4)
        rho, history = optimize_simp(case, max_iters=25)
        assert history[-1] < history[0]
        assert rho.shape == (8, 8)

    def test_volume_constraint_active(self):
        case = cantilever_case(8, 8, volfrac=0.4)
        rho, _ = optimize_simp(case, max_iters=25)
        assert rho.mean() == pytest.approx(0.4, abs=1e-3)

    def test_densities_in_box(self):
        case = cantilever_case(8, 8, volfrac=0.35)
        rho, _ = optimize_simp(case, max_iters=15)
        assert rho.min() >= RHO_MIN
        assert rho.max() <= 1.0


class TestPacking:
    def _case_and_fields(self):
        case = cantilever_case(4, 4, volfrac=0.45, tip_frac=0.5)
        rng = np.random.default_rng(0)
        rho = rng.uniform(0.1, 0.9, size=(4, 4))
        u = rng.standard_normal(case.ndof)
        return case, rho, u

    def test_roundtrip(self):
        case, rho, u = self._case_and_fields()
        chans = pack_sample(rho, case, u, c_opt=3.25)
        assert chans.shape == (8, 5, 5)
        field = Field(Grid2D(5, 5, h=1.0), chans, TOPOLOGY_LAYOUT)
        rho2, case2, u2 = sample_to_system(field)
        np.testing.assert_array_equal(rho2, rho)
        np.testing.assert_array_equal(u2, u)
        np.testing.assert_array_equal(case2.f, case.f)
        np.testing.assert_array_equal(np.sort(case2.fixed), np.sort(case.fixed))
        assert case2.volfrac == 0.45

    def test_constant_channels(self):
        case, rho, u = self._case_and_fields()
        chans = pack_sample(rho, case, u, c_opt=3.25)
        assert np.all(chans[6] == 0.45)
        assert np.all(chans[7] == 3.25)

    def test_density_edge_replicated(self):
        case, rho, u = self._case_and_fields()
        chans = pack_sample(rho, case, u, c_opt=1.0)
        np.testing.assert_array_equal(chans[0][:4, :4], rho)
        np.testing.assert_array_equal(chans[0][4, :4], rho[3])
        np.testing.assert_array_equal(chans[0][:4, 4], rho[:, 3])

    def test_wrong_layout_rejected(self):
        field = Field(Grid2D(5, 5, h=1.0), np.zeros((3, 5, 5)), ("a", "b", "c"))
        with pytest.raises(ValueError, match="layout"):
            sample_to_system(field)


class TestFixtures:
    def test_container_shape_and_layout(self, topo_small):
        assert topo_small.task == "topology"
        assert topo_small.layout == TOPOLOGY_LAYOUT
        assert topo_small.values.shape == (4, 8, 9, 9)
        assert topo_small.values.dtype == np.float32

    def test_equilibrium_self_consistency(self, topo_small):
        # the stored (rho, u, f) tuple must satisfy equilibrium as stored
        for i in range(topo_small.n_samples):
            rho, case, u = sample_to_system(topo_small.sample(i))
            sys = assemble_stiffness(rho, case.f, case.fixed)
            r = sys.K @ u - case.f
            assert np.abs(np.delete(r, case.fixed)).mean() < 1e-6

    def test_bc_mask_binary(self, topo_small):
        bc = topo_small.values[:, 3]
        assert set(np.unique(bc)) <= {0.0, 1.0}

    def test_deterministic(self, topo_small):
        again = generate_topology_fixtures(8, 4, seed=103)
        np.testing.assert_array_equal(again.values, topo_small.values)

    def test_grid_limit(self):
        with pytest.raises(ValueError, match="32"):
            generate_topology_fixtures(64, 1)
