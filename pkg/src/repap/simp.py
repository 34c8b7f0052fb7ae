"""Minimal SIMP optimality-criteria loop and topology fixture generation.

Fixture samples live on the node grid (nely+1, nelx+1); the element-grid
density channel is edge-replicated to node shape so every channel shares
one spatial layout. Constant channels broadcast V_target and C_opt.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

from .fem import PENAL, RHO_MIN, assemble_stiffness, solve_system
from .fields import DatasetContainer, Field

# Exactly representable in binary so real32 round trips of the load are
# lossless; compliance scales quadratically but stays far above underflow.
LOAD_AMP = 2.0**-12

TOPOLOGY_LAYOUT = (
    "rho", "load_x", "load_y", "bc_mask", "u1", "u2", "v_target", "c_opt"
)


@dataclass(frozen=True)
class LoadCase:
    """A support/load configuration with its volume budget."""

    name: str
    nelx: int
    nely: int
    volfrac: float
    f: np.ndarray
    fixed: np.ndarray

    @property
    def ndof(self) -> int:
        return 2 * (self.nelx + 1) * (self.nely + 1)


def cantilever_case(
    nelx: int, nely: int, volfrac: float = 0.4, tip_frac: float = 0.0,
    angle: float = 0.0, amp: float = LOAD_AMP,
) -> LoadCase:
    """Left edge clamped, point load on the right edge.

    tip_frac in [0, 1] picks the loaded node height (0 = bottom corner);
    angle tilts the load away from straight down.
    """
    if not 0.0 <= tip_frac <= 1.0:
        raise ValueError("tip_frac must lie in [0, 1]")
    ndof = 2 * (nelx + 1) * (nely + 1)
    f = np.zeros(ndof)
    node = (nely + 1) * nelx + round(tip_frac * nely)
    f[2 * node] = amp * np.sin(angle)
    f[2 * node + 1] = -amp * np.cos(angle)
    left = np.arange(nely + 1)
    fixed = np.concatenate([2 * left, 2 * left + 1])
    return LoadCase(
        name=f"cantilever tip={tip_frac:.2f} angle={angle:.2f}",
        nelx=nelx, nely=nely, volfrac=volfrac, f=f, fixed=fixed,
    )


def bridge_case(
    nelx: int, nely: int, volfrac: float = 0.4, load_frac: float = 0.5,
    amp: float = LOAD_AMP,
) -> LoadCase:
    """Both bottom corners pinned, downward load on the top edge.

    Exercises support/load placements disjoint from the cantilever family,
    so it doubles as the held-out condition for conditional evaluation.
    """
    if not 0.0 <= load_frac <= 1.0:
        raise ValueError("load_frac must lie in [0, 1]")
    ndof = 2 * (nelx + 1) * (nely + 1)
    f = np.zeros(ndof)
    node = (nely + 1) * round(load_frac * nelx) + nely
    f[2 * node + 1] = -amp
    corner_lo = 0
    corner_hi = (nely + 1) * nelx
    fixed = np.array([
        2 * corner_lo, 2 * corner_lo + 1, 2 * corner_hi, 2 * corner_hi + 1,
    ])
    return LoadCase(
        name=f"bridge load={load_frac:.2f}",
        nelx=nelx, nely=nely, volfrac=volfrac, f=f, fixed=fixed,
    )


def _filter_sensitivities(rho: np.ndarray, dc: np.ndarray, rmin: float) -> np.ndarray:
    """Mesh-independency filter: density-weighted convolution of dc."""
    reach = int(np.ceil(rmin)) - 1
    offs = np.arange(-reach, reach + 1)
    dist = np.hypot(offs[:, None], offs[None, :])
    kernel = np.maximum(0.0, rmin - dist)
    num = convolve2d(rho * dc, kernel, mode="same")
    den = rho * convolve2d(np.ones_like(rho), kernel, mode="same")
    return num / den


def _oc_update(
    rho: np.ndarray, dc: np.ndarray, volfrac: float, move: float
) -> np.ndarray:
    """Optimality-criteria step: bisection on the volume multiplier."""
    lo, hi = 0.0, 1e9
    lower = np.maximum(RHO_MIN, rho - move)
    upper = np.minimum(1.0, rho + move)
    rho_new = rho
    while hi - lo > 1e-12 * (hi + lo) + 1e-300:
        lam = 0.5 * (lo + hi)
        rho_new = np.clip(rho * np.sqrt(np.maximum(-dc, 0.0) / lam), lower, upper)
        if rho_new.mean() > volfrac:
            lo = lam
        else:
            hi = lam
    return rho_new


def optimize_simp(
    case: LoadCase, rmin: float = 1.5, move: float = 0.2,
    max_iters: int = 100, tol: float = 1e-3,
) -> tuple[np.ndarray, list[float]]:
    """SIMP loop (penalty 3, OC updates, sensitivity filter).

    Returns (rho [nely, nelx], compliance history). Stops early when the
    density update stalls below tol in max-norm.
    """
    rho = np.full((case.nely, case.nelx), case.volfrac)
    history: list[float] = []
    for _ in range(max_iters):
        sys = assemble_stiffness(rho, case.f, case.fixed)
        u = solve_system(sys)
        ue = u[sys.edof]                       # [n_elem, 8]
        ce = np.einsum("eb,ba,ea->e", ue, sys.ke, ue)
        scale = np.clip(rho, RHO_MIN, 1.0) ** PENAL
        ce_grid = ce.reshape(case.nelx, case.nely).T
        history.append(float(np.sum(scale * ce_grid)))
        dc = -PENAL * np.clip(rho, RHO_MIN, 1.0) ** (PENAL - 1) * ce_grid
        dc = _filter_sensitivities(rho, dc, rmin)
        rho_new = _oc_update(rho, dc, case.volfrac, move)
        change = np.abs(rho_new - rho).max()
        rho = rho_new
        if change < tol:
            break
    return rho, history


def _node_grid(vec: np.ndarray, nelx: int, nely: int) -> np.ndarray:
    """Reshape a per-node vector (id = (nely+1) nx + ny) to [nely+1, nelx+1]."""
    return vec.reshape(nelx + 1, nely + 1).T


def fixture_cases(grid_elems: int, n_cases: int, seed: int) -> list[LoadCase]:
    """Deterministic spread of cantilever variants for fixture datasets."""
    rng = np.random.default_rng(seed)
    cases = []
    for _ in range(n_cases):
        tip = rng.uniform(0.0, 1.0)
        angle = rng.uniform(-0.35, 0.35)
        vol = rng.uniform(0.3, 0.55)
        cases.append(cantilever_case(grid_elems, grid_elems, vol, tip, angle))
    return cases


def sample_to_system(sample: Field) -> tuple[np.ndarray, LoadCase, np.ndarray]:
    """Invert the fixture packing: (rho [nely, nelx], case, u_ref [ndof])."""
    if sample.channels != TOPOLOGY_LAYOUT:
        raise ValueError("sample does not carry the topology channel layout")
    vals = np.asarray(sample.values, dtype=np.float64)
    npy, npx = vals.shape[1:]
    nely, nelx = npy - 1, npx - 1
    rho = vals[0][:nely, :nelx]
    fx = vals[1].T.ravel()
    fy = vals[2].T.ravel()
    f = np.empty(2 * npy * npx)
    f[0::2] = fx
    f[1::2] = fy
    nodes = np.flatnonzero(vals[3].T.ravel() > 0.5)
    fixed = np.concatenate([2 * nodes, 2 * nodes + 1])
    u = np.empty_like(f)
    u[0::2] = vals[4].T.ravel()
    u[1::2] = vals[5].T.ravel()
    case = LoadCase(
        name="from-sample", nelx=nelx, nely=nely,
        volfrac=float(vals[6].ravel()[0]), f=f, fixed=fixed,
    )
    return rho, case, u


def pack_sample(
    rho: np.ndarray, case: LoadCase, u: np.ndarray, c_opt: float
) -> np.ndarray:
    """Assemble the 8-channel node-grid representation of one fixture."""
    nelx, nely = case.nelx, case.nely
    rho_node = np.pad(rho, ((0, 1), (0, 1)), mode="edge")
    bc = np.zeros((nely + 1) * (nelx + 1))
    bc[np.unique(case.fixed // 2)] = 1.0
    chans = np.stack([
        rho_node,
        _node_grid(case.f[0::2], nelx, nely),
        _node_grid(case.f[1::2], nelx, nely),
        _node_grid(bc, nelx, nely),
        _node_grid(u[0::2], nelx, nely),
        _node_grid(u[1::2], nelx, nely),
        np.full((nely + 1, nelx + 1), case.volfrac),
        np.full((nely + 1, nelx + 1), c_opt),
    ])
    return chans


def generate_topology_fixtures(
    grid_elems: int, n_cases: int, seed: int = 0,
    max_iters: int = 100, self_check_tol: float = 1e-6,
) -> DatasetContainer:
    """Optimized-structure fixtures from the tiny SIMP loop, real32 storage.

    The stored displacements and compliance are recomputed from the real32
    rounding of the optimized density, so the stored tuple is discretely
    self-consistent: the equilibrium residual of (rho, u) as stored stays
    below self_check_tol.
    """
    if grid_elems > 32:
        raise ValueError("fixture grids are limited to 32x32 elements")
    cases = fixture_cases(grid_elems, n_cases, seed)
    samples = []
    for case in cases:
        rho_star, history = optimize_simp(case, max_iters=max_iters)
        if len(history) >= 2 and history[-1] > history[0]:
            raise RuntimeError(f"SIMP diverged on case {case.name}")
        rho32 = rho_star.astype(np.float32).astype(np.float64)
        f32 = case.f.astype(np.float32).astype(np.float64)
        case32 = LoadCase(
            name=case.name, nelx=case.nelx, nely=case.nely,
            volfrac=case.volfrac, f=f32, fixed=case.fixed,
        )
        sys32 = assemble_stiffness(rho32, f32, case.fixed)
        u = solve_system(sys32)
        c_opt = float(f32 @ u)
        u32 = u.astype(np.float32).astype(np.float64)
        r = sys32.K @ u32 - f32
        r_eq = float(np.abs(np.delete(r, case.fixed)).mean())
        if r_eq > self_check_tol:
            raise RuntimeError(f"fixture equilibrium check failed: {r_eq:.3e}")
        samples.append(pack_sample(rho32, case32, u32, c_opt))
    values = np.stack(samples).astype(np.float32)
    return DatasetContainer(
        task="topology",
        layout=TOPOLOGY_LAYOUT,
        values=values,
        seed_info=f"seed={seed} elems={grid_elems}",
    )
