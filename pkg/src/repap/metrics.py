"""Scalar quality metrics for generated physical fields.

All metrics are pure functions of tensors plus task data. Fields are
expected in physical units; use TaskContext.to_physical on normalized
model output first.
"""

from __future__ import annotations

import math
import warnings

import numpy as np
import torch

from .fem import SingularSystemError, StiffnessSystem, assemble_stiffness, solve_system
from .fields import Grid2D
from .residuals import laplacian_interior
from .tasks import TaskContext, residual_abs_mean


class SingularSampleWarning(UserWarning):
    """A sample was excluded from a metric because its system was singular."""


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    a = np.asarray(x)
    if not a.flags.writeable:
        a = a.copy()
    return torch.from_numpy(a)


def r_mae(fields, ctx: TaskContext) -> float:
    """Mean absolute residual over a batch: (1/N) sum ||R_i||_1 / d_r.

    fields: [N, C, H, W] in physical units with the task channel layout.
    Topology reports the scalar residual sum instead (see
    tasks.residual_abs_mean).
    """
    per_sample = residual_abs_mean(ctx, _as_tensor(fields))
    return float(per_sample.mean())


def data_mse(generated, reference) -> float:
    """Mean over samples of the summed squared channel errors."""
    g = _as_tensor(generated)
    r = _as_tensor(reference)
    if g.shape != r.shape:
        raise ValueError(f"shape mismatch: {tuple(g.shape)} vs {tuple(r.shape)}")
    diff = (g - r).reshape(g.shape[0], -1)
    return float(diff.pow(2).sum(dim=1).mean())


def psnr(p_hat, p_ref) -> float:
    """10 log10(max(p_ref)^2 / MSE) in dB; +inf when the error is zero."""
    ph = _as_tensor(p_hat)
    pr = _as_tensor(p_ref)
    if ph.shape != pr.shape:
        raise ValueError(f"shape mismatch: {tuple(ph.shape)} vs {tuple(pr.shape)}")
    peak = float(pr.abs().max())
    if peak == 0.0:
        raise ValueError("reference peak is zero; PSNR undefined")
    mse = float((ph - pr).pow(2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


def masked_l2(p_hat, p_ref, mask) -> float:
    """l2 norm of the error on unobserved entries divided by their count.

    mask uses 1 for observed entries; the metric ignores those.
    """
    ph = _as_tensor(p_hat)
    pr = _as_tensor(p_ref)
    m = _as_tensor(mask).to(ph.dtype)
    unobserved = 1.0 - m
    count = float(unobserved.sum())
    if count == 0:
        raise ValueError("mask observes every entry; masked l2 undefined")
    err = (unobserved * (ph - pr)).reshape(-1)
    return float(err.pow(2).sum().sqrt() / count)


def compliance_error(rho_hat, sys: StiffnessSystem, c_opt: float) -> float:
    """|C(rho_hat) - c_opt| / c_opt * 100 with C from a displacement solve.

    rho_hat: [nely, nelx] element densities. Returns nan with a warning
    when the system at rho_hat is singular, so callers can exclude the
    sample.
    """
    rho = np.asarray(
        rho_hat.detach().cpu() if isinstance(rho_hat, torch.Tensor) else rho_hat,
        dtype=np.float64,
    )
    if c_opt <= 0:
        raise ValueError("reference compliance must be positive")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # out-of-range densities are expected
            hat_sys = assemble_stiffness(rho, sys.f, sys.fixed)
        u = solve_system(hat_sys)
    except SingularSystemError as e:
        warnings.warn(
            f"singular system for generated density, sample excluded: {e}",
            SingularSampleWarning,
        )
        return math.nan
    c_hat = float(hat_sys.f @ u)
    return abs(c_hat - c_opt) / c_opt * 100.0


def mean_compliance_error(rho_hats, systems, c_opts) -> float:
    """Batch-mean compliance error, skipping singular samples.

    rho_hats: [N, nely, nelx]; systems: matching StiffnessSystem sequence;
    c_opts: reference compliances [N].
    """
    values = [
        compliance_error(rho_hats[i], systems[i], float(c_opts[i]))
        for i in range(len(systems))
    ]
    finite = [v for v in values if math.isfinite(v)]
    if not finite:
        raise ValueError("every sample was excluded as singular")
    return float(np.mean(finite))


def volume_fraction_error(rho_hat, v_target: float) -> float:
    """|mean(rho_hat) - v_target| * 100."""
    rho = _as_tensor(rho_hat)
    return float(abs(float(rho.mean()) - v_target) * 100.0)


def charge_phys_loss(u_hat, rho, grid: Grid2D) -> float:
    """Mean absolute discrete Poisson residual (-lap_h U) - rho.

    Entries are the interior residual tensor; batched inputs are averaged
    over samples as well.
    """
    u = _as_tensor(u_hat).to(torch.float64)
    r = _as_tensor(rho).to(torch.float64)
    if u.shape != r.shape:
        raise ValueError(f"shape mismatch: {tuple(u.shape)} vs {tuple(r.shape)}")
    res = -laplacian_interior(u, grid.h) - r[..., 1:-1, 1:-1]
    return float(res.abs().mean())
