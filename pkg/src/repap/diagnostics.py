"""Representation diagnostics and verification tooling.

Covers feature-similarity measures (linear CKA, effective rank), per-layer
decoded-residual profiling with probe training for head-free baselines, the
gradient-attenuation bound check, and a finite-difference audit of every
differentiable loss.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .alignment import AlignmentConfig, HeadSet, project_features
from .diffusion import NoiseSchedule, forward_diffuse, posterior_sigma2
from .tasks import TaskContext, residual_abs_mean, residual_sq_norm


class PowerIterationWarning(UserWarning):
    """Spectral-norm power iteration stopped before reaching tolerance."""


def _flatten_features(features) -> torch.Tensor:
    f = features if isinstance(features, torch.Tensor) else torch.as_tensor(
        np.asarray(features)
    )
    if f.ndim < 2:
        raise ValueError("features must be at least [N, d]")
    return f.reshape(f.shape[0], -1).to(torch.float64)


def linear_cka(features_a, features_b) -> float:
    """Linear centered-kernel-alignment similarity in [0, 1].

    Features are flattened per sample and centered; the score is invariant
    to isotropic scaling and orthogonal rotation of either argument.
    """
    x = _flatten_features(features_a)
    y = _flatten_features(features_b)
    if x.shape[0] != y.shape[0]:
        raise ValueError(
            f"sample counts differ: {x.shape[0]} vs {y.shape[0]}"
        )
    x = x - x.mean(dim=0)
    y = y - y.mean(dim=0)
    if float(x.norm()) == 0.0 or float(y.norm()) == 0.0:
        raise ValueError("zero-variance features; CKA undefined")
    cross = torch.linalg.norm(x.T @ y) ** 2
    denom = torch.linalg.norm(x.T @ x) * torch.linalg.norm(y.T @ y)
    return float(cross / denom)


def effective_rank(features) -> float:
    """exp(entropy) of the singular-value distribution of centered features."""
    x = _flatten_features(features)
    if x.shape[0] < 2:
        raise ValueError("effective rank needs at least 2 samples")
    x = x - x.mean(dim=0)
    s = torch.linalg.svdvals(x)
    total = float(s.sum())
    if total == 0.0:
        raise ValueError("zero feature matrix; effective rank undefined")
    p = s / total
    p = p[p > 0]
    entropy = float(-(p * p.log()).sum())
    return math.exp(entropy)


@dataclass(frozen=True)
class LayerProfile:
    """Mean decoded-residual MAE per tapped position, raw and normalized."""

    positions: tuple[str, ...]
    raw: tuple[float, ...]
    normalized: tuple[float, ...]

    def as_dict(self) -> dict[str, dict[str, float]]:
        return {
            pos: {"raw": r, "normalized": n}
            for pos, r, n in zip(self.positions, self.raw, self.normalized)
        }


def _profile_draws(
    n: int, T: int, seed: int, shape, dtype
) -> tuple[torch.Tensor, torch.Tensor]:
    """Deterministic eval draws: stratified t midpoints, seeded noise."""
    t = torch.clamp(
        ((torch.arange(n, dtype=torch.float64) + 0.5) * T / n).round().long(),
        min=1, max=T,
    )
    gen = torch.Generator().manual_seed(seed)
    eps = torch.randn(shape, generator=gen, dtype=dtype)
    return t, eps


def layer_residual_profile(
    backbone: torch.nn.Module,
    heads: HeadSet,
    x0: torch.Tensor,
    ctx: TaskContext,
    sched: NoiseSchedule,
    cond: torch.Tensor | None = None,
    seed: int = 0,
) -> LayerProfile:
    """Mean residual MAE of decoded fields at every head position.

    x0 is a normalized eval batch [B, C, H, W]. Timesteps are stratified
    midpoints of the schedule and the noise draw is seeded, so the profile
    is deterministic given model plus seed. Raw values are normalized by
    the maximum across positions.
    """
    t, eps = _profile_draws(x0.shape[0], sched.T, seed, x0.shape, x0.dtype)
    x_t = forward_diffuse(x0, t, eps, sched)
    with torch.no_grad():
        _, taps = backbone(x_t, t, cond)
        by_pos = {tap.position: tap for tap in taps}
        raw = []
        for pos in heads.positions:
            z = project_features(by_pos[pos], heads[pos])
            phys = ctx.to_physical(z)
            raw.append(float(residual_abs_mean(ctx, phys).mean()))
    peak = max(raw)
    if peak == 0.0:
        normalized = tuple(1.0 for _ in raw)
    else:
        normalized = tuple(r / peak for r in raw)
    return LayerProfile(
        positions=heads.positions, raw=tuple(raw), normalized=normalized
    )


def train_probes(
    backbone: torch.nn.Module,
    positions: Sequence[str],
    x0: torch.Tensor,
    ctx: TaskContext,
    sched: NoiseSchedule,
    cond: torch.Tensor | None = None,
    n_draws: int = 1024,
    batch_size: int = 32,
    lr: float = 2e-3,
    head_hidden: int = 128,
    seed: int = 0,
) -> HeadSet:
    """Fit fresh projection heads on frozen backbone features.

    Gives head-free baselines something to decode with: one pass over
    n_draws (sample, t, noise) draws from x0, minimizing the mid-layer
    physics loss while the backbone stays fixed.
    """
    from .alignment import midlayer_physics_loss  # deferred: cycle-free either way

    cfg = AlignmentConfig(positions=tuple(positions), head_hidden=head_hidden)
    gen = torch.Generator().manual_seed(seed)
    probe_x = x0[:1] if cond is None else torch.cat([x0[:1], cond[:1]], dim=1)
    heads = HeadSet.for_backbone(
        backbone, cfg, out_channels=x0.shape[1],
        target_size=tuple(x0.shape[-2:]),
        probe=(probe_x, torch.ones(1, dtype=torch.long)),
    )
    opt = torch.optim.Adam(heads.parameters(), lr=lr)
    n_steps = max(1, math.ceil(n_draws / batch_size))
    for _ in range(n_steps):
        idx = torch.randint(0, x0.shape[0], (batch_size,), generator=gen)
        t = torch.randint(1, sched.T + 1, (batch_size,), generator=gen)
        eps = torch.randn(
            (batch_size,) + x0.shape[1:], generator=gen, dtype=x0.dtype
        )
        x_t = forward_diffuse(x0[idx], t, eps, sched)
        with torch.no_grad():
            _, taps = backbone(x_t, t, cond[idx] if cond is not None else None)
        loss = midlayer_physics_loss(
            taps, heads, t, sched, ctx.for_batch(idx.tolist())
        )
        opt.zero_grad()
        loss.backward()
        opt.step()
    return heads


def spectral_norm_estimate(
    fn: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    n_iter: int = 20,
    rtol: float = 1e-3,
    seed: int = 0,
) -> tuple[float, float]:
    """Largest singular value of J_fn(x) by power iteration on J^T J.

    Returns (estimate, last relative change). The estimate approaches the
    true norm from below, so callers should allow slack when using it as
    an upper-bound factor.
    """
    x = x.detach()
    gen = torch.Generator().manual_seed(seed)
    v = torch.randn(x.shape, generator=gen, dtype=x.dtype)
    v = v / v.norm()
    sigma = 0.0
    change = math.inf
    for _ in range(n_iter):
        _, u = torch.func.jvp(fn, (x,), (v,))
        u = u.detach()
        sigma_new = float(u.norm())
        if sigma_new == 0.0:
            return 0.0, 0.0
        _, vjp_fn = torch.func.vjp(fn, x)
        w = vjp_fn(u)[0].detach()
        wn = float(w.norm())
        if wn == 0.0:
            return sigma_new, 0.0
        v = w / wn
        change = abs(sigma_new - sigma) / max(sigma_new, 1e-300)
        sigma = sigma_new
    return sigma, change


@dataclass(frozen=True)
class AttenuationReport:
    """Gradient norms at a tapped feature against their analytic bounds.

    lhs_out / bound_out follow the deep-chain inequality; lhs_mid /
    bound_mid use only the head Jacobian. eps_power is the multiplicative
    slack callers should grant the bounds to absorb spectral-norm
    underestimation by power iteration.
    """

    lhs_out: float
    bound_out: float
    lhs_mid: float
    bound_mid: float
    layer_norms: tuple[float, ...]
    head_norm: float
    eps_power: float

    def out_holds(self) -> bool:
        return self.lhs_out <= self.bound_out * (1.0 + self.eps_power)

    def mid_holds(self) -> bool:
        return self.lhs_mid <= self.bound_mid * (1.0 + self.eps_power)


def _grad_norm(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor) -> float:
    xr = x.detach().requires_grad_(True)
    (grad,) = torch.autograd.grad(fn(xr), xr)
    return float(grad.norm())


def attenuation_check(
    layers: Sequence[Callable[[torch.Tensor], torch.Tensor]],
    head: Callable[[torch.Tensor], torch.Tensor],
    h: torch.Tensor,
    half_sq_fn: Callable[[torch.Tensor], torch.Tensor],
    sigma2: float,
    n_power: int = 20,
    power_rtol: float = 1e-3,
    eps_power: float = 0.05,
    seed: int = 0,
) -> AttenuationReport:
    """Verify gradient-attenuation bounds at a tapped feature h.

    layers are the maps downstream of the tap whose composition yields the
    denoised output; head is the projection at the tap. half_sq_fn maps a
    decoded field to (1/2)||R||^2 summed over the batch, so physics losses
    are half_sq_fn / sigma2. Everything runs in double precision.
    """
    if h.dtype != torch.float64:
        raise ValueError("attenuation check requires float64 features")
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")

    def compose(x: torch.Tensor) -> torch.Tensor:
        for layer in layers:
            x = layer(x)
        return x

    lhs_out = _grad_norm(lambda x: half_sq_fn(compose(x)) / sigma2, h)
    lhs_mid = _grad_norm(lambda x: half_sq_fn(head(x)) / sigma2, h)

    layer_norms = []
    worst_change = 0.0
    cur = h.detach()
    for k, layer in enumerate(layers):
        norm, change = spectral_norm_estimate(
            layer, cur, n_iter=n_power, rtol=power_rtol, seed=seed + k
        )
        layer_norms.append(norm)
        worst_change = max(worst_change, change)
        with torch.no_grad():
            cur = layer(cur)
    head_norm, change = spectral_norm_estimate(
        head, h, n_iter=n_power, rtol=power_rtol, seed=seed + len(layers)
    )
    worst_change = max(worst_change, change)
    if worst_change > power_rtol:
        eps_power = max(eps_power, 10.0 * worst_change)
        warnings.warn(
            f"power iteration stopped at relative change {worst_change:.2e}; "
            f"widening bound slack to {eps_power:.2%}",
            PowerIterationWarning,
        )

    jr_out = _grad_norm(half_sq_fn, cur)
    with torch.no_grad():
        z = head(h.detach())
    jr_mid = _grad_norm(half_sq_fn, z)

    bound_out = float(np.prod(layer_norms)) * jr_out / sigma2
    bound_mid = head_norm * jr_mid / sigma2
    return AttenuationReport(
        lhs_out=lhs_out,
        bound_out=bound_out,
        lhs_mid=lhs_mid,
        bound_mid=bound_mid,
        layer_norms=tuple(layer_norms),
        head_norm=head_norm,
        eps_power=eps_power,
    )


def half_sq_fn_from_context(
    ctx: TaskContext, mid_layer: bool = False
) -> Callable[[torch.Tensor], torch.Tensor]:
    """(1/2)||R||^2 summed over the batch, for attenuation checks on tasks."""

    def fn(fields: torch.Tensor) -> torch.Tensor:
        return 0.5 * residual_sq_norm(ctx, fields, mid_layer=mid_layer).sum()

    return fn


@dataclass(frozen=True)
class AttenuationRow:
    """One tapped position of a trained model: short path vs long path.

    lhs_mid is the gradient norm of that position's own physics term at
    the tap; bound_mid its head-Jacobian bound. lhs_out is the gradient
    norm of the output physics loss at the same tap, reached through the
    downstream layers, for comparison against the short path.
    """

    position: str
    lhs_mid: float
    bound_mid: float
    lhs_out: float
    head_norm: float
    jr_norm: float
    eps_power: float

    def mid_holds(self) -> bool:
        return self.lhs_mid <= self.bound_mid * (1.0 + self.eps_power)


def midlayer_attenuation_rows(
    backbone: torch.nn.Module,
    heads: HeadSet,
    x0: torch.Tensor,
    ctx: TaskContext,
    sched: NoiseSchedule,
    cond: torch.Tensor | None = None,
    t: int | None = None,
    seed: int = 0,
    n_power: int = 20,
    power_rtol: float = 1e-3,
    eps_power: float = 0.05,
) -> list[AttenuationRow]:
    """Empirical attenuation table for a trained model, one row per head.

    Runs a single sample (the first row of x0) at one timestep and reads
    gradients off the live taps, so the bound side only needs the head
    Jacobian: the downstream chain is not factorized here, its effect shows
    up in lhs_out. Each row's mid quantities use that position's own
    physics term, i.e. the mid loss with a single alignment position.
    """
    if t is None:
        t = max(1, sched.T // 2)
    gen = torch.Generator().manual_seed(seed)
    x0_b = x0[:1]
    cond_b = cond[:1] if cond is not None else None
    ctx_b = ctx.for_batch([0])
    eps = torch.randn(x0_b.shape, generator=gen, dtype=x0_b.dtype)
    x_t = forward_diffuse(x0_b, t, eps, sched)
    sigma2 = float(posterior_sigma2(t, sched))

    x0_hat, taps = backbone(x_t, torch.tensor([t]), cond_b)
    by_pos = {tap.position: tap for tap in taps}
    out_sq = residual_sq_norm(ctx_b, ctx_b.to_physical(x0_hat), mid_layer=False)
    l_out = (0.5 * out_sq / sigma2).mean()

    rows = []
    for pos in heads.positions:
        tap = by_pos[pos]
        (g_out,) = torch.autograd.grad(
            l_out, tap.tensor, retain_graph=True, allow_unused=True
        )
        lhs_out = float(g_out.norm()) if g_out is not None else 0.0

        z = project_features(tap, heads[pos])
        mid_sq = residual_sq_norm(ctx_b, ctx_b.to_physical(z), mid_layer=True)
        l_mid = (0.5 * mid_sq / sigma2).mean()
        (g_mid,) = torch.autograd.grad(l_mid, tap.tensor, retain_graph=True)
        lhs_mid = float(g_mid.norm())

        head_norm, change = spectral_norm_estimate(
            heads[pos], tap.tensor.detach(),
            n_iter=n_power, rtol=power_rtol, seed=seed,
        )
        slack = eps_power
        if change > power_rtol:
            slack = max(slack, 10.0 * change)
            warnings.warn(
                f"power iteration at {pos!r} stopped at relative change "
                f"{change:.2e}; widening bound slack to {slack:.2%}",
                PowerIterationWarning,
            )
        half_sq = half_sq_fn_from_context(ctx_b, mid_layer=True)

        def phys_half_sq(fields: torch.Tensor) -> torch.Tensor:
            return half_sq(ctx_b.to_physical(fields))

        jr = _grad_norm(phys_half_sq, z.detach())
        rows.append(AttenuationRow(
            position=pos,
            lhs_mid=lhs_mid,
            bound_mid=head_norm * jr / sigma2,
            lhs_out=lhs_out,
            head_norm=head_norm,
            jr_norm=jr,
            eps_power=slack,
        ))
    return rows


def gradcheck_scalar(
    fn: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    n_coords: int = 100,
    step: float = 1e-5,
    seed: int = 0,
    grad_bias: float = 0.0,
) -> float:
    """Max relative error of autograd vs central differences at x.

    Checks up to n_coords randomly chosen coordinates in float64.
    grad_bias scales the analytic gradient by (1 + grad_bias) as a
    negative-control hook; keep 0 for real checks.
    """
    x = x.detach().to(torch.float64)
    xr = x.clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(fn(xr), xr)
    grad = grad * (1.0 + grad_bias)
    rng = np.random.default_rng(seed)
    n_total = x.numel()
    coords = rng.choice(n_total, size=min(n_coords, n_total), replace=False)
    flat = x.reshape(-1)
    worst = 0.0
    for c in coords:
        c = int(c)
        base = float(flat[c])
        for sign, store in ((1.0, "plus"), (-1.0, "minus")):
            flat[c] = base + sign * step
            val = float(fn(x))
            if store == "plus":
                plus = val
            else:
                minus = val
        flat[c] = base
        fd = (plus - minus) / (2.0 * step)
        an = float(grad.reshape(-1)[c])
        denom = max(abs(an), abs(fd))
        if denom < 1e-12:
            continue
        worst = max(worst, abs(an - fd) / denom)
    return worst


@dataclass(frozen=True)
class GradcheckReport:
    """Per-loss max relative autograd-vs-finite-difference errors."""

    tolerance: float
    max_rel_err: dict[str, float]

    @property
    def passed(self) -> bool:
        return all(v < self.tolerance for v in self.max_rel_err.values())

    def lines(self) -> list[str]:
        return [
            f"{name}: max rel err {err:.3e} "
            f"({'ok' if err < self.tolerance else 'FAIL'})"
            for name, err in sorted(self.max_rel_err.items())
        ]


def _gradcheck_cases(seed: int):
    """Small double-precision instances of every differentiable loss."""
    from .diffusion import data_loss, make_cosine_schedule
    from .fem import assemble_stiffness, compliance, topology_residuals
    from .fields import Grid2D
    from .residuals import (
        darcy_residual,
        poisson_residual,
        residual_quadratic_loss,
        turbulence_residual,
    )
    from .simp import cantilever_case

    rng = np.random.default_rng(seed)
    n = 10
    grid = Grid2D(n, n, h=1.0 / (n - 1))
    sigma2 = 0.37

    def t64(a):
        return torch.as_tensor(a, dtype=torch.float64)

    cases: list[tuple[str, Callable, torch.Tensor]] = []

    k = t64(np.exp(0.3 * rng.standard_normal((n, n))))
    p = t64(rng.standard_normal((n, n)))
    f_s = t64(rng.standard_normal((n, n)))
    kp = torch.stack([k, p])
    cases.append((
        "darcy_quadratic",
        lambda x: residual_quadratic_loss(
            darcy_residual(x[0], x[1], f_s, grid), sigma2
        ),
        kp,
    ))

    u = t64(rng.standard_normal((n, n)))
    rho_src = t64(rng.standard_normal((n, n)))
    cases.append((
        "poisson_quadratic",
        lambda x: residual_quadratic_loss(poisson_residual(x, rho_src, grid), sigma2),
        u.clone(),
    ))

    up = t64(rng.standard_normal((12, 8)))
    tgrid = Grid2D(12, 8, h=1.0 / 7)
    cases.append((
        "turbulence_quadratic",
        lambda x: residual_quadratic_loss(turbulence_residual(x, tgrid), sigma2),
        up.clone(),
    ))

    case = cantilever_case(8, 6, volfrac=0.4)
    sys = assemble_stiffness(
        0.5 * np.ones((6, 8)), case.f, case.fixed
    )
    rho0 = t64(0.2 + 0.6 * rng.random((6, 8)))
    u_ref = t64(rng.standard_normal(sys.ndof) * 1e-3)
    cases.append((
        "topology_residuals",
        lambda x: topology_residuals(x, u_ref, sys, 0.4).total(),
        rho0.clone(),
    ))
    cases.append((
        "compliance_adjoint",
        lambda x: compliance(x, sys),
        rho0.clone(),
    ))

    sched = make_cosine_schedule(40)
    x0 = t64(rng.standard_normal((2, 2, 6, 6)))
    x0_hat = t64(rng.standard_normal((2, 2, 6, 6)))
    tt = torch.tensor([3, 17])
    cases.append((
        "data_loss",
        lambda x: data_loss(x0, x, tt, sched),
        x0_hat.clone(),
    ))

    from .alignment import ProjectionHead, output_physics_loss
    from .tasks import TaskContext

    ctx = TaskContext(task="darcy", grid=grid, f_s=f_s)
    batch = torch.stack([
        torch.stack([k + 0.1 * t64(rng.standard_normal((n, n))), p]),
        torch.stack([k, p + 0.1 * t64(rng.standard_normal((n, n)))]),
    ])
    t2 = torch.tensor([5, 23])
    cases.append((
        "output_physics_path",
        lambda x: output_physics_loss(x, t2, sched, ctx),
        batch.clone(),
    ))

    head = ProjectionHead("bottleneck", in_channels=3, out_channels=2,
                          target_size=n, hidden=8).double()
    tap_h = t64(rng.standard_normal((2, 3, n, n)))
    s2 = torch.tensor(sigma2, dtype=torch.float64)

    def mid_loss_from_tap(hx):
        z = head(hx)
        sq = residual_sq_norm(ctx, z)
        return (0.5 * sq / s2).mean()

    cases.append(("mid_physics_tap", mid_loss_from_tap, tap_h.clone()))

    params = dict(head.named_parameters())
    w0 = params["conv1.weight"].detach()

    def mid_loss_from_head_weight(w):
        z = torch.func.functional_call(head, {**params, "conv1.weight": w}, (tap_h,))
        sq = residual_sq_norm(ctx, z)
        return (0.5 * sq / s2).mean()

    cases.append(("mid_physics_head_params", mid_loss_from_head_weight, w0.clone()))
    return cases


def gradcheck_all_losses(
    tolerance: float = 1e-4,
    n_coords: int = 100,
    step: float = 1e-5,
    seed: int = 0,
    corrupt_case: str | None = None,
) -> GradcheckReport:
    """Audit every loss's analytic gradient against central differences.

    corrupt_case names one case whose analytic gradient gets a deliberate
    bias, as a negative control that the audit can actually fail.
    """
    report: dict[str, float] = {}
    for name, fn, x in _gradcheck_cases(seed):
        bias = 1e-2 if name == corrupt_case else 0.0
        report[name] = gradcheck_scalar(
            fn, x, n_coords=n_coords, step=step, seed=seed, grad_bias=bias
        )
    return GradcheckReport(tolerance=tolerance, max_rel_err=report)
