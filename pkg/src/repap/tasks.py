"""Task contexts: residual routing, conditioning payloads, and the affine
channel normalization between model space and physical units.

Residuals are always evaluated in physical units; datasets store physical
values and the normalizer is a training-time detail recorded in
checkpoints.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .fem import (
    DensityRangeWarning,
    SingularSystemError,
    StiffnessSystem,
    assemble_stiffness,
    coarsen_density,
    equilibrium_vector,
    solve_system,
    topology_residuals,
    volume_bound_vector,
)
from .fields import DatasetContainer, Grid2D
from .residuals import darcy_residual, poisson_residual, turbulence_residual

TASKS = ("darcy", "charge", "topology", "turbulence")

# Physical channels decoded by projection heads / predicted by the model.
TASK_CHANNELS = {
    "darcy": ("K", "p"),
    "charge": ("U",),
    "topology": ("rho",),
    "turbulence": ("uprime",),
}

# Channels concatenated as conditioning input (never predicted).
TASK_CONDITIONING = {
    "darcy": (),
    "charge": ("rho",),
    "topology": ("load_x", "load_y", "bc_mask"),
    "turbulence": (),
}


@dataclass(frozen=True)
class ChannelNormalizer:
    """Per-channel affine map between physical units and model space."""

    mean: torch.Tensor
    std: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValueError("normalizer stats must be matching 1-D tensors")
        if torch.any(self.std <= 0):
            raise ValueError("normalizer std must be positive")

    @classmethod
    def from_values(cls, values: np.ndarray | torch.Tensor) -> "ChannelNormalizer":
        """Dataset statistics over [N, C, H, W]; constant channels get std 1."""
        v = torch.as_tensor(np.array(values, dtype=np.float64))
        mean = v.mean(dim=(0, 2, 3))
        std = v.std(dim=(0, 2, 3))
        std = torch.where(std < 1e-12, torch.ones_like(std), std)
        return cls(mean=mean, std=std)

    def _shaped(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        view = (1, -1) + (1,) * (x.ndim - 2) if x.ndim >= 2 else (-1,)
        return (
            self.mean.to(x.dtype).reshape(view),
            self.std.to(x.dtype).reshape(view),
        )

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        m, s = self._shaped(x)
        return (x - m) / s

    def denormalize(self, x: torch.Tensor) -> torch.Tensor:
        m, s = self._shaped(x)
        return x * s + m

    def select(self, idx: list[int]) -> "ChannelNormalizer":
        return ChannelNormalizer(mean=self.mean[idx], std=self.std[idx])


@dataclass
class TaskContext:
    """Everything a residual evaluation needs beyond the decoded fields.

    Fields are physical-unit tensors; `normalizer` (when set) maps decoded
    model-space channels back to physical units before residuals.
    """

    task: str
    grid: Grid2D
    normalizer: ChannelNormalizer | None = None
    f_s: torch.Tensor | None = None          # darcy source [H, W]
    rho_cond: torch.Tensor | None = None     # charge density [B, H, W]
    systems: tuple[StiffnessSystem, ...] = ()
    u_ref: torch.Tensor | None = None        # topology reference u [B, ndof]
    v_target: torch.Tensor | None = None     # topology budgets [B]
    lambda_vol: float = 1.0
    lambda_bound: float = 1.0
    smooth_weight: float = 1.0
    bc_weight: float = 1.0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")

    @property
    def n_channels(self) -> int:
        return len(TASK_CHANNELS[self.task])

    def to_physical(self, fields: torch.Tensor) -> torch.Tensor:
        if self.normalizer is None:
            return fields
        return self.normalizer.denormalize(fields)

    def for_batch(self, indices) -> "TaskContext":
        """Restrict per-sample payloads to the given batch indices."""
        idx = list(int(i) for i in indices)
        return replace(
            self,
            rho_cond=self.rho_cond[idx] if self.rho_cond is not None else None,
            systems=tuple(self.systems[i] for i in idx) if self.systems else (),
            u_ref=self.u_ref[idx] if self.u_ref is not None else None,
            v_target=self.v_target[idx] if self.v_target is not None else None,
        )


def _topology_samples(ctx: TaskContext, rho_nodes: torch.Tensor):
    """Yield (rho_elements, system, v_target) per sample.

    rho_nodes is [B, P, P] on the node grid; the trailing replicated
    row/column is cropped to recover the element grid, and mismatched
    resolutions are pooled down to the system's element grid.
    """
    if not ctx.systems:
        raise ValueError("topology context carries no stiffness systems")
    rho_e = rho_nodes[..., :-1, :-1]
    for b in range(rho_e.shape[0]):
        sys = ctx.systems[b]
        rho_b = rho_e[b]
        if rho_b.shape[-2] != sys.nely or rho_b.shape[-1] != sys.nelx:
            rho_b = coarsen_density(
                rho_b[None], max_elems=max(sys.nely, sys.nelx)
            )[0]
        vt = float(ctx.v_target[b]) if ctx.v_target is not None else 1.0
        yield rho_b, sys, vt


def _topology_sq(
    ctx: TaskContext, rho_nodes: torch.Tensor, include_equilibrium: bool
) -> torch.Tensor:
    """Per-sample squared residual norm for decoded density fields.

    Equilibrium uses the batch's reference displacements (see decisions):
    r_eq measures how far the decoded structure is from supporting the
    reference loads, which stays informative and differentiable where a
    self-solve would be identically zero.
    """
    out = []
    for b, (rho_b, sys, vt) in enumerate(_topology_samples(ctx, rho_nodes)):
        vec = volume_bound_vector(rho_b, vt, ctx.lambda_vol, ctx.lambda_bound)
        sq = (vec**2).sum()
        if include_equilibrium:
            if ctx.u_ref is None:
                raise ValueError(
                    "equilibrium residual needs reference displacements"
                )
            r = equilibrium_vector(rho_b, ctx.u_ref[b].to(rho_b.dtype), sys)
            sq = sq + (r**2).sum()
        out.append(sq)
    return torch.stack(out)


def residual_sq_norm(
    ctx: TaskContext, fields: torch.Tensor, mid_layer: bool = False
) -> torch.Tensor:
    """Per-sample squared residual norm ||R(fields)||^2, shape [B].

    fields is [B, C, H, W] in physical units with the task channel layout.
    The mid-layer variant differs only for topology, where the equilibrium
    block is deferred to the output level.
    """
    if fields.ndim != 4 or fields.shape[1] != ctx.n_channels:
        raise ValueError(
            f"expected [B, {ctx.n_channels}, H, W] fields for {ctx.task}"
        )
    if ctx.task == "darcy":
        if ctx.f_s is None:
            raise ValueError("darcy context carries no source term")
        bundle = darcy_residual(
            fields[:, 0], fields[:, 1], ctx.f_s.to(fields.dtype), ctx.grid
        )
        return bundle.sq_norm()
    if ctx.task == "charge":
        if ctx.rho_cond is None:
            raise ValueError("charge context carries no conditioning density")
        bundle = poisson_residual(
            fields[:, 0], ctx.rho_cond.to(fields.dtype), ctx.grid
        )
        return bundle.sq_norm()
    if ctx.task == "turbulence":
        bundle = turbulence_residual(
            fields[:, 0], ctx.grid,
            smooth_weight=ctx.smooth_weight, bc_weight=ctx.bc_weight,
        )
        return bundle.sq_norm()
    return _topology_sq(ctx, fields[:, 0], include_equilibrium=not mid_layer)


def residual_abs_mean(ctx: TaskContext, fields: torch.Tensor) -> torch.Tensor:
    """Per-sample mean absolute residual, shape [B].

    For field tasks this is ||R||_1 / d_r over all residual entries. For
    topology it is the scalar sum r_eq + lambda_vol r_vol + lambda_bound
    r_bound, matching how that task's residual is reported.
    """
    if fields.ndim != 4 or fields.shape[1] != ctx.n_channels:
        raise ValueError(
            f"expected [B, {ctx.n_channels}, H, W] fields for {ctx.task}"
        )
    if ctx.task == "darcy":
        if ctx.f_s is None:
            raise ValueError("darcy context carries no source term")
        bundle = darcy_residual(
            fields[:, 0], fields[:, 1], ctx.f_s.to(fields.dtype), ctx.grid
        )
        return bundle.abs_mean()
    if ctx.task == "charge":
        if ctx.rho_cond is None:
            raise ValueError("charge context carries no conditioning density")
        bundle = poisson_residual(
            fields[:, 0], ctx.rho_cond.to(fields.dtype), ctx.grid
        )
        return bundle.abs_mean()
    if ctx.task == "turbulence":
        bundle = turbulence_residual(
            fields[:, 0], ctx.grid,
            smooth_weight=ctx.smooth_weight, bc_weight=ctx.bc_weight,
        )
        return bundle.abs_mean()
    if ctx.u_ref is None:
        raise ValueError("equilibrium residual needs reference displacements")
    out = []
    for b, (rho_b, sys, vt) in enumerate(_topology_samples(ctx, fields[:, 0])):
        res = topology_residuals(
            rho_b, ctx.u_ref[b].to(rho_b.dtype), sys, vt,
            ctx.lambda_vol, ctx.lambda_bound,
        )
        out.append(res.total())
    return torch.stack(out)


def generation_residual(ctx: TaskContext, fields: torch.Tensor) -> torch.Tensor:
    """Per-sample r_mae for model-generated fields, shape [B].

    Identical to residual_abs_mean except for topology, where the
    equilibrium displacements come from a fresh solve on each generated
    density: reference displacements belong to dataset structures, not
    generated ones. Singular structures yield NaN entries so callers can
    exclude them.
    """
    if ctx.task != "topology":
        return residual_abs_mean(ctx, fields)
    urefs = []
    with warnings.catch_warnings():
        # raw decodes routinely leave [0, 1]; the assembly clamp is expected
        warnings.simplefilter("ignore", DensityRangeWarning)
        for rho_b, sys, _ in _topology_samples(ctx, fields[:, 0]):
            hat = assemble_stiffness(
                rho_b.detach().double().numpy(), sys.f, sys.fixed
            )
            try:
                u = solve_system(hat)
            except SingularSystemError:
                u = np.full(sys.ndof, np.nan)
            urefs.append(u)
    solved = replace(ctx, u_ref=torch.from_numpy(np.stack(urefs)))
    return residual_abs_mean(solved, fields)


def _channel_indices(data: DatasetContainer, names: tuple[str, ...]) -> list[int]:
    return [data.channel_index(name) for name in names]


def split_container(
    data: DatasetContainer, normalizer: ChannelNormalizer | None = None
) -> tuple[torch.Tensor, torch.Tensor | None]:
    """Normalized (generated, conditioning) tensors from a container.

    normalizer covers the full container channel layout (fit from the data
    when omitted). Conditioning is None for unconditional tasks.
    """
    if normalizer is None:
        normalizer = ChannelNormalizer.from_values(data.values)
    values = torch.from_numpy(np.array(data.values, dtype=np.float32))
    gen_idx = _channel_indices(data, TASK_CHANNELS[data.task])
    x0 = normalizer.select(gen_idx).normalize(values[:, gen_idx])
    cond_names = TASK_CONDITIONING[data.task]
    if not cond_names:
        return x0, None
    cond_idx = _channel_indices(data, cond_names)
    cond = normalizer.select(cond_idx).normalize(values[:, cond_idx])
    return x0, cond


def context_from_container(
    data: DatasetContainer, normalizer: ChannelNormalizer | None = None
) -> TaskContext:
    """Build the task context implied by a dataset container.

    normalizer covers the full container channel layout; the context keeps
    only the generated-channel slice so decoded fields map back to
    physical units.
    """
    from . import datagen, simp  # deferred: avoids import cycle at module load

    if normalizer is None:
        normalizer = ChannelNormalizer.from_values(data.values)
    if normalizer.mean.numel() != len(data.layout):
        raise ValueError(
            f"normalizer covers {normalizer.mean.numel()} channels, "
            f"container has {len(data.layout)}"
        )
    normalizer = normalizer.select(_channel_indices(data, TASK_CHANNELS[data.task]))
    grid = data.grid
    if data.task == "darcy":
        f_s = torch.from_numpy(datagen.darcy_source(grid))
        return TaskContext(task="darcy", grid=grid, normalizer=normalizer, f_s=f_s)
    if data.task == "charge":
        rho = torch.from_numpy(
            np.asarray(data.values[:, data.channel_index("rho")], dtype=np.float64)
        )
        return TaskContext(
            task="charge", grid=grid, normalizer=normalizer, rho_cond=rho
        )
    if data.task == "turbulence":
        return TaskContext(task="turbulence", grid=grid, normalizer=normalizer)
    if data.task == "topology":
        from .fem import assemble_stiffness

        systems, urefs, vts = [], [], []
        for i in range(data.values.shape[0]):
            rho_i, case, u_i = simp.sample_to_system(data.sample(i))
            systems.append(assemble_stiffness(rho_i, case.f, case.fixed))
            urefs.append(u_i)
            vts.append(case.volfrac)
        return TaskContext(
            task="topology", grid=grid, normalizer=normalizer,
            systems=tuple(systems),
            u_ref=torch.from_numpy(np.stack(urefs)),
            v_target=torch.tensor(vts, dtype=torch.float64),
        )
    raise ValueError(f"unknown task {data.task!r}")
