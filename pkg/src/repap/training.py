"""Training loop, ancestral sampling, and append-only run records.

Each iteration samples a data batch and a uniform t in [1, T], forward
diffuses, runs the backbone with feature taps, combines the data loss
with output and mid-layer physics losses, clips gradients, steps Adam,
and updates the EMA. Reconstruction mode adds squared-error supervision
on observed entries; its sampler clamps those entries to forward-diffused
observations after every reverse step and exactly at the last one.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .alignment import HeadSet, TrainedModel, total_loss
from .backbones import make_backbone
from .config import (
    ExperimentConfig,
    config_from_dict,
    config_hash,
    config_to_dict,
    task_channel_counts,
)
from .diffusion import (
    CheckpointFormatError,
    EmaState,
    NoiseSchedule,
    clamp_observed,
    ema_update,
    forward_diffuse,
    load_checkpoint,
    make_cosine_schedule,
    reverse_step,
    save_checkpoint,
    schedule_from_beta,
)
from .fields import DatasetContainer, make_observation_mask, read_dataset
from .metrics import masked_l2
from .tasks import (
    TASK_CHANNELS,
    ChannelNormalizer,
    TaskContext,
    context_from_container,
    generation_residual,
    split_container,
)

DETERMINISM_ENV = "REPAP_DETERMINISTIC"

# Channel whose sparse observations drive reconstruction mode. The other
# generated channels (darcy's K) stay fully latent.
OBSERVED_CHANNEL = {
    "darcy": "p",
    "charge": "U",
    "topology": "rho",
    "turbulence": "uprime",
}

# Target number of generation-residual evaluations along a run; the actual
# cadence is rounded up to a multiple of log_every.
N_EVAL_POINTS = 20


class NaNLossError(RuntimeError):
    """Training aborted on a non-finite loss."""


def deterministic_mode() -> bool:
    """True when the deterministic-kernels environment toggle is set."""
    return os.environ.get(DETERMINISM_ENV, "") not in ("", "0")


def set_determinism(seed: int, deterministic: bool | None = None) -> None:
    """Seed the global RNGs; optionally force deterministic kernels."""
    if deterministic is None:
        deterministic = deterministic_mode()
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


def _mix(seed: int, salt: int) -> int:
    return (int(seed) * 1_000_003 + int(salt)) % 2**63


@dataclass(frozen=True)
class RunRecord:
    """One append-only log row: where the run was and what it measured."""

    config_hash: str
    iteration: int
    wall_time: float
    metrics: dict[str, float]
    checkpoint: str | None = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "config_hash": self.config_hash,
                "iteration": self.iteration,
                "wall_time": round(self.wall_time, 3),
                "metrics": self.metrics,
                "checkpoint": self.checkpoint,
            },
            sort_keys=True,
        )


def append_record(path: str | Path, record: RunRecord) -> None:
    with open(path, "a") as fh:
        fh.write(record.to_json() + "\n")


def read_records(path: str | Path) -> list[RunRecord]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(RunRecord(**json.loads(line)))
    return out


def observation_channel_mask(task: str, mask_values: np.ndarray) -> torch.Tensor:
    """[C, H, W] float mask, zero outside the task's observed channel."""
    names = TASK_CHANNELS[task]
    ci = names.index(OBSERVED_CHANNEL[task])
    m = torch.zeros((len(names),) + tuple(np.asarray(mask_values).shape))
    m[ci] = torch.from_numpy(np.asarray(mask_values, dtype=np.float32))
    return m


@torch.no_grad()
def sample_loop(
    backbone: torch.nn.Module,
    sched: NoiseSchedule,
    shape: tuple[int, ...],
    cond: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
    mean_only: bool = False,
    mask: torch.Tensor | None = None,
    observed: torch.Tensor | None = None,
) -> torch.Tensor:
    """Ancestral sampling from pure noise, x0-parameterized.

    mean_only drops the stochastic term of every reverse step (used for
    the charge task). mask/observed enable reconstruction: observed
    entries are clamped to forward-diffused observations after every
    step and exactly at the final one. mask must be zero outside the
    observed channel; observed is a model-space tensor of x's shape.
    """
    if (mask is None) != (observed is None):
        raise ValueError("mask and observed must be given together")
    x = torch.randn(shape, generator=generator)
    if mask is not None:
        eps = torch.randn(shape, generator=generator)
        x = clamp_observed(x, mask, forward_diffuse(observed, sched.T, eps, sched))
    was_training = backbone.training
    backbone.eval()
    try:
        for t in range(sched.T, 0, -1):
            tb = torch.full((shape[0],), t, dtype=torch.long)
            x0_hat, _ = backbone(x, tb, cond)
            noise = None
            if t > 1 and not mean_only:
                noise = torch.randn(shape, generator=generator)
            x = reverse_step(x, x0_hat, t, sched, noise=noise)
            if mask is not None:
                if t > 1:
                    eps = torch.randn(shape, generator=generator)
                    x_obs = forward_diffuse(observed, t - 1, eps, sched)
                else:
                    x_obs = observed
                x = clamp_observed(x, mask, x_obs)
    finally:
        backbone.train(was_training)
    return x


def _nan_skipping_mean(per_sample: torch.Tensor) -> float:
    vals = per_sample[torch.isfinite(per_sample)]
    return float(vals.mean()) if vals.numel() else math.nan


def evaluate_generation(
    backbone: torch.nn.Module,
    ema: EmaState | None,
    sched: NoiseSchedule,
    cfg: ExperimentConfig,
    eval_x0: torch.Tensor,
    eval_cond: torch.Tensor | None,
    eval_ctx: TaskContext,
    obs_mask: torch.Tensor | None,
) -> dict[str, float]:
    """Sample with averaged weights and report generation residuals.

    The sampling noise is a fixed function of the config seed, so curves
    across checkpoints (and across arms sharing a seed) are paired.
    """
    g = torch.Generator().manual_seed(_mix(cfg.seed, 0xE7A1))
    backup = None
    if ema is not None:
        backup = {k: v.detach().clone() for k, v in backbone.state_dict().items()}
        ema.copy_to(backbone)
    try:
        kwargs = {}
        if cfg.mode == "reconstruction":
            kwargs = {"mask": obs_mask, "observed": eval_x0}
        x = sample_loop(
            backbone, sched, tuple(eval_x0.shape), cond=eval_cond,
            generator=g, mean_only=(cfg.task == "charge"), **kwargs,
        )
    finally:
        if backup is not None:
            backbone.load_state_dict(backup)
    phys = eval_ctx.to_physical(x)
    out = {"r_mae_gen": _nan_skipping_mean(generation_residual(eval_ctx, phys))}
    if cfg.mode == "reconstruction":
        ci = TASK_CHANNELS[cfg.task].index(OBSERVED_CHANNEL[cfg.task])
        ref = eval_ctx.to_physical(eval_x0)
        errs = [
            masked_l2(phys[b, ci], ref[b, ci], obs_mask[ci])
            for b in range(phys.shape[0])
        ]
        out["recon_l2"] = float(np.mean(errs))
    return out


def _slice_container(data: DatasetContainer, rows: slice) -> DatasetContainer:
    return DatasetContainer(
        task=data.task,
        layout=data.layout,
        values=np.array(data.values[rows]),
        seed_info=data.seed_info,
    )


def _dump_nan(out_dir: Path, iteration: int, parts: dict, cfg: ExperimentConfig) -> Path:
    path = out_dir / "nan_dump.json"
    payload = {
        "iteration": iteration,
        "parts": {
            k: (v if isinstance(v, float) and math.isfinite(v) else repr(v))
            for k, v in parts.items()
        },
        "config_hash": config_hash(cfg),
        "config": config_to_dict(cfg),
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path


@dataclass
class TrainResult:
    """Everything a caller needs after a run: weights, schedule, records."""

    model: TrainedModel
    ema: EmaState | None
    sched: NoiseSchedule
    normalizer: ChannelNormalizer
    records: list[RunRecord]
    checkpoint_path: Path
    out_dir: Path


def train(
    cfg: ExperimentConfig,
    data: DatasetContainer | None = None,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
) -> TrainResult:
    """Run the full loop and leave ckpt_final.pt plus records.jsonl behind.

    Training uses the first n_train rows; generation evaluations condition
    on (and compare against) the last eval_samples rows. Normalization
    statistics come from the training rows only and are frozen into every
    checkpoint.
    """
    if data is None:
        if not cfg.dataset:
            raise ValueError("config names no dataset and none was passed")
        data = read_dataset(cfg.dataset)
    if data.task != cfg.task:
        raise ValueError(
            f"dataset task {data.task!r} does not match config task {cfg.task!r}"
        )
    out = Path(out_dir) if out_dir is not None else Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    set_determinism(cfg.seed)
    n_total = data.n_samples
    n_train = min(cfg.n_train, n_total)
    n_eval = min(cfg.eval_samples, n_total)
    train_data = _slice_container(data, slice(0, n_train))
    eval_data = _slice_container(data, slice(n_total - n_eval, n_total))

    normalizer = ChannelNormalizer.from_values(train_data.values)
    x0, cond = split_container(train_data, normalizer)
    ctx = context_from_container(train_data, normalizer)
    eval_x0, eval_cond = split_container(eval_data, normalizer)
    eval_ctx = context_from_container(eval_data, normalizer)

    sched = make_cosine_schedule(cfg.schedule.T, s=cfg.schedule.s)
    backbone = make_backbone(cfg.backbone)
    heads = None
    if cfg.alignment.positions:
        probe_x = torch.cat([x0[:1], cond[:1]], dim=1) if cond is not None else x0[:1]
        heads = HeadSet.for_backbone(
            backbone, cfg.alignment,
            out_channels=len(TASK_CHANNELS[cfg.task]),
            target_size=tuple(x0.shape[-2:]),
            probe=(probe_x, torch.ones(1)),
        )
    model = TrainedModel(backbone=backbone, heads=heads)
    opt = torch.optim.Adam(
        model.parameters(),
        lr=cfg.optimizer.lr,
        betas=(cfg.optimizer.beta1, cfg.optimizer.beta2),
    )
    ema = (
        EmaState.from_module(backbone, decay=cfg.ema_decay)
        if cfg.ema_decay > 0 else None
    )

    obs_mask = None
    if cfg.mode == "reconstruction":
        grid_mask = make_observation_mask(
            data.grid, cfg.observed_ratio, seed=cfg.seed
        )
        obs_mask = observation_channel_mask(cfg.task, grid_mask.values)

    start = 0
    if resume is not None:
        blob = load_checkpoint(resume)
        backbone.load_state_dict(blob["model"])
        if heads is not None and blob.get("heads") is not None:
            heads.load_state_dict(blob["heads"])
        if ema is not None and blob.get("ema"):
            ema = EmaState(decay=blob["ema"]["decay"], shadow=blob["ema"]["shadow"])
        if blob.get("optimizer") is not None:
            opt.load_state_dict(blob["optimizer"])
        start = int(blob["step"])

    hash_ = config_hash(cfg)
    records: list[RunRecord] = []
    records_path = out / "records.jsonl"
    norm_stats = {
        "mean": normalizer.mean.tolist(),
        "std": normalizer.std.tolist(),
        "layout": list(data.layout),
    }
    eval_every = (
        math.ceil(max(1, cfg.iterations // N_EVAL_POINTS) / cfg.log_every)
        * cfg.log_every
    )
    g = torch.Generator().manual_seed(_mix(cfg.seed, start))
    t_start = time.monotonic()

    def emit(iteration: int, metrics: dict[str, float], ckpt: str | None = None):
        rec = RunRecord(
            config_hash=hash_, iteration=iteration,
            wall_time=time.monotonic() - t_start,
            metrics=metrics, checkpoint=ckpt,
        )
        records.append(rec)
        append_record(records_path, rec)

    for it in range(start + 1, cfg.iterations + 1):
        idx = torch.randint(0, n_train, (cfg.optimizer.batch_size,), generator=g)
        x0_b = x0[idx]
        cond_b = cond[idx] if cond is not None else None
        ctx_b = ctx.for_batch(idx.tolist())
        t = torch.randint(1, sched.T + 1, (x0_b.shape[0],), generator=g)
        eps = torch.randn(x0_b.shape, generator=g)
        x_t = forward_diffuse(x0_b, t, eps, sched)

        x0_hat, taps = backbone(x_t, t, cond_b)
        loss, parts = total_loss(
            x0_b, x0_hat, taps, heads, t, sched, cfg.alignment, ctx_b
        )
        if obs_mask is not None:
            diff = (x0_hat - x0_b) * obs_mask
            obs_loss = diff.reshape(diff.shape[0], -1).pow(2).sum(dim=1).mean()
            parts["observed"] = float(obs_loss.detach())
            loss = loss + obs_loss
            parts["total"] = float(loss.detach())
        if not torch.isfinite(loss):
            dump = _dump_nan(out, it, parts, cfg)
            raise NaNLossError(f"non-finite loss at iteration {it}; see {dump}")

        opt.zero_grad(set_to_none=True)
        loss.backward()
        grad_norm = torch.nn.utils.clip_grad_norm_(
            list(model.parameters()), cfg.optimizer.grad_clip
        )
        opt.step()
        if ema is not None:
            ema_update(ema, backbone)

        if it % cfg.log_every == 0 or it == cfg.iterations:
            metrics = dict(parts)
            metrics["grad_norm"] = float(grad_norm)
            if it % eval_every == 0 or it == cfg.iterations:
                metrics.update(evaluate_generation(
                    backbone, ema, sched, cfg,
                    eval_x0, eval_cond, eval_ctx, obs_mask,
                ))
            emit(it, metrics)
        if cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            save_checkpoint(
                out / "ckpt_latest.pt", backbone, ema, sched, it,
                heads=heads, optimizer=opt,
                config=config_to_dict(cfg), norm_stats=norm_stats,
            )

    final = out / "ckpt_final.pt"
    save_checkpoint(
        final, backbone, ema, sched, cfg.iterations,
        heads=heads, optimizer=opt,
        config=config_to_dict(cfg), norm_stats=norm_stats,
    )
    if records:
        last = records[-1]
        records[-1] = RunRecord(
            config_hash=last.config_hash, iteration=last.iteration,
            wall_time=last.wall_time, metrics=last.metrics,
            checkpoint=str(final),
        )
        append_record(records_path, records[-1])
    return TrainResult(
        model=model, ema=ema, sched=sched, normalizer=normalizer,
        records=records, checkpoint_path=final, out_dir=out,
    )


@dataclass
class RestoredRun:
    """A checkpoint rebuilt into live objects."""

    config: ExperimentConfig
    model: TrainedModel
    ema: EmaState | None
    sched: NoiseSchedule
    normalizer: ChannelNormalizer | None
    layout: tuple[str, ...] | None
    step: int


def load_trained(path: str | Path) -> RestoredRun:
    """Rebuild backbone, heads, EMA, schedule, and normalizer from a file."""
    blob = load_checkpoint(path)
    if blob.get("config") is None:
        raise CheckpointFormatError("checkpoint carries no config to rebuild from")
    cfg = config_from_dict(blob["config"])
    backbone = make_backbone(cfg.backbone)
    backbone.load_state_dict(blob["model"])
    sched = schedule_from_beta(blob["schedule"]["beta"])
    heads = None
    if blob.get("heads") is not None and cfg.alignment.positions:
        in_ch, _ = task_channel_counts(cfg.task)
        size = cfg.backbone.sample_size
        heads = HeadSet.for_backbone(
            backbone, cfg.alignment,
            out_channels=len(TASK_CHANNELS[cfg.task]),
            target_size=(size, size),
            probe=(torch.zeros(1, in_ch, size, size), torch.ones(1)),
        )
        heads.load_state_dict(blob["heads"])
    ema = None
    if blob.get("ema"):
        ema = EmaState(decay=blob["ema"]["decay"], shadow=blob["ema"]["shadow"])
    normalizer, layout = None, None
    if blob.get("norm_stats"):
        ns = blob["norm_stats"]
        normalizer = ChannelNormalizer(
            mean=torch.tensor(ns["mean"], dtype=torch.float64),
            std=torch.tensor(ns["std"], dtype=torch.float64),
        )
        layout = tuple(ns["layout"])
    return RestoredRun(
        config=cfg, model=TrainedModel(backbone=backbone, heads=heads),
        ema=ema, sched=sched, normalizer=normalizer, layout=layout,
        step=int(blob["step"]),
    )
