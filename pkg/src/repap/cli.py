"""Command-line surface: data generation, training, sampling, evaluation,
ablation sweeps, and model diagnostics.

Exit codes: 0 success, 1 runtime failure (diverged training, failed
generation), 2 usage error (bad arguments, unreadable inputs, mismatched
architectures).
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .alignment import discard_heads
from .config import (
    ConfigError,
    ExperimentConfig,
    config_hash,
    config_to_dict,
    effective_config_text,
    load_config,
    with_seed,
)
from .datagen import (
    generate_charge_dataset,
    generate_darcy_dataset,
    generate_turbulence_fixture,
)
from .diffusion import CheckpointFormatError
from .fem import SingularSystemError, assemble_stiffness, solve_system
from .fields import (
    ContainerCorruptionError,
    ContainerFormatError,
    DatasetContainer,
    make_observation_mask,
    read_dataset,
    write_dataset,
)
from .metrics import (
    charge_phys_loss,
    data_mse,
    masked_l2,
    mean_compliance_error,
    psnr,
    volume_fraction_error,
)
from .simp import generate_topology_fixtures
from .tasks import (
    TASK_CHANNELS,
    TASK_CONDITIONING,
    TASKS,
    context_from_container,
    generation_residual,
    residual_abs_mean,
    split_container,
)
from .training import (
    OBSERVED_CHANNEL,
    NaNLossError,
    observation_channel_mask,
    sample_loop,
    load_trained,
    read_records,
    set_determinism,
    train,
)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

_USAGE_ERRORS = (
    ConfigError,
    ContainerFormatError,
    ContainerCorruptionError,
    CheckpointFormatError,
    FileNotFoundError,
    ValueError,
)

DEFAULT_GRID = {"darcy": 64, "charge": 64, "topology": 16, "turbulence": 128}


def _print(msg: str) -> None:
    print(msg, flush=True)


# ---------------------------------------------------------------------------
# gen-data


def _generate(task: str, n: int, grid: int, grid_y: int | None, seed: int):
    if task == "darcy":
        return generate_darcy_dataset(n, n=grid, seed=seed)
    if task == "charge":
        return generate_charge_dataset(n, n=grid, seed=seed)
    if task == "turbulence":
        return generate_turbulence_fixture(
            n, n_x=grid, n_y=grid_y if grid_y else grid, seed=seed
        )
    return generate_topology_fixtures(grid, n, seed=seed)


def cmd_gen_data(args) -> int:
    task = args.task
    grid = args.grid
    n = args.n
    if args.config:
        cfg = load_config(args.config)
        task = task or cfg.task
        if grid is None:
            size = cfg.backbone.sample_size
            grid = size - 1 if cfg.task == "topology" else size
        if n is None:
            n = cfg.n_train + cfg.eval_samples
    if task is None:
        _print("gen-data needs --task or --config")
        return EXIT_USAGE
    if grid is None:
        grid = DEFAULT_GRID[task]
    if n is None:
        n = 64
    data = _generate(task, n, grid, args.grid_y, args.seed)
    out = Path(args.out or f"{task}.rpap")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(data, out)
    ctx = context_from_container(data)
    per = residual_abs_mean(
        ctx, torch.from_numpy(np.array(
            data.values[:, [data.channel_index(c) for c in TASK_CHANNELS[task]]],
            dtype=np.float64,
        ))
    )
    _print(f"wrote {data.n_samples} {task} samples to {out}")
    _print(
        f"residual self-check: mean {float(per.mean()):.3e} "
        f"max {float(per.max()):.3e}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _load_run_config(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("this command needs --config")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = with_seed(cfg, args.seed)
    if args.out:
        cfg = replace(cfg, out_dir=str(args.out))
    return cfg


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    if args.print_effective_config:
        _print(effective_config_text(cfg).rstrip())
        return EXIT_OK
    data = read_dataset(args.data) if args.data else None
    result = train(cfg, data=data, resume=args.resume)
    last = result.records[-1].metrics if result.records else {}
    _print(f"finished {cfg.iterations} iterations; checkpoint {result.checkpoint_path}")
    if "r_mae_gen" in last:
        _print(f"final generation residual: {last['r_mae_gen']:.4e}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sample


def _conditioning_from(data: DatasetContainer, restored, n: int):
    """Normalized conditioning rows plus their physical-unit channels."""
    cond_names = TASK_CONDITIONING[data.task]
    if not cond_names:
        return None, None
    if data.n_samples < n:
        raise ValueError(
            f"need {n} conditioning rows, dataset has {data.n_samples}"
        )
    sub = DatasetContainer(
        task=data.task, layout=data.layout,
        values=np.array(data.values[:n]), seed_info=data.seed_info,
    )
    _, cond = split_container(sub, restored.normalizer)
    return sub, cond


def _samples_to_container(
    task: str,
    phys: torch.Tensor,
    source: DatasetContainer | None,
    seed_info: str,
) -> DatasetContainer:
    """Physical-unit generated fields as a container, conditioning included.

    Topology rows are completed with a displacement solve on the generated
    density so the stored tuple is self-consistent; singular structures get
    NaN displacement channels.
    """
    gen = phys.detach().cpu().numpy()
    if task in ("darcy", "turbulence"):
        layout = TASK_CHANNELS[task]
        values = gen
    elif task == "charge":
        layout = ("rho", "U")
        rho = np.array(source.values[:, [source.channel_index("rho")]])
        values = np.concatenate([rho[: gen.shape[0]], gen], axis=1)
    else:
        from .simp import pack_sample, sample_to_system

        layout = source.layout
        rows = []
        for i in range(gen.shape[0]):
            _, case, _ = sample_to_system(source.sample(i))
            rho_hat = gen[i, 0].astype(np.float64)[: case.nely, : case.nelx]
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                sys = assemble_stiffness(rho_hat, case.f, case.fixed)
            try:
                u = solve_system(sys)
                c_hat = float(case.f @ u)
            except SingularSystemError:
                u = np.full(case.ndof, np.nan)
                c_hat = float("nan")
            rows.append(pack_sample(rho_hat, case, u, c_hat))
        values = np.stack(rows)
    return DatasetContainer(
        task=task, layout=layout, values=values.astype(np.float32),
        seed_info=seed_info,
    )


def _sample_model(restored, n: int, seed: int, data: DatasetContainer | None):
    """Draw n samples with heads discarded; returns (model-space, cond source)."""
    cfg = restored.config
    model = discard_heads(restored.model)
    if restored.ema is not None:
        restored.ema.copy_to(model.backbone)
    needs_data = bool(TASK_CONDITIONING[cfg.task]) or cfg.mode == "reconstruction"
    if needs_data and data is None:
        raise ValueError(
            f"task {cfg.task!r} in mode {cfg.mode!r} needs --data for "
            "conditioning/observations"
        )
    source, cond = (None, None)
    if data is not None:
        if data.task != cfg.task:
            raise ValueError(
                f"dataset task {data.task!r} does not match checkpoint {cfg.task!r}"
            )
        source, cond = _conditioning_from(data, restored, n)
    shape = _sample_shape(cfg, n, data)
    kwargs = {}
    if cfg.mode == "reconstruction":
        if data is None or data.n_samples < n:
            raise ValueError("reconstruction sampling needs --data with >= n rows")
        grid_mask = make_observation_mask(data.grid, cfg.observed_ratio, seed=cfg.seed)
        mask = observation_channel_mask(cfg.task, grid_mask.values)
        sub = DatasetContainer(
            task=data.task, layout=data.layout,
            values=np.array(data.values[:n]), seed_info=data.seed_info,
        )
        observed, _ = split_container(sub, restored.normalizer)
        kwargs = {"mask": mask, "observed": observed}
        source = sub
    g = torch.Generator().manual_seed(seed)
    x = sample_loop(
        model.backbone, restored.sched, shape, cond=cond, generator=g,
        mean_only=(cfg.task == "charge"), **kwargs,
    )
    return x, source


def _sample_shape(cfg, n: int, data: DatasetContainer | None):
    if data is not None:
        hw = (data.values.shape[2], data.values.shape[3])
    else:
        hw = (cfg.backbone.sample_size, cfg.backbone.sample_size)
    return (n, len(TASK_CHANNELS[cfg.task]), *hw)


def _generated_normalizer(restored):
    idx = [restored.layout.index(c) for c in TASK_CHANNELS[restored.config.task]]
    return restored.normalizer.select(idx)


def cmd_sample(args) -> int:
    restored = load_trained(args.ckpt)
    cfg = restored.config
    seed = args.seed if args.seed is not None else cfg.seed
    set_determinism(seed)
    data = read_dataset(args.data) if args.data else None
    x, source = _sample_model(restored, args.n, seed, data)
    phys = _generated_normalizer(restored).denormalize(x)

    out = Path(args.out or "samples")
    out.mkdir(parents=True, exist_ok=True)
    container = _samples_to_container(
        cfg.task, phys, source,
        seed_info=f"sampled seed={seed} ckpt_step={restored.step}",
    )
    sample_path = out / "samples.rpap"
    write_dataset(container, sample_path)

    eval_src = source if source is not None else container
    ctx = context_from_container(eval_src)
    per = generation_residual(ctx, phys.double())
    finite = per[torch.isfinite(per)]
    record = {
        "task": cfg.task,
        "n": int(x.shape[0]),
        "seed": seed,
        "r_mae_gen_mean": float(finite.mean()) if finite.numel() else None,
        "r_mae_gen_max": float(finite.max()) if finite.numel() else None,
        "excluded": int(per.numel() - finite.numel()),
    }
    (out / "sample_metrics.json").write_text(json.dumps(record, indent=2, sort_keys=True))
    _print(f"wrote {x.shape[0]} samples to {sample_path}")
    _print(json.dumps(record, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    restored = load_trained(args.ckpt)
    cfg = restored.config
    seed = args.seed if args.seed is not None else cfg.seed
    set_determinism(seed)
    if not args.data:
        raise ValueError("eval needs --data with reference samples")
    data = read_dataset(args.data)
    if data.task != cfg.task:
        raise ValueError(
            f"dataset task {data.task!r} does not match checkpoint {cfg.task!r}"
        )
    if tuple(restored.layout) != tuple(data.layout):
        raise ValueError("dataset channel layout does not match checkpoint")
    n = min(args.n or cfg.eval_samples, data.n_samples)

    x, source = _sample_model(restored, n, seed, data)
    sub = source if source is not None else DatasetContainer(
        task=data.task, layout=data.layout,
        values=np.array(data.values[:n]), seed_info=data.seed_info,
    )
    ctx = context_from_container(sub, restored.normalizer)
    phys = ctx.to_physical(x).double()
    gen_idx = [sub.channel_index(c) for c in TASK_CHANNELS[cfg.task]]
    ref_phys = torch.from_numpy(np.array(sub.values[:, gen_idx], dtype=np.float64))

    per = generation_residual(ctx, phys)
    finite = per[torch.isfinite(per)]
    metrics: dict[str, float | int | None] = {
        "task": cfg.task,
        "mode": cfg.mode,
        "n": n,
        "seed": seed,
        "config_hash": config_hash(cfg),
        "r_mae_gen": float(finite.mean()) if finite.numel() else None,
        "data_loss": data_mse(phys, ref_phys),
    }
    if cfg.task == "charge":
        metrics["charge_phys_loss"] = charge_phys_loss(
            phys[:, 0], ctx.rho_cond, ctx.grid
        )
    if cfg.task == "topology":
        rho_e = phys[:, 0, :-1, :-1]
        c_opts = [
            float(sub.values[b, sub.channel_index("c_opt")].ravel()[0])
            for b in range(n)
        ]
        try:
            metrics["ce_percent"] = mean_compliance_error(
                [rho_e[b] for b in range(n)], list(ctx.systems), c_opts
            )
        except ValueError:
            metrics["ce_percent"] = None  # every sample was singular
        vfe = [
            volume_fraction_error(rho_e[b], float(ctx.v_target[b]))
            for b in range(n)
        ]
        metrics["vfe_percent"] = float(np.mean(vfe))
    ci = TASK_CHANNELS[cfg.task].index(OBSERVED_CHANNEL[cfg.task])
    metrics["psnr"] = psnr(phys[:, ci], ref_phys[:, ci])
    if cfg.mode == "reconstruction":
        grid_mask = make_observation_mask(data.grid, cfg.observed_ratio, seed=cfg.seed)
        m = torch.from_numpy(grid_mask.values.astype(np.float64))
        errs = [
            masked_l2(phys[b, ci], ref_phys[b, ci], m) for b in range(n)
        ]
        metrics["masked_l2"] = float(np.mean(errs))

    out = Path(args.out or "eval")
    out.mkdir(parents=True, exist_ok=True)
    payload = json.dumps(metrics, indent=2, sort_keys=True)
    (out / "eval.json").write_text(payload)
    _print(payload)
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablate

ABLATION_VALUES = {
    "positions": ("encoder", "bottleneck", "decoder", "output"),
    "c_mid": (0.001, 0.005, 0.01, 0.05, 0.1, 0.5),
    "head_dim": (32, 64, 128, 256),
    "dit_blocks": (2, 4, 6),
}


def _position_label_to_cfg(cfg: ExperimentConfig, label: str) -> ExperimentConfig:
    """Map a coarse position label onto this backbone's tap names.

    'output' means no intermediate heads: the physics loss acts on the
    output alone.
    """
    if label == "output":
        return replace(
            cfg, alignment=replace(cfg.alignment, positions=(), c_mid=0.0)
        )
    if label == "bottleneck":
        pos = "bottleneck"
    else:
        if cfg.backbone.kind != "unet":
            raise ConfigError(
                f"position label {label!r} applies to U-Net backbones"
            )
        mid_stage = len(cfg.backbone.mults) // 2
        pos = f"{label}_{mid_stage}"
    return replace(cfg, alignment=replace(cfg.alignment, positions=(pos,)))


def _ablation_cell_config(
    cfg: ExperimentConfig, axis: str, value
) -> ExperimentConfig:
    if axis == "positions":
        return _position_label_to_cfg(cfg, str(value))
    if axis == "c_mid":
        return replace(cfg, alignment=replace(cfg.alignment, c_mid=float(value)))
    if axis == "head_dim":
        return replace(
            cfg, alignment=replace(cfg.alignment, head_hidden=int(value))
        )
    if axis == "dit_blocks":
        if cfg.backbone.kind != "dit":
            raise ConfigError("dit_blocks axis needs a DiT backbone")
        return replace(
            cfg, alignment=replace(cfg.alignment, positions=(f"block_{int(value)}",))
        )
    raise ConfigError(f"unknown ablation axis {axis!r}")


def cmd_ablate(args) -> int:
    base = _load_run_config(args)
    axis = args.axis.replace("-", "_")
    if axis not in ABLATION_VALUES:
        raise ConfigError(f"unknown ablation axis {args.axis!r}")
    values = tuple(args.values) if args.values else ABLATION_VALUES[axis]
    data = read_dataset(args.data) if args.data else None
    out = Path(args.out or "ablate")
    out.mkdir(parents=True, exist_ok=True)

    cells = []
    for value in values:
        finals, fails = [], []
        try:
            cell_cfg = _ablation_cell_config(base, axis, value)
        except ConfigError as e:
            cells.append({"value": value, "error": str(e)})
            _print(f"{axis}={value}: skipped ({e})")
            continue
        for seed in base.seeds:
            run_dir = out / f"{axis}={value}" / f"seed{seed}"
            try:
                res = train(
                    with_seed(cell_cfg, seed), data=data, out_dir=run_dir
                )
                finals.append(
                    res.records[-1].metrics.get("r_mae_gen", float("nan"))
                )
            except Exception as e:  # partial failures recorded, sweep continues
                fails.append({"seed": seed, "error": f"{type(e).__name__}: {e}"})
        cell = {"value": value, "n_runs": len(finals), "failures": fails}
        if finals:
            cell["r_mae_gen_mean"] = float(np.mean(finals))
            cell["r_mae_gen_std"] = float(np.std(finals))
        cells.append(cell)
        _print(f"{axis}={value}: " + json.dumps(
            {k: v for k, v in cell.items() if k != "value"}, sort_keys=True
        ))

    report = {
        "axis": axis,
        "base_config_hash": config_hash(base),
        "seeds": list(base.seeds),
        "cells": cells,
    }
    (out / "ablate.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    lines = [f"axis: {axis}", f"seeds: {list(base.seeds)}", ""]
    lines.append(f"{'value':>12} | {'mean r_mae':>12} | {'std':>10} | runs")
    lines.append("-" * 50)
    for cell in cells:
        if "r_mae_gen_mean" in cell:
            lines.append(
                f"{cell['value']!s:>12} | {cell['r_mae_gen_mean']:>12.4e} "
                f"| {cell['r_mae_gen_std']:>10.2e} | {cell['n_runs']}"
            )
        else:
            lines.append(f"{cell['value']!s:>12} | {'failed':>12} | {'':>10} |")
    (out / "ablate.txt").write_text("\n".join(lines) + "\n")
    _print(f"sweep report in {out / 'ablate.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# diagnose


def _tap_features(backbone, x0, cond, sched, seed):
    """Per-position flattened features over stratified draws, as a dict."""
    from .diagnostics import _profile_draws

    t, eps = _profile_draws(x0.shape[0], sched.T, seed, x0.shape, x0.dtype)
    from .diffusion import forward_diffuse

    x_t = forward_diffuse(x0, t, eps, sched)
    with torch.no_grad():
        _, taps = backbone(x_t, t, cond)
    return {tap.position: tap.tensor.detach() for tap in taps}


def _heads_for(restored, positions, x0, ctx, sched, cond, seed):
    """The model's own heads when they cover positions, else fresh probes."""
    from .diagnostics import train_probes

    heads = restored.model.heads
    if heads is not None and all(p in heads.positions for p in positions):
        return heads, "trained"
    probes = train_probes(
        restored.model.backbone, positions, x0, ctx, sched, cond=cond,
        n_draws=1024, head_hidden=restored.config.alignment.head_hidden,
        seed=seed,
    )
    return probes, "probe"


def cmd_diagnose(args) -> int:
    from . import diagnostics as dg

    ra = load_trained(args.ckpt_a)
    rb = load_trained(args.ckpt_b)
    if config_to_dict(ra.config.backbone) != config_to_dict(rb.config.backbone):
        raise ValueError("checkpoint architectures differ; cannot compare")
    if ra.config.task != rb.config.task:
        raise ValueError("checkpoint tasks differ; cannot compare")
    if not args.data:
        raise ValueError("diagnose needs --data for decoding contexts")
    data = read_dataset(args.data)
    if data.task != ra.config.task:
        raise ValueError(
            f"dataset task {data.task!r} does not match checkpoints"
        )
    seed = args.seed if args.seed is not None else 0
    set_determinism(seed)
    out = Path(args.out or "diagnose")
    out.mkdir(parents=True, exist_ok=True)

    n = min(data.n_samples, 64)
    sub = DatasetContainer(
        task=data.task, layout=data.layout,
        values=np.array(data.values[:n]), seed_info=data.seed_info,
    )
    x0, cond = split_container(sub, ra.normalizer)
    ctx = context_from_container(sub, ra.normalizer)
    sched = ra.sched

    positions = ra.config.alignment.positions or rb.config.alignment.positions
    report: dict = {
        "checkpoint_a": str(args.ckpt_a),
        "checkpoint_b": str(args.ckpt_b),
        "task": ra.config.task,
        "positions": list(positions),
    }

    # feature similarity and effective rank over every tapped position
    feats_a = _tap_features(ra.model.backbone, x0, cond, sched, seed)
    feats_b = _tap_features(rb.model.backbone, x0, cond, sched, seed)
    tap_names = [p for p in feats_a if p in feats_b]
    cka = np.zeros((len(tap_names), len(tap_names)))
    for i, pa in enumerate(tap_names):
        for j, pb in enumerate(tap_names):
            cka[i, j] = dg.linear_cka(feats_a[pa], feats_b[pb])
    erank_a = [dg.effective_rank(feats_a[p]) for p in tap_names]
    erank_b = [dg.effective_rank(feats_b[p]) for p in tap_names]
    report["tap_positions"] = tap_names
    report["cka_diagonal"] = {p: cka[i, i] for i, p in enumerate(tap_names)}
    report["effective_rank"] = {
        p: {"a": erank_a[i], "b": erank_b[i]} for i, p in enumerate(tap_names)
    }

    # decoded-residual profiles (own heads or freshly trained probes)
    profiles = {}
    atten = {}
    if positions:
        for name, restored in (("a", ra), ("b", rb)):
            heads, kind = _heads_for(
                restored, positions, x0, ctx, sched, cond, seed
            )
            prof = dg.layer_residual_profile(
                restored.model.backbone, heads, x0, ctx, sched,
                cond=cond, seed=seed,
            )
            profiles[name] = {"kind": kind, **prof.as_dict()}
            rows = dg.midlayer_attenuation_rows(
                restored.model.backbone, heads, x0, ctx, sched,
                cond=cond, seed=seed,
            )
            atten[name] = [
                {
                    "position": r.position,
                    "lhs_mid": r.lhs_mid,
                    "bound_mid": r.bound_mid,
                    "lhs_out": r.lhs_out,
                    "holds": r.mid_holds(),
                }
                for r in rows
            ]
    report["residual_profiles"] = profiles
    report["attenuation"] = atten

    # convergence curves from records left next to the checkpoints
    curves = {}
    for name, ckpt in (("a", args.ckpt_a), ("b", args.ckpt_b)):
        rec_path = Path(ckpt).parent / "records.jsonl"
        if rec_path.exists():
            recs = read_records(rec_path)
            pts = [
                (r.iteration, r.metrics["r_mae_gen"])
                for r in recs if "r_mae_gen" in r.metrics
            ]
            if pts:
                curves[name] = pts
    report["convergence_points"] = {k: len(v) for k, v in curves.items()}

    _write_diagnose_plots(out, tap_names, cka, erank_a, erank_b, profiles, curves)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    (out / "report.txt").write_text(_diagnose_text(report))
    _print(_diagnose_text(report))
    _print(f"diagnostics in {out}")
    return EXIT_OK


def _diagnose_text(report: dict) -> str:
    lines = [
        "model diagnostics",
        f"  task: {report['task']}",
        f"  a: {report['checkpoint_a']}",
        f"  b: {report['checkpoint_b']}",
        "",
        "cka (a vs b, same position):",
    ]
    for p, v in report["cka_diagonal"].items():
        er = report["effective_rank"][p]
        lines.append(
            f"  {p:>12}: cka {v:.4f}   erank a {er['a']:7.2f}  b {er['b']:7.2f}"
        )
    if report["residual_profiles"]:
        lines.append("")
        lines.append("decoded residual profiles (raw):")
        for name, prof in report["residual_profiles"].items():
            kind = prof["kind"]
            for pos, vals in prof.items():
                if pos == "kind":
                    continue
                lines.append(
                    f"  {name} ({kind}) {pos:>12}: {vals['raw']:.4e}"
                )
    if report["attenuation"]:
        lines.append("")
        lines.append("attenuation rows (lhs_mid <= bound_mid; lhs_out for scale):")
        for name, rows in report["attenuation"].items():
            for r in rows:
                lines.append(
                    f"  {name} {r['position']:>12}: lhs_mid {r['lhs_mid']:.3e} "
                    f"bound {r['bound_mid']:.3e} lhs_out {r['lhs_out']:.3e} "
                    f"holds={r['holds']}"
                )
    return "\n".join(lines) + "\n"


def _write_diagnose_plots(out, tap_names, cka, erank_a, erank_b, profiles, curves):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(cka, vmin=0, vmax=1, cmap="viridis")
    ax.set_xticks(range(len(tap_names)), tap_names, rotation=90, fontsize=7)
    ax.set_yticks(range(len(tap_names)), tap_names, fontsize=7)
    ax.set_xlabel("model b")
    ax.set_ylabel("model a")
    fig.colorbar(im, ax=ax, label="linear CKA")
    fig.tight_layout()
    fig.savefig(out / "cka.png", dpi=140)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 3.5))
    xs = range(len(tap_names))
    ax.plot(xs, erank_a, "o-", label="a")
    ax.plot(xs, erank_b, "s--", label="b")
    ax.set_xticks(list(xs), tap_names, rotation=90, fontsize=7)
    ax.set_ylabel("effective rank")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "effective_rank.png", dpi=140)
    plt.close(fig)

    if profiles:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for name, prof in profiles.items():
            pos = [p for p in prof if p != "kind"]
            ax.plot(
                range(len(pos)), [prof[p]["raw"] for p in pos],
                "o-", label=f"{name} ({prof['kind']})",
            )
            ax.set_xticks(range(len(pos)), pos, rotation=45, fontsize=7)
        ax.set_ylabel("decoded residual MAE")
        ax.set_yscale("log")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "profiles.png", dpi=140)
        plt.close(fig)

    if curves:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for name, pts in curves.items():
            ax.plot([p[0] for p in pts], [p[1] for p in pts], label=name)
        ax.set_xlabel("iteration")
        ax.set_ylabel("generation residual")
        ax.set_yscale("log")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "convergence.png", dpi=140)
        plt.close(fig)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="repap",
        description="Physics-aligned diffusion: data, training, evaluation.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_default=None):
        sp.add_argument("--config", help="experiment config file")
        sp.add_argument("--seed", type=int, default=seed_default)
        sp.add_argument("--out", help="output path or directory")

    sp = sub.add_parser("gen-data", help="generate a dataset container")
    common(sp, seed_default=0)
    sp.add_argument("--task", choices=TASKS)
    sp.add_argument("--n", type=int, help="sample count")
    sp.add_argument("--grid", type=int, help="grid size (topology: elements)")
    sp.add_argument("--grid-y", type=int, help="rows for rectangular grids")
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train", help="run the training loop")
    common(sp)
    sp.add_argument("--data", help="dataset container (overrides config)")
    sp.add_argument("--resume", help="checkpoint to resume from")
    sp.add_argument(
        "--print-effective-config", action="store_true",
        help="print the fully defaulted config and exit",
    )
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("sample", help="draw samples from a checkpoint")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--n", type=int, default=16)
    sp.add_argument("--data", help="conditioning/observation rows")
    sp.set_defaults(fn=cmd_sample)

    sp = sub.add_parser("eval", help="metrics of a checkpoint on a dataset")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--n", type=int)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("ablate", help="axis sweep at desk scale")
    common(sp)
    sp.add_argument(
        "--axis", required=True,
        help=f"one of {sorted(ABLATION_VALUES)} (hyphens accepted)",
    )
    sp.add_argument("--values", nargs="*", help="override axis values")
    sp.add_argument("--data", help="dataset container (overrides config)")
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("diagnose", help="compare two checkpoints")
    common(sp)
    sp.add_argument("--ckpt-a", required=True)
    sp.add_argument("--ckpt-b", required=True)
    sp.add_argument("--data", help="samples for decoding contexts")
    sp.set_defaults(fn=cmd_diagnose)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except _USAGE_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NaNLossError, RuntimeError, OSError) as e:
        print(f"failed: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
