"""End-to-end orchestration: data generation, training runs, evaluation, ablations.

The CLI is a thin wrapper over these functions; the acceptance suite calls them
directly. Every artifact is a pure function of (config, seed): reports carry no
timestamps and rerunning a step reproduces its outputs byte for byte.
"""

from __future__ import annotations

import json
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data import TrajectoryDataset, load_dataset, write_dataset
from .env import TASKS, get_task, scripted_demo, scripted_play
from .errors import UsageError
from .evaluation import evaluate_checkpoints, write_report
from .policy import bc_train, train_phase2
from .seeding import stream
from .skill import pretrain

log = logging.getLogger(__name__)


# -- data generation -------------------------------------------------------------


def generate_datasets(cfg: ExperimentConfig, out_root, force: bool = False) -> dict:
    """Write the play (prior) set and one demo (target) set per task."""
    out_root = Path(out_root)
    paths = {"prior": out_root / "prior"}
    for task in TASKS:
        paths[f"target_{task}"] = out_root / f"target_{task}"
    for p in paths.values():
        if p.exists() and any(p.iterdir()) and not force:
            raise UsageError(f"{p} already exists; pass force=True/--force to overwrite")

    seed = cfg.seed
    play = [scripted_play(stream(seed, "gen", "play", i), cfg.play_steps, traj_id=i)
            for i in range(cfg.play_trajectories)]
    prior = TrajectoryDataset(play, "prior", play[0].observations.shape[1],
                              play[0].actions.shape[1])
    write_dataset(prior, paths["prior"])

    report = {"schema_version": 1, "seed": seed,
              "prior": {"trajectories": len(play), "transitions": prior.transitions}}
    for task_name in TASKS:
        task = get_task(task_name)
        demos = [scripted_demo(task, stream(seed, "gen", "demo", task_name, i),
                               traj_id=i)
                 for i in range(cfg.demos_per_task)]
        target = TrajectoryDataset(demos, "target", prior.obs_dim, prior.act_dim)
        write_dataset(target, paths[f"target_{task_name}"])
        report[f"target_{task_name}"] = {
            "trajectories": len(demos),
            "transitions": target.transitions,
            "lengths": [d.length for d in demos],
        }
    with open(out_root / "gen_report.json", "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    return report


def load_prior(cfg: ExperimentConfig) -> TrajectoryDataset:
    ds = load_dataset(cfg.prior_path)
    if cfg.prior_fraction < 1.0:
        keep = max(1, int(len(ds.trajectories) * cfg.prior_fraction))
        ds = ds.subset(keep)
    return ds


def load_target(cfg: ExperimentConfig) -> TrajectoryDataset:
    return load_dataset(cfg.target_path)


# -- training wrappers -------------------------------------------------------------


def pretrain_cached(cfg: ExperimentConfig, prior_ds: TrajectoryDataset,
                    cache_root) -> Path:
    """Pretrain once per (config fingerprint); reuse the checkpoint afterwards.

    The cache key covers the full config (including seed) plus the dataset
    identity, so distinct ablation cells never collide.
    """
    key = f"{cfg.fingerprint()}_{prior_ds.role}_{len(prior_ds.trajectories)}"
    run_dir = Path(cache_root) / f"pretrain_{key}"
    final = run_dir / "skill_final.skck"
    if final.exists():
        return final
    result = pretrain(cfg, prior_ds, run_dir)
    return result.checkpoint


def eval_checkpoint_selection(checkpoints: list[Path], stride: int) -> list[Path]:
    """Every stride-th checkpoint (1-based); falls back to the last one."""
    selected = checkpoints[stride - 1::stride]
    if not selected and checkpoints:
        selected = [checkpoints[-1]]
    return selected


def run_phase2_and_eval(cfg: ExperimentConfig, prior_ds, target_ds, skill_ckpt,
                        workdir, eval_seed: int | None = None) -> dict:
    workdir = Path(workdir)
    result = train_phase2(cfg, prior_ds, target_ds, skill_ckpt, workdir)
    selected = eval_checkpoint_selection(result.checkpoints, cfg.eval_stride)
    if not selected:
        selected = [result.checkpoint]
    report = evaluate_checkpoints(selected, cfg.task, cfg.eval_episodes,
                                  eval_seed if eval_seed is not None else cfg.seed)
    write_report(report, workdir / "eval_report.json")
    return {"best": report["best"], "report": report,
            "checkpoints": [str(p) for p in selected]}


def run_bc_and_eval(cfg: ExperimentConfig, target_ds, prior_ds, workdir,
                    eval_seed: int | None = None) -> dict:
    workdir = Path(workdir)
    result = bc_train(cfg, target_ds, prior_ds, workdir)
    selected = eval_checkpoint_selection(result.checkpoints, cfg.eval_stride)
    if not selected:
        selected = [result.checkpoint]
    report = evaluate_checkpoints(selected, cfg.task, cfg.eval_episodes,
                                  eval_seed if eval_seed is not None else cfg.seed)
    write_report(report, workdir / "eval_report.json")
    return {"best": report["best"], "report": report,
            "checkpoints": [str(p) for p in selected]}


# -- ablation grid -------------------------------------------------------------------

ABLATION_AXES = ("tp", "retrieval_mode", "retrieval_frac", "prior_frac", "no_prior")


def ablation_cells(cfg: ExperimentConfig, axes) -> list[tuple[str, ExperimentConfig]]:
    """One-axis-at-a-time variations against the base config (paper-table style)."""
    cells = [("full", cfg)]
    for axis in axes:
        if axis == "tp":
            cells.append(("no_tp", replace(cfg, alpha=0.0)))
        elif axis == "retrieval_mode":
            for mode in ("kl", "random", "none", "all"):
                cells.append((f"mode_{mode}",
                              replace(cfg, retrieval=replace(cfg.retrieval, mode=mode))))
        elif axis == "retrieval_frac":
            for frac in (0.02, 0.5, 0.9):
                cells.append((f"r_{int(frac * 100):02d}",
                              replace(cfg, retrieval=replace(cfg.retrieval,
                                                             fraction=frac))))
        elif axis == "prior_frac":
            for frac in (0.25, 0.5):
                cells.append((f"prior_{int(frac * 100):02d}",
                              replace(cfg, prior_fraction=frac)))
        elif axis == "no_prior":
            cells.append(("no_prior",
                          replace(cfg, retrieval=replace(cfg.retrieval, mode="none"))))
        else:
            raise UsageError(f"unknown ablation axis {axis!r}; "
                             f"choose from {ABLATION_AXES}")
    return cells


def run_cell(name: str, cfg: ExperimentConfig, seeds, workdir,
             eval_seed: int) -> dict:
    """Run one ablation cell over `seeds`; returns per-seed best rates."""
    workdir = Path(workdir)
    rates = []
    for s in seeds:
        cell_cfg = replace(cfg, seed=s)
        target_ds = load_target(cell_cfg)
        if name == "no_prior":
            prior_ds = target_ds.with_role("prior")
        else:
            prior_ds = load_prior(cell_cfg)
        try:
            ckpt = pretrain_cached(cell_cfg, prior_ds, workdir / "pretrains")
            out = run_phase2_and_eval(cell_cfg, prior_ds, target_ds, ckpt,
                                      workdir / "cells" / name / f"seed{s}",
                                      eval_seed=eval_seed)
            rates.append(out["best"])
        except Exception as e:  # cell failures are recorded, the grid continues
            log.error("cell %s seed %s failed: %s", name, s, e)
            rates.append(None)
    ok = [r for r in rates if r is not None]
    return {
        "name": name,
        "rates": rates,
        "mean": float(np.mean(ok)) if ok else None,
        "std": float(np.std(ok)) if ok else None,
        "failures": len(rates) - len(ok),
    }


def ablate(cfg: ExperimentConfig, axes, num_seeds: int, workdir) -> dict:
    workdir = Path(workdir)
    seeds = [cfg.seed + i for i in range(num_seeds)]
    cells = ablation_cells(cfg, axes)
    results = [run_cell(name, cell_cfg, seeds, workdir, eval_seed=cfg.seed)
               for name, cell_cfg in cells]
    report = {"schema_version": 1, "task": cfg.task, "seeds": seeds,
              "cells": results}
    with open(workdir / "ablate_report.json", "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    lines = [f"{'cell':<14} {'mean':>7} {'std':>7}  rates"]
    for cell in results:
        mean = "-" if cell["mean"] is None else f"{cell['mean']:.3f}"
        std = "-" if cell["std"] is None else f"{cell['std']:.3f}"
        lines.append(f"{cell['name']:<14} {mean:>7} {std:>7}  "
                     + " ".join("-" if r is None else f"{r:.2f}" for r in cell["rates"]))
    table = "\n".join(lines) + "\n"
    (workdir / "ablate_table.txt").write_text(table, encoding="utf-8")
    return report
