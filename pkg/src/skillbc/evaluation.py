"""Checkpoint-driven evaluation: episodes with fixed per-index seeds.

Episode seeds depend only on (master seed, task, episode index), never on the
checkpoint, so every checkpoint faces identical resets. The reported number is
each checkpoint's success rate plus the best across checkpoints.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .env import SkillAgent, TaskSpec, evaluate_agent_factory, get_task
from .errors import UsageError
from .policy import load_bc_checkpoint, load_phase2_checkpoint


class BCAgent:
    """Per-step action cloning agent over the last F raw observations."""

    def __init__(self, policy, normalizer):
        self.policy = policy
        self.normalizer = normalizer
        self.F = policy.F

    def begin_episode(self, state, obs, rng):
        self.history = [np.asarray(obs, dtype=np.float64)]

    def _frames(self):
        frames = self.history[-self.F:]
        while len(frames) < self.F:
            frames = [self.history[0]] + frames
        return self.normalizer.normalize_obs(np.array(frames))

    def act(self, state, obs):
        action_n = self.policy.query_action(self._frames())
        action = self.normalizer.denormalize_act(action_n)
        return np.clip(np.nan_to_num(action, nan=0.0, posinf=1.0, neginf=-1.0),
                       -1.0, 1.0)

    def observe(self, obs):
        self.history.append(np.asarray(obs, dtype=np.float64))


def agent_factory_from_checkpoint(path):
    """Build a fresh-agent factory for a phase-2 or BC checkpoint."""
    ckpt = load_checkpoint(path)
    kind = ckpt.meta.get("kind")
    if kind == "phase2":
        policy, model, normalizer = load_phase2_checkpoint(ckpt)
        H = int(ckpt.meta["skill"]["horizon"])
        F = int(ckpt.meta["policy"]["frame_stack"])
        return lambda: SkillAgent(policy, model, normalizer, H=H, F=F)
    if kind == "bc":
        policy, normalizer = load_bc_checkpoint(ckpt)
        return lambda: BCAgent(policy, normalizer)
    raise UsageError(f"cannot evaluate checkpoint kind {kind!r}")


def evaluate_checkpoints(paths, task: TaskSpec | str, episodes: int, seed: int,
                         budget: int | None = None) -> dict:
    if episodes < 1:
        raise UsageError("episodes must be >= 1")
    task = get_task(task) if isinstance(task, str) else task
    rates = []
    for path in paths:
        factory = agent_factory_from_checkpoint(path)
        rate, _ = evaluate_agent_factory(factory, task, episodes, seed, budget=budget)
        rates.append(rate)
    return {
        "schema_version": 1,
        "task": task.name,
        "checkpoints": [Path(p).name for p in paths],
        "rates": rates,
        "best": max(rates) if rates else 0.0,
        "episodes_per_checkpoint": episodes,
        "seed": seed,
    }


def write_report(report: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
