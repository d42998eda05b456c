"""Trajectory datasets: disk format, normalization, window/pair sampling.

Sampling follows the concatenated-stream rule: all eligible trajectories are
treated as one stream of transition indices and the window start is uniform
over that stream. Windows that run past the end of their trajectory are padded
by repeating the last observation with zero actions; frame stacks that run
past the start repeat the first observation.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, UsageError

TRAJ_MAGIC = b"SAL1"
MANIFEST_VERSION = 1


@dataclass
class Trajectory:
    observations: np.ndarray  # (T+1, obs_dim) float64
    actions: np.ndarray       # (T, act_dim) float64
    id: int

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        if self.actions.shape[0] < 1:
            raise UsageError(f"trajectory {self.id}: needs at least one transition")
        if self.observations.shape[0] != self.actions.shape[0] + 1:
            raise UsageError(
                f"trajectory {self.id}: {self.observations.shape[0]} observations for "
                f"{self.actions.shape[0]} actions")
        if not (np.all(np.isfinite(self.observations)) and np.all(np.isfinite(self.actions))):
            raise UsageError(f"trajectory {self.id}: non-finite values")

    @property
    def length(self) -> int:
        return self.actions.shape[0]


@dataclass
class TrajectoryDataset:
    trajectories: list[Trajectory]
    role: str  # "prior" | "target"
    obs_dim: int
    act_dim: int

    def __post_init__(self):
        if not self.trajectories:
            raise UsageError("dataset has no trajectories")
        if self.role not in ("prior", "target"):
            raise UsageError(f"unknown dataset role {self.role!r}")
        for t in self.trajectories:
            if t.observations.shape[1] != self.obs_dim or t.actions.shape[1] != self.act_dim:
                raise UsageError(f"trajectory {t.id}: dimension mismatch with dataset")

    @property
    def transitions(self) -> int:
        return sum(t.length for t in self.trajectories)

    def subset(self, count: int, role: str | None = None) -> "TrajectoryDataset":
        """First `count` trajectories (used by the prior-fraction ablation)."""
        count = max(1, min(count, len(self.trajectories)))
        return TrajectoryDataset(self.trajectories[:count], role or self.role,
                                 self.obs_dim, self.act_dim)

    def with_role(self, role: str) -> "TrajectoryDataset":
        return TrajectoryDataset(self.trajectories, role, self.obs_dim, self.act_dim)


@dataclass
class SubTrajectorySample:
    window_obs: np.ndarray      # (H+1, obs_dim)
    window_actions: np.ndarray  # (H, act_dim)
    frame_stack: np.ndarray     # (F, obs_dim)
    source: tuple[int, int]     # (trajectory id, start index)


# -- disk format --------------------------------------------------------------


def write_dataset(dataset: TrajectoryDataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, traj in enumerate(dataset.trajectories):
        fname = f"traj_{i:05d}.bin"
        with open(path / fname, "wb") as f:
            f.write(TRAJ_MAGIC)
            f.write(struct.pack("<I", traj.length))
            f.write(np.ascontiguousarray(traj.observations, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(traj.actions, dtype="<f4").tobytes())
        entries.append({"id": traj.id, "file": fname, "length": traj.length})
    manifest = {
        "version": MANIFEST_VERSION,
        "role": dataset.role,
        "obs_dim": dataset.obs_dim,
        "act_dim": dataset.act_dim,
        "trajectories": entries,
    }
    with open(path / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_dataset(path) -> TrajectoryDataset:
    path = Path(path)
    manifest_path = path / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except OSError as e:
        raise FormatError(f"cannot read {manifest_path}: {e}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"{manifest_path}: invalid JSON: {e}") from e
    if manifest.get("version") != MANIFEST_VERSION:
        raise FormatError(f"{manifest_path}: unsupported version {manifest.get('version')}")
    obs_dim, act_dim = int(manifest["obs_dim"]), int(manifest["act_dim"])
    trajectories = []
    for entry in manifest["trajectories"]:
        fpath = path / entry["file"]
        raw = fpath.read_bytes()
        if len(raw) < 8 or raw[:4] != TRAJ_MAGIC:
            raise FormatError(f"{fpath}: bad magic")
        (T,) = struct.unpack_from("<I", raw, 4)
        if T != entry["length"]:
            raise FormatError(
                f"{fpath}: length {T} disagrees with manifest ({entry['length']})")
        expect = 8 + 4 * ((T + 1) * obs_dim + T * act_dim)
        if len(raw) != expect:
            raise FormatError(f"{fpath}: expected {expect} bytes, found {len(raw)}")
        obs = np.frombuffer(raw, dtype="<f4", count=(T + 1) * obs_dim,
                            offset=8).reshape(T + 1, obs_dim)
        act = np.frombuffer(raw, dtype="<f4", count=T * act_dim,
                            offset=8 + 4 * (T + 1) * obs_dim).reshape(T, act_dim)
        trajectories.append(Trajectory(obs.astype(np.float64), act.astype(np.float64),
                                       int(entry["id"])))
    return TrajectoryDataset(trajectories, manifest["role"], obs_dim, act_dim)


# -- normalization -------------------------------------------------------------

STD_FLOOR = 1e-6


class Normalizer:
    """Per-dimension standardization for observations and actions."""

    def __init__(self, obs_mean, obs_std, act_mean, act_std):
        self.obs_mean = np.asarray(obs_mean, dtype=np.float64)
        self.obs_std = np.maximum(np.asarray(obs_std, dtype=np.float64), STD_FLOOR)
        self.act_mean = np.asarray(act_mean, dtype=np.float64)
        self.act_std = np.maximum(np.asarray(act_std, dtype=np.float64), STD_FLOOR)

    @classmethod
    def fit(cls, dataset: TrajectoryDataset) -> "Normalizer":
        obs = np.concatenate([t.observations for t in dataset.trajectories], axis=0)
        act = np.concatenate([t.actions for t in dataset.trajectories], axis=0)
        return cls(obs.mean(axis=0), obs.std(axis=0), act.mean(axis=0), act.std(axis=0))

    def normalize_obs(self, obs):
        return (np.asarray(obs, dtype=np.float64) - self.obs_mean) / self.obs_std

    def normalize_act(self, act):
        return (np.asarray(act, dtype=np.float64) - self.act_mean) / self.act_std

    def denormalize_obs(self, obs):
        return np.asarray(obs, dtype=np.float64) * self.obs_std + self.obs_mean

    def denormalize_act(self, act):
        return np.asarray(act, dtype=np.float64) * self.act_std + self.act_mean

    def apply(self, dataset: TrajectoryDataset) -> TrajectoryDataset:
        out = [Trajectory(self.normalize_obs(t.observations),
                          self.normalize_act(t.actions), t.id)
               for t in dataset.trajectories]
        return TrajectoryDataset(out, dataset.role, dataset.obs_dim, dataset.act_dim)

    def invert(self, dataset: TrajectoryDataset) -> TrajectoryDataset:
        out = [Trajectory(self.denormalize_obs(t.observations),
                          self.denormalize_act(t.actions), t.id)
               for t in dataset.trajectories]
        return TrajectoryDataset(out, dataset.role, dataset.obs_dim, dataset.act_dim)

    def to_dict(self) -> dict:
        return {"obs_mean": self.obs_mean.tolist(), "obs_std": self.obs_std.tolist(),
                "act_mean": self.act_mean.tolist(), "act_std": self.act_std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(d["obs_mean"], d["obs_std"], d["act_mean"], d["act_std"])


def fit_normalizer(dataset: TrajectoryDataset) -> Normalizer:
    return Normalizer.fit(dataset)


# -- window extraction and sampling --------------------------------------------


def extract_window(traj: Trajectory, start: int, H: int, F: int) -> SubTrajectorySample:
    """Cut the H-step window at `start` plus its F-frame observation history.

    The window may begin at any transition index in [0, T-1]; overruns repeat
    the final observation with zero actions, history underruns repeat the
    first observation. The frame stack ends at (and includes) the window's
    first observation.
    """
    T = traj.length
    if not 0 <= start < T:
        raise UsageError(f"start {start} outside [0, {T})")
    obs_idx = np.minimum(np.arange(start, start + H + 1), T)
    window_obs = traj.observations[obs_idx].copy()
    window_actions = np.zeros((H, traj.actions.shape[1]))
    real = min(H, T - start)
    window_actions[:real] = traj.actions[start:start + real]
    return SubTrajectorySample(window_obs, window_actions,
                               extract_frame_stack(traj, start, F),
                               (traj.id, start))


def extract_frame_stack(traj: Trajectory, start: int, F: int) -> np.ndarray:
    """The F observations ending at the window's first observation, left-padded."""
    T = traj.length
    if not 0 <= start < T:
        raise UsageError(f"start {start} outside [0, {T})")
    idx = np.maximum(np.arange(start - F + 1, start + 1), 0)
    return traj.observations[idx].copy()


class SubTrajectoryStream:
    """Uniform sampler over the concatenated stream of window start positions.

    Trajectories shorter than H are skipped; every remaining transition index
    is a valid start.
    """

    def __init__(self, dataset: TrajectoryDataset, H: int, F: int):
        if H < 1:
            raise UsageError("H must be >= 1")
        if F < 0:
            raise UsageError("F must be >= 0")
        self.dataset = dataset
        self.H = H
        self.F = F
        self.eligible = [t for t in dataset.trajectories if t.length >= H]
        if not self.eligible:
            raise UsageError(f"no trajectory is at least {H} steps long")
        lengths = np.array([t.length for t in self.eligible], dtype=np.int64)
        self.cumulative = np.cumsum(lengths)
        self.total = int(self.cumulative[-1])

    def sample(self, rng: np.random.Generator) -> SubTrajectorySample:
        position = int(rng.integers(self.total))
        traj, start = self._locate(position)
        return extract_window(traj, start, self.H, self.F)

    def _locate(self, position: int) -> tuple[Trajectory, int]:
        iraj = int(np.searchsorted(self.cumulative, position, side="right"))
        prev = int(self.cumulative[iraj - 1]) if iraj > 0 else 0
        return self.eligible[iraj], position - prev

    def sample_pair(self, rng: np.random.Generator, max_offset: int):
        """Draw (tau1, tau2, d): tau2 shifted d steps within the same trajectory.

        d is uniform on [-max_offset, max_offset]; the shifted start is clamped
        into [0, T-1] and d recomputed from the actual starts.
        """
        if max_offset < 1:
            raise UsageError("max_offset must be >= 1")
        position = int(rng.integers(self.total))
        traj, start1 = self._locate(position)
        d = int(rng.integers(-max_offset, max_offset + 1))
        start2 = int(np.clip(start1 + d, 0, traj.length - 1))
        tau1 = extract_window(traj, start1, self.H, self.F)
        tau2 = extract_window(traj, start2, self.H, self.F)
        return tau1, tau2, start2 - start1


def sample_subtrajectory(dataset: TrajectoryDataset, H: int, F: int,
                         rng: np.random.Generator) -> SubTrajectorySample:
    return SubTrajectoryStream(dataset, H, F).sample(rng)


def sample_temporal_pair(dataset: TrajectoryDataset, H: int, max_offset: int,
                         rng: np.random.Generator, F: int = 0):
    return SubTrajectoryStream(dataset, H, F).sample_pair(rng, max_offset)


def split_holdout(dataset: TrajectoryDataset, fraction: float):
    """Deterministic train/holdout split by trajectory (tail trajectories held out)."""
    n = len(dataset.trajectories)
    n_hold = min(max(1, round(n * fraction)), n - 1) if n > 1 else 0
    if n_hold == 0:
        return dataset, None
    train = replace(dataset, trajectories=dataset.trajectories[:n - n_hold])
    hold = replace(dataset, trajectories=dataset.trajectories[n - n_hold:])
    return train, hold
