"""Experiment configuration: presets, validation, JSON round-trip, fingerprints."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

RETRIEVAL_MODES = ("l2", "kl", "random", "none", "all")
TASK_NAMES = ("setting_up", "cleaning_up")


@dataclass
class RetrievalConfig:
    mode: str = "l2"
    fraction: float = 0.10
    num_prior: int = 20000
    num_target: int = 2500


@dataclass
class ExperimentConfig:
    seed: int = 0
    preset: str = "desk"
    task: str = "setting_up"
    prior_path: str = ""
    target_path: str = ""

    # model
    horizon: int = 10          # skill length H
    frame_stack: int = 10      # policy history F
    latent_dim: int = 64
    lstm_hidden: int = 64
    lstm_layers: int = 2
    mlp_hidden: tuple = (128, 128)
    tp_hidden: tuple = (128, 128)
    kl_reduction: str = "sum"  # "sum" | "mean" over latent dims

    # loss weights (desk-scale alpha; the paper preset restores 1e-6)
    beta: float = 1e-5
    alpha: float = 1e-3
    gamma: float = 1.0
    max_offset: int = 50

    # optimization
    lr_vae: float = 5e-4
    lr_tp: float = 1e-4
    lr_policy: float = 1e-3
    batch_size: int = 16

    # schedules
    pretrain_steps: int = 12000
    phase2_steps: int = 1500
    bc_steps: int = 2000
    bc_pretrain_steps: int = 2000
    log_interval: int = 50
    pretrain_checkpoint_interval: int = 1000
    phase2_checkpoint_interval: int = 50
    eval_stride: int = 10      # evaluate every k-th phase-2 checkpoint
    eval_episodes: int = 50
    holdout_fraction: float = 0.05

    # data generation
    play_trajectories: int = 200
    play_steps: int = 1000
    demos_per_task: int = 30

    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    prior_fraction: float = 1.0

    def __post_init__(self):
        if isinstance(self.retrieval, dict):
            self.retrieval = RetrievalConfig(**self.retrieval)
        self.mlp_hidden = tuple(self.mlp_hidden)
        self.tp_hidden = tuple(self.tp_hidden)

    def validate(self) -> "ExperimentConfig":
        r = self.retrieval
        checks = [
            (self.task in TASK_NAMES, f"unknown task {self.task!r}"),
            (self.horizon >= 1, "horizon must be >= 1"),
            (self.frame_stack >= 0, "frame_stack must be >= 0"),
            (self.latent_dim >= 1, "latent_dim must be >= 1"),
            (self.lstm_hidden >= 1 and self.lstm_layers >= 1, "bad LSTM shape"),
            (self.kl_reduction in ("sum", "mean"), "kl_reduction must be sum|mean"),
            (self.beta >= 0 and self.alpha >= 0 and self.gamma >= 0,
             "loss weights must be nonnegative"),
            (self.max_offset >= 1, "max_offset must be >= 1"),
            (self.lr_vae > 0 and self.lr_tp > 0 and self.lr_policy > 0,
             "learning rates must be positive"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (min(self.pretrain_steps, self.phase2_steps, self.bc_steps,
                 self.bc_pretrain_steps) >= 0, "step counts must be >= 0"),
            (self.log_interval >= 1, "log_interval must be >= 1"),
            (self.pretrain_checkpoint_interval >= 1, "bad checkpoint interval"),
            (self.phase2_checkpoint_interval >= 1, "bad checkpoint interval"),
            (self.eval_stride >= 1, "eval_stride must be >= 1"),
            (self.eval_episodes >= 1, "eval_episodes must be >= 1"),
            (0.0 <= self.holdout_fraction < 1.0, "holdout_fraction must be in [0, 1)"),
            (self.play_trajectories >= 1 and self.play_steps >= 1, "bad play sizes"),
            (self.demos_per_task >= 1, "demos_per_task must be >= 1"),
            (r.mode in RETRIEVAL_MODES, f"unknown retrieval mode {r.mode!r}"),
            (0.0 <= r.fraction <= 1.0, "retrieval fraction must be in [0, 1]"),
            (r.num_prior >= 1 and r.num_target >= 1, "retrieval sample counts must be >= 1"),
            (0.0 < self.prior_fraction <= 1.0, "prior_fraction must be in (0, 1]"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mlp_hidden"] = list(self.mlp_hidden)
        d["tp_hidden"] = list(self.tp_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d).validate()

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def model_fingerprint(self, obs_dim: int, act_dim: int) -> str:
        """Hash of the architecture-determining fields; checkpoints must agree."""
        keys = {
            "obs_dim": obs_dim, "act_dim": act_dim,
            "horizon": self.horizon, "frame_stack": self.frame_stack,
            "latent_dim": self.latent_dim, "lstm_hidden": self.lstm_hidden,
            "lstm_layers": self.lstm_layers, "mlp_hidden": list(self.mlp_hidden),
            "tp_hidden": list(self.tp_hidden), "kl_reduction": self.kl_reduction,
        }
        blob = json.dumps(keys, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


PRESETS = {
    "desk": {},
    # Full-scale settings from the published configuration; not exercised by
    # the test suite (multi-day training).
    "paper": {
        "lstm_hidden": 1000,
        "mlp_hidden": (1024, 1024),
        "tp_hidden": (128, 128),
        "alpha": 1e-6,
        "pretrain_steps": 150000,
        "phase2_steps": 50000,
        "bc_steps": 50000,
        "bc_pretrain_steps": 50000,
        "pretrain_checkpoint_interval": 10000,
        "phase2_checkpoint_interval": 1000,
        "retrieval": RetrievalConfig(mode="l2", fraction=0.10,
                                     num_prior=250000, num_target=2500),
    },
}


def make_config(preset: str = "desk", **overrides) -> ExperimentConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    kwargs = dict(PRESETS[preset])
    kwargs.update(overrides)
    kwargs["preset"] = preset
    return ExperimentConfig(**kwargs).validate()


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot load config {path}: {e}") from e
    return ExperimentConfig.from_dict(raw)


def save_config(cfg: ExperimentConfig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
