"""The skill model: sequence VAE with learned prior plus a temporal-offset head.

The encoder maps an H-step window of (observation, action) pairs to a diagonal
Gaussian over the latent skill space; the decoder is deterministic and maps
(latent, current observation) to an action, threading recurrent state across
the H steps of one skill. The prior network conditions on the window's
endpoint observations. The offset head regresses the signed timestep distance
between two windows of the same trajectory from their posterior means and is
trained jointly, shaping the encoder.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Var, no_grad
from .checkpoint import Checkpoint, save_checkpoint
from .config import ExperimentConfig
from .data import (Normalizer, SubTrajectoryStream, TrajectoryDataset,
                   fit_normalizer, split_holdout)
from .errors import TrainingError, UsageError
from .gaussian import DiagGaussian, gaussian_kl, reparam_sample
from .nn import LSTM, MLP, load_params, params_dict
from .optim import Adam
from .seeding import stream


@dataclass
class SkillLossBreakdown:
    recon: float
    kl: float
    tp: float
    total: float
    beta: float
    alpha: float


@dataclass
class PairBatch:
    """A batch of temporal pairs: two windows per row plus the signed offset."""
    obs1: np.ndarray      # (B, H+1, obs_dim)
    act1: np.ndarray      # (B, H, act_dim)
    obs2: np.ndarray
    act2: np.ndarray
    offsets: np.ndarray   # (B,) signed ints as float64

    @property
    def size(self) -> int:
        return self.obs1.shape[0]


def sample_pair_batch(stream_: SubTrajectoryStream, rng: np.random.Generator,
                      batch_size: int, max_offset: int) -> PairBatch:
    rows = [stream_.sample_pair(rng, max_offset) for _ in range(batch_size)]
    return PairBatch(
        obs1=np.stack([r[0].window_obs for r in rows]),
        act1=np.stack([r[0].window_actions for r in rows]),
        obs2=np.stack([r[1].window_obs for r in rows]),
        act2=np.stack([r[1].window_actions for r in rows]),
        offsets=np.array([float(r[2]) for r in rows]),
    )


class SkillModel:
    def __init__(self, obs_dim: int, act_dim: int, cfg: ExperimentConfig, seed: int,
                 scope: str = "skill"):
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.H = cfg.horizon
        self.latent_dim = cfg.latent_dim
        self.kl_reduction = cfg.kl_reduction
        d, hid, layers = cfg.latent_dim, cfg.lstm_hidden, cfg.lstm_layers
        self.enc_lstm = LSTM("encoder.lstm", obs_dim + act_dim, hid, layers,
                             stream(seed, scope, "encoder"))
        self.enc_head = MLP("encoder.head", hid, cfg.mlp_hidden, 2 * d,
                            stream(seed, scope, "encoder_head"))
        self.dec_lstm = LSTM("decoder.lstm", d + obs_dim, hid, layers,
                             stream(seed, scope, "decoder"))
        self.dec_head = MLP("decoder.head", hid, cfg.mlp_hidden, act_dim,
                            stream(seed, scope, "decoder_head"))
        self.prior_mlp = MLP("prior", 2 * obs_dim, cfg.mlp_hidden, 2 * d,
                             stream(seed, scope, "prior"))
        self.tp_mlp = MLP("tp", 2 * d, cfg.tp_hidden, 1,
                          stream(seed, scope, "tp"))

    # -- parameter plumbing -------------------------------------------------

    def vae_params(self):
        return (self.enc_lstm.params() + self.enc_head.params()
                + self.dec_lstm.params() + self.dec_head.params()
                + self.prior_mlp.params())

    def tp_params(self):
        return self.tp_mlp.params()

    def params(self):
        return self.vae_params() + self.tp_params()

    def state_dict(self) -> dict[str, np.ndarray]:
        return params_dict(self.params())

    def load_state_dict(self, values: dict) -> None:
        load_params(self.params(), values)

    def meta(self) -> dict:
        return {"kind": "skill", "obs_dim": self.obs_dim, "act_dim": self.act_dim,
                "horizon": self.H, "latent_dim": self.latent_dim,
                "lstm_hidden": self.enc_lstm.hidden, "lstm_layers": self.enc_lstm.layers,
                "mlp_hidden": [w.data.shape[1] for w in self.enc_head.weights[:-1]],
                "tp_hidden": [w.data.shape[1] for w in self.tp_mlp.weights[:-1]],
                "kl_reduction": self.kl_reduction}

    # -- networks ------------------------------------------------------------

    def _check_window(self, window_obs, window_actions):
        B, n_obs, obs_dim = window_obs.shape
        if n_obs != self.H + 1 or obs_dim != self.obs_dim:
            raise UsageError(
                f"window has shape {window_obs.shape}, expected "
                f"(B, {self.H + 1}, {self.obs_dim})")
        if window_actions.shape != (B, self.H, self.act_dim):
            raise UsageError(
                f"window actions have shape {window_actions.shape}, expected "
                f"({B}, {self.H}, {self.act_dim})")

    def encode(self, window_obs: np.ndarray, window_actions: np.ndarray) -> DiagGaussian:
        """Posterior over latent skills for a batch of H-step windows."""
        window_obs = np.asarray(window_obs, dtype=np.float64)
        window_actions = np.asarray(window_actions, dtype=np.float64)
        self._check_window(window_obs, window_actions)
        xs = [Var(np.concatenate([window_obs[:, t], window_actions[:, t]], axis=1))
              for t in range(self.H)]
        outputs, _ = self.enc_lstm.run(xs)
        head = self.enc_head(outputs[-1])
        d = self.latent_dim
        return DiagGaussian(head[:, :d], head[:, d:])

    def prior(self, o_first: np.ndarray, o_last: np.ndarray) -> DiagGaussian:
        x = Var(np.concatenate([o_first, o_last], axis=1))
        head = self.prior_mlp(x)
        d = self.latent_dim
        return DiagGaussian(head[:, :d], head[:, d:])

    def predict_offset(self, mu1, mu2) -> Var:
        return self.tp_mlp(ad.concat([ad.as_var(mu1), ad.as_var(mu2)], axis=1))

    def decode_mse(self, z, window_obs: np.ndarray, window_actions: np.ndarray) -> Var:
        """Mean squared error of the deterministic decoder over the window."""
        B = window_obs.shape[0]
        state = self.dec_lstm.initial_state(B)
        total = None
        for t in range(self.H):
            x = ad.concat([ad.as_var(z), Var(window_obs[:, t])], axis=1)
            h, state = self.dec_lstm.step(x, state)
            pred = self.dec_head(h)
            sq = ad.vsum(ad.square(pred - Var(window_actions[:, t])))
            total = sq if total is None else total + sq
        return total * (1.0 / (B * self.H * self.act_dim))

    def decoder_initial_state(self, batch: int):
        return self.dec_lstm.initial_state(batch)

    def decode_step_numpy(self, z: np.ndarray, obs: np.ndarray, state):
        """Single closed-loop decode step for rollout (no graph)."""
        with no_grad():
            x = Var(np.concatenate([np.asarray(z, dtype=np.float64).reshape(-1),
                                    np.asarray(obs, dtype=np.float64)])[None, :])
            h, state = self.dec_lstm.step(x, state)
            action = self.dec_head(h)
        return action.data[0], state

    def encode_numpy(self, window_obs: np.ndarray, window_actions: np.ndarray):
        """Posterior mean and log-std as plain arrays (no graph)."""
        with no_grad():
            q = self.encode(window_obs, window_actions)
            return q.mean.data.copy(), q.log_std.data.copy()


def skill_loss(model: SkillModel, batch: PairBatch, beta: float, alpha: float,
               noise: np.ndarray):
    """Combined objective: reconstruction + beta*KL(posterior||prior) + alpha*TP.

    The latent is a single reparameterized sample per window; the offset head
    consumes posterior means of both windows so its squared-error term
    back-propagates into the encoder.
    """
    if batch.size < 1:
        raise UsageError("empty batch")
    q1 = model.encode(batch.obs1, batch.act1)
    q2 = model.encode(batch.obs2, batch.act2)
    z = reparam_sample(q1, noise)
    recon = model.decode_mse(z, batch.obs1, batch.act1)
    p = model.prior(batch.obs1[:, 0], batch.obs1[:, model.H])
    kl_rows = gaussian_kl(q1, p)
    kl = ad.vmean(kl_rows)
    if model.kl_reduction == "mean":
        kl = kl * (1.0 / model.latent_dim)
    pred = model.predict_offset(q1.mean, q2.mean)
    tp = ad.vmean(ad.square(pred - Var(batch.offsets.reshape(-1, 1))))
    total = recon + kl * beta + tp * alpha
    if not np.isfinite(total.data):
        raise TrainingError(
            f"non-finite skill loss: recon={float(recon.data)!r} "
            f"kl={float(kl.data)!r} tp={float(tp.data)!r}")
    breakdown = SkillLossBreakdown(recon=float(recon.data), kl=float(kl.data),
                                   tp=float(tp.data), total=float(total.data),
                                   beta=beta, alpha=alpha)
    return total, breakdown


def heldout_metrics(model: SkillModel, batch: PairBatch) -> dict:
    """Deterministic held-out diagnostics: mean-latent recon MSE and offset MAE."""
    with no_grad():
        q1 = model.encode(batch.obs1, batch.act1)
        recon = model.decode_mse(q1.mean, batch.obs1, batch.act1)
        q2 = model.encode(batch.obs2, batch.act2)
        pred = model.predict_offset(q1.mean, q2.mean)
        mae = np.abs(pred.data.reshape(-1) - batch.offsets).mean()
        baseline = np.abs(batch.offsets).mean()
    return {"recon": float(recon.data), "tp_mae": float(mae),
            "tp_baseline_mae": float(baseline)}


# -- pretraining loop ----------------------------------------------------------


def save_skill_checkpoint(path, model: SkillModel, normalizer: Normalizer,
                          fingerprint: str) -> None:
    save_checkpoint(path, model.state_dict(), fingerprint=fingerprint,
                    normalizer=normalizer.to_dict(), meta=model.meta())


def _config_from_meta(meta: dict) -> ExperimentConfig:
    return ExperimentConfig(
        horizon=int(meta["horizon"]), latent_dim=int(meta["latent_dim"]),
        lstm_hidden=int(meta["lstm_hidden"]), lstm_layers=int(meta["lstm_layers"]),
        mlp_hidden=tuple(meta["mlp_hidden"]), tp_hidden=tuple(meta["tp_hidden"]),
        kl_reduction=meta["kl_reduction"])


def model_from_checkpoint(ckpt: Checkpoint):
    """Rebuild a SkillModel (and its normalizer) from checkpoint metadata alone."""
    meta = ckpt.meta
    if meta.get("kind") != "skill":
        raise UsageError(f"checkpoint kind {meta.get('kind')!r} is not a skill model")
    model = SkillModel(int(meta["obs_dim"]), int(meta["act_dim"]),
                       _config_from_meta(meta), seed=0)
    model.load_state_dict(ckpt.as_float64())
    normalizer = Normalizer.from_dict(ckpt.normalizer)
    return model, normalizer


@dataclass
class PretrainResult:
    checkpoint: Path
    metrics_path: Path
    summary: dict


def pretrain(cfg: ExperimentConfig, prior_dataset: TrajectoryDataset,
             out_dir) -> PretrainResult:
    """Phase 1: fit the normalizer, then optimize the skill objective on the
    prior set with Adam, logging metrics and writing periodic checkpoints.

    A deterministic tail split of the trajectories is held out for the
    diagnostics only; the normalizer uses the full prior set.
    """
    if prior_dataset.role != "prior":
        raise UsageError("pretrain expects a dataset in the prior role")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = cfg.seed

    normalizer = fit_normalizer(prior_dataset)
    normalized = normalizer.apply(prior_dataset)
    train_ds, holdout_ds = split_holdout(normalized, cfg.holdout_fraction)
    train_stream = SubTrajectoryStream(train_ds, cfg.horizon, cfg.frame_stack)

    model = SkillModel(prior_dataset.obs_dim, prior_dataset.act_dim, cfg,
                       seed=seed, scope="skill_init")
    fingerprint = cfg.model_fingerprint(prior_dataset.obs_dim, prior_dataset.act_dim)
    opt_vae = Adam(model.vae_params(), lr=cfg.lr_vae)
    opt_tp = Adam(model.tp_params(), lr=cfg.lr_tp)

    batch_rng = stream(seed, "pretrain", "batch")
    noise_rng = stream(seed, "pretrain", "noise")
    hold_batch = None
    if holdout_ds is not None:
        hold_stream = SubTrajectoryStream(holdout_ds, cfg.horizon, cfg.frame_stack)
        hold_batch = sample_pair_batch(hold_stream, stream(seed, "pretrain", "holdout"),
                                       min(256, 16 * cfg.batch_size), cfg.max_offset)

    summary = {"steps": cfg.pretrain_steps, "aborted_at": None}
    if hold_batch is not None:
        summary["initial"] = heldout_metrics(model, hold_batch)

    ckpt_dir = out_dir / "checkpoints"
    last_good = ckpt_dir / "ckpt_0000000.skck"
    save_skill_checkpoint(last_good, model, normalizer, fingerprint)
    metrics_path = out_dir / "metrics.jsonl"

    with open(metrics_path, "w", encoding="utf-8") as metrics:
        for step_idx in range(1, cfg.pretrain_steps + 1):
            try:
                batch = sample_pair_batch(train_stream, batch_rng, cfg.batch_size,
                                          cfg.max_offset)
                noise = noise_rng.standard_normal((batch.size, cfg.latent_dim))
                total, parts = skill_loss(model, batch, cfg.beta, cfg.alpha, noise)
                grads = ad.collect_gradients(total, model.params())
                opt_vae.step(grads)
                opt_tp.step(grads)
            except TrainingError as e:
                summary["aborted_at"] = step_idx
                summary["error"] = str(e)
                break
            if step_idx % cfg.log_interval == 0:
                record = {"step": step_idx, "recon": parts.recon, "kl": parts.kl,
                          "tp": parts.tp, "total": parts.total}
                if hold_batch is not None:
                    record.update({f"heldout_{k}": v
                                   for k, v in heldout_metrics(model, hold_batch).items()})
                metrics.write(json.dumps(record, sort_keys=True) + "\n")
            if step_idx % cfg.pretrain_checkpoint_interval == 0:
                last_good = ckpt_dir / f"ckpt_{step_idx:07d}.skck"
                save_skill_checkpoint(last_good, model, normalizer, fingerprint)

    final_path = out_dir / "skill_final.skck"
    if summary["aborted_at"] is None:
        save_skill_checkpoint(final_path, model, normalizer, fingerprint)
        if hold_batch is not None:
            summary["final"] = heldout_metrics(model, hold_batch)
    else:
        # divergence: final checkpoint is the last good periodic one
        final_path = last_good
    with open(out_dir / "summary.json", "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    return PretrainResult(checkpoint=final_path, metrics_path=metrics_path,
                          summary=summary)
