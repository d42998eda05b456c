import json

import numpy as np
import pytest

from skillbc import autodiff as ad
from skillbc.autodiff import Var
from skillbc.checkpoint import load_checkpoint
from skillbc.config import make_config
from skillbc.data import (SubTrajectoryStream, Trajectory, TrajectoryDataset,
                          fit_normalizer)
from skillbc.errors import UsageError
from skillbc.gaussian import gaussian_kl
from skillbc.optim import Adam
from skillbc.skill import (PairBatch, SkillModel, model_from_checkpoint,
                           pretrain, sample_pair_batch, skill_loss)


def tiny_config(**kw):
    base = dict(latent_dim=3, lstm_hidden=6, lstm_layers=2, mlp_hidden=(6,),
                tp_hidden=(6,), horizon=5, frame_stack=4, batch_size=4,
                holdout_fraction=0.2)
    base.update(kw)
    return make_config("desk", **base)


def tiny_dataset(rng, n_traj=4, T=30, obs_dim=5, act_dim=2, role="prior"):
    trajs = [Trajectory(rng.standard_normal((T + 1, obs_dim)),
                        rng.standard_normal((T, act_dim)), i) for i in range(n_traj)]
    return TrajectoryDataset(trajs, role, obs_dim, act_dim)


def make_batch(rng, cfg, B=4, obs_dim=5, act_dim=2):
    H = cfg.horizon
    return PairBatch(obs1=rng.standard_normal((B, H + 1, obs_dim)),
                     act1=rng.standard_normal((B, H, act_dim)),
                     obs2=rng.standard_normal((B, H + 1, obs_dim)),
                     act2=rng.standard_normal((B, H, act_dim)),
                     offsets=rng.integers(-10, 11, B).astype(np.float64))


def test_encode_deterministic_and_ignores_frame_stack():
    cfg = tiny_config()
    model = SkillModel(5, 2, cfg, seed=0)
    rng = np.random.default_rng(0)
    obs = rng.standard_normal((2, 6, 5))
    act = rng.standard_normal((2, 5, 2))
    q1 = model.encode(obs, act)
    q2 = model.encode(obs, act)
    assert np.array_equal(q1.mean.data, q2.mean.data)
    assert np.array_equal(q1.log_std.data, q2.log_std.data)

    # the encoder consumes the window only: samples cut with different frame
    # stack lengths encode identically
    from skillbc.data import extract_window
    ds = tiny_dataset(rng, n_traj=1, T=30)
    short = extract_window(ds.trajectories[0], 7, cfg.horizon, 2)
    long = extract_window(ds.trajectories[0], 7, cfg.horizon, 9)
    assert not np.array_equal(short.frame_stack.shape, long.frame_stack.shape)
    m1, s1 = model.encode_numpy(short.window_obs[None], short.window_actions[None])
    m2, s2 = model.encode_numpy(long.window_obs[None], long.window_actions[None])
    assert np.array_equal(m1, m2) and np.array_equal(s1, s2)


def test_encode_rejects_wrong_window_length():
    cfg = tiny_config()
    model = SkillModel(5, 2, cfg, seed=0)
    rng = np.random.default_rng(1)
    with pytest.raises(UsageError):
        model.encode(rng.standard_normal((2, 4, 5)), rng.standard_normal((2, 5, 2)))
    with pytest.raises(UsageError):
        model.encode(rng.standard_normal((2, 6, 5)), rng.standard_normal((2, 4, 2)))


def test_decode_step_deterministic_and_reset_independent():
    cfg = tiny_config()
    model = SkillModel(5, 2, cfg, seed=0)
    rng = np.random.default_rng(2)
    z = rng.standard_normal(3)
    obs = rng.standard_normal(5)
    s0 = model.decoder_initial_state(1)
    a1, st1 = model.decode_step_numpy(z, obs, s0)
    a2, _ = model.decode_step_numpy(z, obs, model.decoder_initial_state(1))
    assert np.array_equal(a1, a2)
    # a fresh skill's first action is independent of the previous skill's state
    _, carried = model.decode_step_numpy(rng.standard_normal(3),
                                         rng.standard_normal(5), st1)
    a3, _ = model.decode_step_numpy(z, obs, model.decoder_initial_state(1))
    assert np.array_equal(a1, a3)


def test_loss_breakdown_identity_and_alpha_zero():
    cfg = tiny_config()
    model = SkillModel(5, 2, cfg, seed=0)
    rng = np.random.default_rng(3)
    batch = make_batch(rng, cfg)
    noise = rng.standard_normal((4, 3))
    total, parts = skill_loss(model, batch, beta=0.5, alpha=0.25, noise=noise)
    assert parts.total == float(total.data)
    assert parts.total == parts.recon + 0.5 * parts.kl + 0.25 * parts.tp

    # alpha = 0 reproduces the objective without the offset term, bit for bit
    total0, parts0 = skill_loss(model, batch, beta=0.5, alpha=0.0, noise=noise)
    q1 = model.encode(batch.obs1, batch.act1)
    from skillbc.gaussian import reparam_sample
    z = reparam_sample(q1, noise)
    recon = model.decode_mse(z, batch.obs1, batch.act1)
    p = model.prior(batch.obs1[:, 0], batch.obs1[:, model.H])
    reference = recon + ad.vmean(gaussian_kl(q1, p)) * 0.5
    assert float(total0.data) == float(reference.data)
    assert parts0.recon == parts.recon and parts0.kl == parts.kl


def test_loss_with_beta_alpha_zero_is_pure_reconstruction():
    cfg = tiny_config()
    model = SkillModel(5, 2, cfg, seed=1)
    rng = np.random.default_rng(4)
    batch = make_batch(rng, cfg)
    noise = rng.standard_normal((4, 3))
    total, parts = skill_loss(model, batch, beta=0.0, alpha=0.0, noise=noise)
    assert float(total.data) == parts.recon


def test_zero_model_zero_actions_zero_offset_gives_zero_loss():
    cfg = tiny_config()
    model = SkillModel(5, 2, cfg, seed=0)
    for p in model.params():
        p.data[:] = 0.0
    rng = np.random.default_rng(5)
    H = cfg.horizon
    batch = PairBatch(obs1=rng.standard_normal((2, H + 1, 5)),
                      act1=np.zeros((2, H, 2)),
                      obs2=rng.standard_normal((2, H + 1, 5)),
                      act2=np.zeros((2, H, 2)),
                      offsets=np.zeros(2))
    total, parts = skill_loss(model, batch, beta=1.0, alpha=1.0,
                              noise=np.zeros((2, 3)))
    # decoder reproduces the (zero) actions, posterior equals prior, offset
    # head outputs the drawn offset: every term vanishes
    assert parts.recon == 0.0 and parts.kl == 0.0 and parts.tp == 0.0
    assert float(total.data) == 0.0


def test_batch_loss_equals_mean_of_per_sample_losses():
    cfg = tiny_config()
    model = SkillModel(5, 2, cfg, seed=2)
    rng = np.random.default_rng(6)
    batch = make_batch(rng, cfg, B=6)
    noise = rng.standard_normal((6, 3))
    _, parts = skill_loss(model, batch, beta=0.3, alpha=0.2, noise=noise)
    singles = []
    for i in range(6):
        one = PairBatch(batch.obs1[i:i + 1], batch.act1[i:i + 1],
                        batch.obs2[i:i + 1], batch.act2[i:i + 1],
                        batch.offsets[i:i + 1])
        _, p = skill_loss(model, one, beta=0.3, alpha=0.2, noise=noise[i:i + 1])
        singles.append(p.total)
    assert parts.total == pytest.approx(np.mean(singles), rel=1e-12)


def test_tp_term_shapes_encoder_gradients():
    cfg = tiny_config()
    model = SkillModel(5, 2, cfg, seed=3)
    rng = np.random.default_rng(7)
    batch = make_batch(rng, cfg)
    noise = rng.standard_normal((4, 3))
    enc_params = model.enc_lstm.params() + model.enc_head.params()
    total_a, _ = skill_loss(model, batch, beta=0.1, alpha=0.5, noise=noise)
    grads_a = ad.collect_gradients(total_a, enc_params)
    total_b, _ = skill_loss(model, batch, beta=0.1, alpha=0.0, noise=noise)
    grads_b = ad.collect_gradients(total_b, enc_params)
    assert any(not np.array_equal(grads_a[p.name], grads_b[p.name])
               for p in enc_params)


def test_skill_loss_gradcheck_full_paths():
    cfg = make_config("desk", latent_dim=2, lstm_hidden=3, lstm_layers=1,
                      mlp_hidden=(4,), tp_hidden=(4,), horizon=3)
    model = SkillModel(3, 2, cfg, seed=4)
    rng = np.random.default_rng(8)
    H = cfg.horizon
    batch = PairBatch(obs1=rng.standard_normal((2, H + 1, 3)),
                      act1=rng.standard_normal((2, H, 2)),
                      obs2=rng.standard_normal((2, H + 1, 3)),
                      act2=rng.standard_normal((2, H, 2)),
                      offsets=np.array([3.0, -2.0]))
    noise = rng.standard_normal((2, 2))

    def loss_fn():
        total, _ = skill_loss(model, batch, beta=0.2, alpha=0.4, noise=noise)
        return total

    grads = ad.collect_gradients(loss_fn(), model.params())
    numeric = ad.finite_difference(loss_fn, model.params())
    assert ad.max_relative_error(grads, numeric) <= 1e-4


def test_single_gradient_step_decreases_loss_and_moves_mean():
    cfg = tiny_config()
    model = SkillModel(5, 2, cfg, seed=5)
    rng = np.random.default_rng(9)
    batch = make_batch(rng, cfg)
    noise = rng.standard_normal((4, 3))
    mean_before = model.encode(batch.obs1, batch.act1).mean.data.copy()

    def eval_loss():
        total, _ = skill_loss(model, batch, beta=0.1, alpha=0.0, noise=noise)
        return float(total.data)

    before = eval_loss()
    total, _ = skill_loss(model, batch, beta=0.1, alpha=0.0, noise=noise)
    grads = ad.collect_gradients(total, model.params())
    for p in model.params():
        p.data -= 1e-3 * grads[p.name]
    after = eval_loss()
    mean_after = model.encode(batch.obs1, batch.act1).mean.data
    assert after < before
    assert not np.array_equal(mean_before, mean_after)


# -- pretraining loop ---------------------------------------------------------------


def test_pretrain_zero_steps_checkpoint_equals_initialization(tmp_path):
    cfg = tiny_config(pretrain_steps=0)
    rng = np.random.default_rng(10)
    ds = tiny_dataset(rng, n_traj=5)
    init = SkillModel(5, 2, cfg, seed=cfg.seed, scope="skill_init").state_dict()
    result = pretrain(cfg, ds, tmp_path / "run")
    ckpt = load_checkpoint(result.checkpoint)
    for name, arr in init.items():
        assert np.array_equal(ckpt.tensors[name], arr.astype(np.float32))


def test_pretrain_rerun_is_bit_identical(tmp_path):
    cfg = tiny_config(pretrain_steps=12, log_interval=4,
                      pretrain_checkpoint_interval=6)
    rng = np.random.default_rng(11)
    ds = tiny_dataset(rng, n_traj=5, T=40)
    r1 = pretrain(cfg, ds, tmp_path / "a")
    r2 = pretrain(cfg, ds, tmp_path / "b")
    assert r1.checkpoint.read_bytes() == r2.checkpoint.read_bytes()
    assert r1.metrics_path.read_text() == r2.metrics_path.read_text()


def test_pretrain_requires_prior_role(tmp_path):
    cfg = tiny_config(pretrain_steps=1)
    ds = tiny_dataset(np.random.default_rng(12), role="target")
    with pytest.raises(UsageError):
        pretrain(cfg, ds, tmp_path / "run")


def test_pretrain_metrics_line_count_and_fields(tmp_path):
    cfg = tiny_config(pretrain_steps=20, log_interval=5,
                      pretrain_checkpoint_interval=10)
    ds = tiny_dataset(np.random.default_rng(13), n_traj=5, T=40)
    result = pretrain(cfg, ds, tmp_path / "run")
    lines = result.metrics_path.read_text().splitlines()
    assert len(lines) == 20 // 5
    record = json.loads(lines[0])
    assert {"step", "recon", "kl", "tp", "total"} <= set(record)


def test_pretrain_checkpoint_roundtrip_reconstructs_model(tmp_path):
    cfg = tiny_config(pretrain_steps=6, log_interval=3,
                      pretrain_checkpoint_interval=6)
    ds = tiny_dataset(np.random.default_rng(14), n_traj=5, T=40)
    result = pretrain(cfg, ds, tmp_path / "run")
    ckpt = load_checkpoint(result.checkpoint)
    model, normalizer = model_from_checkpoint(ckpt)
    assert model.H == cfg.horizon
    rng = np.random.default_rng(0)
    obs = rng.standard_normal((1, cfg.horizon + 1, 5))
    act = rng.standard_normal((1, cfg.horizon, 2))
    mean, log_std = model.encode_numpy(obs, act)
    assert mean.shape == (1, 3) and np.all(np.isfinite(mean))


def test_overfit_single_batch_reconstruction():
    # decoding from the posterior mean reproduces a fixed batch's actions
    # after optimizing on it repeatedly
    cfg = tiny_config(latent_dim=4, lstm_hidden=16, mlp_hidden=(16,))
    model = SkillModel(5, 2, cfg, seed=6)
    rng = np.random.default_rng(15)
    ds = tiny_dataset(rng, n_traj=2, T=40)
    norm = fit_normalizer(ds).apply(ds)
    stream_ = SubTrajectoryStream(norm, cfg.horizon, 0)
    batch = sample_pair_batch(stream_, np.random.default_rng(1), 8, cfg.max_offset)
    opt = Adam(model.vae_params(), lr=3e-3)

    def mean_recon():
        with ad.no_grad():
            q = model.encode(batch.obs1, batch.act1)
            return float(model.decode_mse(q.mean, batch.obs1, batch.act1).data)

    initial = mean_recon()
    noise_rng = np.random.default_rng(2)
    for _ in range(400):
        noise = noise_rng.standard_normal((batch.size, cfg.latent_dim))
        total, _ = skill_loss(model, batch, beta=1e-5, alpha=0.0, noise=noise)
        grads = ad.collect_gradients(total, model.params())
        opt.step(grads)
    final = mean_recon()
    assert final <= 0.10 * initial
