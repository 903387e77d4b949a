import numpy as np
import pytest

from conftest import central_difference, rel_err
from flowforge.objectives import one_step_denoise
from flowforge.trainer import (
    RUNNING_MEAN,
    AdamW,
    DivergenceError,
    EmaState,
    MLPSpec,
    ParameterVector,
    SyntheticDataset,
    TargetRegion,
    ToyIdentityHarness,
    batch_identity_loss,
    clip_grad_norm,
    ema_update,
    euler_sample,
    forward_velocity,
    integrate,
    load_checkpoint,
    nft_reward_fn,
    preset,
    right_half_fraction,
    save_checkpoint,
    train_stage,
    warmup_lr,
)
from flowforge.trainer import train as train_mod
from flowforge.trainer.model import flow_matching_loss_and_grad

SMALL = MLPSpec(2, 5)


def small_params(seed=0):
    return ParameterVector.init(SMALL, seed)


# --- model -------------------------------------------------------------------------


def test_zero_parameters_give_zero_velocity():
    v = forward_velocity(ParameterVector.zeros(SMALL), np.ones((4, 2)), 0.3)
    assert np.array_equal(v, np.zeros((4, 2)))


def test_forward_is_deterministic_and_batched():
    p = small_params()
    x = np.random.default_rng(0).normal(size=(7, 2))
    t = np.linspace(0, 1, 7)
    a, b = forward_velocity(p, x, t), forward_velocity(p, x, t)
    assert np.array_equal(a, b)
    rows = np.vstack([forward_velocity(p, x[i : i + 1], t[i]) for i in range(7)])
    np.testing.assert_allclose(a, rows, rtol=0, atol=1e-15)


def test_init_is_seeded_glorot():
    a, b, c = small_params(0), small_params(0), small_params(1)
    assert np.array_equal(a.values, b.values) and not np.array_equal(a.values, c.values)
    w2 = MLPSpec(2, 400).unpack(ParameterVector.init(MLPSpec(2, 400), 0).values)["W2"]
    assert w2.std() == pytest.approx(np.sqrt(2 / 800), rel=0.02)
    assert np.all(SMALL.unpack(a.values)["b1"] == 0)


def test_spec_shapes_and_unpack():
    assert SMALL.n_params == 3 * 5 + 5 + 25 + 5 + 10 + 2
    with pytest.raises(ValueError):
        SMALL.unpack(np.zeros(3))
    with pytest.raises(ValueError):
        ParameterVector(np.zeros(3), SMALL)


def test_non_finite_parameters_rejected():
    p = small_params()
    p.values[0] = np.nan
    with pytest.raises(FloatingPointError):
        forward_velocity(p, np.zeros((1, 2)), 0.5)


def test_flow_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    p = small_params(3)
    x, v = rng.normal(size=(2, 6, 2))
    t = rng.uniform(size=6)
    w = rng.uniform(0.5, 2.0, size=6)
    _, grad, _ = flow_matching_loss_and_grad(p, x, t, v, w)
    f = lambda theta: flow_matching_loss_and_grad(ParameterVector(theta, SMALL), x, t, v, w)[0]
    assert rel_err(grad, central_difference(f, p.values)) < 1e-6


def test_single_sample_flow_gradient():
    p = small_params(4)
    x, v, t = np.array([[0.5, -1.0]]), np.array([[1.0, 2.0]]), np.array([0.7])
    _, grad, _ = flow_matching_loss_and_grad(p, x, t, v)
    f = lambda theta: flow_matching_loss_and_grad(ParameterVector(theta, SMALL), x, t, v)[0]
    assert rel_err(grad, central_difference(f, p.values)) < 1e-5


def test_constant_objective_has_zero_gradient():
    p = small_params()
    _, grad, _ = flow_matching_loss_and_grad(p, np.zeros((3, 2)), 0.5, np.zeros((3, 2)), np.zeros(3))
    assert np.array_equal(grad, np.zeros_like(grad))


# --- optimizer ---------------------------------------------------------------------


def test_clip_grad_norm():
    g, n = clip_grad_norm(np.array([3.0, 4.0]), 1.0)
    assert n == 5.0 and np.linalg.norm(g) == pytest.approx(1.0, abs=1e-15)
    g, n = clip_grad_norm(np.array([0.3, 0.4]), 1.0)
    assert np.array_equal(g, [0.3, 0.4])


def test_warmup_lr():
    assert warmup_lr(1e-3, 1, 10) == pytest.approx(1e-4)
    assert warmup_lr(1e-3, 10, 10) == 1e-3
    assert warmup_lr(1e-3, 50, 10) == 1e-3
    assert warmup_lr(1e-3, 1, 0) == 1e-3


def test_adamw_hand_computed_first_steps():
    opt = AdamW(lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01)
    p = np.array([1.0, -2.0])
    g = np.array([0.5, -0.25])
    p1 = opt.step(p, g)
    # step 1: m_hat = g, v_hat = g^2, so the Adam step is lr * sign(g) up to eps
    expected = p * (1 - 0.1 * 0.01) - 0.1 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p1, expected, rtol=1e-15)
    g2 = np.array([-0.1, 0.2])
    p2 = opt.step(p1, g2)
    m = 0.9 * 0.1 * g + 0.1 * g2
    v = 0.999 * 0.001 * g**2 + 0.001 * g2**2
    m_hat, v_hat = m / (1 - 0.9**2), v / (1 - 0.999**2)
    expected2 = p1 * (1 - 0.1 * 0.01) - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
    np.testing.assert_allclose(p2, expected2, rtol=1e-14)


# --- EMA ---------------------------------------------------------------------------


def test_ema_cases():
    s = ema_update(EmaState(np.array([1.0]), 0.9, 0), np.array([0.0]))
    assert s.shadow[0] == pytest.approx(0.9, abs=1e-16)
    s = EmaState.start(np.zeros(1), RUNNING_MEAN)
    for x in (1.0, 2.0, 3.0):
        s = ema_update(s, np.array([x]))
    assert s.shadow[0] == 2.0 and s.updates_seen == 3
    s = EmaState(np.array([5.0]), 1.0)
    for _ in range(10):
        s = ema_update(s, np.array([-3.0]))
    assert s.shadow[0] == 5.0


def test_ema_validation():
    with pytest.raises(ValueError):
        EmaState(np.zeros(2), 1.5)
    with pytest.raises(ValueError):
        ema_update(EmaState(np.zeros(2)), np.zeros(3))


# --- checkpoint ---------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    p = small_params(5)
    ema = EmaState.start(p.values, RUNNING_MEAN)
    for k in range(3):
        ema = ema_update(ema, p.values + k)
    save_checkpoint(tmp_path / "ck", p, ema, "abc123")
    q, ema2, meta = load_checkpoint(tmp_path / "ck")
    assert np.array_equal(p.values, q.values) and q.spec == SMALL
    assert np.array_equal(ema.shadow, ema2.shadow) and np.array_equal(ema.total, ema2.total)
    assert (ema2.decay, ema2.updates_seen) == (RUNNING_MEAN, 3)
    assert meta["config_hash"] == "abc123"
    assert meta["shapes"]["W1"] == [3, 5]
    raw = (tmp_path / "ck" / "params.bin").read_bytes()
    assert raw == p.values.astype("<f8").tobytes()
    # continuing the restored running mean matches continuing the original
    assert np.array_equal(ema_update(ema, p.values).shadow, ema_update(ema2, p.values).shadow)


def test_checkpoint_without_ema(tmp_path):
    save_checkpoint(tmp_path, small_params())
    _, ema, meta = load_checkpoint(tmp_path)
    assert ema is None and meta["ema"] is None


# --- sampling ------------------------------------------------------------------------


def test_point_mass_flow_converges_to_origin():
    # x_t = sigma * eps for x0 = 0, so the ideal velocity is eps = x / sigma
    x1 = np.random.default_rng(0).normal(size=(100, 2))
    errs = [np.abs(integrate(lambda x, s: x / s, x1, n)).max() for n in (1, 4, 64)]
    assert max(errs) < 1e-12


def test_one_euler_step_is_one_step_denoise():
    p = small_params(2)
    x1 = np.random.default_rng(1).normal(size=(10, 2))
    out = integrate(p, x1, 1)
    assert np.array_equal(out, one_step_denoise(x1, 1.0, forward_velocity(p, x1, 1.0)))


def test_euler_sample_seeded():
    p = small_params()
    assert np.array_equal(euler_sample(p, 16, 5, seed=3), euler_sample(p, 16, 5, seed=3))
    assert not np.array_equal(euler_sample(p, 16, 5, seed=3), euler_sample(p, 16, 5, seed=4))
    with pytest.raises(ValueError):
        euler_sample(p, 4, 0, seed=0)


def test_non_finite_trajectory_rejected():
    with pytest.raises(FloatingPointError):
        integrate(lambda x, s: x * np.inf, np.ones((1, 2)), 2)


# --- data and reward ---------------------------------------------------------------------


def test_dataset_layout():
    ds = SyntheticDataset(n_samples=2000)
    assert ds.centers.shape == (8, 2)
    assert np.allclose(np.linalg.norm(ds.centers, axis=1), 10.0)
    assert len(ds.right_modes()) == 4 and np.all(ds.centers[ds.right_modes(), 0] > 0)
    for m in range(8):
        assert ds.centers[ds.mirror(m), 0] == pytest.approx(-ds.centers[m, 0])
    assert abs(right_half_fraction(ds.x) - 0.5) < 0.05
    assert np.array_equal(ds.x, SyntheticDataset(n_samples=2000).x)


def test_reward_at_center_mirror_and_boundary():
    ds = SyntheticDataset()
    region = TargetRegion(ds.centers[ds.right_modes()], radius=3.0, sharpness=2.0)
    for m in ds.right_modes():
        assert nft_reward_fn(ds.centers[m], region) > 0.95
        assert nft_reward_fn(ds.centers[ds.mirror(m)], region) < 0.05
    edge = ds.centers[ds.right_modes()[0]] + np.array([0.0, 3.0]) @ np.array([[0, 1], [1, 0]])
    assert nft_reward_fn(edge, region) == pytest.approx(0.5, abs=1e-12)
    assert nft_reward_fn(ds.centers[:3], region).shape == (3,)


# --- stage kernels vs finite differences ----------------------------------------------


def _row():
    return train_mod._blank_row(1, "x")


def _fd_check(step_fn, params, tol=1e-6):
    loss, grad = step_fn(params.values)
    fd = central_difference(lambda th: step_fn(th)[0], params.values, h=1e-6)
    assert np.isfinite(loss)
    assert rel_err(grad, fd) < tol


def test_flow_step_with_identity_loss_gradient():
    cfg = preset("sft", batch_size=8, world_size=8, identity_eta=2.0, seed=1)
    ds = SyntheticDataset(n_samples=256)
    harness = ToyIdentityHarness(2, seed=1)
    t = np.linspace(0.05, 0.85, 8)  # all below the cutoff, away from it

    def step(theta):
        rng = np.random.default_rng(0)
        return train_mod._flow_step(cfg, ParameterVector(theta, SMALL), ds, t, rng, harness, _row())

    _fd_check(step, small_params(6))
    row = _row()
    train_mod._flow_step(cfg, small_params(6), ds, t, np.random.default_rng(0), harness, row)
    assert row["id_loss"] > 0


def test_dpo_step_gradient():
    cfg = preset("dpo", batch_size=8, dpo_omega=3.0, dpo_lambda=0.1)
    ds = SyntheticDataset(n_samples=256)
    ref = small_params(7)
    t = np.random.default_rng(1).uniform(size=8)

    def step(theta):
        rng = np.random.default_rng(0)
        return train_mod._dpo_step(cfg, ParameterVector(theta, SMALL), ref, ds, t, rng, _row())

    _fd_check(step, small_params(8))


def test_nft_step_gradient():
    cfg = preset("nft", batch_size=8, nft_beta=0.7, nft_sample_steps=3)
    ds = SyntheticDataset(n_samples=256)
    region = train_mod.target_region(cfg, ds)
    old = small_params(9)
    t = np.random.default_rng(2).uniform(size=8)

    def step(theta):
        rng = np.random.default_rng(0)
        return train_mod._nft_step(cfg, ParameterVector(theta, SMALL), old, region, t, rng, _row())

    _fd_check(step, small_params(10))


def test_batch_identity_loss_matches_scalar_kernel():
    from flowforge.objectives import identity_loss_and_grad

    h = ToyIdentityHarness(2, 8, seed=3)
    rng = np.random.default_rng(3)
    x_hat, x_gt = rng.normal(size=(2, 20, 2))
    loss, grad = batch_identity_loss(h, x_hat, x_gt)
    for i in range(20):
        l_i, g_i = identity_loss_and_grad(x_hat[i], x_gt[i], h.roi(x_gt[i]))
        assert loss[i] == pytest.approx(l_i, rel=1e-12)
        np.testing.assert_allclose(grad[i], g_i, rtol=1e-10, atol=1e-14)
    assert np.allclose(batch_identity_loss(h, x_gt, x_gt)[0], 0.0, atol=1e-12)


# --- train_stage ---------------------------------------------------------------------


def test_zero_steps_is_a_no_op():
    p = small_params()
    res = train_stage(preset("pretrain", steps=0), SyntheticDataset(n_samples=64), p)
    assert np.array_equal(res.params.values, p.values) and res.metrics == []


def test_short_run_is_deterministic_and_logs_every_step():
    ds = SyntheticDataset(n_samples=512)
    cfg = preset("pretrain", steps=20, batch_size=32)
    a = train_stage(cfg, ds, small_params())
    b = train_stage(cfg, ds, small_params())
    assert np.array_equal(a.params.values, b.params.values)
    assert [r["step"] for r in a.metrics] == list(range(1, 21))
    assert all(r["grad_norm"] >= 0 and 0 <= r["t_min"] <= r["t_max"] < 1 for r in a.metrics)
    assert len(a.timesteps) == 20 * 8


def test_warmup_reflected_in_logged_lr():
    cfg = preset("sft", steps=10, warmup_steps=5, batch_size=16, learning_rate=1e-3)
    res = train_stage(cfg, SyntheticDataset(n_samples=256), small_params())
    assert [r["lr"] for r in res.metrics[:6]] == pytest.approx([2e-4, 4e-4, 6e-4, 8e-4, 1e-3, 1e-3])
    assert res.ema is not None and res.ema.updates_seen == 10


def test_reference_required_for_preference_stages():
    for stage in ("dpo", "nft"):
        with pytest.raises(ValueError, match="reference"):
            train_stage(preset(stage, steps=1), SyntheticDataset(n_samples=64), small_params())


def test_divergence_detected():
    cfg = preset("pretrain", steps=5, batch_size=16, learning_rate=1e300, weight_decay=0.0)
    with pytest.raises(DivergenceError):
        train_stage(cfg, SyntheticDataset(n_samples=64), small_params())


def test_config_validation():
    with pytest.raises(ValueError):
        preset("pretrain", batch_size=12, world_size=8)
    with pytest.raises(ValueError):
        preset("pretrain").replace(stage="ct")
