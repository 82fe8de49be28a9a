import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fdcheck import rel_error
from mcomm import envs
from mcomm import gradcore as gc
from mcomm import protocol as pr
from mcomm import training as tr

REFERENCE_CONSTANTS = dict(eps=1e-10, threshold=0.05, beta=0.5, alpha=0.01, lambda_min=1e-5, lambda_max=5e-3)


def toy_setup(n=3, seed=0, **spec_kw):
    env = envs.ToySumEnv(envs.ToyConfig(n_agents=n))
    spec_kw.setdefault("hidden_dim", 8)
    spec_kw.setdefault("message_dim", spec_kw["hidden_dim"])
    spec = pr.ProtocolSpec(**spec_kw)
    params = pr.init_params(spec, env.obs_dim, n, env.n_actions, np.random.default_rng(seed))
    return env, params


def tj_setup(seed=0, **spec_kw):
    env = envs.TrafficJunction(envs.TJConfig())
    spec = pr.ProtocolSpec(hidden_dim=8, message_dim=8, **spec_kw)
    return env, pr.init_params(spec, env.obs_dim, 5, 2, np.random.default_rng(seed))


def test_defaults_are_reference_constants():
    cfg = tr.TrainConfig()
    for k, v in REFERENCE_CONSTANTS.items():
        assert getattr(cfg, k) == v
    assert cfg.validate() == []


def test_config_validation_collects_violations():
    errs = tr.TrainConfig(lambda_min=0.1, lambda_max=0.01, threshold=0.0, beta=2.0).validate()
    assert len(errs) == 3
    assert any("0.1" in e and "0.01" in e for e in errs)


# -- efficiency weighting worked examples ----------------------------------


def test_smoothing_examples():
    iei, sei = tr.smoothed_terms(4.0, 0.0, 1.0, 0.5, 0.05)
    assert iei == 2.0 and sei == 0.0
    iei, _ = tr.smoothed_terms(1.0, 0.0, 0.01, 0.5, 0.05)
    assert iei == pytest.approx(1 - 0.5 * 0.05)


def test_weight_examples():
    c = REFERENCE_CONSTANTS
    # eps in the denominator puts the raw weight 2.5e-13 under the cap
    w = tr.dynamic_weights(1.0, 2.0, 2.0, c["alpha"], c["eps"], c["lambda_min"], c["lambda_max"])
    assert w == pytest.approx((5e-3, 5e-3), abs=1e-12) and max(w) <= 5e-3
    assert tr.dynamic_weights(1.0, 2.0, 2.0, c["alpha"], 0.0, c["lambda_min"], c["lambda_max"]) == (5e-3, 5e-3)
    w = tr.dynamic_weights(1.0, 1e12, 1e12, c["alpha"], c["eps"], c["lambda_min"], c["lambda_max"])
    assert w == (1e-5, 1e-5)
    w = tr.dynamic_weights(1.0, 0.0, 0.0, c["alpha"], c["eps"], c["lambda_min"], c["lambda_max"])
    assert w == (5e-3, 5e-3)


def test_augmented_loss_examples():
    assert tr.augmented_loss(1.25, 2.0, 0.4, 0.0, 0.0) == 1.25
    assert tr.augmented_loss(1.25, 2.0, 0.4, 5e-3, 5e-3) == pytest.approx(1.25 + 5e-3 * 2.4)


@settings(max_examples=300, deadline=None)
@given(
    st.floats(-1e6, 1e6, allow_nan=False),
    st.floats(0, 1e6, allow_nan=False),
    st.floats(-1e6, 1e6, allow_nan=False),
)
def test_weights_always_clamped(loss, iei, sei):
    c = REFERENCE_CONSTANTS
    for w in tr.dynamic_weights(loss, iei, sei, c["alpha"], c["eps"], c["lambda_min"], c["lambda_max"]):
        assert c["lambda_min"] <= w <= c["lambda_max"]


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1), st.floats(0, 20), st.floats(0, 1))
def test_smoothed_iei_nonnegative(success, h, beta):
    iei, _ = tr.smoothed_terms(h, 0.0, success, beta, 0.05)
    assert iei >= 0.0


# -- loss ------------------------------------------------------------------


def test_returns_to_go_restart_on_new_occupant():
    rewards = np.array([[-0.01, 0.0], [-10.02, -0.01], [-0.01, -0.02]])
    ids = np.array([[7, -1], [7, 8], [9, 8]])
    out = tr.returns_to_go(rewards, ids)
    np.testing.assert_allclose(out, [[-10.03, 0.0], [-10.02, -0.03], [-0.01, -0.02]])


def test_base_loss_hand_batch():
    logp = np.log([[0.5], [0.25]])
    values = np.array([[0.5], [-1.0]])
    targets = np.array([1.0, -1.0])
    L, la, lq = tr.base_loss(logp, values, targets, np.ones(2, bool), 0.5)
    exp_la = -(math.log(0.5) * 0.5 + math.log(0.25) * 0.0) / 2
    exp_lq = (0.25 + 0.0) / 2
    assert la[0, 0] == pytest.approx(exp_la)
    assert lq[0, 0] == pytest.approx(exp_lq)
    assert L[0, 0] == pytest.approx(exp_la + 0.5 * exp_lq)


def test_base_loss_degenerate_cases():
    logp = np.log([[0.3], [0.6], [0.9]])
    v = np.array([[1.0], [2.0], [3.0]])
    _, la, lq = tr.base_loss(logp, v, v[:, 0], np.ones(3, bool), 0.5)
    assert la[0, 0] == 0.0 and lq[0, 0] == 0.0


def test_base_loss_masks_inactive_rows():
    logp = np.log([[0.5], [0.1]])
    v = np.zeros((2, 1))
    _, la, lq = tr.base_loss(logp, v, np.array([1.0, 50.0]), np.array([True, False]), 0.5)
    assert la[0, 0] == pytest.approx(-math.log(0.5))
    assert lq[0, 0] == pytest.approx(1.0)


# -- rollouts and epochs ---------------------------------------------------


def test_rollout_episode_substreams_are_independent():
    env, params = tj_setup(topology="gated")
    one = tr.rollout(params, env, 1, 3, 2, 1)
    four = tr.rollout(params, env, 1, 3, 2, 4)
    k = one.steps * 5
    np.testing.assert_array_equal(one.obs, four.obs[:k])
    np.testing.assert_array_equal(one.actions, four.actions[:k])
    np.testing.assert_array_equal(one.topologies[0], four.topologies[0][:k])


def test_lr_zero_leaves_params_and_reports_stats():
    env, params = toy_setup()
    before = {k: params[k].value.copy() for k in params.names()}
    res = tr.train_epoch(params, env, tr.TrainConfig(lr=0.0, episodes_per_epoch=4), 0)
    for k in before:
        np.testing.assert_array_equal(params[k].value, before[k])
    assert res.stats.comm_count == 4 * 6 and 0.0 <= res.stats.success <= 1.0


def test_fixed_seed_reproduces_stats():
    runs = []
    for _ in range(2):
        env, params = tj_setup(topology="gated")
        cfg = tr.TrainConfig(lr=0.05, episodes_per_epoch=3, augmentation=True)
        runs.append([tr.train_epoch(params, env, cfg, e).stats for e in range(3)])
    assert runs[0] == runs[1]


def test_augmentation_logs_clamped_weights():
    env, params = tj_setup(topology="gated")
    cfg = tr.TrainConfig(lr=0.05, episodes_per_epoch=2, augmentation=True)
    for e in range(3):
        res = tr.train_epoch(params, env, cfg, e)
        for w in (res.losses["wIEI"], res.losses["wSEI"]):
            assert cfg.lambda_min <= w <= cfg.lambda_max
        for key in ("la", "lQ", "Lt", "total"):
            assert math.isfinite(res.losses[key])


def _manual_epoch(params, env, cfg, epoch):
    """Base-loss update written out from the public pieces, no augmentation code."""
    rounds = cfg.rounds_train if cfg.rounds_train is not None else params.spec.rounds
    batch = tr.rollout(params, env, rounds, cfg.seed, epoch, cfg.episodes_per_epoch)
    g = gc.Graph()
    P = pr.Bound(params, g)
    h0 = pr.encode_observations(g.input("obs", batch.obs), P)
    h, _, _ = pr.run_rounds(h0, P, batch.active, batch.group, rounds, hard_topologies=batch.topologies)
    _, logp, _ = pr.act(pr.policy_logits(h, P), actions=batch.actions)
    values = pr.critic_values(h, P, batch.group)
    loss, _, _ = tr.base_loss(logp, values, tr.batch_targets(batch), batch.active, cfg.w_q)
    gc.backward(g, loss)
    gc.sgd_step(list(params), cfg.lr)


@pytest.mark.parametrize("topology", pr.TOPOLOGIES)
def test_augmentation_off_is_bit_identical_to_base_loop(topology):
    cfg = tr.TrainConfig(lr=0.1, episodes_per_epoch=3, augmentation=False)
    env, a = tj_setup(topology=topology)
    _, b = tj_setup(topology=topology)
    for e in range(4):
        tr.train_epoch(a, env, cfg, e)
        _manual_epoch(b, env, cfg, e)
        for k in a.names():
            assert a[k].value.tobytes() == b[k].value.tobytes(), (e, k)


def test_augmentation_changes_message_parameters():
    cfg_off = tr.TrainConfig(lr=0.1, episodes_per_epoch=3)
    cfg_on = replace(cfg_off, augmentation=True)
    env, a = tj_setup(message="linear")
    _, b = tj_setup(message="linear")
    tr.train_epoch(a, env, cfg_off, 0)
    tr.train_epoch(b, env, cfg_on, 0)
    assert not np.array_equal(a["msg.W"].value, b["msg.W"].value)


def test_non_finite_loss_aborts_and_keeps_params(caplog):
    env, params = toy_setup()
    params["pi.W"].value[...] = 1e308
    keep = {k: params[k].value.copy() for k in params.names()}
    res = tr.train_epoch(params, env, tr.TrainConfig(lr=0.1, episodes_per_epoch=2), 0)
    assert res.aborted
    for k in keep:
        np.testing.assert_array_equal(params[k].value, keep[k])


def frozen_total(params, batch, cfg, monkeypatch):
    """Loss function of the params with the critic baseline and the clamped
    weights frozen at their current values, as the analytic gradient sees them."""
    _, _, _, losses = tr.build_loss(params, batch, cfg, 1, 0)
    weights = (losses["wIEI"], losses["wSEI"])
    h = pr.Bound(params)
    hfin, _, _ = pr.run_rounds(
        pr.encode_observations(batch.obs, h), h, batch.active, batch.group, 1, hard_topologies=batch.topologies
    )
    v0 = pr.critic_values(hfin, h, batch.group).copy()
    original = tr.base_loss

    def base_loss_frozen(log_probs, values, targets, mask, w_q):
        targets = np.asarray(targets, dtype=float).reshape(-1, 1)
        m = np.asarray(mask, dtype=float).reshape(-1, 1)
        count = max(m.sum(), 1.0)
        l_a = gc.sum_(gc.mul(log_probs, (targets - v0) * m)) * (-1.0 / count)
        _, _, l_q = original(log_probs, values, targets[:, 0], mask, w_q)
        return gc.add(l_a, gc.scale(l_q, w_q)), l_a, l_q

    monkeypatch.setattr(tr, "dynamic_weights", lambda *a, **k: weights)
    monkeypatch.setattr(tr, "base_loss", base_loss_frozen)

    def total():
        return tr.build_loss(params, batch, cfg, 1, 0)[3]["total"]

    return total


def test_end_to_end_gradient_matches_finite_differences(monkeypatch):
    env, params = toy_setup(n=2, seed=5, message="linear", policy_hidden=4)
    cfg = tr.TrainConfig(episodes_per_epoch=2, augmentation=True)
    batch = tr.rollout(params, env, 1, 0, 0, cfg.episodes_per_epoch)
    total = frozen_total(params, batch, cfg, monkeypatch)
    for p in params:
        p.zero_grad()
    g, loss, _, _ = tr.build_loss(params, batch, cfg, 1, 0)
    gc.backward(g, loss)
    worst = 0.0
    for p in params:
        num = np.zeros_like(p.value)
        for idx in np.ndindex(p.value.shape):
            old = p.value[idx]
            p.value[idx] = old + 1e-5
            up = total()
            p.value[idx] = old - 1e-5
            down = total()
            p.value[idx] = old
            num[idx] = (up - down) / 2e-5
        worst = max(worst, rel_error(p.grad, num))
    assert worst < 1e-3


def test_evaluate_is_deterministic_and_update_free():
    env, params = tj_setup(topology="gated")
    cfg = tr.TrainConfig(eval_episodes=3)
    keep = {k: params[k].value.copy() for k in params.names()}
    a = tr.evaluate(params, env, cfg)
    b = tr.evaluate(params, env, cfg)
    assert a == b
    for k in keep:
        np.testing.assert_array_equal(params[k].value, keep[k])


def test_evaluate_without_rounds_has_no_communication():
    env, params = tj_setup()
    stats = tr.evaluate(params, env, tr.TrainConfig(eval_episodes=2, rounds_exec=0))
    assert stats.comm_count == 0 and stats.tei is None


def test_execution_rounds_match_centralized_greedy():
    env, params = tj_setup(topology="attention_topk", aggregation="attention", rounds=2)
    cfg = tr.TrainConfig(eval_episodes=2)
    _, log = tr.evaluate_traces(params, env, cfg)
    for obs, active, actions in log:
        a, _, _ = pr.centralized_step(obs, params, active, 2)
        np.testing.assert_array_equal(a, actions)
