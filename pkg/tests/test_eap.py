import numpy as np
import pytest

from recoverkit import eap
from recoverkit.approx import unpack
from recoverkit.envs.cartpole import SwingupConfig, SwingupTask
from recoverkit.ppo import PPOConfig, ppo_train
from recoverkit.seeding import child_seed

SMALL_PPO = PPOConfig(batch_steps=128, n_envs=4, minibatch=64, epochs=2, hidden=(16, 16))


@pytest.fixture(scope="module")
def env_set():
    return eap.make_env_set(seed=0)


def small_cfg(**kw):
    base = dict(sample_budget=3000, pretrain_iterations=2, pretrain_check=0, error_entries=16,
                error_epochs=1, ppo=SMALL_PPO)
    base.update(kw)
    return eap.EAPConfig(**base)


def buffer_states(n, seed=0):
    rng = np.random.default_rng(seed)
    return np.column_stack([rng.uniform(-0.5, 0.5, n), rng.uniform(-1, 1, n),
                            rng.uniform(-np.pi, np.pi, n), rng.uniform(-3, 3, n)])


# ------------------------------------------------------------- environments

def test_env_ranges_are_disjoint(env_set):
    r = env_set.ranges
    for mu, nu in env_set.train:
        assert np.all(np.abs(mu / eap.MU_NOMINAL - 1) <= r.train_mu_dev)
        assert np.all((nu >= r.train_nu[0]) & (nu <= r.train_nu[1]))
    for mu, nu in env_set.validation:
        assert np.all(np.abs(mu / eap.MU_NOMINAL - 1) >= r.test_mu_dev[0])
        assert np.all(nu >= r.test_nu[0])
    with pytest.raises(ValueError):
        eap.EnvRanges(train_mu_dev=0.3, test_mu_dev=(0.25, 0.4))
    with pytest.raises(ValueError):
        eap.EnvSet(env_set.reference, env_set.train, [env_set.train[0]])


def test_env_set_round_trip(env_set):
    back = eap.EnvSet.from_dict(env_set.to_dict())
    assert env_set.to_dict() == back.to_dict()
    assert back.to_dict()["format_version"] == eap.FORMAT_VERSION


# ----------------------------------------------------------- error function

def test_identical_dynamics_give_zero_error_labels(env_set):
    pol = eap.EAPolicy(2, SMALL_PPO, 0)
    task = eap.env_task([env_set.reference])
    ref = eap.EnvSet.dyn(env_set.reference)
    data = eap.collect_error_data(pol, task, ref, ref, buffer_states(64), 5, 64, np.random.default_rng(0))
    assert np.array_equal(data.labels, np.zeros_like(data.labels))


def test_horizon_must_be_positive(env_set):
    pol = eap.EAPolicy(2, SMALL_PPO, 0)
    ref = eap.EnvSet.dyn(env_set.reference)
    with pytest.raises(ValueError):
        eap.collect_error_data(pol, eap.env_task([env_set.reference]), ref, ref, buffer_states(4), 0, 4,
                               np.random.default_rng(0))
    with pytest.raises(ValueError):
        eap.EAPConfig(horizon=0)


def test_error_data_regeneration_is_bit_identical(env_set):
    pol = eap.EAPolicy(2, SMALL_PPO, 0)
    task = eap.env_task([env_set.reference])
    ref, val = eap.EnvSet.dyn(env_set.reference), eap.EnvSet.dyn(env_set.train[1])
    a = eap.collect_error_data(pol, task, ref, val, buffer_states(32), 3, 32, np.random.default_rng(5))
    b = eap.collect_error_data(pol, task, ref, val, buffer_states(32), 3, 32, np.random.default_rng(5))
    for k in ("s0", "a0", "sT", "s0T", "mu"):
        assert np.array_equal(getattr(a, k), getattr(b, k))
    assert np.any(a.labels != 0)


def test_labels_negate_when_environments_swap(env_set):
    pol = eap.EAPolicy(2, SMALL_PPO, 0)
    task = eap.env_task([env_set.reference])
    ref, val = eap.EnvSet.dyn(env_set.reference), eap.EnvSet.dyn(env_set.validation[0])
    a = eap.collect_error_data(pol, task, ref, val, buffer_states(32), 4, 32, np.random.default_rng(2))
    b = eap.collect_error_data(pol, task, val, ref, buffer_states(32), 4, 32, np.random.default_rng(2))
    assert np.array_equal(a.labels, -b.labels)


def test_zero_labels_are_learned(env_set):
    from recoverkit.bench import identical_dynamics_mse
    mse, label_max = identical_dynamics_mse(0)
    assert label_max == 0.0 and mse < 1e-4


def test_single_point_is_memorized():
    rng = np.random.default_rng(0)
    data = eap.ErrorData(buffer_states(1), rng.normal(size=(1, 1)), rng.normal(size=(1, 4)),
                         rng.normal(size=(1, 4)), eap.MU_NOMINAL[None] * 1.1)
    E = eap.ErrorFn("full", learning_rate=1e-2, seed=1)
    for _ in range(3000):
        E.step(data.inputs(), data.labels)
    assert E.loss(data.inputs(), data.labels) < 1e-6


@pytest.mark.parametrize("rep", ["full", "projected"])
def test_loss_is_sum_of_squared_error_norms(rep):
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 9))
    y = rng.normal(size=(3, 4))
    E = eap.ErrorFn(rep, seed=2)
    total = 0.0
    for i in range(3):
        pred = E.predict(x[i:i + 1])[0]
        total += sum((pred[j] - y[i, j]) ** 2 for j in range(4))
    assert E.loss(x, y) == pytest.approx(total, rel=1e-12)


def test_error_fit_leaves_policy_untouched(env_set):
    pol = eap.EAPolicy(2, SMALL_PPO, 0)
    obs = np.random.default_rng(0).normal(size=(5, 5))
    mu = np.tile(eap.MU_NOMINAL, (5, 1))
    before = pol.nominal_mean(obs, mu)
    task = eap.env_task([env_set.reference])
    data = eap.collect_error_data(pol, task, eap.EnvSet.dyn(env_set.reference),
                                  eap.EnvSet.dyn(env_set.train[0]), buffer_states(64), 3, 64, np.random.default_rng(1))
    eap.train_error_fn(eap.ErrorFn(seed=0), data, 3)
    assert np.array_equal(before, pol.nominal_mean(obs, mu))


@pytest.mark.parametrize("rep", ["full", "projected"])
def test_holdout_error_decreases_over_first_epochs(env_set, rep):
    pol = eap.EAPolicy(2, SMALL_PPO, 0)
    task = eap.env_task([env_set.reference])
    data = eap.collect_error_data(pol, task, eap.EnvSet.dyn(env_set.reference),
                                  eap.EnvSet.dyn(env_set.train[2]), buffer_states(2000), 5, 2000,
                                  np.random.default_rng(3))
    hold = eap.train_error_fn(eap.ErrorFn(rep, seed=0), data, 5, np.random.default_rng(0))["holdout_mse"]
    assert all(b <= 1.05 * a for a, b in zip(hold, hold[1:])), hold


# ----------------------------------------------------------------- policies

def test_error_input_weights_get_no_gradient_in_pretraining(env_set):
    cfg = small_cfg()
    pol = eap.EAPolicy(2, cfg.ppo, child_seed(0, "eap", "policy", 0))
    W0 = unpack(pol.policy.net.spec, pol.policy.net.params)[0][0].copy()
    trained, _ = eap.pretrain_reference(env_set, cfg, 0)
    W1 = unpack(trained.policy.net.spec, trained.policy.net.params)[0][0]
    assert np.array_equal(W1[-2:], W0[-2:])
    assert not np.array_equal(W1[:-2], W0[:-2])


def test_zero_error_fn_rollout_equals_nominal_policy(env_set):
    pol = eap.EAPolicy(2, SMALL_PPO, 3)
    E = eap.ErrorFn(seed=1).zero_()
    task = eap.env_task([env_set.train[0]], cfg=SwingupConfig(episode_time=1.0))
    res = eap.eap_rollout(pol, E, task, 4, np.random.default_rng(9))

    rng = np.random.default_rng(9)
    state = task.reset(4, rng)
    actions = []
    for _ in range(len(res["a_hat"])):
        x = pol.inputs(task.observe(state), state["dyn"][:, :3])
        a, _ = pol.policy.sample(x, rng)
        actions.append(a)
        state, _, _, _ = task.step(state, a, rng)
    assert np.array_equal(res["a_hat"], np.array(actions))


def test_rollout_makes_two_policy_queries_per_step(env_set):
    pol = eap.EAPolicy(2, SMALL_PPO, 3)
    task = eap.env_task([env_set.train[0]], cfg=SwingupConfig(episode_time=0.5))
    pol.queries = 0
    res = eap.eap_rollout(pol, eap.ErrorFn(seed=1), task, 3, np.random.default_rng(0))
    assert pol.queries == 2 * len(res["r"])


def test_stored_rewards_replay_to_environment_return(env_set):
    pol = eap.EAPolicy(2, SMALL_PPO, 3)
    pair = env_set.train[1]
    task = eap.env_task([pair], cfg=SwingupConfig(episode_time=1.0))
    res = eap.eap_rollout(pol, eap.ErrorFn(seed=1), task, 5, np.random.default_rng(0))
    assert np.allclose(res["r"].sum(axis=0), res["env_return"], rtol=0, atol=1e-12)
    # replay the recorded actions through a fresh environment
    p = eap.NOMINAL.with_dynamics(pair[0], pair[1])
    replay = SwingupTask(p, SwingupConfig(episode_time=1.0))
    state = replay.reset(5, None, states=res["start"])
    ret, alive = np.zeros(5), np.ones(5, dtype=bool)
    for a in res["a_hat"]:
        state, r, term, trunc = replay.step(state, a)
        ret += np.where(alive, r, 0.0)
        alive &= ~(term | trunc)
    assert np.allclose(ret, res["env_return"], rtol=0, atol=1e-12)


def test_evaluation_uses_the_rollout_error(env_set):
    pol = eap.EAPolicy(2, SMALL_PPO, 3)
    E = eap.ErrorFn(seed=1)
    task = eap.env_task([env_set.validation[0]])
    state = task.reset(6, np.random.default_rng(0))
    obs = task.observe(state)
    zs = eap.ZeroShotPolicy.from_eap(pol, E)
    assert np.array_equal(zs(obs, state), eap.eap_act(pol, E, obs, state))
    assert zs.queries == 2


def test_zero_shot_policy_round_trip(tmp_path, env_set):
    pol = eap.EAPolicy(2, SMALL_PPO, 3)
    zs = eap.ZeroShotPolicy.from_eap(pol, eap.ErrorFn(seed=1))
    zs.save(tmp_path / "p.json")
    back = eap.ZeroShotPolicy.load(tmp_path / "p.json")
    task = eap.env_task([env_set.validation[1]])
    state = task.reset(3, np.random.default_rng(0))
    obs = task.observe(state)
    assert np.array_equal(zs(obs, state), back(obs, state))


def test_up_input_dimension():
    assert eap.UP_INPUT_DIM == 5 + 3 + 3
    agent, _ = eap.train_up(eap.make_env_set(), eap.EAPConfig(sample_budget=0, ppo=SMALL_PPO))
    assert agent.policy.in_dim == 11


def test_normalized_best_env_scores_one():
    norm = eap.normalize_returns({"a": [10.0, 2.0, 0.0], "b": [5.0, 4.0, 0.0]})
    assert np.max([norm["a"], norm["b"]], axis=0).tolist() == [1.0, 1.0, 0.0]
    assert norm["b"][0] == 0.5


# ----------------------------------------------------------------- training

def test_metrics_rows_match_update_count(env_set):
    cfg = small_cfg(sample_budget=2000)
    pol = eap.EAPolicy(2, cfg.ppo, 0)
    _, _, rows = eap.train_eap(env_set, cfg, 0, pretrained=(pol, 0))
    per_update = cfg.ppo.batch_steps + 2 * cfg.horizon * cfg.error_entries
    expected = int(np.ceil((cfg.sample_budget - cfg.ppo.batch_steps) / per_update))
    assert len(rows) == expected
    assert [r["iteration"] for r in rows] == list(range(expected))


def test_single_reference_env_gives_zero_errors(env_set):
    es = eap.EnvSet(env_set.reference, [env_set.reference], env_set.validation)
    cfg = small_cfg(sample_budget=1200)
    pol = eap.EAPolicy(2, cfg.ppo, 0)
    _, E, rows = eap.train_eap(es, cfg, 0, pretrained=(pol, 0))
    # every label is zero, so the fit only shrinks the initial output
    mse = [r["error_train_mse"] for r in rows]
    assert len(mse) > 3 and all(b < a for a, b in zip(mse, mse[1:]))


def test_dr_without_env_variation_equals_plain_ppo(env_set):
    pair = env_set.train[0]
    es = eap.EnvSet(env_set.reference, [pair], env_set.validation)
    cfg = eap.EAPConfig(sample_budget=256, ppo=SMALL_PPO)
    agent, _ = eap.train_dr(es, cfg, seed=4)
    plain = SwingupTask(eap.NOMINAL.with_dynamics(pair[0], pair[1]))
    ref, _ = ppo_train(plain, 2, SMALL_PPO, seed=child_seed(4, "dr"))
    assert np.array_equal(agent.policy.net.params, ref.policy.net.params)
    again, _ = eap.train_dr(es, cfg, seed=4)
    assert np.array_equal(agent.policy.net.params, again.policy.net.params)
