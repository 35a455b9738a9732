
import numpy as np
import pytest
from hypothesis import given, strategies as st

from recoverkit import relay
from recoverkit.approx import MLP, NetSpec, init_params
from recoverkit.envs.cartpole import GaussianStart, SwingupConfig, SwingupTask


def brute_split_errors(values, labels):
    """Fewest misclassifications of ``good = value > c`` over every cut."""
    v = np.asarray(values)
    cuts = np.concatenate([[v.min() - 1.0], v])
    return min(int(np.sum((v > c) != labels)) for c in cuts)


def test_separable_threshold_is_midpoint():
    th = relay.compute_threshold_from_labels([0.2, 0.3, 0.8, 0.9], [False, False, True, True])
    assert th == pytest.approx(0.55, abs=1e-12)


@pytest.mark.parametrize("labels", [[True] * 4, [False] * 4])
def test_single_label_threshold_is_undefined(labels):
    with pytest.raises(relay.ThresholdUndefined):
        relay.compute_threshold_from_labels([0.1, 0.2, 0.3, 0.4], labels)


def test_interleaved_labels_match_exhaustive_scan():
    v = np.arange(8) / 8.0
    y = np.array([False, True] * 4)
    split, err = relay.best_split(v, y)
    assert err == brute_split_errors(v, y)
    assert np.sum((v > split) != y) == err


def test_duplicate_value_with_conflicting_labels_costs_one_error():
    split, err = relay.best_split([0.5, 0.5], [False, True])
    assert err == 1
    split, err = relay.best_split([0.1, 0.5, 0.5, 0.9], [False, False, True, True])
    assert err == 1


@given(st.lists(st.tuples(st.integers(-6, 6), st.booleans()), min_size=1, max_size=30))
def test_split_equals_brute_force(data):
    v = np.array([d[0] for d in data], dtype=float) / 3.0
    y = np.array([d[1] for d in data])
    split, err = relay.best_split(v, y)
    assert err == brute_split_errors(v, y)
    assert np.sum((v > split) != y) == err


def test_relay_return_examples():
    assert relay.relay_return([1.0, 1.0], "failure", 5.0, 0.0, 0.9) == pytest.approx(1.9, abs=1e-12)
    assert relay.relay_return([0.0] * 7, "reached", 2.0, 1.0, 1.0) == pytest.approx(60.0, abs=1e-9)
    assert relay.relay_return([0.0, 0.0], "reached", 1.0, 0.5, 0.9) == pytest.approx(24.3, abs=1e-9)
    # below the parent's threshold: no bonus
    assert relay.relay_return([0.0, 0.0], "timeout", 0.4, 0.5, 0.9) == 0.0


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=20), st.floats(0.0, 1.0),
       st.sampled_from(["failure", "reached", "timeout"]), st.floats(-5, 5), st.floats(-5, 5))
def test_relay_return_without_bonus_weight_is_discounted_return(rewards, gamma, cause, vp, th):
    plain = sum(r * gamma ** t for t, r in enumerate(rewards))
    assert relay.relay_return(rewards, cause, vp, th, gamma, alpha=0.0) == pytest.approx(plain, rel=1e-12, abs=1e-12)


# ------------------------------------------------------------------ proposal

class Quadratic:
    """V(s) = -|s|^2."""

    def __call__(self, s):
        return -float(np.dot(s, s))

    def grad(self, s):
        return -2.0 * np.asarray(s)


class Linear:
    def __init__(self, a):
        self.a = np.asarray(a, float)

    def __call__(self, s):
        return float(self.a @ s)

    def grad(self, s):
        return self.a.copy()


class NetValue:
    def __init__(self, net):
        self.net = net

    def __call__(self, s):
        return float(self.net(np.asarray(s)[None])[0, 0])

    def grad(self, s):
        return self.net.input_gradient(np.asarray(s), np.ones(1))


def test_stationary_feasible_start_is_returned_unchanged():
    s = relay.propose_next_init(Quadratic(), 0.0, np.zeros(3), 0.0, np.zeros(3))
    assert np.array_equal(s, np.zeros(3))


def test_quadratic_value_lands_on_unit_sphere():
    s = relay.propose_next_init(Quadratic(), -1.0, np.zeros(3), 0.0, [0.3, -0.1, 0.2])
    assert np.linalg.norm(s) == pytest.approx(1.0, abs=1e-4)


def test_large_weight_returns_projection_of_target():
    mu = np.array([-2.0, 3.0])
    s = relay.propose_next_init(Linear([1.0, 0.0]), 1.0, mu, 1e6, [1.5, 0.0])
    assert np.allclose(s, [1.0, 3.0], atol=1e-3)


def test_box_constraint_is_respected():
    mu = np.array([5.0, 5.0])
    s = relay.propose_next_init(Linear([1.0, 1.0]), 0.0, mu, 1.0, [0.5, 0.5],
                                lower=np.array([-1.0, -1.0]), upper=np.array([1.0, 1.0]))
    assert np.all(np.abs(s) <= 1.0 + 1e-6) and s.sum() >= -1e-6


def test_unreachable_threshold_is_a_proposal_failure():
    with pytest.raises(relay.ProposalFailure):
        relay.propose_next_init(Quadratic(), 1.0, np.zeros(2), 0.1, [0.5, 0.5])


@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
def test_proposal_meets_value_constraint(seed, w):
    rng = np.random.default_rng(seed)
    spec = NetSpec(3, (8,), 1, seed=seed)
    value = NetValue(MLP(spec, init_params(spec, rng)))
    start = rng.normal(size=3)
    threshold = value(rng.normal(size=3))
    try:
        s = relay.propose_next_init(value, threshold, rng.normal(size=3), w, start)
    except relay.ProposalFailure:
        return
    assert value(s) >= threshold - 1e-6


# -------------------------------------------------------------------- graph

def random_node(seed, parent=None, threshold=0.0):
    rng = np.random.default_rng(seed)
    pol = NetSpec(5, (8,), 1, seed=seed)
    val = NetSpec(5, (8,), 1, seed=seed + 1)
    start = GaussianStart.diagonal([0.0, 0.0, np.pi, 0.0], [0.1, 0.1, 0.3, 0.3])
    return relay.RelayNode(start, MLP(pol, init_params(pol, rng) * 3), np.full(1, -0.5),
                           MLP(val, init_params(val, rng)), 1.0, threshold, parent)


def short_task():
    return SwingupTask(cfg=SwingupConfig(episode_time=1.0))


def test_single_node_graph_equals_plain_policy_execution():
    task = short_task()
    node = random_node(0)
    node.policy.params = node.policy.params * 0.1
    starts = GaussianStart.diagonal([0.0, 0.0, np.pi, 0.0], [0.3, 0.3, 1.0, 1.0]).sample(6, np.random.default_rng(1))
    out = relay.execute(relay.RelayGraph(nodes=[node]), task, starts)

    state = task.reset(6, np.random.default_rng(0), states=starts)
    alive = np.ones(6, dtype=bool)
    ret = np.zeros(6)
    for _ in range(task.n_steps):
        state, r, term, _ = task.step(state, node.policy(task.observe(state)))
        ret += np.where(alive, r, 0.0)
        alive &= ~term
    assert np.array_equal(out["ret"], ret)
    assert np.array_equal(out["failed"], ~alive)
    assert alive.any()
    # finished episodes are frozen at zero action; only live ones must match
    assert np.array_equal(out["state"]["s"][alive], state["s"][alive])


def chain(thresholds):
    nodes = [random_node(10 * k, parent=None if k == 0 else k - 1, threshold=th) for k, th in enumerate(thresholds)]
    return relay.RelayGraph(nodes=nodes)


def test_state_above_root_threshold_starts_at_root():
    task = short_task()
    g = chain([-1e9, 1e9, 1e9])
    starts = np.tile([0.0, 0.0, np.pi, 0.0], (4, 1))
    out = relay.execute(g, task, starts, steps=3, trace=True)
    assert np.all(out["trace"][0] == 0)


def test_handover_trace_audit():
    task = short_task()
    starts = GaussianStart.diagonal([0.0, 0.0, np.pi, 0.0], [0.3, 0.3, 1.5, 2.0]).sample(40, np.random.default_rng(2))
    obs0 = task.observe_states(starts)
    g = chain([0.0, 0.0, 0.0])
    for node in g.nodes:   # thresholds inside the visited value range
        node.threshold = float(np.median(node.v(obs0)))
    out = relay.execute(g, task, starts, trace=True)
    tr, obs = out["trace"], out["obs"]
    switched = 0
    for t in range(tr.shape[0]):
        for i in range(tr.shape[1]):
            k = tr[t, i]
            p = g.nodes[k].parent
            # a child never keeps control once its parent's threshold is crossed
            if p is not None:
                assert g.nodes[p].v(obs[t, i][None])[0] <= g.nodes[p].threshold
            # control only moves from a child to its parent, at a crossing
            if t > 0 and tr[t - 1, i] != k:
                switched += 1
                assert g.nodes[tr[t - 1, i]].parent == k
                assert g.nodes[k].v(obs[t, i][None])[0] > g.nodes[k].threshold
    assert switched > 0


def test_graph_save_load_round_trip(tmp_path):
    g = chain([0.1, -0.2])
    g.nodes[1].probe_start = g.nodes[1].start.inflated(1.5)
    g.log.append({"node": 0, "samples": 10})
    g.save(tmp_path / "graph")
    h = relay.RelayGraph.load(tmp_path / "graph")
    assert h.alpha == g.alpha and h.w == g.w and h.log == g.log
    for a, b in zip(g.nodes, h.nodes):
        assert np.array_equal(a.policy.params, b.policy.params)
        assert np.array_equal(a.value.params, b.value.params)
        assert a.threshold == b.threshold and a.parent == b.parent
        assert np.array_equal(a.start.cov, b.start.cov)


def test_matched_width_for_single_policy_baseline():
    target = 2 * 1000
    h = relay.one_hidden_width(target / 2, 5, 1)
    sizes = [abs(NetSpec(5, (k, k), 1).param_count - 1000) for k in range(1, 100)]
    assert h == 1 + int(np.argmin(sizes))
