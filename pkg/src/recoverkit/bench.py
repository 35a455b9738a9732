"""Report aggregation for ``compare``/``plot-roa`` and the acceptance targets.

Each target ``c1`` .. ``c9`` returns a :class:`Target` verdict and can write a
JSON result file; ``run_targets`` drives them for the ``bench`` subcommand.
"""
from __future__ import annotations

import copy
import csv
import json
import tempfile
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import approx
from . import curriculum as cur
from . import dp
from . import eap
from . import mace
from . import relay
from .envs import fall as F
from .envs.balancer import BalancerParams, balancer_step, lqr_action, lqr_gain
from .ppo import PPOConfig, Runner
from .seeding import child_seed, stream

FORMAT_VERSION = 1


# ------------------------------------------------------------------ compare

def _header(path):
    with open(path, newline="") as fh:
        return next(csv.reader(fh), [])


def report_kind(header):
    h = set(header)
    if {"state_id", "dp_reward"} <= h:
        return "fall"
    if {"direction", "angle", "magnitude"} <= h:
        return "roa"
    if {"iteration", "theta", "omega", "success_rate"} <= h:
        return "roa_history"
    if {"method", "samples", "success_rate"} <= h:
        return "relay"
    if {"method", "env_id", "normalized_return", "seed"} <= h:
        return "eap"
    return None


def fall_histogram(dp_rewards, policy_rewards=None, bins=10):
    """Counts of min-rewards per bin on [0, 1]; the last bin is closed."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    dp_count = np.histogram(np.asarray(dp_rewards, float), edges)[0]
    pol_count = None if policy_rewards is None else np.histogram(np.asarray(policy_rewards, float), edges)[0]
    rows = []
    for i in range(bins):
        row = {"bin_lo": float(edges[i]), "bin_hi": float(edges[i + 1]), "dp_count": int(dp_count[i])}
        row["policy_count"] = "" if pol_count is None else int(pol_count[i])
        rows.append(row)
    return rows


def _roa_label(row):
    if "label" in row:
        return row["label"]
    return "/".join(str(row[k]) for k in ("method", "seed", "env_id") if k in row)


def _polygons_from_rows(rows):
    groups = defaultdict(list)
    for r in rows:
        groups[_roa_label(r)].append((int(r["direction"]), float(r["magnitude"])))
    out = []
    for label, pts in groups.items():
        pts.sort()
        out.append((label, cur.RoAPolygon([m for _, m in pts])))
    return out


def _history_polygon(rows, label):
    last = max(int(r["iteration"]) for r in rows)
    mags = [float(r["omega"]) for r in rows if int(r["iteration"]) == last]
    return label, cur.RoAPolygon(mags)


def compare_reports(paths, bins=10):
    """Aggregate report CSVs into comparison tables ``{name: (fields, rows)}``.

    The report type is recognized from the header: fall episode files give a
    DP-vs-policy histogram and summary, RoA files give areas, relay
    evaluation files give testing curves, EAP report files give per-method bars.
    """
    fall_dp, fall_pol, roa, relay_rows, eap_rows = [], [], [], [], []
    for path in paths:
        header = _header(path)
        kind = report_kind(header)
        if kind is None:
            raise ValueError(f"unrecognized report header in {path}: {','.join(header)}")
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if kind == "fall":
            fall_dp += [float(r["dp_reward"]) for r in rows]
            if "policy_reward" in header:
                fall_pol += [float(r["policy_reward"]) for r in rows if r["policy_reward"] != ""]
        elif kind == "roa":
            roa += _polygons_from_rows(rows)
        elif kind == "roa_history":
            if rows:
                roa.append(_history_polygon(rows, Path(path).parent.name or Path(path).stem))
        elif kind == "relay":
            relay_rows += rows
        else:
            eap_rows += rows
    tables = {}
    if fall_dp:
        pol = fall_pol if fall_pol else None
        tables["fall_histogram"] = (["bin_lo", "bin_hi", "dp_count", "policy_count"],
                                    fall_histogram(fall_dp, pol, bins))
        summ = [{"method": "dp", "episodes": len(fall_dp), "mean": float(np.mean(fall_dp)),
                 "median": float(np.median(fall_dp))}]
        if pol:
            summ.append({"method": "policy", "episodes": len(pol), "mean": float(np.mean(pol)),
                         "median": float(np.median(pol))})
        tables["fall_summary"] = (["method", "episodes", "mean", "median"], summ)
    if roa:
        tables["roa_areas"] = (["label", "directions", "area"],
                               [{"label": lab, "directions": p.M, "area": cur.roa_area(p)} for lab, p in roa])
    if relay_rows:
        groups = defaultdict(list)
        for r in relay_rows:
            groups[(r["method"], int(r["samples"]))].append(float(r["success_rate"]))
        tables["relay_curves"] = (["method", "samples", "runs", "median_success", "mean_success"],
                                  [{"method": m, "samples": s, "runs": len(v), "median_success": float(np.median(v)),
                                    "mean_success": float(np.mean(v))} for (m, s), v in sorted(groups.items())])
    if eap_rows:
        tables["eap_bars"] = (["method", "seeds", "median", "mean", "min", "max"], eap_bars(eap_rows))
    return tables


def eap_bars(rows):
    """Per method: mean normalized return over environments for each seed,
    then median/mean/min/max over seeds."""
    per = defaultdict(lambda: defaultdict(list))
    for r in rows:
        per[r["method"]][int(r["seed"])].append(float(r["normalized_return"]))
    out = []
    for method in sorted(per):
        v = np.array([np.mean(per[method][s]) for s in sorted(per[method])])
        out.append({"method": method, "seeds": len(v), "median": float(np.median(v)), "mean": float(v.mean()),
                    "min": float(v.min()), "max": float(v.max())})
    return out


def _bar_svg(title, labels, values, width=480, bar=22):
    vmax = max([abs(v) for v in values] + [1e-12])
    height = 40 + bar * len(values)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<text x="10" y="20">{title}</text>']
    for i, (lab, v) in enumerate(zip(labels, values)):
        y = 30 + i * bar
        w = 0.6 * width * abs(v) / vmax
        parts.append(f'<rect x="{0.35 * width:.1f}" y="{y}" width="{w:.1f}" height="{bar - 4}" fill="#1f77b4"/>')
        parts.append(f'<text x="10" y="{y + bar - 8}" font-size="12">{lab}</text>')
        parts.append(f'<text x="{0.35 * width + w + 4:.1f}" y="{y + bar - 8}" font-size="12">{v:.4g}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def tables_svg(tables):
    """Standalone SVG bar charts for the comparison tables."""
    out = {}
    for name, (_, rows) in tables.items():
        if name == "fall_histogram":
            labels = [f"{r['bin_lo']:.1f}-{r['bin_hi']:.1f} dp" for r in rows]
            values = [r["dp_count"] for r in rows]
            if rows and rows[0]["policy_count"] != "":
                labels += [f"{r['bin_lo']:.1f}-{r['bin_hi']:.1f} policy" for r in rows]
                values += [r["policy_count"] for r in rows]
        elif name == "roa_areas":
            labels, values = [r["label"] for r in rows], [r["area"] for r in rows]
        elif name == "relay_curves":
            labels = [f"{r['method']} @ {r['samples']}" for r in rows]
            values = [r["median_success"] for r in rows]
        elif name == "eap_bars":
            labels, values = [r["method"] for r in rows], [r["median"] for r in rows]
        else:
            continue
        out[name] = _bar_svg(name, labels, values)
    return out


def load_roa_polygons(paths):
    """Polygons and labels from RoA CSVs or RoA history CSVs (last iteration)."""
    polys, labels = [], []
    for path in paths:
        header = _header(path)
        kind = report_kind(header)
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if kind == "roa":
            found = _polygons_from_rows(rows)
        elif kind == "roa_history":
            found = [_history_polygon(rows, Path(path).stem)] if rows else []
        else:
            raise ValueError(f"{path} is not a RoA file")
        for lab, p in found:
            labels.append(lab or Path(path).stem)
            polys.append(p)
    return polys, labels


# ------------------------------------------------------------------ targets

@dataclass
class Target:
    name: str
    title: str
    checks: list = field(default_factory=list)      # dicts: name, value, bound, passed
    details: dict = field(default_factory=dict)
    limit_s: float = None
    runtime_s: float = 0.0

    def check(self, name, value, bound, passed):
        self.checks.append({"name": name, "value": value, "bound": bound, "passed": bool(passed)})

    @property
    def passed(self):
        return bool(self.checks) and all(c["passed"] for c in self.checks)

    def line(self):
        worst = [c["name"] for c in self.checks if not c["passed"]]
        status = "PASS" if self.passed else "FAIL"
        tail = "" if not worst else "  failed: " + ", ".join(worst)
        return f"{status} {self.name} {self.title} ({self.runtime_s:.1f} s){tail}"

    def to_dict(self):
        return {"format_version": FORMAT_VERSION, "name": self.name, "title": self.title,
                "passed": self.passed, "runtime_s": self.runtime_s, "limit_s": self.limit_s,
                "checks": self.checks, "details": self.details}

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"{self.name}.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, default=_plain))
        return path


def _plain(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    raise TypeError(f"not serializable: {type(v)}")


def _timed(fn):
    """Run ``fn(target)``, record wall time and the runtime bound as a check."""
    def wrapper(*args, **kwargs):
        t0 = time.monotonic()
        target = fn(*args, **kwargs)
        target.runtime_s = time.monotonic() - t0
        if target.limit_s is not None:
            target.check("runtime_s", target.runtime_s, target.limit_s, target.runtime_s < target.limit_s)
        return target
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _close(t, name, got, expected, tol=1e-9):
    t.check(name, float(got), float(expected), abs(float(got) - float(expected)) <= tol)


@_timed
def c1_units():
    """Unit examples for impulse, fall reward, Boltzmann, critic/actor targets,
    relay return, threshold split and RoA area."""
    t = Target("c1_units", "impulse/reward unit suite", limit_s=10.0)
    j = F.impulse(2.0, 0.5, 0.0, 0.0, 0.3, 0.0, -1.5)
    _close(t, "impulse_formula", j, 1.5 / (1.0 / 2.0 + 0.3 ** 2 / 0.5))
    _close(t, "impulse_formula_rounded", j, 2.20588, 1e-5)
    _close(t, "impulse_zero_speed", F.impulse(1.0, 1.0, 0.0, 0.0, 0.4, 0.0, 0.0), 0.0)
    _close(t, "impulse_under_com", F.impulse(1.0, 0.7, 0.2, 0.0, 0.2, 0.0, -2.0), 2.0)
    _close(t, "fall_reward_zero", F.fall_reward(0.0), 1.0)
    _close(t, "fall_reward_one", F.fall_reward(1.0), 0.5)
    _close(t, "fall_reward_composed", F.fall_reward(j), 1.0 / (1.0 + j))
    _close(t, "fall_reward_composed_rounded", F.fall_reward(j), 0.31195, 5e-5)
    p = mace.boltzmann_probs([1.0, 0.0], 1.0)
    e = np.exp(1.0)
    _close(t, "boltzmann_first", p[0], e / (1.0 + e))
    _close(t, "boltzmann_second", p[1], 1.0 / (1.0 + e))
    _close(t, "boltzmann_rounded", p[0], 0.73106, 1e-5)
    _close(t, "boltzmann_equal", mace.boltzmann_probs([0.3] * 4, 2.0)[2], 0.25)
    t.check("boltzmann_greedy", mace.select_actor([0.2, 0.9, 0.1], 0), 1, mace.select_actor([0.2, 0.9, 0.1], 0) == 1)
    _close(t, "critic_target_reward_bound", mace.critic_target(0.5, 1.0, False, 0.9), 0.5)
    _close(t, "critic_target_discounted", mace.critic_target(1.0, 0.4, False, 0.9), 0.36)
    _close(t, "critic_target_terminal", mace.critic_target(0.7, 0.1, True, 0.9), 0.7)
    # actor gate: y' = min(r, gamma max V') against y = max V(s)
    y_next = mace.critic_target(0.8, 0.9, False, 0.9)
    t.check("actor_gate_passes", y_next, 0.5, y_next > 0.5)
    t.check("actor_gate_blocks", y_next, 0.9, not y_next > 0.9)
    _close(t, "relay_return_failure", relay.relay_return([0.0, 0.0], "failure", 2.0, 0.5, 0.9), 0.0)
    _close(t, "relay_return_bonus_undiscounted", relay.relay_return([0.0] * 7, "reached", 2.0, 0.5, 1.0), 60.0)
    _close(t, "relay_return_bonus_discounted", relay.relay_return([0.0, 0.0], "reached", 1.0, 0.5, 0.9), 24.3)
    _close(t, "relay_return_below_threshold", relay.relay_return([1.0], "reached", 0.2, 0.5, 0.9), 1.0)
    _close(t, "threshold_split", relay.compute_threshold_from_labels([0.2, 0.3, 0.8, 0.9], [0, 0, 1, 1]), 0.55)
    _close(t, "roa_area_square", cur.roa_area(cur.RoAPolygon([1.0, 1.0, 1.0, 1.0])), 2.0)
    _close(t, "roa_area_zero", cur.roa_area(cur.RoAPolygon(np.zeros(6))), 0.0)
    M, R = 16, 1.7
    _close(t, "roa_area_regular", cur.roa_area(cur.RoAPolygon(np.full(M, R))), 0.5 * M * R * R * np.sin(2 * np.pi / M))
    return t


def net_shapes():
    """Every network configuration the trainers build."""
    mcfg = mace.MaceConfig()
    shapes = {
        "mace_trunk": approx.NetSpec(5, (), mcfg.critic_trunk, output_activation="tanh"),
        "mace_head": approx.NetSpec(mcfg.critic_trunk, mcfg.critic_hidden, 1),
        "mace_actor": approx.NetSpec(5, mcfg.actor_hidden, 3, output_activation="tanh"),
        "balance_policy": approx.NetSpec(4, (64, 64), 2),
        "balance_value": approx.NetSpec(4, (64, 64), 1),
        "swingup_policy": approx.NetSpec(5, (64, 64), 1),
        "swingup_value": approx.NetSpec(5, (64, 64), 1),
        "eap_projected_policy": approx.NetSpec(10, (64, 64), 1),
        "eap_full_policy": approx.NetSpec(12, (64, 64), 1),
        "up_policy": approx.NetSpec(eap.UP_INPUT_DIM, (64, 64), 1),
        "error_encoder_projected": approx.NetSpec(9, (32, 16), 2),
        "error_encoder_full": approx.NetSpec(9, (32, 16), 4),
        "error_decoder": approx.NetSpec(2, (), 4),
        "one_policy": approx.NetSpec(5, (relay.one_hidden_width(2 * 4_800, 5, 1),) * 2, 1),
    }
    return shapes


def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def gradient_probe(spec, rng, h=1e-5):
    """Relative errors of the analytic parameter and input gradients against
    central differences along a random direction."""
    params = approx.init_params(spec, rng) + 0.1 * rng.standard_normal(spec.param_count)
    x = rng.standard_normal(spec.input_dim)
    up = rng.standard_normal(spec.output_dim)
    f = lambda p, xx: float(up @ approx.forward(spec, p, xx))
    gp = approx.grad_params(spec, params, x, up)
    gx = approx.grad_input(spec, params, x, up)
    v = rng.standard_normal(spec.param_count)
    fd_p = (f(params + h * v, x) - f(params - h * v, x)) / (2 * h)
    u = rng.standard_normal(spec.input_dim)
    fd_x = (f(params, x + h * u) - f(params, x - h * u)) / (2 * h)
    return _rel(float(gp @ v), fd_p), _rel(float(gx @ u), fd_x)


@_timed
def c2_gradients(probes=20, seed=0):
    """Directional finite-difference checks of grad_params and grad_input."""
    t = Target("c2_gradients", "gradient correctness", limit_s=30.0)
    for name, spec in net_shapes().items():
        rng = stream(seed, "bench", "grad", name)
        errs = np.array([gradient_probe(spec, rng) for _ in range(probes)])
        t.details[name] = {"params": spec.param_count, "max_param_rel_err": float(errs[:, 0].max()),
                           "max_input_rel_err": float(errs[:, 1].max())}
        t.check(f"{name}_params", float(errs[:, 0].max()), 1e-4, errs[:, 0].max() < 1e-4)
        t.check(f"{name}_input", float(errs[:, 1].max()), 1e-4, errs[:, 1].max() < 1e-4)
    return t


TABULAR_2X2 = {"reward": [[0.9, 0.4], [0.6, 0.8]], "next_state": [[1, 0], [1, 0]],
               "terminal": [[False, True], [False, False]], "leaf": [0.7, 0.5]}


@_timed
def c3_dp(replay_states=50, seed=0, n_parts=4):
    """Tabular value iteration against the search engine, then open-loop replay
    of planned contact sequences."""
    t = Target("c3_dp", "DP consistency", limit_s=300.0)
    inst = TABULAR_2X2
    vi = dp.value_iteration_tabular(inst["reward"], inst["next_state"], inst["terminal"], inst["leaf"], 2)
    values, _, _ = dp.search(dp.TabularModel(**inst), np.array([[0.0], [1.0]]), 2)
    t.details["tabular_vi"] = vi
    t.details["tabular_search"] = values
    t.check("tabular_2x2_depth2_exact", float(np.max(np.abs(vi - values))), 0.0, np.array_equal(vi, values))
    params = F.FallModelParams().with_parts(n_parts)
    grid = dp.GridSpec()
    rng = stream(seed, "bench", "replay")
    states = []
    while len(states) < replay_states:
        s = F.FallInitDist().sample(params, rng, falling_only=True)
        if grid.contains(s):
            states.append(s)
    plans = dp.dp_plan_batch(grid, states, params)
    gaps = np.array([abs(dp.replay_plan(params, s, p) - p.value) for s, p in zip(states, plans)])
    t.details["replay_gap_mean"] = float(gaps.mean())
    t.check("replay_within_0.05", float(gaps.max()), 0.05, gaps.max() <= 0.05)
    return t


def median_latency(fn, items, reps=20):
    """Median wall time of ``fn(item)`` over ``reps`` timed calls (cycling items)."""
    times = []
    for k in range(reps):
        item = items[k % len(items)]
        t0 = time.perf_counter()
        fn(item)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def _mace_seed_buffer(params, cfg, grid, seed):
    rng = stream(seed, "fall", "seed_buffer")
    buf = []
    while len(buf) < cfg.seed_tuples:
        buf += dp.seed_buffer(grid, 100, F.FallInitDist(), rng, params, cfg.max_contacts)
    return buf[:cfg.seed_tuples]


@_timed
def c4_fall(seeds=(0, 1, 2), iterations=1000, test_states=100, n_parts=4, config=None, log=None):
    """MACE against the receding-horizon DP on a fixed held-out set."""
    t = Target("c4_fall", "fall policy vs DP", limit_s=7200.0)
    params = F.FallModelParams().with_parts(n_parts)
    cfg = copy.deepcopy(config) if config is not None else mace.MaceConfig()
    cfg.iterations = iterations
    seed_grid = dp.GridSpec(theta2_bins=3, delta_bins=3, rdot_bins=2)
    test = F.sample_test_states(params, F.FallInitDist(), test_states, stream(0, "bench", "fall", "heldout"))
    grid = dp.GridSpec()
    _, dp_rewards = dp.dp_rollouts(grid, test, params)
    dp_mean = float(np.mean(dp_rewards))
    amap = mace.ActionMap(params)
    model = dp.FallPlannerModel(params, grid)
    plannable = [s for s in test if grid.contains(s)][:20]
    dp_lat = median_latency(lambda s: dp.dp_plan(grid, s, params, model), plannable)
    means, act_lat, wins = [], [], []
    for seed in seeds:
        buf = _mace_seed_buffer(params, cfg, seed_grid, seed)
        res = mace.train(params, cfg, buf, seed=child_seed(seed, "fall", "mace"))
        rewards = mace.evaluate(res.net, test, params, amap, cfg.max_contacts)
        means.append(float(np.mean(rewards)))
        wins.append(float(np.mean(rewards >= dp_rewards)))
        act_lat.append(median_latency(lambda s: mace.act(res.net, s, amap), plannable))
        if log:
            log(f"c4 seed {seed}: policy mean {means[-1]:.4f} vs dp {dp_mean:.4f}")
    med, lat = float(np.median(means)), float(np.median(act_lat))
    t.details.update(dp_mean=dp_mean, policy_means=means, dp_latency_s=dp_lat, act_latency_s=act_lat,
                     win_rate_vs_dp=wins)
    t.check("policy_mean_vs_dp", med / dp_mean, 0.95, med >= 0.95 * dp_mean)
    t.check("act_latency_ratio", lat / dp_lat, 0.1, lat < dp_lat / 10.0)
    return t


@_timed
def c5_curriculum(seeds=(0, 1, 2), config=None, log=None):
    """Adaptive vs uniform push sampling, residual vs pure policy."""
    t = Target("c5_curriculum", "curriculum RoA gains", limit_s=3600.0)
    base = config or cur.TrainCurriculumConfig()
    areas = defaultdict(list)
    for seed in seeds:
        for label, kw in (("adaptive_residual", {"mode": "adaptive", "residual": True}),
                          ("uniform_residual", {"mode": "uniform", "residual": True}),
                          ("adaptive_pure", {"mode": "adaptive", "residual": False})):
            cfg = copy.deepcopy(base)
            cfg.mode, cfg.residual = kw["mode"], kw["residual"]
            run = cur.train_adaptive(cfg, seed=seed)
            areas[label].append(cur.roa_area(run.measured))
            if log:
                log(f"c5 seed {seed} {label}: area {areas[label][-1]:.2f}")
    med = {k: float(np.median(v)) for k, v in areas.items()}
    t.details.update(areas=dict(areas), medians=med)
    t.check("adaptive_vs_uniform", med["adaptive_residual"] / max(med["uniform_residual"], 1e-12), 1.10,
            med["adaptive_residual"] >= 1.10 * med["uniform_residual"])
    t.check("residual_vs_pure", med["adaptive_residual"] - med["adaptive_pure"], 0.0,
            med["adaptive_residual"] >= med["adaptive_pure"])
    return t


@_timed
def c6_relay(seeds=(0, 1, 2), config=None, probes=50, threshold_rollouts=100, log=None):
    """Relay graph success, ONE baseline and threshold accuracy."""
    from .config import RelayEvalSetup
    from .runs import build_relay_or_partial, evaluate_relay
    t = Target("c6_relay", "relay networks", limit_s=5400.0)
    cfg = config or relay.RelayConfig()
    ev = RelayEvalSetup(probes=probes, train_one=True, threshold_rollouts=threshold_rollouts)
    success, one, acc, runs = [], [], [], []
    for seed in seeds:
        graph, samples, error = build_relay_or_partial(cfg, seed)
        rows, accs = evaluate_relay(graph, samples, cfg, ev, seed)
        success.append(rows[0]["success_rate"])
        one.append(rows[1]["success_rate"])
        acc.append(float(np.mean(accs)))
        runs.append({"seed": seed, "nodes": len(graph.nodes), "samples": samples, "build_error": error,
                     "success_rate": success[-1], "one_success_rate": one[-1], "one_samples": rows[1]["samples"],
                     "threshold_accuracy": accs})
        if log:
            log(f"c6 seed {seed}: relay {success[-1]:.2f} one {one[-1]:.2f} accuracy {accs}")
    t.details["runs"] = runs
    ms, mo, ma = float(np.median(success)), float(np.median(one)), float(np.median(acc))
    t.check("relay_success", ms, 0.8, ms >= 0.8)
    t.check("relay_vs_one", ms - mo, 0.0, ms >= mo)
    t.check("threshold_accuracy", ma, 0.85, ma >= 0.85)
    return t


def identical_dynamics_mse(seed=0, n=256, epochs=200):
    """Holdout MSE of an error function trained on data whose reference and
    validation dynamics coincide (all labels zero)."""
    es = eap.make_env_set(seed=seed)
    ref = eap.EnvSet.dyn(es.reference)
    pol = eap.EAPolicy(2, PPOConfig(), seed)
    task = eap.env_task([es.reference])
    rng = stream(seed, "bench", "identical")
    starts = task.start.sample(n, rng)
    data = eap.collect_error_data(pol, task, ref, ref, starts, 5, n, rng)
    E = eap.ErrorFn(seed=seed)
    hist = eap.train_error_fn(E, data, epochs, stream(seed, "bench", "identical", "fit"))
    return float(hist["holdout_mse"][-1]), float(np.max(np.abs(data.labels)))


def horizon_ablation(env_set, cfg, seed=0, horizons=(1, 3, 5, 8), probes=20, log=None):
    """Train EAP for each horizon from one shared pre-trained policy and
    return the normalized held-out curve."""
    base_cfg = copy.deepcopy(cfg)
    pol, plog = eap.pretrain_reference(env_set, base_cfg, seed)
    raw = {}
    for T in horizons:
        c = copy.deepcopy(base_cfg)
        c.horizon = T
        p, E, _ = eap.train_eap(env_set, c, seed, pretrained=(copy.deepcopy(pol), plog.steps))
        zs = eap.ZeroShotPolicy.from_eap(p, E)
        raw[T] = eap.evaluate_zero_shot(zs, env_set.validation, probes, seed)["returns"]
        if log:
            log(f"horizon {T}: returns {np.round(raw[T], 1).tolist()}")
    norm = eap.normalize_returns(raw)
    return [{"horizon": T, "normalized_return": float(np.mean(norm[T])), "mean_return": float(np.mean(raw[T]))}
            for T in horizons]


@_timed
def c7_eap(seeds=(0, 1, 2, 3), config=None, env_seed=0, probes=20, horizons=(1, 3, 5, 8),
           out_dir=None, log=None):
    """EAP against DR and UP on held-out environments, identical-dynamics
    error fit and the horizon ablation curve."""
    t = Target("c7_eap", "EAP zero-shot transfer", limit_s=7200.0)
    cfg = config or eap.EAPConfig()
    es = eap.make_env_set(ranges=eap.EnvRanges(), seed=env_seed)
    es.check_disjoint()
    raw = {}
    for seed in seeds:
        pol, E, _ = eap.train_eap(es, cfg, seed)
        raw[("eap", seed)] = eap.evaluate_zero_shot(eap.ZeroShotPolicy.from_eap(pol, E), es.validation,
                                                    probes, seed)["returns"]
        for kind, trainer in (("dr", eap.train_dr), ("up", eap.train_up)):
            agent, _ = trainer(es, cfg, seed)
            raw[(kind, seed)] = eap.evaluate_zero_shot(eap.ZeroShotPolicy.from_agent(kind, agent), es.validation,
                                                       probes, seed)["returns"]
        if log:
            log("c7 seed %d: " % seed + ", ".join(f"{k} {np.mean(raw[(k, seed)]):.1f}" for k in ("eap", "dr", "up")))
    norm = eap.normalize_returns(raw)
    rows = [{"method": k, "env_id": j, "normalized_return": float(v), "seed": s}
            for (k, s), vals in norm.items() for j, v in enumerate(vals)]
    med = {r["method"]: r["median"] for r in eap_bars(rows)}
    t.details.update(raw_returns={f"{k}/{s}": v for (k, s), v in raw.items()}, medians=med)
    t.check("eap_ge_up", med["eap"] - med["up"], 0.0, med["eap"] >= med["up"])
    t.check("up_ge_dr", med["up"] - med["dr"], 0.0, med["up"] >= med["dr"])
    t.check("eap_vs_dr", med["eap"] / med["dr"], 1.10, med["eap"] >= 1.10 * med["dr"])
    mse, label_max = identical_dynamics_mse(env_seed)
    t.details["identical_dynamics_label_max"] = label_max
    t.check("identical_dynamics_holdout_mse", mse, 1e-4, mse < 1e-4)
    curve = horizon_ablation(es, cfg, seeds[0], horizons, probes, log)
    t.details["horizon_curve"] = curve
    t.check("horizon_curve_emitted", len(curve), len(horizons), len(curve) == len(horizons))
    if out_dir is not None:
        from .runs import write_csv
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "c7_eap_report.csv", rows, ["method", "env_id", "normalized_return", "seed"])
        write_csv(out / "c7_horizon_curve.csv", curve, ["horizon", "normalized_return", "mean_return"])
    return t


def small_configs():
    """Fast configs for every training subcommand (determinism check)."""
    ppo_small = {"batch_steps": 256, "n_envs": 4, "epochs": 2, "minibatch": 64}
    return {
        "train-fall": {"fall": {"test_states": 3},
                       "mace": {"iterations": 3, "seed_tuples": 40, "rollouts_per_iter": 2,
                                "updates_per_iter": 2, "probe_states": 2}},
        "train-curriculum": {"curriculum": {"iterations": 2, "measure_trials": 2, "probes_per_iteration": 4,
                                            "measure_resolution": 8.0,
                                            "ppo": {"batch_steps": 200, "n_envs": 4, "epochs": 2,
                                                    "minibatch": 50}}},
        "train-relay": {"relay": {"root_iterations": 2, "node_iterations": 1, "max_nodes": 2,
                                  "threshold_probes": 20, "success_episodes": 4, "refit_episodes": 8,
                                  "ppo": ppo_small},
                        "evaluation": {"probes": 4, "train_one": False, "threshold_rollouts": 8}},
        "train-eap": {"envs": {"n_train": 2, "n_validation": 1},
                      "eap": {"sample_budget": 6000, "pretrain_iterations": 2, "pretrain_check": 1,
                              "pretrain_restarts": 0, "updates_per_env": 1, "error_entries": 8, "ppo": ppo_small}},
        "train-dr": {"envs": {"n_train": 2, "n_validation": 1},
                     "eap": {"sample_budget": 600, "ppo": ppo_small}},
        "train-up": {"envs": {"n_train": 2, "n_validation": 1},
                     "eap": {"sample_budget": 600, "ppo": ppo_small}},
    }


@_timed
def c8_determinism(tasks=None, seed=3, workdir=None):
    """Every training subcommand twice with the same config and seed."""
    from .config import FORMAT_VERSION as CFG_VERSION, resolve
    from .runs import run
    t = Target("c8_determinism", "byte-identical reruns", limit_s=None)
    configs = small_configs()
    tasks = list(configs) if tasks is None else tasks
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        for task in tasks:
            digests = []
            for rep in range(2):
                out = Path(tmp) / f"{task}-{rep}"
                doc = {"format_version": CFG_VERSION, "task": task, "seed": seed, "output_dir": str(out)}
                doc.update(configs[task])
                run(resolve(doc, task))
                csvs = sorted(p.name for p in out.glob("*.csv"))
                digests.append({name: (out / name).read_bytes() for name in csvs})
            same = digests[0] == digests[1] and "metrics.csv" in digests[0]
            t.details[task] = sorted(digests[0])
            t.check(f"{task}_metrics_identical", same, True, same)
    return t


@_timed
def c9_zero_identities(seed=0):
    """Zero error function, zero residual and zero push magnitude identities."""
    t = Target("c9_zero_identities", "zero-identity suite", limit_s=60.0)
    # E == 0: error-aware rollout equals the nominal policy bitwise
    es = eap.make_env_set(seed=seed)
    task = eap.env_task(es.train)
    pol = eap.EAPolicy(2, PPOConfig(), seed)
    E = eap.ErrorFn(seed=seed).zero_()
    nominal = Runner(task, 4, stream(seed, "bench", "zero"))
    aware = Runner(task, 4, stream(seed, "bench", "zero"))
    b1 = nominal.collect(eap.NominalActor(pol), pol.agent.predict_value, 50, task.gamma, 0.95)
    b2 = aware.collect(eap.EAPActor(pol, E, stream(seed, "bench", "aux")), pol.agent.predict_value, 50,
                       task.gamma, 0.95)
    same = all(np.array_equal(getattr(b1, f), getattr(b2, f)) for f in ("inputs", "actions", "logp", "returns"))
    t.check("zero_error_equals_nominal", same, True, same)
    # zero residual: residual task with a zero policy reproduces LQR-only control
    p = BalancerParams()
    bt = cur.BalanceTask(p, residual=True)
    rng = stream(seed, "bench", "residual")
    s = bt.reset(8, rng)
    C, V = s["C"].copy(), s["V"].copy()
    K = lqr_gain(p)
    same = True
    for _ in range(bt.n_steps):
        s, _, _, _ = bt.step(s, np.zeros((8, 2)))
        u = lqr_action(K, C, V, p.target)
        pert = (s["theta"], s["mag"], s["onset"], s["dur"])
        t0 = (s["k"] - 1) * p.control_dt
        for j in range(p.substeps):
            C, V = balancer_step(p, C, V, u, pert, t0 + j * p.dt)
        same &= np.array_equal(C, s["C"]) and np.array_equal(V, s["V"])
    t.check("zero_residual_equals_baseline", bool(same), True, same)
    # zero push magnitude: trajectory equals the unperturbed one
    C0 = np.full((3, 2), 0.01)
    V0 = np.zeros((3, 2))
    Ca, Va, Cb, Vb = C0.copy(), V0.copy(), C0.copy(), V0.copy()
    pert = (np.array([0.3, 2.0, 4.0]), np.zeros(3), np.zeros(3), np.full(3, 1.0))
    u = np.zeros((3, 2))
    same = True
    for k in range(400):
        Ca, Va = balancer_step(p, Ca, Va, u, pert, k * p.dt)
        Cb, Vb = balancer_step(p, Cb, Vb, u, None, k * p.dt)
        same &= np.array_equal(Ca, Cb) and np.array_equal(Va, Vb)
    t.check("zero_push_equals_unperturbed", bool(same), True, same)
    return t


TARGETS = {
    "c1_units": c1_units,
    "c2_gradients": c2_gradients,
    "c3_dp": c3_dp,
    "c4_fall": c4_fall,
    "c5_curriculum": c5_curriculum,
    "c6_relay": c6_relay,
    "c7_eap": c7_eap,
    "c8_determinism": c8_determinism,
    "c9_zero_identities": c9_zero_identities,
}


LOGGING = ("c4_fall", "c5_curriculum", "c6_relay", "c7_eap")


def run_targets(names, out_dir="bench_results", log=print):
    """Run the named targets, write one result file each and log a verdict line."""
    results = []
    for name in names:
        kwargs = {"log": log} if name in LOGGING else {}
        if name == "c7_eap":
            kwargs["out_dir"] = out_dir
        res = TARGETS[name](**kwargs)
        res.write(out_dir)
        log(res.line())
        results.append(res)
    return results
