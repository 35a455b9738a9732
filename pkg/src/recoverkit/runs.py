"""Execution of each CLI task: train or evaluate, then write artifacts.

Every run directory holds ``resolved_config.json``, a deterministic
``metrics.csv`` (no wall-clock columns) and ``record.json`` with the toolkit
version, wall-clock timings and the artifact list.
"""
from __future__ import annotations

import csv
import json
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from . import curriculum as cur
from . import dp
from . import eap
from . import mace
from . import relay
from .approx import MLP, net_from_dict, net_to_dict
from .config import Resolved
from .envs.cartpole import HANGING, SwingupTask
from .envs.fall import FallInitDist, FallModelParams, sample_test_states
from .seeding import child_seed, stream

FORMAT_VERSION = 1


def toolkit_version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (list, tuple, np.ndarray)):
        return json.dumps(np.asarray(v).tolist())
    return v


def write_csv(path, rows, fields):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([_cell(r.get(f, "")) for f in fields])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class RunContext:
    def __init__(self, rc: Resolved):
        self.rc = rc
        self.out = Path(rc.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.artifacts = []
        self.timing = {}
        self.summary = {}
        self.t0 = time.monotonic()

    def path(self, name):
        p = self.out / name
        self.artifacts.append(name)
        return p

    def finish(self, status="ok"):
        self.timing["wall_clock_s"] = time.monotonic() - self.t0
        record = {"format_version": FORMAT_VERSION, "task": self.rc.task, "seed": self.rc.seed,
                  "toolkit_version": toolkit_version(), "status": status,
                  "artifacts": sorted(set(self.artifacts)), "timing": self.timing, "summary": self.summary}
        (self.out / "record.json").write_text(json.dumps(record, indent=2, default=_cell))
        return record


def _write_resolved(ctx):
    ctx.path("resolved_config.json").write_text(json.dumps(ctx.rc.to_dict(), indent=2))


# ---------------------------------------------------------------- fall

def _fall_setup(n_parts):
    return FallModelParams().with_parts(n_parts)


def run_train_fall(ctx: RunContext):
    rc = ctx.rc
    setup, cfg = rc["fall"], rc["mace"]
    params = _fall_setup(setup.n_parts)
    t = time.monotonic()
    rng = stream(rc.seed, "fall", "seed_buffer")
    buf = []
    while len(buf) < cfg.seed_tuples:
        buf += dp.seed_buffer(setup.seed_grid, 100, FallInitDist(), rng, params, cfg.max_contacts)
    buf = buf[:cfg.seed_tuples]
    ctx.timing["seed_buffer_s"] = time.monotonic() - t
    res = mace.train(params, cfg, buf, seed=child_seed(rc.seed, "fall", "mace"))
    ctx.timing["train_s"] = res.timing[-1]["wall_time_s"] if res.timing else 0.0
    res.net.save(ctx.path("mace_net.json"))
    mace.write_metrics(res.metrics, ctx.path("metrics.csv"))
    test = sample_test_states(params, FallInitDist(), setup.test_states, stream(rc.seed, "fall", "test"))
    rewards = mace.evaluate(res.net, test, params, mace.ActionMap(params), cfg.max_contacts)
    write_csv(ctx.path("heldout.csv"), [{"state_id": i, "policy_reward": r} for i, r in enumerate(rewards)],
              ["state_id", "policy_reward"])
    ctx.summary["heldout_mean"] = float(np.mean(rewards))


def run_plan_fall(ctx: RunContext):
    rc = ctx.rc
    setup = rc["plan"]
    params = _fall_setup(setup.n_parts)
    test = sample_test_states(params, FallInitDist(), setup.test_states, stream(rc.seed, "fall", "test"))
    t = time.monotonic()
    _, dp_rewards = dp.dp_rollouts(setup.grid, test, params)
    ctx.timing["dp_rollouts_s"] = time.monotonic() - t
    rows = [{"state_id": i, "dp_reward": r} for i, r in enumerate(dp_rewards)]
    fields = ["state_id", "dp_reward"]
    if setup.policy:
        net = mace.MaceNet.load(setup.policy)
        pr = mace.evaluate(net, test, params, mace.ActionMap(params))
        for row, r in zip(rows, pr):
            row["policy_reward"] = r
        fields.append("policy_reward")
        ctx.summary["policy_mean"] = float(np.mean(pr))
    write_csv(ctx.path("fall_episodes.csv"), rows, fields)
    ctx.summary["dp_mean"] = float(np.mean(dp_rewards))


# ---------------------------------------------------------------- curriculum

def save_balance_policy(path, run: cur.CurriculumRun, cfg: cur.TrainCurriculumConfig):
    from .config import to_plain
    net = run.agent.policy.net if run.agent is not None else None
    doc = {"format_version": FORMAT_VERSION, "residual": cfg.residual, "task": to_plain(cfg.task),
           "policy": None if net is None else net_to_dict(net.spec, net.params)}
    Path(path).write_text(json.dumps(doc))


def load_balance_policy(path):
    """Returns ``(task, policy_fn)`` for a saved curriculum policy."""
    from .config import build
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported format_version {doc.get('format_version')!r}")
    task = cur.BalanceTask(cfg=build(cur.BalanceTaskConfig, doc["task"], "task"), residual=doc["residual"])
    if doc["policy"] is None:
        return task, cur.zero_policy
    net = MLP(*net_from_dict(doc["policy"]))
    return task, lambda obs, s=None: net(obs)


def write_roa(path, polygon, label=""):
    rows = [{"label": label, "direction": i, "angle": a, "magnitude": m}
            for i, (a, m) in enumerate(zip(polygon.angles, polygon.magnitudes))]
    write_csv(path, rows, ["label", "direction", "angle", "magnitude"])


def run_train_curriculum(ctx: RunContext):
    rc = ctx.rc
    cfg = rc["curriculum"]
    run = cur.train_adaptive(cfg, seed=rc.seed)
    cur.write_history(run.history, ctx.path("roa_history.csv"))
    fields = ["iteration", "steps", "episodes", "mean_return", "success_rate", "log_std",
              "roa_estimate_area", "probe_success"]
    write_csv(ctx.path("metrics.csv"), run.metrics, fields)
    label = f"{cfg.mode}-{'residual' if cfg.residual else 'pure'}"
    write_roa(ctx.path("roa.csv"), run.measured, label)
    save_balance_policy(ctx.path("policy.json"), run, cfg)
    ctx.summary["measured_area"] = cur.roa_area(run.measured)


def run_eval_stability(ctx: RunContext):
    setup = ctx.rc["stability"]
    if not setup.policy:
        from .config import ConfigError
        raise ConfigError("stability.policy must name a policy artifact", ["stability.policy"])
    task, fn = load_balance_policy(setup.policy)
    poly = cur.measure_roa(cur.balance_success_fn(task, fn), setup.directions, setup.trials,
                           stream(ctx.rc.seed, "stability"), setup.omega_max, setup.resolution)
    write_roa(ctx.path("roa.csv"), poly, Path(setup.policy).stem)
    ctx.path("roa.svg").write_text(cur.roa_svg([poly], [Path(setup.policy).stem]))
    ctx.summary["area"] = cur.roa_area(poly)


# ---------------------------------------------------------------- relay

RELAY_FIELDS = ["node", "parent", "start_mean", "threshold", "probe_success", "graph_success", "samples"]


def evaluate_relay(graph, samples, cfg: relay.RelayConfig, ev, seed):
    """Probe success of the graph (and of a matched ONE baseline when
    ``ev.train_one``) from the hanging distribution, plus per-node threshold
    accuracy.  Returns ``(rows, accuracies)``."""
    base = SwingupTask()
    probes = HANGING.sample(ev.probes, stream(seed, "relay", "probes"))
    steps = int(round(cfg.execute_time / base.cfg.control_dt))
    rows = [{"method": "relay", "samples": samples,
             "success_rate": float(relay.execute(graph, base, probes, steps)["success"].mean()), "seed": seed}]
    if ev.train_one:
        one, one_samples = relay.train_one(samples, graph.param_count, base, cfg.ppo, seed)
        rows.append({"method": "one", "samples": one_samples,
                     "success_rate": float(relay.execute(one, base, probes, steps)["success"].mean()),
                     "seed": seed})
    acc = [relay.threshold_accuracy(n, graph.node_task(k, base), ev.threshold_rollouts,
                                    stream(seed, "relay", "accuracy", k), cfg.label_rule)
           for k, n in enumerate(graph.nodes)]
    return rows, acc


def build_relay_or_partial(cfg: relay.RelayConfig, seed):
    """``(graph, samples, error)``; a failed build keeps the graph built so far."""
    try:
        graph, samples = relay.build_relay(cfg, seed=seed)
        return graph, samples, None
    except relay.RelayBuildError as exc:
        return exc.graph, exc.graph.log[-1]["samples"], str(exc).split(";")[0]


def run_train_relay(ctx: RunContext):
    rc = ctx.rc
    cfg, ev = rc["relay"], rc["evaluation"]
    graph, samples, error = build_relay_or_partial(cfg, rc.seed)
    status = "ok" if error is None else "incomplete"
    if error is not None:
        ctx.summary["error"] = error
    ctx.timing["node_train_s"] = [e.get("train_time_s") for e in graph.log]
    graph.save(ctx.path("relay_graph"))
    write_csv(ctx.path("metrics.csv"), graph.log, RELAY_FIELDS)
    rows, acc = evaluate_relay(graph, samples, cfg, ev, rc.seed)
    write_csv(ctx.path("relay_eval.csv"), rows, ["method", "samples", "success_rate", "seed"])
    ctx.summary.update(nodes=len(graph.nodes), success_rate=rows[0]["success_rate"], threshold_accuracy=acc)
    return status


# ---------------------------------------------------------------- eap

def env_set_for(rc: Resolved):
    e = rc["envs"]
    return eap.make_env_set(e.n_train, e.n_validation, e.ranges, e.env_seed)


EAP_FIELDS = ["iteration", "samples", "env", "mean_return", "error_train_mse", "error_holdout_mse", "log_std"]
PPO_FIELDS = ["iteration", "steps", "episodes", "mean_return", "success_rate", "log_std"]


def _save_policy(ctx, policy, seed):
    doc = policy.to_dict()
    doc["seed"] = seed
    ctx.path("policy.json").write_text(json.dumps(doc))


def run_train_eap(ctx: RunContext):
    rc = ctx.rc
    es = env_set_for(rc)
    ctx.path("envset.json").write_text(json.dumps(es.to_dict()))
    pol, E, rows = eap.train_eap(es, rc["eap"], rc.seed)
    write_csv(ctx.path("metrics.csv"), rows, EAP_FIELDS)
    _save_policy(ctx, eap.ZeroShotPolicy.from_eap(pol, E), rc.seed)
    ctx.summary["samples"] = rows[-1]["samples"] if rows else 0


def _run_baseline(ctx: RunContext, kind):
    rc = ctx.rc
    es = env_set_for(rc)
    ctx.path("envset.json").write_text(json.dumps(es.to_dict()))
    trainer = eap.train_dr if kind == "dr" else eap.train_up
    agent, log = trainer(es, rc["eap"], rc.seed)
    write_csv(ctx.path("metrics.csv"), log.rows, PPO_FIELDS)
    _save_policy(ctx, eap.ZeroShotPolicy.from_agent(kind, agent), rc.seed)
    ctx.summary["samples"] = log.steps


def run_eval_zeroshot(ctx: RunContext):
    rc = ctx.rc
    setup = rc["zeroshot"]
    es = env_set_for(rc)
    raw, keys, stab = {}, [], []
    for path in setup.policies:
        doc = json.loads(Path(path).read_text())
        pol = eap.ZeroShotPolicy.from_dict(doc)
        key = (pol.kind, int(doc.get("seed", 0)))
        res = eap.evaluate_zero_shot(pol, es.validation, setup.probes, rc.seed, setup.stability)
        raw[key] = res["returns"]
        keys.append(key)
        if setup.stability:
            for j, poly in enumerate(res["stability"]):
                stab += [{"method": key[0], "seed": key[1], "env_id": j, "direction": i, "angle": a,
                          "magnitude": m} for i, (a, m) in enumerate(zip(poly.angles, poly.magnitudes))]
    norm = eap.normalize_returns(raw) if raw else {}
    raw_rows, rows = [], []
    for key in keys:
        for j, (r, n) in enumerate(zip(raw[key], norm[key])):
            raw_rows.append({"method": key[0], "env_id": j, "avg_return": r, "seed": key[1]})
            rows.append({"method": key[0], "env_id": j, "normalized_return": n, "seed": key[1]})
    write_csv(ctx.path("zeroshot_returns.csv"), raw_rows, ["method", "env_id", "avg_return", "seed"])
    write_csv(ctx.path("eap_report.csv"), rows, ["method", "env_id", "normalized_return", "seed"])
    if stab:
        write_csv(ctx.path("stability.csv"), stab, ["method", "seed", "env_id", "direction", "angle", "magnitude"])


# ---------------------------------------------------------------- reports

def run_compare(ctx: RunContext):
    from .bench import compare_reports
    setup = ctx.rc["compare"]
    tables = compare_reports(setup.reports, bins=setup.bins)
    for name, (fields, rows) in tables.items():
        write_csv(ctx.path(f"{name}.csv"), rows, fields)
    if setup.svg:
        from .bench import tables_svg
        for name, svg in tables_svg(tables).items():
            ctx.path(f"{name}.svg").write_text(svg)
    ctx.summary["tables"] = sorted(tables)


def run_plot_roa(ctx: RunContext):
    from .bench import load_roa_polygons
    polys, labels = load_roa_polygons(ctx.rc["plot"].roa)
    ctx.path("roa.svg").write_text(cur.roa_svg(polys, labels) if polys else cur.roa_svg([], []))
    ctx.summary["areas"] = {lab: cur.roa_area(p) for p, lab in zip(polys, labels)}


RUNNERS = {
    "train-fall": run_train_fall,
    "plan-fall": run_plan_fall,
    "train-curriculum": run_train_curriculum,
    "eval-stability": run_eval_stability,
    "train-relay": run_train_relay,
    "train-eap": run_train_eap,
    "train-dr": lambda ctx: _run_baseline(ctx, "dr"),
    "train-up": lambda ctx: _run_baseline(ctx, "up"),
    "eval-zeroshot": run_eval_zeroshot,
    "compare": run_compare,
    "plot-roa": run_plot_roa,
}


def run(rc: Resolved):
    ctx = RunContext(rc)
    _write_resolved(ctx)
    status = RUNNERS[rc.task](ctx) or "ok"
    return ctx.finish(status)
