import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from recoverkit import cli
from recoverkit import curriculum as cur
from recoverkit.config import template as config_template
from recoverkit.runs import write_csv, write_roa


def write_config(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def template(task, tmp_path):
    doc = config_template(task)
    doc["output_dir"] = str(tmp_path / "out")
    return doc


def read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_missing_output_dir_is_named(tmp_path, capsys):
    doc = template("compare", tmp_path)
    del doc["output_dir"]
    code = cli.main(["compare", "--config", write_config(tmp_path / "c.json", doc)])
    err = json.loads(capsys.readouterr().err)
    assert code == 2 and "output_dir" in err["fields"]


def test_unknown_keys_are_rejected(tmp_path, capsys):
    doc = template("compare", tmp_path)
    doc["compare"]["bogus"] = 1
    code = cli.main(["compare", "--config", write_config(tmp_path / "c.json", doc)])
    err = json.loads(capsys.readouterr().err)
    assert code == 2 and err["fields"] == ["compare.bogus"]


def test_wrong_task_block_is_rejected(tmp_path, capsys):
    doc = template("compare", tmp_path)
    code = cli.main(["plot-roa", "--config", write_config(tmp_path / "c.json", doc)])
    assert code == 2


@pytest.mark.parametrize("task", ["train-fall", "plan-fall", "train-curriculum", "eval-stability", "train-relay",
                                  "train-eap", "train-dr", "train-up", "eval-zeroshot", "compare", "plot-roa"])
def test_every_template_validates(task, tmp_path, capsys):
    assert cli.main([task, "--template"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["format_version"] == 1 and doc["task"] == task
    assert cli.main([task, "--dry-run", "--config", write_config(tmp_path / "c.json", doc)]) == 0


def test_seed_environment_override(tmp_path, capsys, monkeypatch):
    doc = template("compare", tmp_path)
    path = write_config(tmp_path / "c.json", doc)
    monkeypatch.setenv("RECOVERKIT_SEED", "7")
    assert cli.main(["compare", "--dry-run", "--config", path]) == 0
    assert json.loads(capsys.readouterr().out)["seed"] == 7


def test_compare_empty_report_set(tmp_path, capsys):
    doc = template("compare", tmp_path)
    assert cli.main(["compare", "--config", write_config(tmp_path / "c.json", doc)]) == 0
    record = json.loads((tmp_path / "out" / "record.json").read_text())
    assert record["format_version"] == 1 and record["status"] == "ok"
    assert record["summary"]["tables"] == []


def test_compare_unknown_report_fails(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    doc = template("compare", tmp_path)
    doc["compare"]["reports"] = [str(bad)]
    assert cli.main(["compare", "--config", write_config(tmp_path / "c.json", doc)]) == 1


def test_compare_aggregates_reports(tmp_path, capsys):
    rng = np.random.default_rng(0)
    dp_r = rng.uniform(0, 1, 37)
    pol_r = rng.uniform(0, 1, 37)
    fall = tmp_path / "fall.csv"
    write_csv(fall, [{"state_id": i, "dp_reward": a, "policy_reward": b} for i, (a, b) in enumerate(zip(dp_r, pol_r))],
              ["state_id", "dp_reward", "policy_reward"])
    eap_rows = [{"method": m, "seed": s, "env_id": e, "normalized_return": float(rng.uniform())}
                for m in ("eap", "dr") for s in range(3) for e in range(4)]
    eap_csv = tmp_path / "eap.csv"
    write_csv(eap_csv, eap_rows, ["method", "seed", "env_id", "normalized_return"])
    relay_rows = [{"method": m, "seed": s, "samples": 1000, "success_rate": float(rng.uniform())}
                  for m in ("relay", "one") for s in range(3)]
    relay_csv = tmp_path / "relay.csv"
    write_csv(relay_csv, relay_rows, ["method", "seed", "samples", "success_rate"])
    roa_csv = tmp_path / "roa.csv"
    poly = cur.RoAPolygon([1.0, 2.0, 3.0, 2.0, 1.0, 0.5])
    write_roa(roa_csv, poly, "demo")

    doc = template("compare", tmp_path)
    doc["compare"]["reports"] = [str(p) for p in (fall, eap_csv, relay_csv, roa_csv)]
    assert cli.main(["compare", "--config", write_config(tmp_path / "c.json", doc)]) == 0
    out = tmp_path / "out"

    hist = read(out / "fall_histogram.csv")
    assert sum(int(r["dp_count"]) for r in hist) == 37
    assert sum(int(r["policy_count"]) for r in hist) == 37
    for r in hist:
        lo, hi = float(r["bin_lo"]), float(r["bin_hi"])
        assert int(r["dp_count"]) == int(np.sum((dp_r >= lo) & ((dp_r < hi) | (hi == 1.0))))

    bars = {r["method"]: r for r in read(out / "eap_bars.csv")}
    for m in ("eap", "dr"):
        per_seed = [np.mean([r["normalized_return"] for r in eap_rows if r["method"] == m and r["seed"] == s])
                    for s in range(3)]
        assert float(bars[m]["median"]) == pytest.approx(np.median(per_seed), rel=1e-12)
        assert float(bars[m]["max"]) == pytest.approx(max(per_seed), rel=1e-12)

    curves = {r["method"]: r for r in read(out / "relay_curves.csv")}
    for m in ("relay", "one"):
        v = [r["success_rate"] for r in relay_rows if r["method"] == m]
        assert float(curves[m]["median_success"]) == pytest.approx(np.median(v), rel=1e-12)

    areas = read(out / "roa_areas.csv")
    assert areas[0]["label"] == "demo"
    assert float(areas[0]["area"]) == pytest.approx(cur.roa_area(poly), rel=1e-12)
    assert (out / "eap_bars.svg").read_text().startswith("<svg")


def test_plot_roa(tmp_path, capsys):
    roa_csv = tmp_path / "roa.csv"
    poly = cur.RoAPolygon([1.0, 2.0, 1.5, 2.5])
    write_roa(roa_csv, poly, "a")
    doc = template("plot-roa", tmp_path)
    doc["plot"]["roa"] = [str(roa_csv)]
    assert cli.main(["plot-roa", "--config", write_config(tmp_path / "c.json", doc)]) == 0
    out = tmp_path / "out"
    assert "<svg" in (out / "roa.svg").read_text()
    record = json.loads((out / "record.json").read_text())
    assert record["summary"]["areas"]["a"] == pytest.approx(cur.roa_area(poly))


def test_plan_fall_end_to_end(tmp_path, capsys):
    doc = template("plan-fall", tmp_path)
    doc["plan"]["test_states"] = 5
    assert cli.main(["plan-fall", "--config", write_config(tmp_path / "c.json", doc)]) == 0
    rows = read(tmp_path / "out" / "fall_episodes.csv")
    assert len(rows) == 5
    assert all(0.0 <= float(r["dp_reward"]) <= 1.0 for r in rows)


def test_console_script_lists_bench_targets():
    out = subprocess.run([sys.executable, "-m", "recoverkit.cli", "bench", "--list"], capture_output=True,
                         text=True, check=True).stdout.split()
    assert out[0] == "c1_units" and len(out) == 9
