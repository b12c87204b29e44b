import json

import numpy as np
import pytest

from oope import harness
from oope.cli import main
from oope.driver import step_size_pool


def _cfg(tmp_path, **kw):
    doc = {"K": 30, "seed": 1, "out": str(tmp_path / "out")}
    doc.update(kw)
    return harness.ExperimentConfig.from_dict(doc)


def test_single_episode_run(tmp_path):
    res = harness.run(_cfg(tmp_path, K=1))
    assert res.history.K == 1
    rows = (tmp_path / "out" / "results.csv").read_text().splitlines()
    assert len(rows) == 2


def test_outputs_and_schema_column(tmp_path):
    harness.run(_cfg(tmp_path))
    out = tmp_path / "out"
    for name in ("results.csv", "decomposition.csv"):
        header = (out / name).read_text().splitlines()[0].split(",")
        assert header[0] == "schema_version"
    meta = json.loads((out / "metadata.json").read_text())
    env = json.loads((out / "env.json").read_text())
    assert meta["fingerprint"] == harness.MixtureMDP.from_dict(env).fingerprint()


def test_same_config_same_bytes(tmp_path):
    a = harness.run(_cfg(tmp_path, out=str(tmp_path / "a")))
    b = harness.run(_cfg(tmp_path, out=str(tmp_path / "b")))
    assert (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()
    assert a.regret == b.regret


def test_roundtrip_from_written_files(tmp_path):
    harness.run(_cfg(tmp_path, adversary={"kind": "piecewise", "switches": 2}))
    out = tmp_path / "out"
    doc = json.loads((out / "config.json").read_text())
    doc["env"]["file"] = "env.json"
    doc["out"] = str(tmp_path / "replay")
    (out / "replay.json").write_text(json.dumps(doc))
    harness.run(harness.ExperimentConfig.load(out / "replay.json"))
    assert (tmp_path / "replay" / "results.csv").read_bytes() == (out / "results.csv").read_bytes()


def test_single_base_oope_equals_single_omd(tmp_path):
    eta = 0.37
    a = harness.run(_cfg(tmp_path, algorithm={"kind": "oope", "etas": [eta]}, out=str(tmp_path / "a")))
    b = harness.run(_cfg(tmp_path, algorithm={"kind": "single_omd", "eta": eta}, out=str(tmp_path / "b")))
    assert (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()
    assert a.meta_bound == 0.0


def test_oracle_eta_is_best_of_sweep(tmp_path):
    res = harness.run(_cfg(tmp_path, algorithm={"kind": "oracle_eta_omd"}), write=False)
    swept = [r for _, r in res.sweep]
    assert len(swept) == len(step_size_pool(30, 3, 3, 2))
    assert res.regret == min(swept)
    for eta, reg in res.sweep[:2]:
        single = harness.run(_cfg(tmp_path, algorithm={"kind": "single_omd", "eta": eta}), write=False)
        assert single.regret == reg


def test_uniform_policy_regret_is_linear(tmp_path):
    res = harness.run(_cfg(tmp_path, K=400, algorithm={"kind": "uniform_policy"},
                           comparator={"kind": "per_episode_best"}, env={"seed": 0}), write=False)
    k = np.arange(1, 401)
    slope, _ = np.polyfit(k, res.regret_series, 1)
    assert slope > 0.05
    assert harness.loglog_slope(k[49:], res.regret_series[49:]) > 0.95
    np.testing.assert_allclose(res.history.policies, 0.5)


def test_targeted_adversary_runs(tmp_path):
    res = harness.run(_cfg(tmp_path, adversary={"kind": "targeted"}), write=False)
    assert sum(res.decomposition.totals()) == pytest.approx(res.regret, abs=1e-8)


@pytest.mark.parametrize("bad", [
    {"K": 0}, {"delta": 1.5}, {"lam": 0}, {"algorithm": {"kind": "nope"}},
    {"algorithm": {"kind": "single_omd"}}, {"env": {"S": 1}}, {"typo": 1}, {"env": {"typo": 1}},
    {"projection": {"tol": -1}},
])
def test_config_validation(bad):
    with pytest.raises((harness.ConfigError, ValueError)):
        harness.ExperimentConfig.from_dict(bad)


def test_summaries():
    one = harness.summarize([{"algorithm": "oope", "K": 10, "final_regret": 3.0}])
    assert one[0]["std_regret"] == 0.0
    twin = harness.summarize([{"algorithm": "oope", "K": 10, "final_regret": 2.5}] * 2)
    assert twin[0]["mean_regret"] == 2.5 and twin[0]["std_regret"] == 0.0
    Ks = [250, 500, 1000, 2000, 4000]
    rows = harness.summarize([{"algorithm": "x", "K": K, "final_regret": 3 * np.sqrt(K)} for K in Ks])
    assert rows[0]["loglog_slope"] == pytest.approx(0.5, abs=0.02)
    with pytest.raises(ValueError):
        harness.summarize([])


def test_cli_run_sweep_summarize(tmp_path, capsys, monkeypatch):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"K": 8, "out": str(tmp_path / "ignored")}))
    assert main(["run", "--config", str(cfg), "--seed", "3", "--out", str(tmp_path / "one")]) == 0
    assert json.loads(capsys.readouterr().out)["K"] == 8
    assert (tmp_path / "one" / "results.csv").exists()
    monkeypatch.setenv(harness.OUT_ENV_VAR, str(tmp_path / "env_out"))
    assert main(["run", "--config", str(cfg)]) == 0
    assert (tmp_path / "env_out" / "results.csv").exists()
    monkeypatch.delenv(harness.OUT_ENV_VAR)
    assert main(["sweep", "--config", str(cfg), "--seeds", "0..2", "--out", str(tmp_path / "sw")]) == 0
    assert sorted(p.name for p in (tmp_path / "sw").iterdir()) == ["seed_0", "seed_1", "seed_2"]
    capsys.readouterr()
    assert main(["summarize", "--in", str(tmp_path / "sw")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("schema_version") and ",oope,8,3," in lines[1]


def test_cli_error_report(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"K": -1}))
    assert main(["run", "--config", str(bad)]) != 0
    report = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert report["error"] == "ConfigError"
    assert main(["summarize", "--in", str(tmp_path / "missing")]) != 0
