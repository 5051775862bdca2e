import csv

import numpy as np
import pytest

from delaybelief.cli import RunConfig, main, parse_config_text, read_manifest, ConfigError
from delaybelief.envs import read_dataset

MSD = ["env_id=mass_spring_damper"]
TINY_SAC = ["env.horizon=40", "sac.learning_starts=50", "sac.eval_every=100",
            "sac.batch_size=16", "sac.hidden=(8,8)", "sac.eval_episodes=2"]


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def _run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def msd_runs(tmp_path_factory):
    d = tmp_path_factory.mktemp("msd")
    assert _run("collect", *MSD, "mix=random:0.3,medium:0.3,expert:0.4", "controller=lqr",
                "n_transitions=4000", f"out={d}/data") == 0
    assert _run("train-belief", *MSD, "delta_max=32", f"dataset={d}/data",
                "belief=dfbt,recursive", "epochs=1", "train.steps_per_epoch=3",
                f"out={d}/bel") == 0
    return d


# ------------------------------------------------------------------ config


def test_config_file_and_flag_precedence(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("# comment\nsystem = exact\ndelta_list = 1-3, 7\nseeds = 4\n")
    assert _run("theory", "--config", cfg_file, "--seeds", "1", "delta_list=2",
                "--out", tmp_path / "o") == 0
    m = read_manifest(tmp_path / "o")
    assert m["system"] == "exact" and m["seeds"] == "1" and m["delta_list"] == "2"
    assert parse_config_text("delta_list = 1-3, 7")["delta_list"] == "1-3, 7"
    assert RunConfig.from_pairs({"delta_list": "1-3, 7"}).delta_list == (1, 2, 3, 7)


def test_config_errors_exit_one(tmp_path):
    assert _run("theory", "bogus=1") == 1
    assert _run("theory", "--preset", "huge") == 1
    assert _run("theory", "--config", tmp_path / "missing.cfg") == 1
    assert _run("nonsense") == 1
    assert _run("train-agent", "n_step=9", "delta_max=8") == 1
    assert _run("train-agent", "belief=dfbt", f"out={tmp_path}") == 1   # no belief_dir
    with pytest.raises(ConfigError):
        parse_config_text("a = 1\na = 2")


def test_paper_preset_golden_manifest(tmp_path):
    assert _run("theory", "system=exact", "--preset", "paper", "--out", tmp_path) == 0
    m = read_manifest(tmp_path)
    golden = {
        "dfbt.n_layers": "10", "dfbt.hidden": "256", "dfbt.n_heads": "4",
        "dfbt.attn_dropout": "0.1", "dfbt.resid_dropout": "0.1", "dfbt.hidden_dropout": "0.1",
        "train.epochs": "1000", "train.batch_size": "256", "train.lr": "0.0001",
        "train.weight_decay": "0.0001", "train.betas": "(0.9, 0.999)",
        "n_step": "8", "sac.actor_lr": "0.0003", "sac.critic_lr": "0.001",
        "sac.alpha_lr": "0.001", "sac.actor_frequency": "2", "sac.critic_frequency": "1",
        "sac.tau": "0.005", "sac.batch_size": "256", "sac.hidden": "[256, 256]",
    }
    assert {k: m[k] for k in golden} == golden


# ------------------------------------------------------------------ collect


def test_collect_random_needs_no_checkpoint_and_counts_exactly(tmp_path):
    assert _run("collect", *MSD, "n_transitions=10000", f"out={tmp_path}") == 0
    ds = read_dataset(tmp_path / "dataset.dbtj")
    assert ds.n_transitions == 10_000
    m = read_manifest(tmp_path)
    for field in ("env_id", "mix", "n_transitions", "controller", "seeds", "preset", "delay",
                  "delta_max", "held_out", "out"):
        assert field in m
    assert m["written_transitions"] == "10000" and m["label.random"] == "10000"


def test_collect_controller_mix_requires_checkpoint(tmp_path):
    assert _run("collect", "mix=expert:1", f"out={tmp_path}") == 1
    assert _run("collect", "mix=expert:1", "controller=lqr", f"out={tmp_path}") == 1


# ------------------------------------------------------------------ beliefs


def test_eval_belief_curves_and_rerun_bytes(msd_runs, tmp_path):
    d = msd_runs
    args = ["eval-belief", *MSD, "delta_max=32", f"dataset={d}/data", f"belief_dir={d}/bel",
            "belief=dfbt,recursive,oracle"]
    assert _run(*args, f"out={tmp_path}/a") == 0
    assert _run(*args, f"out={tmp_path}/b") == 0
    a = (tmp_path / "a" / "belief_error.csv").read_bytes()
    assert a == (tmp_path / "b" / "belief_error.csv").read_bytes()
    rows = _rows(tmp_path / "a" / "belief_error.csv")
    for method in ("dfbt", "recursive", "oracle"):
        assert [int(r["horizon"]) for r in rows if r["method"] == method] == list(range(1, 33))
    assert all(float(r["mean_L1"]) == 0.0 for r in rows if r["method"] == "oracle")
    comp = _rows(tmp_path / "a" / "comparison.csv")
    assert len(comp) == 32 and all(r["verdict"] in ("true", "false") for r in comp)


def test_eval_belief_rejects_env_mismatch_and_missing_inputs(msd_runs, tmp_path):
    d = msd_runs
    assert _run("eval-belief", "env_id=pendulum", f"dataset={d}/data", "belief=oracle",
                f"out={tmp_path}") == 1
    assert _run("eval-belief", *MSD, f"dataset={tmp_path}/none", "belief=oracle",
                f"out={tmp_path}") == 1
    assert _run("eval-belief", *MSD, "delta_max=32", f"dataset={d}/data", "belief=dfbt",
                f"belief_dir={tmp_path}", f"out={tmp_path}") == 1


def test_pooled_curve_statistics():
    from delaybelief.belief import BeliefCurve
    from delaybelief.cli import pool_curves
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(7, 3)), rng.normal(size=(5, 3))
    curves = [BeliefCurve(x.mean(0), x.std(0), np.full(3, len(x))) for x in (a, b)]
    pooled = pool_curves(curves)
    both = np.concatenate([a, b])
    np.testing.assert_allclose(pooled.mean, both.mean(0), atol=1e-12)
    np.testing.assert_allclose(pooled.std, both.std(0), atol=1e-12)


# ------------------------------------------------------------------ agents


def test_train_agent_zero_steps(tmp_path):
    assert _run("train-agent", "belief=oracle", "steps=0", *TINY_SAC, "seeds=0",
                f"out={tmp_path}") == 0
    assert (tmp_path / "N8" / "seed0" / "curve.csv").read_text().strip().count("\n") == 0
    assert len(_rows(tmp_path / "aggregate.csv")) == 1


def test_normalization_anchors_and_n_sweep(tmp_path):
    common = [*TINY_SAC, "steps=150", "seeds=0,1"]
    assert _run("train-agent", "belief=none", "n_step=1", *common, f"out={tmp_path}/sac") == 0
    assert _run("train-agent", "belief=random", *common, f"out={tmp_path}/rnd") == 0
    assert _run("train-agent", "belief=oracle", "n_step=1,2,4,8", *common,
                f"out={tmp_path}/sweep") == 0
    assert [int(r["n_step"]) for r in _rows(tmp_path / "sweep" / "aggregate.csv")] == [1, 2, 4, 8]
    assert _run("eval-agent", "env.horizon=40", f"runs={tmp_path}/sweep,{tmp_path}/sac,"
                f"{tmp_path}/rnd", f"r_random={tmp_path}/rnd", f"r_sac={tmp_path}/sac",
                f"out={tmp_path}/norm") == 0
    table = _rows(tmp_path / "norm" / "normalized.csv")
    assert len(table) == 6
    by_run = {r["run"]: float(r["mean_normalized"]) for r in table if r["n_step"] == "1"}
    assert by_run["sac"] == pytest.approx(1.0, abs=1e-12)
    assert by_run["rnd"] == pytest.approx(0.0, abs=1e-12)
    assert _run("eval-agent", f"runs={tmp_path}/sweep", f"out={tmp_path}/x") == 1


def test_parallel_seeds_match_sequential(tmp_path, monkeypatch):
    args = ["train-agent", "belief=oracle", "n_step=2", "delta_max=2", *TINY_SAC,
            "steps=120", "seeds=0,1"]
    assert _run(*args, f"out={tmp_path}/seq") == 0
    monkeypatch.setenv("DBLF_THREADS", "2")
    assert _run(*args, f"out={tmp_path}/par") == 0
    for s in (0, 1):
        for name in ("curve.csv", "returns.csv", "agent.dblf"):
            assert (tmp_path / "seq" / "N2" / f"seed{s}" / name).read_bytes() == \
                (tmp_path / "par" / "N2" / f"seed{s}" / name).read_bytes()


# ------------------------------------------------------------------ theory


def test_theory_exact_expansive_and_fault_injection(tmp_path):
    assert _run("theory", "system=exact", f"out={tmp_path}/e") == 0
    assert all(float(r["measured_recursive"]) == 0 for r in _rows(tmp_path / "e" / "bound.csv"))
    assert _run("theory", "system=expansive", f"out={tmp_path}/x") == 0
    rows = _rows(tmp_path / "x" / "bound.csv")
    assert len(rows) == 20 and all(abs(float(r["margin"])) <= 1e-9 for r in rows)
    assert _run("theory", "system=expansive", "bound_scale=0.5", f"out={tmp_path}/f") == 2
    assert (tmp_path / "f" / "bound.csv").exists()
    assert _run("theory", "system=nope", f"out={tmp_path}/n") == 1


# ------------------------------------------------------------------ report


def _fake_run(d, env_id, returns, steps=(10, 20)):
    d.mkdir(parents=True)
    (d / "manifest.txt").write_text(f"env_id={env_id}\nseed=0\n")
    lines = ["env_step,mean_return,std_return,n_episodes,alpha,critic_loss,actor_loss"]
    lines += [f"{s},{r},0,5,0.1,1,2" for s, r in zip(steps, returns)]
    (d / "curve.csv").write_text("\n".join(lines) + "\n")


def test_report_single_run_passes_through(tmp_path):
    _fake_run(tmp_path / "r0", "pendulum", [-300.0, -200.0])
    assert _run("report", f"runs={tmp_path}/r0", f"out={tmp_path}/rep") == 0
    rows = _rows(tmp_path / "rep" / "plot_mean_return.csv")
    assert [(r["mean"], r["lo"], r["hi"]) for r in rows] == [("-300", "-300", "-300"),
                                                             ("-200", "-200", "-200")]


def test_report_mean_over_three_seeds(tmp_path):
    vals = [[-310.5, -200.25], [-150.0, -120.0], [-90.125, -70.0]]
    for i, v in enumerate(vals):
        _fake_run(tmp_path / "runs" / f"seed{i}", "pendulum", v)
    assert _run("report", f"runs={tmp_path}/runs", f"out={tmp_path}/rep") == 0
    rows = _rows(tmp_path / "rep" / "plot_mean_return.csv")
    for j, r in enumerate(rows):
        hand = (vals[0][j] + vals[1][j] + vals[2][j]) / 3
        assert float(r["mean"]) == pytest.approx(hand, rel=1e-11)
        assert float(r["lo"]) <= float(r["mean"]) <= float(r["hi"])
    assert len(_rows(tmp_path / "rep" / "merged.csv")) == 6


def test_report_refuses_mixed_environments(tmp_path):
    _fake_run(tmp_path / "a", "pendulum", [1.0, 2.0])
    _fake_run(tmp_path / "b", "mass_spring_damper", [1.0, 2.0])
    assert _run("report", f"runs={tmp_path}/a,{tmp_path}/b", f"out={tmp_path}/rep") == 1
    _fake_run(tmp_path / "c", "pendulum", [1.0, 2.0], steps=(10, 30))
    assert _run("report", f"runs={tmp_path}/a,{tmp_path}/c", f"out={tmp_path}/rep") == 1
