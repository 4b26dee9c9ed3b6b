import os

import numpy as np
import pytest

from distkoop import cli
from distkoop import config as config_mod
from distkoop.errors import ConfigError
from distkoop.train import TrainConfig, holdout_slice, read_metrics_csv
from distkoop.vessel import DEFAULT_INTERVALS, read_trajectory_csv

SMALL_TOML = """\
[data]
T = 400
intervals = [[0, 60], [60, 130], [130, 200], [200, 260], [260, 300]]
train_end = 300
test_end = 400

[lift]
hidden = 16

[consensus]
S = 5

[theta]
S_bar = 2
rounds = 1
baseline_steps = 10
n_runs = 2

[mpc]
samples = 30
elites = 5
keep_elites = 2
iterations = 2
max_steps = 3
"""


@pytest.fixture
def small(tmp_path):
    path = tmp_path / "small.toml"
    text = SMALL_TOML + f'\n[paths]\nout_dir = "{tmp_path / "runs"}"\ntrajectory = "{tmp_path / "traj.csv"}"\n'
    path.write_text(text)
    return str(path), tmp_path


def run(*argv):
    return cli.main([str(a) for a in argv])


# ---- config -------------------------------------------------------------------------------------

def test_defaults_load_and_hash_is_stable():
    a, b = config_mod.load(), config_mod.loads("")
    assert a.hash == b.hash and len(a.hash) == 16
    assert a.graph.n_agents == 5 and a.data.intervals == tuple(DEFAULT_INTERVALS)
    assert a.train.c == TrainConfig().c and a.mpc_steps == 500 and a.n_runs == 10
    assert config_mod.loads(config_mod.dump_defaults()).hash == a.hash


def test_override_changes_hash():
    a = config_mod.load()
    b = config_mod.with_overrides(a, **{"data.seed": 7, "theta.rounds": None})
    assert b.data.seed == 7 and b.train.rounds == a.train.rounds and b.hash != a.hash


def test_unknown_key_reports_line():
    with pytest.raises(ConfigError) as exc:
        config_mod.loads("[data]\nT = 100\n\n[lift]\nwidth = 3\n")
    assert exc.value.field == "lift.width" and exc.value.line == 5


def test_unknown_section_and_wrong_type():
    with pytest.raises(ConfigError) as exc:
        config_mod.loads("[solver]\nx = 1\n")
    assert exc.value.line == 1
    with pytest.raises(ConfigError) as exc:
        config_mod.loads('[consensus]\nS = "many"\n')
    assert exc.value.field == "consensus.S" and exc.value.line == 2


def test_syntax_error_reports_line():
    with pytest.raises(ConfigError) as exc:
        config_mod.loads("[data]\nT = 5\nseed = = 3\n")
    assert exc.value.line == 3


@pytest.mark.parametrize("text, field", [
    ("[data]\nintervals = [[0, 800], [800, 1800], [1800, 2200], [2200, 3000], [3000, 6000]]\n", "data.intervals"),
    ("[data]\nintervals = [[0, 800]]\n", "data.intervals"),
    ("[data]\ntrain_end = 6000\n", "data.train_end"),
    ("[graph]\nedges = [[1, 2]]\n", "graph.edges"),
    ("[mpc]\nx0 = [1, 2]\n", "mpc.x0"),
    ("[consensus]\nmixing = \"random\"\n", "consensus.mixing"),
])
def test_invalid_values_name_the_field(text, field):
    with pytest.raises(ConfigError) as exc:
        config_mod.loads(text)
    assert exc.value.field == field


# ---- generate -----------------------------------------------------------------------------------

def test_generate_default_length(tmp_path, capsys):
    out = tmp_path / "t.csv"
    assert run("generate", "--out", out) == 0
    traj = read_trajectory_csv(out)
    assert traj.states.shape == (5001, 6) and traj.inputs.shape == (5000, 2)
    assert traj.meta["config_hash"] == config_mod.load().hash
    assert "velocity mean" in capsys.readouterr().out


def test_generate_reproducible(small):
    cfg, tmp = small
    paths = [tmp / f"{k}.csv" for k in "abc"]
    assert run("--config", cfg, "generate", "--seed", 7, "--out", paths[0]) == 0
    assert run("--config", cfg, "generate", "--seed", 7, "--out", paths[1]) == 0
    assert run("--config", cfg, "generate", "--seed", 8, "--out", paths[2]) == 0
    assert paths[0].read_bytes() == paths[1].read_bytes() != paths[2].read_bytes()


def test_invalid_interval_exit_code(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[data]\nT = 100\nintervals = [[0, 20], [20, 40], [40, 60], [60, 80], [80, 120]]\n"
                   "train_end = 50\ntest_end = 100\n")
    assert run("--config", cfg, "generate", "--out", tmp_path / "x.csv") == 2
    err = capsys.readouterr().err
    assert "data.intervals" in err and "line 3" in err
    assert not (tmp_path / "x.csv").exists()


def test_missing_config_file(tmp_path):
    assert run("--config", tmp_path / "nope.toml", "generate") == 2


# ---- train / eval / mpc / report ----------------------------------------------------------------

def test_train_ddkl_writes_agent_files(small):
    cfg, tmp = small
    assert run("--config", cfg, "generate") == 0
    code = run("--config", cfg, "train", "ddkl-pt")
    assert code == 3  # one round of a tiny run cannot reach the loss threshold; artifacts still written
    out = tmp / "runs" / "ddkl-pt"
    assert sorted(os.listdir(out)) == [f"agent{i}.ckpt" for i in range(1, 6)] + ["round_history.csv",
                                                                                  "theta_history.csv"]
    h = config_mod.load(cfg).hash
    for name in ("round_history.csv", "theta_history.csv"):
        assert f"# config_hash={h}" in (out / name).read_text()
    theta = (out / "theta_history.csv").read_text().splitlines()
    assert len([ln for ln in theta if not ln.startswith("#")]) == 1 + 2


def test_train_regenerates_missing_data_deterministically(small):
    cfg, tmp = small
    assert run("--config", cfg, "train", "dko", "--out-dir", tmp / "a") in (0, 3)
    assert run("--config", cfg, "train", "dko", "--out-dir", tmp / "b") in (0, 3)
    assert sorted(os.listdir(tmp / "a" / "dko")) == ["dko.ckpt", "loss_history.csv"]
    assert (tmp / "a" / "dko" / "dko.ckpt").read_bytes() == (tmp / "b" / "dko" / "dko.ckpt").read_bytes()


def test_mlp_step_cap_is_non_convergence(small):
    cfg, tmp = small
    assert run("--config", cfg, "train", "mlp", "--steps", 10) == 3
    hist = (tmp / "runs" / "mlp" / "loss_history.csv").read_text().splitlines()
    body = [ln for ln in hist if not ln.startswith("#")]
    assert body[0] == "step,loss" and len(body) >= 2
    assert (tmp / "runs" / "mlp" / "mlp.ckpt").exists()


def test_eval_trains_runs_and_reports(small):
    cfg, tmp = small
    out = tmp / "metrics.csv"
    assert run("--config", cfg, "eval", "--methods", "dko,mlp", "--zero-baseline", "--out", out) == 0
    rep = read_metrics_csv(out)
    assert [m for m, _, _ in rep.rows] == ["dko", "dko", "mlp", "mlp", "zero"]
    assert set(rep.summary) == {"dko", "mlp", "zero"}
    assert rep.summary["zero"][1] == 0.0
    assert f"# config_hash={config_mod.load(cfg).hash}" in out.read_text()

    merged = tmp / "report.csv"
    assert run("report", out, out, "--out", merged) == 0
    lines = merged.read_text().splitlines()
    assert lines[1] == "method,n_runs,mean,std,reference_mean,reference_std,source"
    assert len(lines) == 2 + 6
    assert lines[2].startswith("dko,2,") and ",0.0179,0.0016," in lines[2]
    assert ",," in lines[4]  # the zero predictor has no reference value


def test_eval_with_oracle_model_is_zero(small, monkeypatch):
    cfg, tmp = small
    assert run("--config", cfg, "generate") == 0
    traj = read_trajectory_csv(tmp / "traj.csv")
    _, _, V_next = holdout_slice(traj, 300, 400)
    ckpt = tmp / "oracle.ckpt"
    ckpt.write_text("placeholder")
    monkeypatch.setattr(cli, "load_any_model", lambda path: (lambda V, U: V_next.copy()))
    out = tmp / "m.csv"
    assert run("--config", cfg, "eval", "--model", f"oracle={ckpt}", "--out", out) == 0
    rep = read_metrics_csv(out)
    assert rep.rows == [("oracle", 0, 0.0)] and rep.summary["oracle"] == (0.0, 0.0)


def test_eval_missing_model(small):
    cfg, tmp = small
    assert run("--config", cfg, "eval", "--model", f"dko={tmp / 'missing.ckpt'}") == 2
    assert run("--config", cfg, "eval", "--model", "no-equals-sign") == 2


def test_mpc_routes_agent_and_is_reproducible(small, capsys):
    cfg, tmp = small
    run("--config", cfg, "train", "ddkl-pt")
    capsys.readouterr()
    a = tmp / "a.csv"
    b = tmp / "b.csv"
    code = run("--config", cfg, "mpc", "--agent", 3, "--task", "station", "--out", a)
    assert code in (0, 3)
    run("--config", cfg, "mpc", "--agent", 3, "--task", "station", "--out", b)
    assert a.read_bytes() == b.read_bytes()
    text = a.read_text()
    assert "# model=agent3.ckpt" in text and "# task=station" in text
    assert f"# config_hash={config_mod.load(cfg).hash}" in text
    rows = [ln for ln in text.splitlines() if not ln.startswith("#")]
    assert len(rows) == 1 + 4
    assert run("--config", cfg, "mpc", "--agent", 9) == 2


def test_mpc_timing_flag(small):
    cfg, tmp = small
    run("--config", cfg, "train", "ddkl-pt")
    out = tmp / "t.csv"
    run("--config", cfg, "mpc", "--agent", 1, "--timing", "--out", out)
    last = [ln for ln in out.read_text().splitlines() if not ln.startswith("#")][-2]
    assert float(last.split(",")[-1]) > 0
    assert np.isfinite(float(last.split(",")[1]))


def test_paths_do_not_change_hash():
    a = config_mod.load()
    b = config_mod.with_overrides(a, **{"paths.out_dir": "elsewhere"})
    assert a.hash == b.hash
