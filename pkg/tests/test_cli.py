import json
import math

import numpy as np
import pytest

from connav.cli import main
from connav.config import ExperimentConfig, load_config, read_kv_file, write_kv_file
from connav.env import EnvConfig, read_trajectory
from connav.expert import ScriptedExpert
from connav.net import NetConfig, PolicyNet, save_checkpoint
from connav.rl import read_jsonl
from connav.train import evaluate, evaluate_actor, load_policy, train
from connav.world import WorldMap

from conftest import open_world

TINY = ["--set", "batch_size=250", "--set", "max_steps=40", "--set", "n_train_maps=3",
        "--set", "n_eval_maps=4", "--set", "checkpoint_every=1", "--set", "vf_iters=5"]


def tiny_cfg(**kw):
    base = dict(batch_size=250, max_steps=40, n_train_maps=3, n_eval_maps=4, checkpoint_every=1, vf_iters=5,
                total_steps=750)
    base.update(kw)
    return ExperimentConfig(**base)


def test_defaults_match_training_table():
    c = ExperimentConfig()
    assert (c.batch_size, c.gamma, c.gamma_c, c.bc_coef, c.vf_step_size, c.max_kl, c.cost_limit) == \
        (2048, 0.99, 0.999, 0.1, 0.1, 0.01, 0.1)
    assert c.trust_region().max_kl == 0.01 and c.env_config().v_max == 0.7
    assert c.net_config().init_logstd == pytest.approx(math.log(0.35))


def test_kv_file_round_trip_and_overrides(tmp_path):
    cfg = ExperimentConfig(algo="trpo", bc=False, seed=4)
    write_kv_file(cfg, tmp_path / "c.txt")
    assert load_config(tmp_path / "c.txt") == cfg
    (tmp_path / "d.txt").write_text("# comment\nalgo = cpo  # inline\n\nbc = off\ntotal_steps = 1e4\n")
    assert read_kv_file(tmp_path / "d.txt")["algo"] == "cpo"
    c = load_config(tmp_path / "d.txt", seed="9", n_robots=None)
    assert (c.algo, c.bc, c.total_steps, c.seed, c.n_robots) == ("cpo", False, 10000, 9, 3)
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"nope": 1})
    with pytest.raises(ValueError):
        ExperimentConfig(algo="ppo")


def test_gen_maps_deterministic(tmp_path, capsys):
    assert main(["gen-maps", "--count", "5", "--map-seed", "7", "--out", str(tmp_path / "a")]) == 0
    assert main(["gen-maps", "--count", "5", "--map-seed", "7", "--out", str(tmp_path / "b")]) == 0
    a = sorted((tmp_path / "a").iterdir())
    b = sorted((tmp_path / "b").iterdir())
    assert len(a) == 5
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]
    assert WorldMap.load(a[0]).n_robots == 3


def test_gen_maps_zero_and_unwritable(tmp_path, capsys):
    assert main(["gen-maps", "--count", "0", "--out", str(tmp_path / "empty")]) == 0
    assert list((tmp_path / "empty").iterdir()) == []
    blocker = tmp_path / "file"
    blocker.write_text("x")
    target = blocker / "maps"
    assert main(["gen-maps", "--count", "1", "--out", str(target)]) == 1
    assert str(target) in capsys.readouterr().err


def test_train_logs_and_determinism(tmp_path):
    for d in ("a", "b"):
        assert main(["train", "--algo", "cpo", "--bc", "on", "--steps", "750", "--seed", "1",
                     "--out", str(tmp_path / d), *TINY]) == 0
    la = (tmp_path / "a" / "diagnostics.jsonl").read_bytes()
    assert la == (tmp_path / "b" / "diagnostics.jsonl").read_bytes()
    recs = read_jsonl(tmp_path / "a" / "diagnostics.jsonl")
    assert recs[0]["config"]["seed"] == 1
    for key in ("update", "avg_return", "J_c", "bc_loss", "kl", "steps"):
        assert key in recs[1]
    assert recs[-1]["timesteps"] >= 750
    assert (tmp_path / "a" / "config.txt").exists()


def test_trpo_arm_never_constrained(tmp_path):
    train(tiny_cfg(algo="trpo"), tmp_path)
    recs = read_jsonl(tmp_path / "diagnostics.jsonl")[1:]
    assert recs and all(r["mode"] in ("trpo", "degenerate") for r in recs)
    assert all(np.isfinite(r["J_c"]) for r in recs)


def test_resume_reproduces_uninterrupted_run(tmp_path):
    cfg = tiny_cfg()
    train(cfg, tmp_path / "full")

    class Stop(Exception):
        pass

    def interrupt(d):
        if d["update"] == 2:
            raise Stop

    with pytest.raises(Stop):
        train(cfg, tmp_path / "cut", interrupt)
    # the log may hold a record past the last checkpoint; resume must drop it
    train(cfg, tmp_path / "cut")
    assert (tmp_path / "cut" / "diagnostics.jsonl").read_bytes() == \
        (tmp_path / "full" / "diagnostics.jsonl").read_bytes()
    with pytest.raises(ValueError):
        train(tiny_cfg(seed=5), tmp_path / "full")


def test_eval_report_and_cli(tmp_path, capsys):
    cfg = tiny_cfg(total_steps=250)
    ckpt = train(cfg, tmp_path / "run")
    r1 = evaluate(ckpt, [])
    assert r1.episodes == 0
    main(["gen-maps", "--count", "3", "--split", "eval", "--out", str(tmp_path / "maps")])
    assert main(["eval", "--checkpoint", str(ckpt), "--maps", str(tmp_path / "maps"),
                 "--out", str(tmp_path / "rep.json")]) == 0
    rep = json.loads((tmp_path / "rep.json").read_text())
    assert rep["successes"] + rep["collisions"] + rep["timeouts"] == rep["episodes"] == 3
    assert 0 <= rep["success_rate"] <= 1 and 0 <= rep["connectivity_rate"] <= 1
    # default eval maps come from the held-out stream of the embedded config
    assert main(["eval", "--checkpoint", str(ckpt), "--out", str(tmp_path / "rep2.json")]) == 0
    assert json.loads((tmp_path / "rep2.json").read_text())["episodes"] == 4
    m = next((tmp_path / "maps").iterdir())
    assert main(["export-traj", "--checkpoint", str(ckpt), "--map", str(m), "--out", str(tmp_path / "t.csv")]) == 0
    rows = read_trajectory(tmp_path / "t.csv")
    assert {r["robot"] for r in rows} == {0, 1, 2}


def test_eval_layout_mismatch(tmp_path):
    other = PolicyNet(NetConfig(hidden=(16, 16)))
    wrong = PolicyNet(NetConfig())
    save_checkpoint(tmp_path / "bad.npz", NetConfig(), {"policy": np.zeros(wrong.size)},
                    {"policy": other.layout})
    with pytest.raises(ValueError, match="layout"):
        load_policy(tmp_path / "bad.npz")


def test_still_team_never_succeeds_but_stays_connected():
    w = open_world([(0, 0), (1, 0), (2, 0)], goal=(5, 5))
    rep = evaluate_actor(lambda o: np.zeros((len(o), 2)), [w, w], EnvConfig(max_steps=30))
    assert rep.success_rate == 0.0 and rep.connectivity_rate == 1.0 and rep.timeouts == 2
    assert rep.travel_time_mean is None


def test_expert_single_robot_travel_time():
    w = open_world([(-3.0, 0.0)], goal=(3.0, 0.0), goal_radius=0.5)
    rep = evaluate_actor(ScriptedExpert().act, [w], EnvConfig())
    assert rep.success_rate == 1.0
    # continuous-time oracle: full speed until 0.7 m out (k_goal = 1), then d' = -d down to R_g - R_r
    inner = 0.5 - 0.18
    t = (6.0 - 0.7) / 0.7 + math.log(0.7 / inner)
    assert rep.travel_time_mean == pytest.approx(t, abs=0.15)
    assert rep.travel_time_mean >= (6.0 - inner) / 0.7


def test_expert_cli_eval(tmp_path, capsys):
    assert main(["eval", "--expert", "--robots", "1", "--set", "goal_radius=0.5", "--set", "n_eval_maps=5"]) == 0
    out = capsys.readouterr().out
    assert '"episodes": 5' in out
