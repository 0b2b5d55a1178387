import json

import numpy as np
import pytest

from oracles import hand_quality
from tubenav.config import Config
from tubenav.env import Terminal
from tubenav.evaluation import (TUNING_SEED_OFFSET, ComparisonRow, EpisodeRecord, PolicyController,
                                StepLog, UndefinedMetric, aggregate, compare, emit_plots,
                                select_checkpoint,
                                episode_seeds, evaluate, pp_controller, quality_index,
                                run_episode, sweep_pp_lookahead)
from tubenav.ppo import init_params, save_checkpoint


def record(d, a, terminal=Terminal.SUCCESS, inside=None):
    inside = inside or [True] * len(d)
    steps = [StepLog(i, (0.0, 0.0, float(i)), di, ai, 1, 1.0, 0.0, ins)
             for i, (di, ai, ins) in enumerate(zip(d, a, inside))]
    return EpisodeRecord(steps, terminal, 0, 0, "x")


def test_quality_index_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = rng.integers(1, 50)
        d, a = rng.uniform(0, 1, n), rng.uniform(-1, 1, n)
        assert quality_index(record(d, a)) == pytest.approx(hand_quality(d, a), abs=1e-12)
    assert quality_index(record([0.0], [1.0])) == 1.0
    assert quality_index(record([1.0], [-1.0])) == 0.0


def test_quality_skips_out_of_tube_steps():
    rec = record([0.2, 1.3], [1.0, -1.0], Terminal.FAILURE, inside=[True, False])
    assert quality_index(rec) == pytest.approx(0.5 * 0.8 + 0.5)
    with pytest.raises(UndefinedMetric):
        quality_index(record([1.2], [0.0], inside=[False]))


def test_aggregate_percentages_sum():
    recs = [record([0.1], [1.0], t) for t in
            [Terminal.SUCCESS] * 5 + [Terminal.FAILURE] * 3 + [Terminal.TIMEOUT] * 2]
    row = aggregate(recs, "x", 1)
    assert (row.success_pct, row.exit_pct, row.timeout_pct) == (50.0, 30.0, 20.0)
    assert row.success_pct + row.exit_pct + row.timeout_pct == 100.0
    assert row.terminals.count("success") == 5 and len(row.terminals) == len(row.seeds) == 10
    with pytest.raises(UndefinedMetric):
        aggregate([], "x", 0)


def test_episode_log_lines():
    rec = record([0.1, 0.2], [0.9, 0.8], Terminal.TIMEOUT)
    lines = [json.loads(x) for x in rec.to_jsonl().splitlines()]
    assert [x["terminal"] for x in lines] == ["running", "timeout"]
    assert set(lines[0]) >= {"t", "position", "d_perp_over_r", "s_align", "regime", "reward",
                             "c_turn", "terminal"}


def test_run_episode_respects_t_max(straight):
    rec = run_episode(PolicyController(init_params(np.random.default_rng(0))), straight)
    assert len(rec.steps) <= Config().env.t_max
    assert rec.terminal != Terminal.RUNNING


def test_compare_is_paired_and_logged(tmp_path):
    cfg = Config()
    ctrls = {"pp2": pp_controller(cfg, 2.0, "pp2"), "pp6": pp_controller(cfg, 6.0, "pp6")}
    table = compare(ctrls, [0], 3, 40, cfg, tmp_path)
    a, b = table.row("pp2", 0), table.row("pp6", 0)
    assert a.seeds == b.seeds == [40, 41, 42]
    assert (tmp_path / "pp2_level0.jsonl").exists()
    csv = table.to_csv().splitlines()
    assert csv[0].startswith("controller,level,episodes,success_pct")
    assert len(csv) == 3
    assert json.loads(table.to_json())["meta"]["n_episodes"] == 3
    with pytest.raises(ValueError):
        compare(ctrls, [0], 0, 0, cfg)


def test_sweep_uses_disjoint_tuning_seeds(monkeypatch):
    import tubenav.evaluation as ev
    seen = []
    real = ev.evaluate

    def spy(ctrl, level, seeds, config=None):
        seeds = list(seeds)
        seen.extend(seeds)
        return real(ctrl, level, seeds[:1], config)

    monkeypatch.setattr(ev, "evaluate", spy)
    L, results = sweep_pp_lookahead(Config(), [0], 4, 0)
    assert L in Config().pure_pursuit.sweep_radii
    assert len(results) == len(Config().pure_pursuit.sweep_radii)
    assert min(seen) >= TUNING_SEED_OFFSET
    assert not set(seen) & set(episode_seeds(0, 100))


def test_select_checkpoint_ranks_on_tuning_tubes(monkeypatch, tmp_path):
    import tubenav.evaluation as ev
    paths = [save_checkpoint(tmp_path / f"c{i}.npz", init_params(np.random.default_rng(i)))
             for i in range(3)]
    outcomes = iter([Terminal.FAILURE, Terminal.FAILURE,    # c0, levels 0 and 1
                     Terminal.SUCCESS, Terminal.TIMEOUT,    # c1
                     Terminal.SUCCESS, Terminal.FAILURE])   # c2: same success, more exits
    seen = []

    def fake(ctrl, level, seeds, config=None):
        seen.extend(seeds)
        return [record([0.1], [1.0], next(outcomes))]

    monkeypatch.setattr(ev, "evaluate", fake)
    best, results = select_checkpoint(paths, Config(), [0, 1], 5, 0)
    assert best == paths[1]
    assert [r["success_pct"] for r in results] == [0.0, 50.0, 50.0]
    assert min(seen) >= TUNING_SEED_OFFSET
    with pytest.raises(ValueError):
        select_checkpoint([], Config(), [0], 1, 0)


def test_evaluate_is_deterministic():
    cfg = Config()
    ctrl = pp_controller(cfg, 3.0)
    a = evaluate(ctrl, 1, [5], cfg)[0]
    b = evaluate(ctrl, 1, [5], cfg)[0]
    assert a.terminal == b.terminal and a.ret == b.ret


def test_emit_plots(tmp_path):
    metrics = [
        {"iteration": 1, "level": 0, "success_rate": 0.5, "mean_return": 3.0, "advanced_to": None},
        {"iteration": 2, "level": 0, "success_rate": 0.9, "mean_return": 4.0, "advanced_to": 1},
        {"iteration": 3, "level": 1, "success_rate": 0.7, "mean_return": None, "advanced_to": None},
    ]
    paths = emit_plots(metrics, tmp_path)
    assert paths["transitions"].read_text().splitlines() == ["iteration,from_level,to_level", "2,0,1"]
    assert len(paths["success"].read_text().splitlines()) == 4
    assert paths["return"].read_text().splitlines()[3] == "3,,1"
    with pytest.raises(ValueError):
        emit_plots([], tmp_path)
