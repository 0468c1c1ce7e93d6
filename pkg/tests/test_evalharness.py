import json

import numpy as np
import pytest

from conftest import open_grid
from navfuse.backends import ExpertBackend, RandomBackend
from navfuse.evalharness import (
    EvalReport,
    Trace,
    evaluate,
    run_episode,
    select_action,
    softspl,
)
from navfuse.expert import make_episodes
from navfuse.gridworld import Action, Episode, Pose


class Scripted:
    """Backend replaying a fixed action list, then repeating the last action."""

    name = "scripted"
    fallbacks = 0

    def __init__(self, actions, fail_at=None, bad_at=None):
        self.actions, self.fail_at, self.bad_at = list(actions), fail_at, bad_at

    def reset(self, episode):
        self.t = 0

    def act(self, obs, pose=None):
        t = self.t
        self.t += 1
        if t == self.fail_at:
            raise RuntimeError("backend exploded")
        if t == self.bad_at:
            return np.array([0.5, 0.6, 0, 0, 0, 0])
        return np.eye(6)[self.actions[min(t, len(self.actions) - 1)]]


@pytest.fixture(scope="module")
def episodes(small_maps):
    return make_episodes(small_maps, 4, seed=5)


def wall_episode():
    grid = open_grid(10, 10, {"chair": [(2, 2)]})
    return Episode("wall", "", Pose.at_cell((8, 5), 0), "chair", 6.0, grid)


def test_softspl_examples():
    assert softspl(5, 0, 5, 5) == 1.0
    assert softspl(4, 2, 4, 8) == 0.25
    assert softspl(4, 6, 4, 4) == 0.0
    assert softspl(4, 6, 4, 4, clamp=False) == -0.5
    with pytest.raises(ValueError):
        softspl(0, 0, 1, 1)


def test_argmax_takes_lowest_index_on_ties():
    assert select_action(np.array([0, 0.4, 0.4, 0.2, 0, 0]), "argmax", None) == 1
    with pytest.raises(ValueError):
        select_action(np.full(6, 1 / 6), "greedy", None)


def test_immediate_stop(episodes):
    ep = episodes[0]
    r = run_episode(Scripted([Action.STOP]), ep)
    assert r.steps == 1 and r.path_length_m == 0.0 and r.collision_count == 0
    assert not r.success and r.softspl == 0.0
    assert r.d_T_m == pytest.approx(ep.d_init_m)


def test_forward_into_wall_for_whole_budget():
    r = run_episode(Scripted([Action.MOVE_FORWARD]), wall_episode())
    assert r.steps == 500 and r.collision_count == 500
    assert r.path_length_m == 0.0 and not r.success


def test_backend_failures_become_error_rows(episodes):
    r = run_episode(Scripted([Action.TURN_LEFT], fail_at=3), episodes[0])
    assert r.error == "RuntimeError: backend exploded" and r.steps == 3 and not r.success
    r = run_episode(Scripted([Action.TURN_LEFT], bad_at=0), episodes[0])
    assert r.error.startswith("ValueError") and r.steps == 0


def test_stop_inside_radius_succeeds():
    grid = open_grid(10, 10, {"chair": [(5, 5)]})
    ep = Episode("near", "", Pose.at_cell((2, 5), 0), "chair", 0.75, grid)
    moves = [Action.MOVE_FORWARD, Action.STOP]
    r = run_episode(Scripted(moves), ep)
    assert r.success and r.d_T_m <= 1.0 and r.path_length_m == 0.25
    assert r.softspl == 1.0  # one step reaches the region, the shortest possible path


def test_path_length_counts_clean_forward_moves(episodes):
    for ep in episodes[:6]:
        trace = Trace()
        r = run_episode(RandomBackend(3), ep, max_steps=120, selection="sample", seed=3, trace=trace)
        clean = sum(a == Action.MOVE_FORWARD and not c for a, c in zip(trace.actions, trace.collided))
        assert r.path_length_m == 0.25 * clean
        assert r.collision_count == sum(trace.collided)
        assert len(trace.poses) == r.steps + 1
        if r.success:
            assert trace.actions[-1] == Action.STOP and r.d_T_m <= 1.0


def test_expert_succeeds_everywhere(episodes):
    report = evaluate(lambda s: ExpertBackend(), episodes)
    assert report.aggregates["success_mean"] == 1.0
    assert report.aggregates["collision_mean"] == 0.0
    for r in report.per_episode:
        assert r.d_T_m <= 1.0 and 0.0 < r.softspl <= 1.0


def test_aggregates_match_rows_and_order(episodes):
    report = evaluate(lambda s: RandomBackend(s), episodes, seeds=[2, 1], selection="sample", max_steps=60)
    rows = report.per_episode
    assert [(r.seed, r.episode_id) for r in rows] == sorted((r.seed, r.episode_id) for r in rows)
    agg = report.aggregates
    assert agg["n"] == 2 * len(episodes)
    assert agg["success_mean"] == pytest.approx(np.mean([r.success for r in rows]))
    assert agg["softspl_mean"] == pytest.approx(np.mean([r.softspl for r in rows]))
    assert agg["collision_mean"] == pytest.approx(np.mean([r.collision_count for r in rows]))
    assert [s["seed"] for s in report.per_seed] == [1, 2]
    assert sum(s["n"] for s in report.per_seed) == agg["n"]


def test_identical_seeds_give_identical_bytes(episodes):
    def run():
        return evaluate(lambda s: RandomBackend(s), episodes, seeds=[0, 4], selection="sample", max_steps=80).dumps()

    first = run()
    assert first == run()
    other = evaluate(lambda s: RandomBackend(s), episodes, seeds=[1, 4], selection="sample", max_steps=80).dumps()
    assert other != first


def test_sample_selection_depends_on_seed_only(episodes):
    ep = episodes[1]
    a = run_episode(RandomBackend(0), ep, max_steps=40, selection="sample", seed=7)
    b = run_episode(RandomBackend(0), ep, max_steps=40, selection="sample", seed=7)
    assert a == b


def test_report_json_and_csv(tmp_path, episodes):
    report = evaluate(lambda s: ExpertBackend(), episodes[:3], config={"backend": "expert"})
    report.save(tmp_path / "r.json")
    data = json.loads((tmp_path / "r.json").read_text())
    assert set(data) == {"config", "per_episode", "aggregates", "per_seed"}
    assert data["config"]["backend"] == "expert"
    back = EvalReport.load(tmp_path / "r.json")
    assert back.per_episode == report.per_episode
    lines = report.to_csv().splitlines()
    assert lines[0].startswith("episode_id,seed,success,softspl")
    assert len(lines) == 4 and lines[1].split(",")[0] == report.per_episode[0].episode_id
    data["per_episode"][0].pop("softspl")
    with pytest.raises(ValueError, match="softspl"):
        EvalReport.from_json(data)


def test_missing_grid_is_rejected(episodes):
    import dataclasses

    with pytest.raises(ValueError, match="map"):
        run_episode(ExpertBackend(), dataclasses.replace(episodes[0], grid=None))
