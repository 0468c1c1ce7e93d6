from pathlib import Path

from conftest import grid_from_rows, open_grid
from navfuse.gridworld import Action, Pose, step
from navfuse.render import render_trajectory

GOLDEN = Path(__file__).parent / "golden"


def three_step_fixture():
    grid = grid_from_rows(["######", "#....#", "#....#", "#..#.#", "######"], {"chair": [(4, 3)], "bed": [(1, 3)]})
    pose = Pose.at_cell((1, 1), 0)
    poses, hits = [pose], []
    for a in (Action.MOVE_FORWARD, Action.MOVE_FORWARD, Action.TURN_LEFT):
        out = step(grid, pose, a)
        pose = out.pose
        poses.append(pose)
        hits.append(out.collided)
    return grid, poses, hits


def test_empty_trajectory_draws_grid_and_start_only():
    grid = open_grid(5, 5)
    svg = render_trajectory(grid, [], start=Pose.at_cell((2, 2)))
    assert svg.count('class="start"') == 1
    assert "polyline" not in svg and 'class="collision"' not in svg
    assert svg.count('<rect x=') == 1 + 16  # background plus the border cells


def test_markers_present():
    grid, poses, hits = three_step_fixture()
    svg = render_trajectory(grid, poses, [False, True, False])
    assert svg.count('class="goal"') == 2
    assert svg.count('class="collision"') == 1
    points = svg.split('points="')[1].split('"')[0].split()
    assert len(points) == len(poses)
    assert points[0] == "18.00,42.00"  # cell (1, 1) centre, y flipped on a 5-row map
    assert len(render_trajectory(grid, poses, goal="bed").split('class="goal"')) == 2


def test_deterministic_and_matches_golden():
    grid, poses, hits = three_step_fixture()
    svg = render_trajectory(grid, poses, hits)
    assert svg == render_trajectory(grid, poses, hits)
    assert svg == (GOLDEN / "three_step.svg").read_text()
