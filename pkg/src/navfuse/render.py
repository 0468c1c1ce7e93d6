"""SVG drawings of a map with an agent trajectory on top."""

from __future__ import annotations

from typing import Sequence

from .gridworld import GOAL_CATEGORIES, OccupancyGrid, Pose

PX = 12  # pixels per cell
_GOAL_COLORS = ("#d62728", "#9467bd", "#2ca02c", "#17becf", "#ff7f0e", "#8c564b")


def _xy(grid: OccupancyGrid, x_m: float, y_m: float) -> tuple[str, str]:
    # world y grows upward, SVG y grows downward
    px = x_m / grid.cell_size_m * PX
    py = (grid.height_cells - y_m / grid.cell_size_m) * PX
    return f"{px:.2f}", f"{py:.2f}"


def render_trajectory(
    grid: OccupancyGrid,
    trajectory: Sequence[Pose],
    collided: Sequence[bool] = (),
    start: Pose | None = None,
    goal: str | None = None,
) -> str:
    """Occupied cells, goal markers, start marker, path polyline and collision markers.

    ``trajectory`` holds poses in visiting order; ``collided[i]`` flags a
    failed move attempted from ``trajectory[i]``.  Only goals of ``goal`` are
    drawn when it is given.
    """
    w, h = grid.width_cells * PX, grid.height_cells * PX
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'<rect x="0" y="0" width="{w}" height="{h}" fill="#ffffff"/>',
        '<g fill="#444444">',
    ]
    for r in range(grid.height_cells):
        for c in range(grid.width_cells):
            if grid.occupied[r, c]:
                out.append(f'<rect x="{c * PX}" y="{(grid.height_cells - 1 - r) * PX}" width="{PX}" height="{PX}"/>')
    out.append("</g>")
    for k, cat in enumerate(GOAL_CATEGORIES):
        if goal is not None and cat != goal:
            continue
        for gx, gy in grid.goals.get(cat, ()):
            cx, cy = _xy(grid, (gx + 0.5) * grid.cell_size_m, (gy + 0.5) * grid.cell_size_m)
            out.append(f'<circle class="goal" cx="{cx}" cy="{cy}" r="{PX * 0.4:.2f}" fill="{_GOAL_COLORS[k]}"><title>{cat}</title></circle>')
    start = start or (trajectory[0] if trajectory else None)
    if start is not None:
        sx, sy = _xy(grid, start.x_m, start.y_m)
        out.append(f'<rect class="start" x="{float(sx) - PX / 2:.2f}" y="{float(sy) - PX / 2:.2f}" width="{PX}" height="{PX}" fill="none" stroke="#1f77b4" stroke-width="2"/>')
    if len(trajectory) > 1:
        pts = " ".join(",".join(_xy(grid, p.x_m, p.y_m)) for p in trajectory)
        out.append(f'<polyline class="path" points="{pts}" fill="none" stroke="#1f77b4" stroke-width="2"/>')
    for pose, hit in zip(trajectory, collided):
        if hit:
            cx, cy = _xy(grid, pose.x_m, pose.y_m)
            out.append(f'<circle class="collision" cx="{cx}" cy="{cy}" r="{PX * 0.25:.2f}" fill="#000000"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
