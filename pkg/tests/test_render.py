import numpy as np
import pytest

from mimscape.landscape import LandscapeGrid, grid_coordinates
from mimscape.render import RenderError, RenderSpec, contour_levels, contour_segments, marching_squares, render_svg


def analytic_grid(fn, resolution=21):
    xs = grid_coordinates(resolution, 1.0)
    a, b = np.meshgrid(xs, xs, indexing="ij")
    return LandscapeGrid(xs, xs.copy(), np.asarray(fn(a, b), dtype=float), float(fn(0.0, 0.0)), "analytic")


def test_constant_grid_has_no_segments():
    grid = analytic_grid(lambda a, b: np.full(np.shape(a), 2.0))
    assert contour_levels(grid.losses, 10) == []
    assert contour_segments(grid, 10) == {}
    assert marching_squares(grid.losses, grid.alphas, grid.betas, 2.0) == []


def test_plane_gives_vertical_iso_lines():
    grid = analytic_grid(lambda a, b: 3.0 * a + 5.0)
    segs = contour_segments(grid, 7)
    assert len(segs) == 7
    for level, lines in segs.items():
        assert lines
        xs = [p[0] for seg in lines for p in seg]
        assert max(xs) - min(xs) < 1e-9
        assert abs(xs[0] - (level - 5.0) / 3.0) < 1e-9


def test_paraboloid_contours_are_closed_loops():
    grid = analytic_grid(lambda a, b: a ** 2 + b ** 2)
    for level in (0.123, 0.377, 0.777):  # off the grid values a^2 + b^2
        segs = marching_squares(grid.losses, grid.alphas, grid.betas, level)
        degree: dict = {}
        for p, q in segs:
            for pt in (p, q):
                degree[pt] = degree.get(pt, 0) + 1
        assert segs and all(d == 2 for d in degree.values())
        radii = [np.hypot(*pt) for pt in degree]
        assert max(abs(r - np.sqrt(level)) for r in radii) < 0.02


def test_saddle_cell_is_split_by_center_value():
    f = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert len(marching_squares(f, [0.0, 1.0], [0.0, 1.0], 0.5)) == 2


def test_non_finite_cells_are_skipped():
    f = np.array([[0.0, 1.0, 2.0], [0.0, np.inf, 2.0], [0.0, 1.0, 2.0]])
    assert marching_squares(f, [0, 1, 2], [0, 1, 2], 0.5) == []


def test_svg_is_deterministic_and_well_formed(tmp_path):
    grid = analytic_grid(lambda a, b: a ** 2 + 2 * b ** 2 + 0.1)
    grid.losses[0, 0] = np.inf
    out = tmp_path / "g.svg"
    one = render_svg(grid, RenderSpec(output=str(out)))
    two = render_svg(grid, RenderSpec())
    assert one == two == out.read_text(encoding="utf-8")
    assert one.startswith("<?xml") and one.rstrip().endswith("</svg>")
    assert "#e41a1c" in one and one.count("<path") == 10


@pytest.mark.parametrize("mode", ["contour", "heatmap"])
def test_svg_modes(mode):
    svg = render_svg(analytic_grid(lambda a, b: a + b + 2.0), RenderSpec(mode=mode, log_scale=False))
    assert ('id="heatmap"' in svg) == (mode == "heatmap")
    assert ('id="contours"' in svg) == (mode == "contour")


def test_render_spec_validation():
    with pytest.raises(RenderError):
        RenderSpec(mode="surface")
    with pytest.raises(RenderError):
        render_svg(analytic_grid(lambda a, b: np.full(np.shape(a), np.inf)))
