import numpy as np
import pytest

from greenpatrol.grid import (
    ANIMAL_RANK_WEIGHTS,
    DENSITY_WEIGHTS,
    GridConfigError,
    GridWorld,
    boundary_cells,
    combine_feature_ranks,
    default_river,
    default_road,
    feature_rank,
    neighbors,
    random_density,
    spatial_density,
)


def make_grid(width, height):
    return GridWorld(width=width, height=height, density=np.zeros((height, width)))


def test_random_density_deterministic_from_seed():
    a = random_density(10, 10, seed=7)
    b = random_density(10, 10, seed=7)
    np.testing.assert_array_equal(a.density, b.density)


def test_random_density_range_and_shape():
    g = random_density(12, 9, seed=3)
    assert g.density.shape == (9, 12)
    assert np.all(g.density >= 0.0) and np.all(g.density <= 1.0)
    assert not g.river_cells and not g.road_cells


def test_random_density_rejects_small_grids():
    with pytest.raises(GridConfigError):
        random_density(2, 10, seed=0)
    with pytest.raises(GridConfigError):
        random_density(10, 1, seed=0)


def test_random_density_mean_near_half():
    # law of large numbers over >= 1e5 sampled cells
    values = [random_density(100, 100, seed=s).density for s in range(12)]
    mean = np.mean(values)
    assert abs(mean - 0.5) < 0.01


def test_feature_rank_center_of_3x3():
    g = make_grid(3, 3)
    rank = feature_rank(g, {(1, 1)})
    assert rank[1, 1] == 0.0
    for corner in ((0, 0), (0, 2), (2, 0), (2, 2)):
        assert rank[corner] == 1.0


def test_feature_rank_degenerate_all_cells():
    g = make_grid(3, 3)
    rank = feature_rank(g, set(g.all_cells()))
    np.testing.assert_array_equal(rank, np.zeros((3, 3)))


def test_feature_rank_column_feature():
    g = make_grid(3, 3)
    rank = feature_rank(g, {(r, 0) for r in range(3)})
    np.testing.assert_allclose(rank[:, 0], 0.0)
    np.testing.assert_allclose(rank[:, 1], 0.5)
    np.testing.assert_allclose(rank[:, 2], 1.0)


def test_feature_rank_empty_feature_set_errors():
    with pytest.raises(GridConfigError):
        feature_rank(make_grid(3, 3), set())


def test_feature_rank_monotone_in_distance():
    # strict ordering on distinct distances, across random feature sets
    rng = np.random.default_rng(42)
    g = make_grid(7, 6)
    cells = g.all_cells()
    for _ in range(25):
        n_feat = int(rng.integers(1, 6))
        idx = rng.choice(len(cells), size=n_feat, replace=False)
        feats = {cells[i] for i in idx}
        rank = feature_rank(g, feats)
        dist = np.array(
            [[min(abs(r - fr) + abs(c - fc) for fr, fc in feats) for c in range(7)]
             for r in range(6)]
        )
        for a in cells:
            for b in cells:
                if dist[a] < dist[b]:
                    assert rank[a] < rank[b]


def test_combine_feature_ranks_identity_on_equal_maps():
    # weights sum to 1 per stage, so four identical rank maps pass through
    rng = np.random.default_rng(0)
    r = rng.uniform(0.0, 1.0, size=(4, 5))
    r.flat[0], r.flat[-1] = 0.0, 1.0  # already spans [0, 1]
    out = combine_feature_ranks(boundary_rank=r, road_rank=r, river_rank=r)
    np.testing.assert_allclose(out, r, atol=1e-12)


def test_spatial_density_weights_are_fixed():
    assert ANIMAL_RANK_WEIGHTS == {"boundary": 0.1, "road": 0.1, "river": 0.8}
    assert DENSITY_WEIGHTS == {"animal": 0.7, "river": 0.05, "road": 0.15, "boundary": 0.1}


def test_spatial_density_3x3_hand_computed():
    # river = middle column, road = middle row; expected values worked out
    # by hand from the two weighted averages and the final normalization
    g = spatial_density(
        3, 3,
        river_cells=frozenset((r, 1) for r in range(3)),
        road_cells=frozenset((1, c) for c in range(3)),
    )
    expected = np.array(
        [
            [1.0, 5.0 / 66.0, 1.0],
            [2.0 / 3.0, 0.0, 2.0 / 3.0],
            [1.0, 5.0 / 66.0, 1.0],
        ]
    )
    np.testing.assert_allclose(g.density, expected, atol=1e-12)


def test_spatial_density_defaults_cross_grid():
    g = spatial_density(9, 6)
    assert g.river_cells == default_river(9, 6)
    assert g.road_cells == default_road(9, 6)
    assert np.all(g.density >= 0.0) and np.all(g.density <= 1.0)


def test_spatial_density_rejects_disconnected_path():
    broken_river = frozenset({(0, 1), (2, 1)})  # gap at (1, 1)
    with pytest.raises(GridConfigError):
        spatial_density(3, 3, river_cells=broken_river)


def test_spatial_density_rejects_non_crossing_path():
    stub = frozenset({(0, 1), (1, 1)})
    with pytest.raises(GridConfigError):
        spatial_density(4, 4, river_cells=stub)


def test_spatial_density_mirror_symmetry():
    # mirroring the features left-right mirrors the density
    w, h = 7, 5
    river = frozenset((r, 2) for r in range(h))
    road = frozenset((3, c) for c in range(w))
    g = spatial_density(w, h, river_cells=river, road_cells=road)
    river_m = frozenset((r, w - 1 - c) for r, c in river)
    road_m = frozenset((r, w - 1 - c) for r, c in road)
    gm = spatial_density(w, h, river_cells=river_m, road_cells=road_m)
    np.testing.assert_allclose(gm.density, g.density[:, ::-1], atol=1e-12)


def test_neighbors_counts():
    g = make_grid(10, 10)
    assert len(neighbors(g, (0, 0))) == 3
    assert len(neighbors(g, (5, 5))) == 5
    assert (5, 5) in neighbors(g, (5, 5))
    tiny = make_grid(1, 1)
    assert neighbors(tiny, (0, 0)) == [(0, 0)]


def test_density_immutable():
    g = random_density(4, 4, seed=1)
    with pytest.raises(ValueError):
        g.density[0, 0] = 0.5


def test_density_csv_six_decimals():
    g = random_density(3, 3, seed=5)
    text = g.density_csv()
    lines = text.strip().split("\n")
    assert len(lines) == 3
    parsed = np.array([[float(v) for v in line.split(",")] for line in lines])
    np.testing.assert_allclose(parsed, g.density, atol=5e-7)
    assert all(len(v.split(".")[1]) == 6 for line in lines for v in line.split(","))
