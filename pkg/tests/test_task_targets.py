import numpy as np
import pytest

from mvjar.mask_sampler import MaskPlan, SamplingStrategy, build_mask_plan
from mvjar.pointcloud_io import Frame
from mvjar.task_targets import (
    WindowConfig,
    assemble_masked_batch,
    build_shape_target,
    denormalize_shape,
    normalize_absolute,
    select_retained_point,
    window_relative_index,
)
from mvjar.voxel_grid import GridConfig, Voxel, voxelize
from tests.oracles import window_index_oracle


def test_window_index_examples():
    w = WindowConfig(12, 12, 1)
    assert window_relative_index((25, 13, 0), w) == 13
    assert window_relative_index((0, 0, 0), w) == 0
    assert window_relative_index((11, 11, 0), w) == 143 == w.num_classes - 1


@pytest.mark.parametrize("w", [WindowConfig(12, 12, 1), WindowConfig(4, 4, 2), WindowConfig(3, 5, 2)])
def test_window_index_matches_tiling_oracle(w):
    dims = (30, 30, 2)
    coords = np.array([(i, j, k) for k in range(2) for j in range(30) for i in range(30)])
    got = window_relative_index(coords, w)
    for c, g in zip(coords, got):
        assert g == window_index_oracle(c, dims, w.shape)


def _voxel(cluster_offsets):
    pts = np.zeros((len(cluster_offsets), 9))
    pts[:, 3:6] = cluster_offsets
    return Voxel((0, 0, 0), pts)


def test_retained_point():
    assert select_retained_point(_voxel([[0.1, 0, 0]])) == 0
    assert select_retained_point(_voxel([[0.3, 0, 0], [0, 0.1, 0], [0, 0, 0.5]])) == 1
    assert select_retained_point(_voxel([[0, 0, 0], [0, 0, 0]])) == 0


def test_shape_target_examples():
    cfg = GridConfig((0, 0, -2), (10.24, 10.24, 4), (0.32, 0.32, 6))
    pts = np.zeros((3, 9))
    pts[1, 6:9] = (0.16, 0.16, 3.0)
    pts[2, 6:9] = (0.08, -0.16, 1.5)
    target = build_shape_target(pts, cfg)
    np.testing.assert_allclose(target, [[0, 0, 0], [1, 1, 1], [0.5, -1.0, 0.5]])


def test_shape_target_invertible():
    cfg = GridConfig((0, 0, -2), (10.24, 10.24, 4), (0.32, 0.32, 6))
    rng = np.random.default_rng(0)
    pts = np.zeros((50, 9))
    pts[:, 6:9] = rng.uniform(-1, 1, (50, 3)) * np.array([0.16, 0.16, 3.0]) * 0.999
    back = denormalize_shape(build_shape_target(pts, cfg), cfg)
    np.testing.assert_allclose(back, pts[:, 6:9], atol=1e-9, rtol=0)


GRID = GridConfig((0, 0, 0), (4, 4, 1), (1, 1, 1), max_points=5)


def small_frame(shift=0.0):
    """Three voxels: (0,0,0) with 2 points, (1,0,0) with 3 points, (2,0,0) with 1 point."""
    xyz = [
        (0.2, 0.2, 0.5), (0.6, 0.7, 0.5),
        (1.2 + shift, 0.1, 0.3), (1.5, 0.5 + shift, 0.5), (1.8, 0.9, 0.7 - shift),
        (2.5, 0.5, 0.5),
    ]
    xyz = np.asarray(xyz)
    return Frame(np.hstack([xyz, np.zeros((len(xyz), 1))]))


def plan(kept, jig, shape):
    a = lambda v: np.array(v, dtype=np.int64)  # noqa: E731
    return MaskPlan(a(kept), a(jig), a(shape), SamplingStrategy.RFVS, 0.1, 0.05, 0)


def test_all_kept_is_normalized_input():
    vf = voxelize(small_frame(), GRID)
    b = assemble_masked_batch(vf, plan([0, 1, 2], [], []), WindowConfig(2, 2, 1))
    expected = vf.features.copy()
    expected[..., :3] = np.where(vf.point_mask[..., None], normalize_absolute(expected[..., :3], GRID), 0)
    np.testing.assert_array_equal(b.features, expected)
    assert not b.vtoken_mask.any() and not b.ptoken_mask.any()
    assert b.jigsaw_labels.shape == (0,) and b.shape_targets.shape == (0, 5, 3)


def test_shape_masked_rows():
    vf = voxelize(small_frame(), GRID)
    b = assemble_masked_batch(vf, plan([0, 2], [], [1]), WindowConfig(2, 2, 1))
    r = select_retained_point(vf.voxel(1))
    assert list(b.ptoken_mask[1]) == [False, True, True, False, False]
    assert list(b.point_mask[1]) == [True, True, True, False, False]
    np.testing.assert_array_equal(b.features[1, 0, 3:], vf.features[1, r, 3:])
    assert np.all(b.features[1, 1:] == 0)
    np.testing.assert_allclose(b.shape_target_list()[0], build_shape_target(vf.voxel(1), GRID))


def test_jigsaw_masked_columns():
    vf = voxelize(small_frame(), GRID)
    b = assemble_masked_batch(vf, plan([0, 2], [1], []), WindowConfig(2, 2, 1))
    assert list(b.vtoken_mask[1]) == [True, True, True, False, False]
    assert np.all(b.features[1, :, :3] == 0)
    np.testing.assert_array_equal(b.features[1, :, 3:], vf.features[1, :, 3:])
    assert list(b.jigsaw_labels) == [1]


def test_jigsaw_label_composes_formula():
    grid = GridConfig((0, 0, 0), (30, 30, 1), (1, 1, 1), max_points=2)
    vf = voxelize(Frame(np.array([[25.5, 13.5, 0.5, 0], [2.5, 2.5, 0.5, 0]])), grid)
    idx = int(np.flatnonzero((vf.coords == (25, 13, 0)).all(axis=1))[0])
    other = 1 - idx
    b = assemble_masked_batch(vf, plan([other], [idx], []), WindowConfig(12, 12, 1))
    assert list(b.jigsaw_labels) == [13]


def test_no_leakage():
    a = voxelize(small_frame(0.0), GRID)
    c = voxelize(small_frame(0.05), GRID)
    assert np.array_equal(a.coords, c.coords)
    w = WindowConfig(2, 2, 1)
    jig = assemble_masked_batch(a, plan([0, 2], [1], []), w), assemble_masked_batch(c, plan([0, 2], [1], []), w)
    assert jig[0].features[1, :, :3].tobytes() == jig[1].features[1, :, :3].tobytes()
    shp = assemble_masked_batch(a, plan([0, 2], [], [1]), w), assemble_masked_batch(c, plan([0, 2], [], [1]), w)
    assert shp[0].features[1, 1:].tobytes() == shp[1].features[1, 1:].tobytes()


def test_plan_mismatch():
    vf = voxelize(small_frame(), GRID)
    with pytest.raises(ValueError):
        assemble_masked_batch(vf, plan([0, 1], [], []), WindowConfig(2, 2, 1))


def test_real_plan_consistency():
    rng = np.random.default_rng(5)
    xyz = rng.uniform(0, 4, (300, 3)) * np.array([1, 1, 0.25])
    vf = voxelize(Frame(np.hstack([xyz, np.zeros((300, 1))])), GRID)
    p = build_mask_plan(vf, "rfvs", 0.25, 0.25, seed=1)
    b = assemble_masked_batch(vf, p, WindowConfig(2, 2, 1))
    assert len(b.jigsaw_labels) == len(p.jigsaw_masked)
    assert b.shape_targets.shape[0] == len(p.shape_masked)
    assert np.all(b.shape_targets >= -1) and np.all(b.shape_targets <= 1)
    kept = b.features[p.kept][..., :3][b.point_mask[p.kept]]
    assert np.all((kept >= 0) & (kept <= 1))
