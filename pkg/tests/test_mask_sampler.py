import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvjar import kernels
from mvjar.mask_sampler import (
    MaskPlan,
    SamplingStrategy,
    build_mask_plan,
    epoch_seed,
    furthest_voxel_sampling,
    mask_counts,
)
from tests.oracles import fps_oracle


def random_layout(rng, n, dims=(20, 20, 3)):
    cells = rng.choice(int(np.prod(dims)), size=n, replace=False)
    i = cells % dims[0]
    j = (cells // dims[0]) % dims[1]
    k = cells // (dims[0] * dims[1])
    return np.stack([i, j, k], axis=1)


def test_fps_collinear_tie_breaks_low():
    coords = np.array([(x, 0, 0) for x in range(10)])
    assert list(furthest_voxel_sampling(coords, 3)) == [0, 9, 4]


def test_fps_start_is_lexicographic_min_kji():
    coords = np.array([(5, 0, 1), (3, 2, 0), (1, 2, 0), (9, 9, 0)])
    assert list(furthest_voxel_sampling(coords, 1)) == [2]


def test_fps_k_equals_n_is_permutation():
    rng = np.random.default_rng(1)
    coords = random_layout(rng, 30)
    assert sorted(furthest_voxel_sampling(coords, 30)) == list(range(30))


@pytest.mark.parametrize("k", [0, 11])
def test_fps_k_out_of_range(k):
    with pytest.raises(ValueError):
        furthest_voxel_sampling(np.zeros((10, 3)) + np.arange(10)[:, None], k)


def test_fps_matches_oracle():
    rng = np.random.default_rng(7)
    for _ in range(40):
        n = int(rng.integers(1, 40))
        coords = random_layout(rng, n)
        k = int(rng.integers(1, n + 1))
        assert list(furthest_voxel_sampling(coords, k)) == fps_oracle(coords, k)


def test_backends_agree():
    from mvjar import _kernels_py

    rng = np.random.default_rng(3)
    for _ in range(20):
        coords = random_layout(rng, 50).astype(np.float64)
        a = kernels.furthest_sampling(coords, 25, 0)
        b = _kernels_py.furthest_sampling(coords, 25, 0)
        np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("n, rp, rs, expected", [
    (10, 0.1, 0.05, (8, 1, 1)),
    (100, 0.1, 0.05, (85, 10, 5)),
    (7, 0.0, 0.0, (7, 0, 0)),
    (1, 0.1, 0.05, (0, 1, 0)),
])
def test_mask_counts(n, rp, rs, expected):
    assert mask_counts(n, rp, rs) == expected


def test_mask_counts_rejects_ratio_sum_one():
    with pytest.raises(ValueError):
        mask_counts(10, 0.5, 0.5)


def test_rfvs_example_n10():
    rng = np.random.default_rng(0)
    plan = build_mask_plan(random_layout(rng, 10), "rfvs", 0.1, 0.05, seed=0)
    assert len(plan.kept) == 8 and len(plan.masked) == 2


def test_zero_ratios_keep_everything():
    coords = random_layout(np.random.default_rng(0), 12)
    plan = build_mask_plan(coords, "fvs", 0.0, 0.0, seed=5)
    assert list(plan.kept) == list(range(12))
    assert len(plan.jigsaw_masked) == 0 and len(plan.shape_masked) == 0


def _mean_min_dist(coords, idx):
    pts = coords[idx].astype(float)
    d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    return d.min(axis=1).mean()


def test_fvs_masked_more_spread_than_rfvs_masked():
    coords = random_layout(np.random.default_rng(42), 100)
    r = build_mask_plan(coords, "rfvs", 0.1, 0.05, seed=1)
    f = build_mask_plan(coords, "fvs", 0.1, 0.05, seed=1)
    assert set(r.masked) != set(f.masked)
    assert _mean_min_dist(coords, f.masked) > _mean_min_dist(coords, r.masked)


def test_rfvs_kept_set_is_fps_prefix():
    coords = random_layout(np.random.default_rng(9), 60)
    plan = build_mask_plan(coords, "rfvs", 0.2, 0.1, seed=3)
    assert set(plan.kept) == set(fps_oracle(coords, len(plan.kept)))


def test_deterministic_and_seed_sensitive():
    coords = random_layout(np.random.default_rng(0), 80)
    a = build_mask_plan(coords, "random", 0.2, 0.2, seed=11)
    assert a == build_mask_plan(coords, "random", 0.2, 0.2, seed=11)
    assert a != build_mask_plan(coords, "random", 0.2, 0.2, seed=12)


def test_plan_text_round_trip():
    coords = random_layout(np.random.default_rng(0), 40)
    plan = build_mask_plan(coords, "rfvs", 0.1, 0.05, seed=2)
    assert MaskPlan.loads(plan.dumps()) == plan


def test_strategy_parse():
    assert SamplingStrategy.parse("R-FVS") is SamplingStrategy.RFVS
    with pytest.raises(ValueError, match="unknown sampling strategy"):
        SamplingStrategy.parse("grid")


def test_empty_input_rejected():
    with pytest.raises(ValueError):
        build_mask_plan(np.zeros((0, 3)), "rfvs")


@settings(max_examples=60, deadline=None)
@given(
    n=st.integers(1, 120),
    rp=st.sampled_from([0.0, 0.05, 0.1, 0.2, 0.3]),
    rs=st.sampled_from([0.0, 0.05, 0.1, 0.25]),
    strategy=st.sampled_from(["rfvs", "fvs", "random"]),
    seed=st.integers(0, 2**32 - 1),
)
def test_partition_property(n, rp, rs, strategy, seed):
    coords = random_layout(np.random.default_rng(seed), n)
    plan = build_mask_plan(coords, strategy, rp, rs, seed)
    allidx = np.concatenate([plan.kept, plan.jigsaw_masked, plan.shape_masked])
    assert sorted(allidx.tolist()) == list(range(n))
    assert (len(plan.kept), len(plan.jigsaw_masked), len(plan.shape_masked)) == mask_counts(n, rp, rs)


def test_epoch_seed_distinct():
    seeds = {epoch_seed(0, e, f) for e in range(5) for f in range(5)}
    assert len(seeds) == 25
    assert epoch_seed(1, 2, 3) == epoch_seed(1, 2, 3)
