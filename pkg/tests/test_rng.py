import numpy as np
from scipy import stats

from singdrift.rng import RNGStreamSpec, normals, normals_block, stream_keys


def test_same_address_same_value():
    k = stream_keys(42, np.arange(50))
    assert np.array_equal(normals_block(k, 3, 7, 2), normals_block(k, 3, 7, 2))
    assert np.array_equal(stream_keys(42, [7]), stream_keys(42, np.arange(10))[7:8])
    assert RNGStreamSpec(42, 7).key() == int(k[7])


def test_block_and_subset_invariance():
    k = stream_keys(1, np.arange(40))
    full = normals_block(k, 0, 30, 3)
    assert np.array_equal(normals_block(k[5:9], 11, 6, 3), full[11:17, 5:9])
    assert np.array_equal(normals(k[[2, 31]], 29, 3), full[29, [2, 31]])


def test_distinct_seeds_and_paths_differ():
    a = normals_block(stream_keys(1, np.arange(200)), 0, 500, 1)[..., 0]
    b = normals_block(stream_keys(2, np.arange(200)), 0, 500, 1)[..., 0]
    assert not np.any(a == b)
    c = np.corrcoef(a.T)
    off = c[~np.eye(200, dtype=bool)]
    assert np.max(np.abs(off)) < 0.25  # 500 samples: |r| ~ N(0, 0.045)
    assert abs(np.corrcoef(a.ravel(), b.ravel())[0, 1]) < 0.01


def test_distribution():
    z = normals_block(stream_keys(7, np.arange(2000)), 0, 500, 1).ravel()
    assert stats.kstest(z, "norm").pvalue > 1e-3
    assert abs(z.mean()) < 5 / np.sqrt(z.size)
    assert abs(z.var() - 1) < 5 * np.sqrt(2 / z.size)
    for c in (2.0, 3.0):
        p = 2 * stats.norm.sf(c)
        assert abs(np.mean(np.abs(z) > c) - p) < 5 * np.sqrt(p / z.size)
    lag = normals_block(stream_keys(9, [0]), 0, 200_000, 1).ravel()
    assert abs(np.corrcoef(lag[:-1], lag[1:])[0, 1]) < 0.01
