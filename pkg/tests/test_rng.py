import numpy as np
from scipy import stats

from exitlab.rng import Stream, seed_key, uniforms


def test_stream_is_reproducible():
    a = Stream(7, slot=3, level=1).normals(1000)
    b = Stream(7, slot=3, level=1).normals(1000)
    np.testing.assert_array_equal(a, b)


def test_offset_reads_match_full_stream():
    s = Stream(11, slot=5)
    full = s.normals(20)
    np.testing.assert_array_equal(s.normals(7, start=3), full[3:10])
    np.testing.assert_array_equal(s.normals(4, start=8), full[8:12])


def test_keys_separate_slots_levels_and_seeds():
    base = Stream(1).normals(64)
    for other in (Stream(1, slot=1), Stream(1, level=1), Stream(2)):
        assert not np.array_equal(base, other.normals(64))
    assert seed_key(1) != seed_key(2)


def test_normals_are_standard():
    z = Stream(3).normals(200_000)
    assert stats.kstest(z, "norm").pvalue > 0.01
    assert abs(z.mean()) < 4 / np.sqrt(z.size)
    assert abs(z.var() - 1) < 0.02
    # pairs from one block are uncorrelated
    assert abs(np.corrcoef(z[0::2], z[1::2])[0, 1]) < 0.01


def test_uniforms_in_open_interval():
    u = uniforms(9, 2, np.arange(100_000))
    assert u.min() > 0 and u.max() < 1
    assert stats.kstest(u, "uniform").pvalue > 0.01
    np.testing.assert_array_equal(u[:10], uniforms(9, 2, np.arange(10)))
