from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import brute_force_w2

from slowfast.errors import InputError
from slowfast.measure import (
    ParticleCloud,
    second_moment,
    w2_assignment,
    w2_distance,
    w2_is_exact,
    w2_sliced,
    w2_sorted_1d,
)

def test_w2_examples():
    assert w2_distance(ParticleCloud.dirac([0.0]), ParticleCloud.dirac([3.0])) == 3.0
    c = ParticleCloud([0.0, 1.0])
    assert w2_distance(c, ParticleCloud([0.0, 1.0])) == 0.0
    # frozen from brute_force_w2 over both pairings
    assert w2_distance(ParticleCloud([0.0, 2.0]), ParticleCloud([1.0, 3.0])) == pytest.approx(1.0, abs=1e-15)
    assert brute_force_w2(np.array([[0.0], [2.0]]), np.array([[1.0], [3.0]])) == 1.0


def test_second_moment_examples():
    assert second_moment(ParticleCloud.dirac([0.0])) == 0.0
    assert second_moment(ParticleCloud.dirac([3.0, 4.0])) == 25.0
    assert second_moment(ParticleCloud([-1.0, 1.0])) == 1.0


def test_cloud_validation_and_errors():
    with pytest.raises(InputError):
        ParticleCloud(np.zeros((0, 2)))
    with pytest.raises(InputError):
        w2_distance(ParticleCloud(np.zeros((3, 1))), ParticleCloud(np.zeros((3, 2))))
    with pytest.raises(InputError):
        w2_distance(ParticleCloud(np.zeros((3, 1))), ParticleCloud(np.zeros((4, 1))))


def test_w2_matches_brute_force_on_200_instances():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        k = int(rng.integers(1, 9))
        dim = int(rng.integers(1, 4))
        a, b = rng.normal(size=(k, dim)), rng.normal(size=(k, dim))
        ref = brute_force_w2(a, b)
        assert w2_assignment(a, b) == pytest.approx(ref, abs=1e-9)
        assert w2_distance(ParticleCloud(a), ParticleCloud(b)) == pytest.approx(ref, abs=1e-9)
        if dim == 1:
            assert w2_sorted_1d(a[:, 0], b[:, 0]) == pytest.approx(ref, abs=1e-9)


def test_sorted_equals_assignment_up_to_64():
    rng = np.random.default_rng(8)
    for k in (1, 2, 5, 17, 33, 64):
        a, b = rng.normal(size=(k, 1)), rng.exponential(size=(k, 1))
        assert w2_sorted_1d(a[:, 0], b[:, 0]) == pytest.approx(w2_assignment(a, b), abs=1e-9)


def test_triangle_inequality_and_translation():
    rng = np.random.default_rng(9)
    for _ in range(100):
        k, dim = int(rng.integers(1, 17)), int(rng.integers(1, 4))
        a, b, c = (ParticleCloud(rng.normal(scale=2, size=(k, dim))) for _ in range(3))
        assert w2_distance(a, c) <= w2_distance(a, b) + w2_distance(b, c) + 1e-9
        v = rng.normal(size=dim)
        assert w2_distance(a.shifted(v), b.shifted(v)) == pytest.approx(w2_distance(a, b), abs=1e-10)


def test_coupling_bound():
    rng = np.random.default_rng(10)
    for _ in range(100):
        k, dim = int(rng.integers(1, 30)), int(rng.integers(1, 4))
        xi = rng.normal(size=(k, dim))
        zeta = xi + rng.normal(scale=0.5, size=(k, dim))
        w = w2_distance(ParticleCloud(xi), ParticleCloud(zeta))
        assert w ** 2 <= np.mean(np.sum((xi - zeta) ** 2, axis=1)) + 1e-9


def test_large_clouds_use_sliced_path():
    rng = np.random.default_rng(1)
    a = ParticleCloud(rng.normal(size=(300, 2)))
    assert not w2_is_exact(a, a)
    shift = np.array([1.0, -2.0])
    # a pure translation: sliced estimate is sqrt(n * mean_dir <u,v>^2) ~ |v|
    est = w2_distance(a, a.shifted(shift))
    assert est == pytest.approx(np.linalg.norm(shift), rel=0.2)
    assert w2_sliced(a.points, a.points) == 0.0


def test_csv_round_trip(tmp_path):
    c = ParticleCloud(np.random.default_rng(0).normal(size=(7, 3)))
    c.to_csv(tmp_path / "cloud.csv")
    back = ParticleCloud.from_csv(tmp_path / "cloud.csv")
    np.testing.assert_array_equal(back.points, c.points)


def test_digest_is_permutation_invariant():
    pts = np.random.default_rng(4).normal(size=(20, 2))
    assert ParticleCloud(pts).digest() == ParticleCloud(pts[::-1]).digest()


@settings(max_examples=50, deadline=None)
@given(arrays(float, (6, 1), elements=st.floats(-1e3, 1e3)),
       arrays(float, (6, 1), elements=st.floats(-1e3, 1e3)))
def test_w2_symmetric_and_zero_on_permutations(a, b):
    ca, cb = ParticleCloud(a), ParticleCloud(b)
    assert w2_distance(ca, cb) == pytest.approx(w2_distance(cb, ca), abs=1e-9)
    assert w2_distance(ca, ParticleCloud(a[::-1])) == 0.0
    assert w2_distance(ca, cb) >= 0.0
