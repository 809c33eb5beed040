import numpy as np
import pytest

from oracles import REF_DISTANCES, ref_ssm
from ssmprune.errors import ConfigError, ShapeError
from ssmprune.similarity import Metric, build_ssm, distance, normalize_for_kl
from ssmprune.tensor_core import FilterSet, Matrix


def make_fs(rows):
    return FilterSet(Matrix(np.asarray(rows, dtype=np.float32)))


def random_fs(rng, n=8, dim=27):
    return make_fs(rng.normal(size=(n, dim)))


# ---------------------------------------------------------------------------
# Metric parsing


@pytest.mark.parametrize(
    "name,expected",
    [("l2", Metric.L2), ("COSINE", Metric.COSINE), (" CityBlock ", Metric.CITYBLOCK), ("kl", Metric.KL)],
)
def test_metric_parse(name, expected):
    assert Metric.parse(name) is expected


def test_metric_parse_unknown():
    with pytest.raises(ConfigError):
        Metric.parse("manhattan")


# ---------------------------------------------------------------------------
# distance


def test_l2_triangle():
    assert distance(Metric.L2, [0, 0], [3, 4]) == pytest.approx(5.0)


def test_cityblock_simple():
    assert distance(Metric.CITYBLOCK, [1, 2], [4, 6]) == pytest.approx(7.0)


def test_cosine_orthogonal():
    assert distance(Metric.COSINE, [1, 0], [0, 1]) == pytest.approx(1.0)


def test_cosine_zero_vector_rules():
    assert distance(Metric.COSINE, [0, 0], [0, 0]) == 0.0
    assert distance(Metric.COSINE, [0, 0], [1, 2]) == 1.0
    assert distance(Metric.COSINE, [1, 2], [0, 0]) == 1.0


def test_kl_identical_distributions():
    assert distance(Metric.KL, [0.25, 0.75], [0.25, 0.75]) == 0.0


def test_distance_errors():
    with pytest.raises(ShapeError):
        distance(Metric.L2, [1, 2], [1, 2, 3])
    with pytest.raises(ShapeError):
        distance(Metric.L2, [], [])


@pytest.mark.parametrize("metric", list(Metric))
def test_distance_matches_independent_reference(metric):
    rng = np.random.default_rng(11)
    ref = REF_DISTANCES[metric.value]
    for _ in range(20):
        x = rng.normal(size=27)
        y = rng.normal(size=27)
        got = distance(metric, x, y)
        want = ref(list(x), list(y))
        assert got == pytest.approx(want, rel=1e-6, abs=1e-12)


# ---------------------------------------------------------------------------
# normalize_for_kl


def test_softmax_symmetry():
    p = normalize_for_kl([0.0, 0.0])
    assert p.tolist() == [0.5, 0.5]


def test_softmax_max_subtraction_no_overflow():
    p = normalize_for_kl([1000.0, 0.0])
    assert np.isfinite(p).all()
    assert p[0] == pytest.approx(1.0, abs=1e-6)
    assert (p > 0).all()


def test_softmax_sums_to_one():
    rng = np.random.default_rng(3)
    for _ in range(20):
        p = normalize_for_kl(rng.normal(size=10) * rng.uniform(0.1, 50))
        assert abs(p.sum() - 1.0) <= 1e-6
        assert (p > 0).all()


# ---------------------------------------------------------------------------
# build_ssm


def test_ssm_two_filters_l2():
    ssm = build_ssm(make_fs([[0, 0], [3, 4]]), Metric.L2)
    assert ssm.as_array().tolist() == [[0, 5], [5, 0]]


@pytest.mark.parametrize("metric", [Metric.L2, Metric.COSINE, Metric.CITYBLOCK])
def test_ssm_identical_rows_all_zero(metric):
    ssm = build_ssm(make_fs([[1, 2, 3], [1, 2, 3]]), metric)
    assert np.all(ssm.as_array() == 0.0)


def test_ssm_requires_two_filters():
    with pytest.raises(ShapeError):
        build_ssm(make_fs([[1, 2, 3]]), Metric.L2)


@pytest.mark.parametrize("metric", list(Metric))
def test_ssm_matches_bruteforce(metric):
    rng = np.random.default_rng(17)
    fs = random_fs(rng)
    got = build_ssm(fs, metric).as_array()
    want = ref_ssm(fs.vectors.data.tolist(), metric.value)
    np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-7)


@pytest.mark.parametrize("metric", [Metric.L2, Metric.COSINE, Metric.CITYBLOCK])
def test_ssm_symmetry_and_zero_diagonal(metric):
    rng = np.random.default_rng(23)
    for _ in range(10):
        s = build_ssm(random_fs(rng, n=10), metric).as_array()
        assert np.array_equal(s, s.T)
        assert np.all(np.diag(s) == 0.0)
        assert s.min() >= -1e-9


def test_kl_self_distance_zero():
    rng = np.random.default_rng(29)
    fs = random_fs(rng, n=6)
    s = build_ssm(fs, Metric.KL).as_array()
    assert np.all(np.abs(np.diag(s)) <= 1e-9)


@pytest.mark.parametrize("metric", list(Metric))
def test_ssm_permutation_equivariance_exact(metric):
    rng = np.random.default_rng(31)
    fs = random_fs(rng, n=12)
    s = build_ssm(fs, metric).as_array()
    perm = rng.permutation(12)
    fs_p = make_fs(fs.vectors.data[perm])
    s_p = build_ssm(fs_p, metric).as_array()
    assert np.array_equal(s_p, s[np.ix_(perm, perm)])


def test_scaling_property():
    rng = np.random.default_rng(37)
    fs = random_fs(rng, n=6)
    c = 3.7
    fs_scaled = make_fs(fs.vectors.data * c)
    for metric in (Metric.L2, Metric.CITYBLOCK):
        s = build_ssm(fs, metric).as_array().astype(np.float64)
        s2 = build_ssm(fs_scaled, metric).as_array().astype(np.float64)
        np.testing.assert_allclose(s2, c * s, rtol=1e-6)
    # cosine is invariant under per-filter positive rescaling
    scales = rng.uniform(0.5, 4.0, size=(6, 1)).astype(np.float32)
    s = build_ssm(fs, Metric.COSINE).as_array()
    s2 = build_ssm(make_fs(fs.vectors.data * scales), Metric.COSINE).as_array()
    np.testing.assert_allclose(s2, s, atol=1e-6)
