import numpy as np
import pytest
from hypothesis import given, strategies as st

from rlhf_gensim.errors import ConfigError
from rlhf_gensim.profile import LatencyProfile


def test_analytic_matches_formula_on_grid():
    p = LatencyProfile.analytic()
    for b in (1, 64, 512):
        for c in (0, 1024, 4096):
            assert p.tpot(b, c) == pytest.approx(0.015 + 2e-5 * b + 2e-8 * b * c)


def test_constant_profile():
    p = LatencyProfile.constant(0.1)
    assert p.tpot(1, 0) == p.tpot(999, 9999) == 0.1


@given(st.integers(1, 1500), st.integers(1, 1500), st.integers(0, 5000), st.integers(0, 5000))
def test_monotone(b1, b2, c1, c2):
    p = LatencyProfile.analytic()
    if b1 <= b2 and c1 <= c2:
        assert p.tpot(b1, c1) <= p.tpot(b2, c2) + 1e-15


@given(st.integers(1, 1100), st.integers(0, 4200), st.integers(0, 300))
def test_decode_sum_matches_loop(b, c0, k):
    p = LatencyProfile.analytic()
    loop = sum(p.tpot(b, c) for c in range(c0, c0 + k))
    assert float(p.decode_sum(b, c0, c0 + k)) == pytest.approx(loop, rel=1e-9, abs=1e-12)


def test_prefill_interpolates_and_extrapolates():
    p = LatencyProfile.analytic()
    assert p.prefill_time(0) == 0.0
    assert p.prefill_time(2048) == pytest.approx(0.02 + 5e-5 * 2048)
    assert p.prefill_time(10**6) == pytest.approx(0.02 + 5e-5 * 10**6)


def test_round_trip(tmp_path):
    p = LatencyProfile.analytic(rho=0.3, gpus_per_actor=4)
    p.save(tmp_path / "p.json")
    q = LatencyProfile.load(tmp_path / "p.json")
    assert q.to_dict() == p.to_dict()


@pytest.mark.parametrize("table", [[[0.0, 1.0]], [[2.0, 1.0]]])
def test_rejects_bad_tables(table):
    with pytest.raises(ConfigError):
        LatencyProfile(np.array([1.0]), np.array([0.0, 10.0]), np.array(table), np.array([1.0]), np.array([0.0]))


def test_rejects_bad_rho_and_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        LatencyProfile.constant(0.1, rho=0)
    with pytest.raises(ConfigError, match="nope.json"):
        LatencyProfile.load(tmp_path / "nope.json")
