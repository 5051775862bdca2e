import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from delaybelief.delay import DelaySpec
from delaybelief.theory import (
    BoundReport, BoundViolation, LipschitzSystem, comparison_verdict, empirical_lipschitz,
    geometric_bound, linear_system, preset_system, rollout_error_experiment, stochastic_bound,
    w1_empirical, write_bound_csv,
)


def test_geometric_bound_examples():
    assert geometric_bound(0.5, 0.1, 3) == pytest.approx(0.1 * (1 + 0.5 + 0.25), abs=1e-15)
    assert geometric_bound(1.0, 0.3, 7) == pytest.approx(7 * 0.3, rel=1e-15)
    for L in (0.0, 0.3, 1.0, 2.5):
        assert geometric_bound(L, 0.2, 1) == 0.2
    with pytest.raises(ValueError):
        geometric_bound(-1, 0.1, 2)
    with pytest.raises(ValueError):
        geometric_bound(0.5, 0.1, 0)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 3), st.floats(0, 1), st.integers(1, 40), st.floats(0, 0.5))
def test_geometric_bound_monotone(L, eps, d, bump):
    g = geometric_bound(L, eps, d)
    assert geometric_bound(L + bump, eps, d) >= g
    assert geometric_bound(L, eps + bump, d) >= g
    assert geometric_bound(L, eps, d + 1) >= g


def test_geometric_bound_matches_closed_form_away_from_one():
    for L in (0.5, 0.9, 1.2):
        for d in range(1, 30):
            assert geometric_bound(L, 0.01, d) == pytest.approx(0.01 * (1 - L ** d) / (1 - L),
                                                                rel=1e-12)


def test_stochastic_bound_cases():
    assert stochastic_bound(0.7, 0.1, {5: 1.0}) == geometric_bound(0.7, 0.1, 5)
    assert stochastic_bound(0.7, 0.1, DelaySpec("constant", 6)) == geometric_bound(0.7, 0.1, 6)
    assert stochastic_bound(0.0, 0.05, [0.5, 0.5]) == pytest.approx(0.05, abs=1e-15)
    with pytest.raises(ValueError):
        stochastic_bound(0.5, 0.1, [0.5, 0.4])


def test_stochastic_bound_monte_carlo():
    rng = np.random.default_rng(0)
    table = np.array([geometric_bound(0.9, 0.05, d) for d in range(1, 9)])
    draws = table[rng.integers(0, 8, size=1_000_000)]
    se = draws.std(ddof=1) / np.sqrt(draws.size)
    assert abs(stochastic_bound(0.9, 0.05, DelaySpec("uniform", 8)) - draws.mean()) <= 3 * se


def _power_iteration(A, iters=500):
    v = np.ones(A.shape[1])
    for _ in range(iters):
        v = A.T @ (A @ v)
        v /= np.linalg.norm(v)
    return np.linalg.norm(A @ v)


def test_empirical_lipschitz_linear_and_trivial():
    A = np.array([[0.9, 0.3], [-0.2, 0.7]])
    est = empirical_lipschitz(linear_system(A), 10_000, seed=0)
    op = _power_iteration(A)
    assert est <= op + 1e-12 and est >= 0.99 * op
    ident = LipschitzSystem(lambda x, a: x, lambda x, a: x, 1.0, 0.0, 3)
    assert empirical_lipschitz(ident, 50, seed=1) == pytest.approx(1.0, abs=1e-15)
    half = LipschitzSystem(lambda x, a: 0.5 * x, lambda x, a: 0.5 * x, 0.5, 0.0, 1)
    assert empirical_lipschitz(half, 50, seed=2) == pytest.approx(0.5, abs=1e-15)


def test_w1_examples():
    p = np.array([0.3, -1.0, 2.0])
    assert w1_empirical(p, p) == 0.0
    assert w1_empirical(p, p + 0.75) == pytest.approx(0.75, abs=1e-15)
    assert w1_empirical([0, 1], [0, 3]) == 1.0
    with pytest.raises(ValueError):
        w1_empirical([], [1.0])


def test_w1_unequal_sizes_matches_scipy():
    rng = np.random.default_rng(3)
    for _ in range(50):
        p, q = rng.normal(size=rng.integers(1, 30)), rng.normal(1, 2, size=rng.integers(1, 30))
        assert w1_empirical(p, q) == pytest.approx(stats.wasserstein_distance(p, q), abs=1e-12)


def test_w1_metric_properties():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        a, b, c = (rng.normal(rng.normal(), 1, size=rng.integers(1, 12)) for _ in range(3))
        assert w1_empirical(a, b) == w1_empirical(b, a)
        assert w1_empirical(a, c) <= w1_empirical(a, b) + w1_empirical(b, c) + 1e-12


def test_expansive_preset_is_tight():
    rep = rollout_error_experiment(preset_system("expansive"), range(1, 21), n_rollouts=16)
    for r in rep.rows:
        exact = 0.01 * (1.2 ** r.delta - 1) / 0.2
        assert abs(r.measured_recursive - exact) <= 1e-9
        assert abs(r.geometric_bound - exact) <= 1e-9
    errs = [r.measured_recursive for r in rep.rows]
    assert np.all(np.diff(errs) > 0)


def test_contraction_preset_plateaus():
    rep = rollout_error_experiment(preset_system("contraction"), range(1, 129), n_rollouts=8)
    # the float iteration's fixed point sits one ulp above 0.02
    assert all(r.measured_recursive <= 0.02 * (1 + 1e-12) for r in rep.rows)
    assert rep.ok


def test_exact_model_has_zero_error():
    rep = rollout_error_experiment(preset_system("exact"), [1, 5, 10])
    assert all(r.measured_recursive == 0.0 for r in rep.rows)


def test_linear_system_never_violates_bound():
    rng = np.random.default_rng(5)
    for trial in range(20):
        A = rng.normal(size=(3, 3)) * 0.4
        B = rng.normal(size=(3, 1))
        bias = rng.normal(size=3) * 0.01
        rep = rollout_error_experiment(linear_system(A, B, bias), [1, 2, 4, 8, 16], seed=trial)
        assert rep.ok


def test_fault_injection_raises():
    with pytest.raises(BoundViolation):
        rollout_error_experiment(preset_system("expansive"), [5], bound_scale=0.5)
    rep = rollout_error_experiment(preset_system("expansive"), [5], bound_scale=0.5,
                                   strict=False)
    assert not rep.ok


def test_stochastic_system_rejected():
    sys_ = preset_system("contraction")
    sys_.deterministic = False
    with pytest.raises(ValueError):
        rollout_error_experiment(sys_, [1])


def test_comparison_verdict_and_csv(tmp_path):
    s = preset_system("contraction")
    bound = geometric_bound(0.5, 0.01, 4)
    rec = rollout_error_experiment(s, [4])
    with pytest.raises(ValueError):
        comparison_verdict(rec)
    direct = rollout_error_experiment(s, [4], "direct_proxy", direct_curves={4: [0.0, 0.0]})
    merged = rec.merge(direct)
    assert comparison_verdict(merged) == [(True, bound)]
    direct = rollout_error_experiment(s, [4], "direct_proxy", direct_curves={4: [bound, 0.001]})
    assert comparison_verdict(direct) == [(True, 0.0)]
    write_bound_csv(tmp_path / "b.csv", merged)
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == "delta,L_P,eps_P,measured_recursive,geometric_bound,eps_direct,verdict,margin"
    assert lines[1].split(",")[6] == "true"
    with pytest.raises(ValueError):
        rollout_error_experiment(s, [4], "direct_proxy")
    assert isinstance(BoundReport().ok, bool)
