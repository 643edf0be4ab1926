import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import EX1_MODES, PUBLISHED_EX1_NUS, pair_mode
from ifpopt.gains import (
    GainError,
    GainProfile,
    GainSchedule,
    assign_subgraph_gains,
    check_admissible,
    check_positive,
    compile_expression,
    component_bounds,
    max_consensus,
    max_consensus_threshold,
    sigma_threshold_degree,
    sigma_threshold_eigen,
    threshold_report,
)
from ifpopt.graph import Digraph, SwitchingSchedule, complete, is_strongly_connected, ring

EX2_NUS = (-90.0, -340.0 / 9.0, -20.0, -12.0)


def random_strongly_connected(rng, n):
    """Random digraph containing a Hamiltonian cycle, so it is strongly connected."""
    a = (rng.random((n, n)) < 0.3).astype(float)
    perm = rng.permutation(n)
    for k in range(n):
        a[perm[k], perm[(k + 1) % n]] = 1.0
    np.fill_diagonal(a, 0.0)
    return Digraph(a)


def random_balanced(rng, n):
    """Sum of weighted directed cycles: always weight-balanced and strongly connected."""
    a = np.zeros((n, n))
    for _ in range(3):
        perm = rng.permutation(n)
        w = rng.uniform(0.5, 2.0)
        for k in range(n):
            a[perm[k], perm[(k + 1) % n]] += w
    return Digraph(a)


class TestEigenThreshold:
    def test_ring_unit(self):
        assert sigma_threshold_eigen(ring(4), -1.0) == pytest.approx(0.25)

    def test_ring_example2(self):
        assert sigma_threshold_eigen(ring(4), -90.0) == pytest.approx(0.25 / 90.0)
        assert sigma_threshold_eigen(ring(4), -90.0) == pytest.approx(0.00278, abs=1e-5)

    def test_scaling(self, rng):
        g = random_balanced(rng, 6)
        assert sigma_threshold_eigen(g, -2.0) == pytest.approx(sigma_threshold_eigen(g, -1.0) / 2)

    def test_permutation_invariance(self, rng):
        for _ in range(20):
            g = random_balanced(rng, 5)
            p = rng.permutation(5)
            gp = Digraph(g.adjacency[np.ix_(p, p)])
            assert sigma_threshold_eigen(gp, -0.7) == pytest.approx(sigma_threshold_eigen(g, -0.7), rel=1e-10)

    def test_errors(self):
        with pytest.raises(GainError):
            sigma_threshold_eigen(ring(4), 0.0)
        with pytest.raises(GainError):
            sigma_threshold_eigen(Digraph(np.zeros((3, 3))), -1.0)
        with pytest.raises(GainError):
            sigma_threshold_eigen(Digraph([[0, 1], [0, 0]]), -1.0)

    def test_positive_on_random_balanced(self, rng):
        for _ in range(50):
            g = random_balanced(rng, int(rng.integers(2, 8)))
            assert sigma_threshold_eigen(g, -rng.uniform(0.1, 10)) > 0


class TestDegreeThreshold:
    def test_example1_published_indices(self):
        assert sigma_threshold_degree([1, 1, 1, 1], PUBLISHED_EX1_NUS) == pytest.approx(0.50)

    def test_example2(self):
        assert abs(sigma_threshold_degree([1, 1, 1, 1], EX2_NUS) - 0.0056) <= 1e-4
        assert abs(sigma_threshold_degree([1, 1, 1, 1], (-89.96, -37.77, -20.0, -12.0)) - 0.0056) <= 1e-4

    def test_passive_limit(self):
        vals = [sigma_threshold_degree([1, 2], [-s, -s]) for s in (1.0, 1e-3, 1e-6)]
        assert vals[-1] > 1e5 and vals == sorted(vals)

    def test_errors(self):
        with pytest.raises(GainError):
            sigma_threshold_degree([1, 1], [0.0, 0.0])
        with pytest.raises(GainError):
            sigma_threshold_degree([1, 1], [-1.0, 0.5])
        with pytest.raises(GainError):
            sigma_threshold_degree([1, 1, 1], [-1.0, -1.0])


class TestMaxConsensus:
    def test_ring(self):
        d0 = [89.96, 37.77, 20.0, 12.0]
        d = max_consensus(ring(4), d0, 4)
        np.testing.assert_array_equal(d, [89.96] * 4)
        np.testing.assert_allclose(max_consensus_threshold(ring(4), d0), 1 / (2 * 89.96))

    def test_ring_needs_several_rounds(self):
        d = max_consensus(ring(4), [89.96, 37.77, 20.0, 12.0], 1)
        # agent i hears agent i+1 only, so after one round agent 4 holds the old max of itself and agent 1
        np.testing.assert_array_equal(d, [89.96, 37.77, 20.0, 89.96])

    def test_single_node(self):
        np.testing.assert_array_equal(max_consensus(Digraph([[0.0]]), [3.0], 1), [3.0])

    def test_disjoint_components_keep_their_own_max(self):
        d = max_consensus(pair_mode(EX1_MODES[0]), [1.0, 4.0, 2.0, 3.0], 4)
        np.testing.assert_array_equal(d, [4.0, 4.0, 3.0, 3.0])

    def test_zero_values_give_infinite_threshold(self):
        assert np.all(np.isinf(max_consensus_threshold(ring(3), [0.0, 0.0, 0.0])))

    def test_max_iters_too_small(self):
        with pytest.raises(GainError):
            max_consensus_threshold(ring(4), [1, 2, 3, 4], max_iters=2)

    def test_random_strongly_connected_graphs(self, rng):
        for _ in range(100):
            n = int(rng.integers(1, 9))
            g = random_strongly_connected(rng, n) if n > 1 else Digraph([[0.0]])
            assert n == 1 or is_strongly_connected(g)
            vals = rng.uniform(0, 100, n)
            np.testing.assert_array_equal(max_consensus(g, vals, n), np.full(n, vals.max()))


class TestProfiles:
    def test_constant_and_sinusoid(self):
        c = GainProfile.const(0.2)
        assert c.is_constant and c(5.0) == 0.2
        s = GainProfile.sinusoid(0.35, 0.1, phase=math.pi / 2)
        assert not s.is_constant
        assert s(0.0) == pytest.approx(0.45)
        np.testing.assert_allclose(s(np.array([0.0, math.pi])), [0.45, 0.25])

    def test_expression(self):
        e = GainProfile.expression("0.35 + 0.1*cos(t)")
        assert e(0.0) == pytest.approx(0.45)
        np.testing.assert_allclose(e(np.linspace(0, 6, 7)), 0.35 + 0.1 * np.cos(np.linspace(0, 6, 7)))
        assert GainProfile.expression("0.2")(np.zeros(3)).shape == (3,)

    @pytest.mark.parametrize("bad", ["__import__('os')", "t.real", "open('x')", "x + 1", "'a'", "lambda: 1", "t[0]"])
    def test_expression_rejects_unsafe(self, bad):
        with pytest.raises(GainError):
            compile_expression(bad)

    def test_expression_syntax_error(self):
        with pytest.raises(GainError):
            compile_expression("1 +")


class TestSubgraphGains:
    def test_mode1_profiles_accepted(self):
        s = SwitchingSchedule.constant(pair_mode(EX1_MODES[0]))
        profiles = [GainProfile.expression("0.3 + 0.1*sin(t)"), GainProfile.expression("0.35 + 0.1*cos(t)")]
        gs = assign_subgraph_gains(s, PUBLISHED_EX1_NUS, profiles, 20.0, anchors=[0])
        assert gs.profile_indices(0) == (0, 0, 1, 1)
        v = gs.evaluate(1.0, 0)
        assert v[0] == v[1] and v[2] == v[3]

    def test_components_share_profiles_under_switching(self):
        modes = [pair_mode(p) for p in EX1_MODES]
        s, _ = SwitchingSchedule.random(modes, 0.1, 10.0, seed=1)
        profiles = [GainProfile.sinusoid(0.3, 0.1), GainProfile.sinusoid(0.35, 0.1, phase=math.pi / 2)]
        gs = assign_subgraph_gains(s, PUBLISHED_EX1_NUS, profiles, 10.0, anchors=[1])
        # profile 0 always drives the pair holding agent 2
        assert [gs.profile_indices(k) for k in range(3)] == [(0, 0, 1, 1), (1, 0, 0, 1), (1, 0, 1, 0)]
        assert check_admissible(s, gs, PUBLISHED_EX1_NUS, 10.0) == []

    def test_violating_profile_rejected(self):
        s = SwitchingSchedule.constant(pair_mode(EX1_MODES[0]))
        profiles = [GainProfile.expression("0.3 + sin(t)"), GainProfile.expression("0.35 + cos(t)")]
        with pytest.raises(GainError, match="gain"):
            assign_subgraph_gains(s, PUBLISHED_EX1_NUS, profiles, 10.0)

    def test_constant_above_threshold_rejected(self):
        s = SwitchingSchedule.constant(ring(4))
        msgs = check_admissible(s, GainSchedule.shared(GainProfile.const(0.6), 4), PUBLISHED_EX1_NUS, 10.0)
        assert msgs and "degree-based gain bound violated" in msgs[0]
        assert check_admissible(s, GainSchedule.shared(GainProfile.const(0.49), 4), PUBLISHED_EX1_NUS, 10.0) == []

    def test_single_component_gets_one_profile(self):
        s = SwitchingSchedule.constant(complete(4))
        gs = assign_subgraph_gains(s, PUBLISHED_EX1_NUS, [GainProfile.const(0.1), GainProfile.const(0.2)], 5.0)
        assert len(set(gs.profile_indices(0))) == 1

    def test_mixed_profiles_in_one_component_flagged(self):
        s = SwitchingSchedule.constant(ring(4))
        gs = GainSchedule("per_subgraph", (GainProfile.const(0.1), GainProfile.const(0.2)), 4, {0: (0, 0, 1, 1)})
        assert any("different gain profiles" in m for m in check_admissible(s, gs, PUBLISHED_EX1_NUS, 1.0))

    def test_time_varying_violation_detected_by_sampling(self):
        s = SwitchingSchedule.constant(ring(4))
        gs = GainSchedule.shared(GainProfile.expression("0.4 + 0.2*sin(t - 3)"), 4)
        assert check_admissible(s, gs, PUBLISHED_EX1_NUS, 1.0) == []  # below 0.4 on [0, 1]
        assert check_admissible(s, gs, PUBLISHED_EX1_NUS, 6.0) != []  # reaches 0.6 near t = 4.57

    def test_nonpositive_gain(self):
        s = SwitchingSchedule.constant(ring(4))
        gs = GainSchedule.shared(GainProfile.expression("sin(t)"), 4)
        assert check_positive(s, gs, 6.0) != []
        assert check_positive(s, GainSchedule.shared(GainProfile.const(5.0), 4), 6.0) == []

    def test_component_bounds(self):
        b = component_bounds(pair_mode(EX1_MODES[0]), np.array(PUBLISHED_EX1_NUS))
        assert b[0] == ([0, 1], pytest.approx(1 / (2 * 0.49)))
        assert b[1] == ([2, 3], pytest.approx(0.5))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 7), st.integers(0, 10_000))
    def test_small_enough_gain_always_admissible(self, n, seed):
        rng = np.random.default_rng(seed)
        g = random_balanced(rng, n)
        nus = -rng.uniform(0.01, 50.0, n)
        sigma = 0.99 * sigma_threshold_degree(g.in_degrees(), nus)
        s = SwitchingSchedule.constant(g)
        assert check_admissible(s, GainSchedule.shared(GainProfile.const(sigma), n), nus, 1.0) == []


class TestReport:
    def test_example2_ring(self):
        r = threshold_report(SwitchingSchedule.constant(ring(4)), EX2_NUS)
        assert r.sigma_deg == pytest.approx(1 / 180)
        assert r.sigma_eig == pytest.approx(0.25 / 90)
        assert r.per_graph[0]["balanced"] and r.per_graph[0]["sccs"] == [[0, 1, 2, 3]]
        assert set(r.to_dict()) == {"sigma_eig", "sigma_deg", "per_graph"}

    def test_switching_takes_minimum(self):
        s = SwitchingSchedule.cyclic([pair_mode(p) for p in EX1_MODES], 0.1)
        r = threshold_report(s, PUBLISHED_EX1_NUS)
        assert len(r.per_graph) == 3
        assert r.sigma_deg == pytest.approx(0.5)
