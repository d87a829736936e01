import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modeconnect.connect_ot import (
    compose_swaps,
    ot_connect,
    permutation_to_swaps,
    solve_assignment,
    swap_leg,
    swap_legs,
)
from modeconnect.ndmath import make_rng
from modeconnect.netcore import forward, from_particles, to_particles
from tests.test_netcore import random_full


def brute_force(cost):
    n = cost.shape[0]
    return min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))


def cycle_count(pi):
    seen, cycles = set(), 0
    for i in range(len(pi)):
        if i not in seen:
            cycles += 1
            while i not in seen:
                seen.add(i)
                i = pi[i]
    return cycles


class TestAssignment:
    def test_anti_diagonal_prefers_identity(self):
        m = solve_assignment(np.array([[0.0, 1.0], [1.0, 0.0]]))
        np.testing.assert_array_equal(m.pi, [0, 1])
        assert m.cost == 0.0

    @pytest.mark.parametrize("n", range(1, 9))
    def test_matches_brute_force(self, n):
        cost = make_rng(n).uniform(0, 10, (n, n))
        m = solve_assignment(cost)
        assert m.cost == pytest.approx(brute_force(cost), abs=1e-12)
        assert sorted(m.pi) == list(range(n))

    def test_infinite_entries_force_the_choice(self):
        cost = np.ones((3, 3))
        cost[0] = np.inf
        cost[0, 2] = 5.0
        m = solve_assignment(cost)
        assert m.pi[0] == 2
        assert m.cost == 7.0

    def test_non_square(self):
        with pytest.raises(ValueError):
            solve_assignment(np.zeros((2, 3)))

    def test_nan(self):
        with pytest.raises(ValueError):
            solve_assignment(np.array([[np.nan]]))

    def test_json(self):
        m = solve_assignment(np.array([[1.0, 0.0], [0.0, 1.0]]))
        assert json.loads(m.to_json()) == {"pi": [1, 0], "cost": 0.0}


class TestSwaps:
    def test_identity_needs_none(self):
        assert len(permutation_to_swaps(np.arange(6))) == 0

    def test_random_permutations(self):
        rng = make_rng(0)
        for _ in range(100):
            pi = rng.permutation(32)
            schedule = permutation_to_swaps(pi)
            np.testing.assert_array_equal(compose_swaps(32, schedule), pi)
            assert len(schedule) == 32 - cycle_count(pi)

    @settings(max_examples=50, deadline=None)
    @given(st.permutations(list(range(9))))
    def test_swaps_sort_the_arrangement(self, pi):
        arr = np.array(pi)
        for i, j in permutation_to_swaps(pi):
            arr[[i, j]] = arr[[j, i]]
        np.testing.assert_array_equal(arr, np.arange(9))

    def test_not_a_permutation(self):
        with pytest.raises(ValueError):
            permutation_to_swaps([0, 0, 2])


class TestSwapLeg:
    def setup_method(self):
        self.w = random_full((4, 6, 3), 1)
        self.x = make_rng(2).standard_normal((4, 30))

    def test_same_index_is_constant(self):
        leg = swap_leg(self.w, 1, 2, 2)
        assert leg.at(0.5).equals(self.w)
        assert leg.end.equals(self.w)

    def test_midpoint_averages_the_pair(self):
        p = to_particles(self.w, 1)
        mid = to_particles(swap_leg(self.w, 1, 1, 4).at(0.5), 1)
        np.testing.assert_allclose(mid[1], 0.5 * (p[1] + p[4]), atol=1e-15)
        np.testing.assert_allclose(mid[4], 0.5 * (p[1] + p[4]), atol=1e-15)
        np.testing.assert_array_equal(np.delete(mid, [1, 4], axis=0), np.delete(p, [1, 4], axis=0))

    def test_end_is_function_preserving(self):
        leg = swap_leg(self.w, 1, 0, 5)
        out = forward(self.w.spec, leg.end, self.x)
        assert np.abs(out - forward(self.w.spec, self.w, self.x)).max() < 1e-9

    def test_logits_match_forward(self):
        legs = swap_legs(self.w, 1, permutation_to_swaps([2, 0, 1, 4, 3, 5]))
        ts = [0.0, 0.3, 1.0]
        for leg in legs:
            fast = leg.logits(self.w.spec, self.x, ts, {})
            for t, got in zip(ts, fast):
                np.testing.assert_allclose(got, forward(self.w.spec, leg.at(t), self.x), atol=1e-12)

    def test_index_out_of_range(self):
        with pytest.raises(IndexError):
            swap_leg(self.w, 1, 0, 6)


class TestOtConnect:
    def test_permuted_copy_costs_nothing(self):
        a = random_full((5, 10, 3), 3)
        pi = make_rng(4).permutation(10)
        b = from_particles(to_particles(a, 1)[pi], a, 1)
        path = ot_connect(a, b)
        assert path.info["matching"].cost == pytest.approx(0.0, abs=1e-20)
        assert path.legs[0].end.equals(a)

    def test_end_point_exact(self):
        a, b = random_full((5, 10, 3), 5), random_full((5, 10, 3), 6)
        path = ot_connect(a, b)
        assert path.legs[-1].at(1.0).equals(b)
        assert path.method == "ot"

    def test_linear_stage_lands_on_b_particles(self):
        a, b = random_full((5, 10, 3), 5), random_full((5, 10, 3), 6)
        mid = to_particles(ot_connect(a, b).legs[0].end, 1)
        pb = to_particles(b, 1)
        assert sorted(map(tuple, mid)) == sorted(map(tuple, pb))

    def test_completed_swaps_preserve_outputs(self):
        a, b = random_full((5, 12, 3), 7), random_full((5, 12, 3), 8)
        x = make_rng(9).standard_normal((5, 40))
        path = ot_connect(a, b)
        target = forward(b.spec, b, x)
        for leg in path.legs[1:]:
            assert np.abs(forward(b.spec, leg.start, x) - target).max() < 1e-9
        assert len(path.legs) - 1 == len(permutation_to_swaps(path.info["matching"].pi))

    def test_already_aligned_is_single_leg(self):
        a = random_full((3, 4, 2), 0)
        b = random_full((3, 4, 2), 0)
        assert len(ot_connect(a, b).legs) == 1
