import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from habitreach.arm import ExcitationProfile, simulate
from habitreach.errors import GridMismatchError
from habitreach.planner import (
    blend_excitations,
    compute_weights,
    estimate_position,
    plan,
)

from planner_props import random_instance, violations


def const(value, k=5, dt=0.001):
    return ExcitationProfile(dt, np.full((k, 6), value))


class TestWeights:
    def test_equidistant(self):
        w = compute_weights((0, 0), [(1, 0), (0, 1), (-1, 0), (0, -1)])
        np.testing.assert_allclose(w, 0.25, rtol=0, atol=1e-15)

    def test_two_distances(self):
        w = compute_weights((0, 0), [(1, 0), (0, 3)])
        np.testing.assert_allclose(w, [0.75, 0.25], rtol=0, atol=1e-15)

    def test_exact_hit(self):
        w = compute_weights((2, 2), [(0, 0), (2, 2), (1, 0), (3, 3)])
        np.testing.assert_array_equal(w, [0, 1, 0, 0])

    def test_exact_hit_tie_split(self):
        w = compute_weights((1, 1), [(1, 1), (0, 0), (1, 1)])
        np.testing.assert_array_equal(w, [0.5, 0, 0.5])

    def test_locality_along_ray(self):
        positions = np.array([(0.3, 0.8), (0.5, 0.9), (0.2, 1.0), (0.45, 0.7)])
        start = np.array([0.35, 0.85])
        prev = -1.0
        for s in np.linspace(0, 1, 200):
            w = compute_weights(start + s * (positions[1] - start), positions)
            assert w[1] >= prev
            prev = w[1]
        assert prev == 1.0


class TestBlend:
    def test_one_hot_copies(self, small_library):
        profs = [t.excitations for t in small_library.templates[:4]]
        out = blend_excitations([1, 0, 0, 0], profs)
        np.testing.assert_array_equal(out.samples, profs[0].samples)

    def test_constant_mix(self):
        out = blend_excitations([0.25, 0.75], [const(0.2), const(0.6)])
        np.testing.assert_allclose(out.samples, 0.5, rtol=0, atol=1e-15)

    def test_identical_profiles(self, small_library):
        p = small_library.templates[0].excitations
        out = blend_excitations([0.1, 0.2, 0.7], [p, p, p])
        np.testing.assert_allclose(out.samples, p.samples, rtol=0, atol=1e-15)

    def test_clamping_is_counted(self, caplog):
        with caplog.at_level(logging.WARNING):
            out = blend_excitations([1.5, 0.5], [const(0.8), const(0.4)])
        assert np.all(out.samples == 1.0)
        assert "clamped 30" in caplog.text

    def test_grid_mismatch(self):
        with pytest.raises(GridMismatchError):
            blend_excitations([0.5, 0.5], [const(0.1, k=5), const(0.1, k=6)])
        with pytest.raises(GridMismatchError):
            blend_excitations([0.5, 0.5], [const(0.1), const(0.1, dt=0.002)])


class TestEstimate:
    def test_midpoint(self):
        np.testing.assert_array_equal(estimate_position([0.5, 0.5], [(0, 0), (2, 2)]), [1, 1])

    def test_only_approximate(self):
        positions = np.array([(0, 0), (1, 0), (0, 1), (1, 1)])
        target = np.array([0.2, 0.3])
        est = estimate_position(compute_weights(target, positions), positions)
        gap = np.linalg.norm(est - target)
        assert np.isfinite(gap) and gap > 0


class TestPlan:
    def test_exact_template(self, small_library):
        t = small_library.templates[5]
        p = plan(t.final_position, small_library)
        assert p.template_ids[0] == t.id
        np.testing.assert_array_equal(p.blended_excitations.samples, t.excitations.samples)

    def test_deterministic(self, small_library):
        target = small_library.positions.mean(0)
        assert plan(target, small_library) == plan(target, small_library)

    def test_fields(self, small_library):
        target = small_library.positions.mean(0)
        p = plan(target, small_library, n=3)
        assert len(p.template_ids) == 3 and p.weights.shape == (3,)
        assert abs(p.weights.sum() - 1) <= 1e-12
        np.testing.assert_allclose(p.predicted_position, p.weights @ p.template_positions)

    def test_blended_movement_misses(self, arm, library):
        rng = np.random.default_rng(5)
        lo, hi = library.positions.min(0), library.positions.max(0)
        errs = []
        for target in rng.uniform(lo, hi, (5, 2)):
            p = plan(target, library)
            errs.append(np.linalg.norm(simulate(p.blended_excitations, arm).final_position - target))
        assert 0 < np.mean(errs) < 0.5


@settings(max_examples=300, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_planner_invariants(seed):
    rng = np.random.default_rng(seed)
    target, positions, samples = random_instance(rng)
    assert violations(target, positions, samples, rng) == []


@settings(max_examples=100, deadline=None)
@given(w=st.lists(st.floats(-2, 2), min_size=3, max_size=3),
       v=st.lists(st.floats(-2, 2), min_size=3, max_size=3),
       c=st.floats(-3, 3))
def test_estimate_is_linear(w, v, c):
    positions = np.array([(0.1, 0.2), (0.7, -0.3), (-0.4, 0.9)])
    w, v = np.array(w), np.array(v)
    lhs = estimate_position(w + c * v, positions)
    rhs = estimate_position(w, positions) + c * estimate_position(v, positions)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)
