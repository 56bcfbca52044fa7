import numpy as np
import pytest

from pmchoice import (
    AngleRectangle,
    angles_to_unit,
    enclosing_rectangle,
    geodesic,
    unit_to_angles,
)


def random_angles(rng, n, k):
    theta = np.empty((n, k))
    theta[:, 0] = rng.uniform(-np.pi, np.pi, size=n)
    theta[:, 1:] = rng.uniform(-np.pi / 2, np.pi / 2, size=(n, k - 1))
    return theta


class TestAnglesToUnit:
    def test_zero_angles_give_first_axis(self):
        assert np.allclose(angles_to_unit([0.0, 0.0]), [1.0, 0.0, 0.0], atol=1e-15)

    def test_quarter_turn_gives_second_axis(self):
        assert np.allclose(angles_to_unit([np.pi / 2, 0.0]), [0.0, 1.0, 0.0], atol=1e-15)

    def test_reference_direction_2_1_1(self):
        # Independent inverse: the angles of (2,1,1)/sqrt(6) via
        # two-argument arctangent and arcsine.
        target = np.array([2.0, 1.0, 1.0]) / np.sqrt(6.0)
        theta = np.array([np.arctan2(1.0, 2.0), np.arcsin(target[2])])
        assert np.allclose(theta, [0.4636, 0.4205], atol=5e-5)
        assert np.allclose(angles_to_unit(theta), target, atol=1e-12)

    @pytest.mark.parametrize("dim", [2, 3, 4, 6])
    def test_norm_one_everywhere(self, dim):
        rng = np.random.default_rng(7)
        theta = random_angles(rng, 500, dim - 1)
        beta = angles_to_unit(theta)
        assert beta.shape == (500, dim)
        assert np.max(np.abs(np.linalg.norm(beta, axis=1) - 1.0)) <= 1e-12


class TestUnitToAngles:
    def test_pole_convention(self):
        assert np.allclose(unit_to_angles([0.0, 0.0, 1.0]), [0.0, np.pi / 2], atol=1e-15)

    def test_first_axis(self):
        assert np.allclose(unit_to_angles([1.0, 0.0, 0.0]), [0.0, 0.0], atol=1e-15)

    def test_negative_first_axis_maps_to_minus_pi(self):
        theta = unit_to_angles([-1.0, 0.0, 0.0])
        assert np.allclose(theta, [-np.pi, 0.0], atol=1e-15)

    @pytest.mark.parametrize("dim", [2, 3, 4, 5])
    def test_round_trip_on_interior(self, dim):
        rng = np.random.default_rng(11)
        theta = random_angles(rng, 400, dim - 1)
        theta[:, 1:] *= 0.98  # stay off the poles
        back = unit_to_angles(angles_to_unit(theta))
        assert np.max(np.abs(back - theta)) <= 1e-10

    def test_round_trip_in_beta_space(self):
        rng = np.random.default_rng(13)
        beta = rng.standard_normal((300, 4))
        beta /= np.linalg.norm(beta, axis=1, keepdims=True)
        again = angles_to_unit(unit_to_angles(beta))
        assert np.max(np.abs(again - beta)) <= 1e-10


class TestGeodesic:
    def test_identity(self):
        assert geodesic([0.3, 0.1], [0.3, 0.1]) == 0.0

    def test_orthogonal(self):
        assert abs(geodesic([0.0, 0.0], [np.pi / 2, 0.0]) - np.pi / 2) <= 1e-12

    def test_seam_is_glued(self):
        eps = 1e-6
        assert geodesic([np.pi - eps, 0.0], [-np.pi, 0.0]) <= 2 * eps

    def test_metric_properties_sampled(self):
        rng = np.random.default_rng(3)
        a = random_angles(rng, 200, 2)
        b = random_angles(rng, 200, 2)
        c = random_angles(rng, 200, 2)
        dab = geodesic(a, b)
        dba = geodesic(b, a)
        dac = geodesic(a, c)
        dcb = geodesic(c, b)
        assert np.max(np.abs(dab - dba)) <= 1e-9
        assert np.all(dab >= 0.0)
        assert np.all(dab <= np.pi + 1e-12)
        assert np.all(dab <= dac + dcb + 1e-9)

    def test_chord_equivalence(self):
        rng = np.random.default_rng(5)
        a = random_angles(rng, 300, 3)
        b = random_angles(rng, 300, 3)
        rho = geodesic(a, b)
        chord = np.linalg.norm(angles_to_unit(a) - angles_to_unit(b), axis=1)
        assert np.max(np.abs(2.0 * np.sin(rho / 2.0) - chord)) <= 1e-9


class TestEnclosingRectangle:
    def test_plain_min_max(self):
        rect = enclosing_rectangle([[0.1, 0.2], [0.3, 0.1]])
        assert np.allclose(rect.lower, [0.1, 0.1])
        assert np.allclose(rect.upper, [0.3, 0.2])
        assert not rect.wrapped

    def test_single_point_degenerate(self):
        rect = enclosing_rectangle([[0.5, -0.2]])
        assert np.allclose(rect.lower, rect.upper)
        assert rect.geodesic_diameter() == 0.0

    def test_seam_cluster_wraps(self):
        pts = [[-np.pi + 0.01, 0.0], [np.pi - 0.01, 0.0]]
        rect = enclosing_rectangle(pts)
        assert rect.wrapped
        assert abs(rect.widths[0] - 0.02) <= 1e-12
        for p in pts:
            assert rect.contains(p)

    def test_wide_spread_does_not_wrap(self):
        rect = enclosing_rectangle([[-1.0, 0.0], [1.0, 0.0]])
        assert not rect.wrapped
        assert abs(rect.widths[0] - 2.0) <= 1e-12

    def test_wrap_only_when_strictly_narrower(self):
        # Two antipodal-in-angle points: both representations have
        # width pi, the unwrapped one must win the tie.
        rect = enclosing_rectangle([[-np.pi / 2, 0.0], [np.pi / 2, 0.0]])
        assert not rect.wrapped

    def test_contains_is_wrap_aware(self):
        rect = enclosing_rectangle([[-np.pi + 0.05, 0.0], [np.pi - 0.05, 0.1]])
        assert rect.contains([np.pi - 0.01, 0.05])
        assert rect.contains([-np.pi + 0.01, 0.05])
        assert not rect.contains([0.0, 0.05])

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError):
            enclosing_rectangle(np.empty((0, 2)))

    def test_bad_bounds_rejected(self):
        with pytest.raises(ValueError):
            AngleRectangle(np.array([0.5, 0.0]), np.array([0.2, 0.1]))
        with pytest.raises(ValueError):
            AngleRectangle(np.array([0.0, -3.0]), np.array([0.1, 3.0]))
