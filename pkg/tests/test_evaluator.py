import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from psnir.domain import SceneError
from psnir.evaluator import (EvalReport, colorize_error, error_map, evaluate, mean_angular_error,
                             summarize_benchmark)
from psnir.synth import sphere_normals

from oracles import angle_deg


def rotate(n, rot):
    return np.einsum("ij,jhw->ihw", rot.as_matrix(), n)


@pytest.fixture(scope="module")
def sphere():
    return sphere_normals(24, 0.9)


class TestMeanAngularError:
    def test_identical(self, sphere):
        n, m = sphere
        assert mean_angular_error(n, n, m) == 0.0

    def test_antipodal(self, sphere):
        n, m = sphere
        assert mean_angular_error(n, -n, m) == pytest.approx(180.0, abs=1e-6)

    @pytest.mark.parametrize("axis", [(0, 0, 1), (1, 0, 0), (1, 2, 3)])
    def test_ten_degree_rotation(self, axis):
        # every normal lies in the plane perpendicular to the axis, so each
        # one turns by exactly the rotation angle
        axis = np.asarray(axis, float) / np.linalg.norm(axis)
        u = np.cross(axis, [0.3, -0.5, 0.8])
        u /= np.linalg.norm(u)
        w = np.cross(axis, u)
        phi = np.random.default_rng(0).uniform(0, 2 * np.pi, (6, 7))
        n = np.cos(phi)[None] * u[:, None, None] + np.sin(phi)[None] * w[:, None, None]
        rot = Rotation.from_rotvec(np.radians(10.0) * axis)
        assert mean_angular_error(rotate(n, rot), n, np.ones((6, 7))) == pytest.approx(10.0, abs=1e-6)

    def test_uniform_tilt_map(self):
        z = np.zeros((3, 3, 4))
        z[2] = 1.0
        tilted = rotate(z, Rotation.from_rotvec([0.0, np.radians(5.0), 0.0]))
        emap = error_map(tilted, z, np.ones((3, 4)))
        np.testing.assert_allclose(emap, 5.0, atol=1e-6)

    def test_background_is_zero(self, sphere):
        n, m = sphere
        emap = error_map(-n, n, m)
        assert np.all(emap[~m] == 0.0)

    def test_clamps_rounding(self):
        n = np.zeros((3, 1, 1))
        n[2] = 1.0 + 1e-15
        assert mean_angular_error(n, n, np.ones((1, 1))) == 0.0

    def test_empty_mask(self, sphere):
        n, m = sphere
        with pytest.raises(SceneError):
            mean_angular_error(n, n, np.zeros_like(m))

    def test_shape_mismatch(self, sphere):
        n, m = sphere
        with pytest.raises(SceneError):
            mean_angular_error(n[:, 1:], n, m)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_map_consistent_with_scalar_oracle(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((3, 5, 6))
        b = rng.standard_normal((3, 5, 6))
        a /= np.linalg.norm(a, axis=0)
        b /= np.linalg.norm(b, axis=0)
        m = rng.random((5, 6)) < 0.6
        m[2, 3] = True
        emap = error_map(a, b, m)
        for i, j in np.argwhere(m):
            assert emap[i, j] == pytest.approx(angle_deg(a[:, i, j], b[:, i, j]), abs=1e-9)
        assert abs(emap[m].mean() - mean_angular_error(a, b, m)) <= 1e-9
        # symmetric and invariant to a shared rotation
        assert mean_angular_error(b, a, m) == pytest.approx(mean_angular_error(a, b, m), abs=1e-9)
        rot = Rotation.random(random_state=seed)
        assert mean_angular_error(rotate(a, rot), rotate(b, rot), m) == pytest.approx(
            mean_angular_error(a, b, m), abs=1e-6)


class TestReport:
    def test_fields_and_text(self, sphere):
        n, m = sphere
        tilted = rotate(n, Rotation.from_rotvec([0.0, 0.0, np.radians(3.0)]))
        rep = evaluate(tilted, n, m, method="ls")
        assert rep.mean == pytest.approx(mean_angular_error(tilted, n, m))
        assert rep.median <= rep.p90
        text = rep.to_text()
        assert text.startswith("mean_angular_error ")
        assert "method ls" in text

    def test_colorize(self):
        rgb = colorize_error(np.array([[0.0, 90.0]]))
        assert rgb.shape == (1, 2, 3)
        assert rgb[0, 0, 2] > rgb[0, 0, 0] and rgb[0, 1, 0] > rgb[0, 1, 2]


class TestSummary:
    def test_single_scene(self):
        _, _, avg = summarize_benchmark([("ball", 4.1)])
        assert avg == 4.1

    def test_average(self):
        rep = EvalReport(2.0, 2.0, 2.0, np.zeros((1, 1)))
        table, kv, avg = summarize_benchmark([("a", rep), ("b", 4.0)])
        assert avg == 3.0
        assert table.splitlines()[-1].split() == ["average", "3.00"]
        assert kv.splitlines() == ["a 2.0", "b 4.0", "average 3.0"]

    def test_empty(self):
        with pytest.raises(ValueError):
            summarize_benchmark([])
