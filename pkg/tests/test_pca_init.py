import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from petreg.pca_init import background_floor, initial_affine, intensity_moments, principal_axes, volume_axes
from petreg.transform import euler_matrix
from petreg.volume import Volume


def _ellipsoid_volume(n, semi, rotation=np.eye(3), centre=(0, 0, 0), spacing=1.0):
    origin = -(n - 1) * spacing / 2
    v = Volume(np.zeros((n, n, n)), (spacing,) * 3, (origin,) * 3)
    p = (v.world_grid() - np.asarray(centre)) @ rotation  # body-frame coordinates
    inside = np.sum((p / np.asarray(semi)) ** 2, axis=1) <= 1.0
    return v.with_data(inside.reshape(n, n, n).astype(float))


def test_single_voxel():
    d = np.zeros((4, 5, 6))
    d[2, 3, 1] = 5.0
    v = Volume(d, (0.5, 1.0, 2.0), (1.0, 2.0, 3.0))
    c, cov = intensity_moments(v)
    np.testing.assert_allclose(c, v.index_to_world((1, 3, 2)))
    np.testing.assert_allclose(cov, 0.0, atol=1e-12)


def test_two_voxels_midpoint():
    d = np.zeros((3, 3, 3))
    d[0, 0, 0] = d[2, 1, 2] = 1.0
    v = Volume(d)
    c, _ = intensity_moments(v)
    np.testing.assert_allclose(c, [1.0, 0.5, 1.0])


def test_moments_match_double_loop_oracle(rng):
    v = Volume(rng.uniform(0, 1, size=(8, 8, 8)), (0.3, 0.5, 1.7), (-1.0, 4.0, 2.0))
    c, cov = intensity_moments(v)
    wsum = 0.0
    m1 = np.zeros(3)
    for k in range(8):
        for j in range(8):
            for i in range(8):
                w = v.data[k, j, i]
                wsum += w
                m1 += w * v.index_to_world((i, j, k))
    c_ref = m1 / wsum
    cov_ref = np.zeros((3, 3))
    for k in range(8):
        for j in range(8):
            for i in range(8):
                d = v.index_to_world((i, j, k)) - c_ref
                cov_ref += v.data[k, j, i] * np.outer(d, d)
    cov_ref /= wsum
    np.testing.assert_allclose(c, c_ref, rtol=1e-10)
    np.testing.assert_allclose(cov, cov_ref, rtol=1e-10)


def test_all_zero_volume_raises():
    with pytest.raises(ValueError):
        intensity_moments(Volume(np.zeros((2, 2, 2))))


def test_threshold_binarises():
    d = np.zeros((1, 1, 4))
    d[0, 0] = [0.0, 1.0, 10.0, 0.2]
    c, _ = intensity_moments(Volume(d), threshold=0.5)
    assert c[0] == pytest.approx(1.5)


def test_floor_subtracts_background():
    d = np.full((1, 1, 5), 0.1)
    d[0, 0, 4] = 1.1
    c, _ = intensity_moments(Volume(d), floor=0.1)
    assert c[0] == pytest.approx(4.0)


def test_background_floor_reads_border():
    d = np.full((3, 20, 20), 0.05)
    d[:, 5:15, 5:15] = 3.0
    assert background_floor(Volume(d)) == pytest.approx(0.05)


@given(st.floats(0.01, 1000.0))
def test_moments_scale_invariant(scale):
    d = np.random.default_rng(3).uniform(0, 1, size=(5, 6, 7))
    c1, cov1 = intensity_moments(Volume(d, (0.4, 0.6, 2.0)))
    c2, cov2 = intensity_moments(Volume(d * scale, (0.4, 0.6, 2.0)))
    np.testing.assert_allclose(c1, c2, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(cov1, cov2, rtol=1e-10, atol=1e-12)


def test_axis_aligned_ellipsoid_gives_identity():
    v = _ellipsoid_volume(33, (12.0, 8.0, 5.0))
    ax = volume_axes(v)
    np.testing.assert_allclose(ax.axes, np.eye(3), atol=1e-10)
    assert ax.eigenvalues[0] > ax.eigenvalues[1] > ax.eigenvalues[2]


def test_sphere_is_isotropic_frame():
    v = _ellipsoid_volume(25, (9.0, 9.0, 9.0))
    ax = volume_axes(v)
    np.testing.assert_allclose(ax.eigenvalues, ax.eigenvalues[0], rtol=1e-10)
    np.testing.assert_allclose(ax.axes.T @ ax.axes, np.eye(3), atol=1e-10)
    assert np.linalg.det(ax.axes) == pytest.approx(1.0)


@st.composite
def spd(draw):
    m = np.array(draw(st.lists(st.floats(-3, 3), min_size=9, max_size=9))).reshape(3, 3)
    return m @ m.T + 1e-3 * np.eye(3)


@given(spd())
def test_principal_axes_invariants(cov):
    ax = principal_axes(np.zeros(3), cov)
    np.testing.assert_allclose(ax.axes.T @ ax.axes, np.eye(3), atol=1e-10)
    assert np.linalg.det(ax.axes) == pytest.approx(1.0, abs=1e-10)
    assert np.all(np.diff(ax.eigenvalues) <= 1e-12) and np.all(ax.eigenvalues >= 0)
    # reconstruction holds on the first two axes in every case
    for i in range(2):
        np.testing.assert_allclose(cov @ ax.axes[:, i], ax.eigenvalues[i] * ax.axes[:, i],
                                   atol=1e-8 * max(1.0, ax.eigenvalues[0]))
    np.testing.assert_allclose(sorted(np.linalg.eigvalsh(cov)), sorted(ax.eigenvalues), atol=1e-8)


@given(spd(), st.lists(st.floats(-20, 20), min_size=3, max_size=3))
def test_initial_affine_of_equal_frames_is_identity(cov, c):
    p = principal_axes(np.asarray(c), cov)
    t = initial_affine(p, p)
    np.testing.assert_allclose(t.matrix, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(t.apply(np.array([[1.0, 2.0, 3.0]])), [[1.0, 2.0, 3.0]], atol=1e-12)


def test_initial_affine_shift():
    v = _ellipsoid_volume(31, (10.0, 6.0, 4.0))
    w = _ellipsoid_volume(31, (10.0, 6.0, 4.0), centre=(2.0, -3.0, 1.0))
    t = initial_affine(volume_axes(v), volume_axes(w))
    np.testing.assert_allclose(t.matrix, np.eye(3), atol=1e-10)
    np.testing.assert_allclose(t.apply(volume_axes(v).centroid[None])[0], [2.0, -3.0, 1.0], atol=1e-10)


def test_initial_affine_rotated_pair_maps_body_points():
    R = euler_matrix(np.deg2rad([5.0, -4.0, 25.0]))
    semi = (14.0, 8.0, 4.0)
    fixed = _ellipsoid_volume(48, semi, spacing=0.75)
    moving = _ellipsoid_volume(48, semi, rotation=R, spacing=0.75)
    t = initial_affine(volume_axes(fixed), volume_axes(moving))
    pts = np.random.default_rng(0).uniform(-1, 1, size=(200, 3)) * np.asarray(semi) * 0.6
    np.testing.assert_allclose(t.apply(pts), pts @ R.T, atol=0.1)
