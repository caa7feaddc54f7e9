import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from petreg.preprocess import SigmoidParams, auto_sigmoid_params, harmonize_slices, sigmoid_transform, slab_average_z
from petreg.volume import Volume


def test_sigmoid_at_beta_is_half():
    v = Volume(np.full((2, 2, 2), 3.7))
    out = sigmoid_transform(v, SigmoidParams(alpha=0.4, beta=3.7))
    np.testing.assert_allclose(out.data, 0.5, rtol=0, atol=1e-15)


def test_sigmoid_limits():
    v = Volume(np.array([-1e6, 1e6]).reshape(1, 1, 2))
    out = sigmoid_transform(v, SigmoidParams(alpha=1.0, beta=0.0, out_min=2.0, out_max=5.0))
    np.testing.assert_allclose(out.data.ravel(), [2.0, 5.0])


def test_sigmoid_matches_scalar_oracle(rng):
    v = Volume(rng.normal(3.0, 2.0, size=(8, 8, 8)), (0.5, 0.5, 2.0), (1, 2, 3))
    p = SigmoidParams(alpha=0.7, beta=2.5, out_min=-1.0, out_max=4.0)
    out = sigmoid_transform(v, p)
    oracle = np.array([(p.out_max - p.out_min) / (1.0 + math.exp(-(x - p.beta) / p.alpha)) + p.out_min
                       for x in v.data.ravel()])
    np.testing.assert_allclose(out.data.ravel(), oracle, rtol=1e-12)
    assert out.same_geometry(v)


def test_sigmoid_negative_alpha_inverts():
    v = Volume(np.array([0.0, 1.0, 2.0]).reshape(1, 1, 3))
    out = sigmoid_transform(v, SigmoidParams(alpha=-0.5, beta=1.0)).data.ravel()
    assert out[0] > out[1] > out[2]


def test_sigmoid_params_validation():
    with pytest.raises(ValueError):
        SigmoidParams(alpha=0.0, beta=1.0)
    with pytest.raises(ValueError):
        SigmoidParams(alpha=1.0, beta=1.0, out_min=1.0, out_max=1.0)


def test_auto_params_uniform_ramp():
    vals = np.linspace(0.0, 100.0, 100001)
    v = Volume(vals.reshape(1, 1, -1))
    p = auto_sigmoid_params(v, low_pct=0.0, high_pct=0.5)
    # percentile oracle on the explicit ramp: beta at the 25th, alpha = (50 - 0) / 6
    assert p.beta == pytest.approx(25.0, abs=1e-3)
    assert p.alpha == pytest.approx(100.0 / 12.0, abs=1e-3)
    assert p.out_min == 0.0 and p.out_max == 100.0


def test_auto_params_constant_volume():
    v = Volume(np.full((3, 3, 3), 7.5))
    p = auto_sigmoid_params(v)
    assert p.beta == 7.5
    assert 0 < p.alpha <= 1e-9 * 7.5 * 1.0001


def test_auto_params_ignores_zero_background(rng):
    body = rng.uniform(1.0, 2.0, size=1000)
    data = np.concatenate([np.zeros(5000), body]).reshape(6, 10, 100)
    p = auto_sigmoid_params(Volume(data), 0.02, 0.5)
    assert p.beta == pytest.approx(np.quantile(body, 0.26))


def test_auto_params_rejects_bad_band():
    v = Volume(np.ones((2, 2, 2)))
    with pytest.raises(ValueError):
        auto_sigmoid_params(v, 0.6, 0.5)


@given(st.floats(0.0, 0.4), st.floats(0.45, 0.7), st.floats(0.01, 0.29))
def test_auto_alpha_monotone_in_high_pct(low, high, bump):
    vals = np.random.default_rng(7).gamma(2.0, 1.0, size=2000) + 0.01
    v = Volume(vals.reshape(2, 10, 100))
    a1 = auto_sigmoid_params(v, low, high).alpha
    a2 = auto_sigmoid_params(v, low, min(high + bump, 1.0)).alpha
    assert a2 >= a1


def test_harmonize_equal_spacing_untouched():
    a = Volume(np.zeros((3, 4, 4)), (1, 1, 2))
    b = Volume(np.ones((5, 4, 4)), (1, 1, 2))
    a2, b2 = harmonize_slices(a, b)
    assert a2 is a and b2 is b


def test_harmonize_pet_to_mri_slices():
    mri = Volume(np.zeros((7, 4, 4)), (0.27, 0.27, 3.0))
    pet = Volume(np.ones((48, 4, 4)), (0.39, 0.39, 0.3875))
    m2, p2 = harmonize_slices(mri, pet)
    assert m2 is mri
    assert p2.spacing == (0.39, 0.39, 3.0)
    np.testing.assert_allclose(p2.data, 1.0)  # slab mean of constant slices
    # order of arguments does not matter
    p3, m3 = harmonize_slices(pet, mri)
    assert m3 is mri and p3.spacing[2] == 3.0


def test_slab_average_overlap_weights():
    data = np.array([1.0, 2.0, 4.0, 8.0]).reshape(4, 1, 1)
    out = slab_average_z(Volume(data, (1, 1, 1)), 2.0)
    # output slab [-1, 1] overlaps slices 0 (1.0) and 1 (0.5); slab [1, 3] overlaps 1 (0.5), 2 (1), 3 (0.5)
    np.testing.assert_allclose(out.data.ravel(), [(1 * 1 + 2 * 0.5) / 1.5, (2 * 0.5 + 4 + 8 * 0.5) / 2.0])
    assert out.spacing[2] == 2.0 and out.origin == (0.0, 0.0, 0.0)


@given(st.floats(-5, 5), st.integers(2, 30), st.floats(1.5, 6.0))
def test_slab_average_preserves_constants(c, nz, factor):
    v = Volume(np.full((nz, 2, 2), c), (1, 1, 0.5))
    out = slab_average_z(v, 0.5 * factor)
    np.testing.assert_allclose(out.data, c, atol=1e-12)
