import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pcv.errors import DimensionError, DomainError, NumericError
from pcv.perturbation import PerturbationSpec, hybrid_p, noise_stream, sign


def test_sign_examples():
    assert sign([-2.5, 0.0, 3.0]).tolist() == [-1, 0, 1]
    assert sign([-0.0]).tolist() == [0]
    assert sign([1e-30]).tolist() == [1]


def test_sign_is_idempotent():
    g = np.random.default_rng(0).standard_normal(50)
    assert np.array_equal(sign(sign(g)), sign(g))


def test_sign_rejects_non_finite():
    with pytest.raises(NumericError):
        sign([1.0, np.nan])
    with pytest.raises(NumericError):
        sign([np.inf])


def test_spec_validation():
    with pytest.raises(DomainError):
        PerturbationSpec(-0.1)
    with pytest.raises(DomainError):
        PerturbationSpec(0.1, clip_lo=1.0, clip_hi=0.0)


def test_noise_free_examples():
    x = np.array([[0.5, 0.5, 0.5]], dtype=np.float32)
    g = np.array([[1.0, -1.0, 0.0]], dtype=np.float32)
    out = hybrid_p(x, PerturbationSpec(0.1, noise=False), g)
    assert np.allclose(out, [[0.6, 0.4, 0.5]])
    # clipping at both ends
    edge = np.array([[0.95, 0.02, 1.0]], dtype=np.float32)
    out = hybrid_p(edge, PerturbationSpec(0.1, noise=False), np.array([[1, -1, 1]], np.float32))
    assert out.tolist() == [[1.0, 0.0, 1.0]]


def test_matches_step_by_step_oracle():
    rng = np.random.default_rng(7)
    x = rng.random((6, 3)).astype(np.float32)
    g = rng.standard_normal((6, 3)).astype(np.float32)
    eps = 0.05
    out = hybrid_p(x, PerturbationSpec(eps, noise_seed=123), g, rng=noise_stream(123, 4))
    draws = noise_stream(123, 4).standard_normal((6, 3)).astype(np.float32)
    e = np.float32(eps)
    expected = np.clip(x + e * np.sign(g) + e * draws, 0, 1)
    assert out.tobytes() == expected.astype(np.float32).tobytes()
    # and the first coordinate once more, by hand
    v = float(x[0, 0]) + eps * np.sign(g[0, 0]) + eps * float(draws[0, 0])
    assert out[0, 0] == pytest.approx(min(1.0, max(0.0, v)), abs=1e-6)


def test_noise_is_reproducible_per_sample():
    x = np.full((4, 3), 0.5, np.float32)
    g = np.ones((4, 3), np.float32)
    spec = PerturbationSpec(0.1, noise_seed=3)
    a = hybrid_p(x, spec, g, rng=noise_stream(3, 0))
    b = hybrid_p(x, spec, g, rng=noise_stream(3, 0))
    c = hybrid_p(x, spec, g, rng=noise_stream(3, 1))
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != c.tobytes()


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        hybrid_p(np.zeros((4, 3)), PerturbationSpec(0.1), np.zeros((3, 3)))


unit = arrays(np.float32, (8, 3), elements=st.floats(0, 1, width=32))
grads = arrays(np.float32, (8, 3), elements=st.floats(-10, 10, width=32))


@settings(max_examples=200, deadline=None)
@given(unit, grads, st.floats(0, 0.5), st.booleans(), st.integers(0, 2**31))
def test_output_stays_in_clip_range(x, g, eps, noise, seed):
    out = hybrid_p(x, PerturbationSpec(eps, noise_seed=seed, noise=noise), g)
    assert out.dtype == np.float32
    assert np.all((out >= 0) & (out <= 1))


@settings(max_examples=100, deadline=None)
@given(unit, grads, st.booleans())
def test_zero_epsilon_is_identity(x, g, noise):
    assert hybrid_p(x, PerturbationSpec(0.0, noise=noise), g).tobytes() == x.tobytes()


@settings(max_examples=200, deadline=None)
@given(unit, grads, st.floats(1e-4, 0.5))
def test_noise_free_displacement_bounded_by_epsilon(x, g, eps):
    out = hybrid_p(x, PerturbationSpec(eps, noise=False), g)
    e = np.float32(eps)
    # float32 storage: the step is epsilon up to one rounding of the sum
    ulp = np.spacing(np.maximum(np.abs(x), np.abs(out)))
    step = np.abs(out.astype(np.float64) - x.astype(np.float64))
    assert np.all(step <= eps + ulp)
    raw = x + e * np.sign(g)
    free = (raw >= 0) & (raw <= 1) & (g != 0)
    assert np.array_equal(out[free], raw[free])
    assert np.all(np.abs(step[free] - eps) <= ulp[free])
