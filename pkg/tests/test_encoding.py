import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from splitgs.encoding import (
    EncodingConfig,
    encode_input,
    encode_input_vjp,
    encode_scalar,
    encode_scalar_derivative,
)
from splitgs.errors import InvalidParameterError


def test_scalar_examples():
    assert np.allclose(encode_scalar(0.0, 2), [0, 1, 0, 1])
    assert np.allclose(encode_scalar(0.5, 1), [1, 0], atol=1e-15)
    p = 0.37
    expected = []
    for k in range(6):
        expected += [np.sin(2**k * np.pi * p), np.cos(2**k * np.pi * p)]
    assert np.allclose(encode_scalar(p, 6), expected, atol=1e-15)


@pytest.mark.parametrize("bands,length", [((10, 6), 72), ((10, 10), 80)])
def test_input_length(bands, length):
    cfg = EncodingConfig(*bands)
    assert cfg.dim == length
    assert encode_input([0.1, 0.2, 0.3], 0.5, cfg).shape == (length,)


def test_zero_phase_pattern():
    out = encode_input(np.zeros(3), 0.0, EncodingConfig())
    assert np.array_equal(out, np.tile([0.0, 1.0], 36))


def test_band_counts_validated():
    with pytest.raises(InvalidParameterError):
        EncodingConfig(0, 6)


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.floats(0, 1))
def test_compositional_and_bounded(mu, t):
    cfg = EncodingConfig(4, 3)
    out = encode_input(mu, t, cfg)
    parts = [encode_scalar(m, 4) for m in mu] + [encode_scalar(t, 3)]
    assert np.array_equal(out, np.concatenate(parts))
    assert np.all(np.abs(out) <= 1)


def test_batch_matches_single():
    cfg = EncodingConfig(3, 2)
    mu = np.random.default_rng(0).normal(size=(5, 3))
    batch = encode_input(mu, 0.3, cfg)
    for i in range(5):
        assert np.array_equal(batch[i], encode_input(mu[i], 0.3, cfg))


def test_derivative_matches_finite_difference():
    h = 1e-6
    for p in np.linspace(-1, 1, 11):
        fd = (encode_scalar(p + h, 10) - encode_scalar(p - h, 10)) / (2 * h)
        d = encode_scalar_derivative(p, 10)
        assert np.allclose(d, fd, rtol=1e-6, atol=1e-6 * np.abs(d).max())


def test_input_vjp_matches_finite_difference():
    rng = np.random.default_rng(1)
    cfg = EncodingConfig(3, 2)
    mu = rng.normal(size=(2, 3))
    g = rng.normal(size=(2, cfg.dim))
    an = encode_input_vjp(mu, cfg, g)
    h = 1e-6
    for i in range(2):
        for k in range(3):
            mp, mm = mu.copy(), mu.copy()
            mp[i, k] += h
            mm[i, k] -= h
            fd = (np.sum(g * encode_input(mp, 0.4, cfg)) - np.sum(g * encode_input(mm, 0.4, cfg))) / (2 * h)
            assert an[i, k] == pytest.approx(fd, rel=1e-6)
