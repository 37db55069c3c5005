import numpy as np
import pytest
from sklearn.base import clone

from spectral_detect.compression import LowRankCompressor, truncate_images
from spectral_detect.image import ImageMatrix
from spectral_detect.svd import compute_svd, energy_fraction, truncate


def test_matches_per_image_truncate(rng):
    X = rng.uniform(size=(4, 6, 5, 3))
    out, r = truncate_images(X, 7)
    for i in range(4):
        svd = compute_svd(ImageMatrix(np.moveaxis(X[i], -1, 0)))
        np.testing.assert_allclose(np.moveaxis(out[i], -1, 0), truncate(svd, 7).blocks, atol=1e-13)
        assert r[i] == pytest.approx(energy_fraction(svd, 7))


def test_full_rank_is_identity(rng):
    X = rng.uniform(size=(3, 5, 5, 1))
    out, r = truncate_images(X, 5)
    np.testing.assert_allclose(out, X, atol=1e-12)
    np.testing.assert_allclose(r, 1.0)


def test_transformer(rng):
    X = rng.uniform(size=(5, 4, 4, 2))
    c = LowRankCompressor(k=3, clip=True).fit(X)
    out = c.transform(X)
    assert out.shape == X.shape and out.min() >= 0 and out.max() <= 1
    assert np.all((0 < c.energy_fraction_) & (c.energy_fraction_ <= 1))
    assert clone(c).get_params() == c.get_params()


def test_k_range(rng):
    X = rng.uniform(size=(2, 3, 3, 1))
    with pytest.raises(ValueError):
        LowRankCompressor(k=4).fit(X)
    with pytest.raises(ValueError):
        truncate_images(X, -1)
