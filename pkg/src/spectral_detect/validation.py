"""Input validation shared by the estimators and the functional API."""

import numpy as np

__all__ = ["check_images", "check_image_shape", "check_labels", "readonly"]


def readonly(a):
    """Return ``a`` as a float64 array that cannot be written to."""
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


def check_image_shape(shape):
    shape = tuple(int(d) for d in shape)
    if len(shape) != 3 or min(shape) < 1:
        raise ValueError(f"image shape must be (M, N, K) with positive entries, got {shape}")
    return shape


def check_images(X, image_shape=None, *, check_range=True, allow_single=False):
    """Validate a batch of images and return it as ``(n, M, N, K)`` float64.

    Parameters
    ----------
    X : array-like
        ``(n, M, N, K)`` images, ``(n, M, N)`` single-channel images, or
        ``(n, M*N*K)`` flattened row-major channel-last pixels (requires
        ``image_shape``).
    image_shape : tuple of int, optional
        Expected ``(M, N, K)``. Mismatches raise ``ValueError``; images are
        never resized.
    check_range : bool
        Reject pixels outside ``[0, 1]``.
    allow_single : bool
        Accept a single ``(M, N, K)`` image and promote it to a batch of one.
    """
    X = np.asarray(X, dtype=np.float64)
    if image_shape is not None:
        image_shape = check_image_shape(image_shape)
    if X.ndim == 2:
        if image_shape is None:
            raise ValueError("flattened images need image_shape=(M, N, K)")
        if X.shape[1] != np.prod(image_shape):
            raise ValueError(
                f"expected {int(np.prod(image_shape))} pixels per image, got {X.shape[1]}"
            )
        X = X.reshape((X.shape[0],) + image_shape)
    elif X.ndim == 3:
        if allow_single and image_shape is not None and X.shape == image_shape:
            X = X[None]
        else:
            X = X[..., None]
    elif X.ndim != 4:
        raise ValueError(f"cannot interpret array of shape {X.shape} as images")
    if X.shape[0] == 0:
        raise ValueError("empty image batch")
    if image_shape is not None and X.shape[1:] != image_shape:
        raise ValueError(f"image dims {X.shape[1:]} do not match expected {image_shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain non-finite values")
    if check_range and (X.min() < 0.0 or X.max() > 1.0):
        raise ValueError("pixel values must lie in [0, 1]")
    return X


def check_labels(y, n, n_classes=None):
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integers")
    y = y.astype(np.int64)
    if y.min() < 0 or (n_classes is not None and y.max() >= n_classes):
        raise ValueError("label out of range")
    return y
