"""Savitzky-Golay smoothing with polynomial-fit edges."""
import numpy as np


def savgol_coeffs(window, order, pos=None):
    """Weights that evaluate the local least-squares polynomial at ``pos``.

    ``pos`` is the sample index inside the window (default: the centre).
    Applying the weights to ``window`` consecutive samples returns the
    fitted value at that sample.
    """
    if window % 2 != 1 or window <= order:
        raise ValueError("window must be odd and larger than the polynomial order")
    half = window // 2
    pos = half if pos is None else pos
    t = np.arange(window, dtype=float) - half
    vander = t[:, None] ** np.arange(order + 1)[None, :]
    # row of the hat matrix: polynomial basis at pos times pseudo-inverse
    basis = (pos - half) ** np.arange(order + 1, dtype=float)
    return basis @ np.linalg.pinv(vander)


def savgol_smooth(y, window=25, order=2):
    """Smooth along axis 0; edges use one-sided polynomial fits."""
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    if n < window:
        raise ValueError(f"need at least {window} samples, got {n}")
    half = window // 2
    out = np.empty_like(y)
    centre = savgol_coeffs(window, order)
    # interior: sliding dot product with the symmetric kernel
    for i in range(half, n - half):
        out[i] = np.tensordot(centre, y[i - half:i + half + 1], axes=(0, 0))
    for i in range(half):
        out[i] = np.tensordot(savgol_coeffs(window, order, i), y[:window], axes=(0, 0))
        j = n - half + i
        out[j] = np.tensordot(savgol_coeffs(window, order, half + 1 + i), y[-window:],
                              axes=(0, 0))
    return out


def noise_gain(window=25, order=2):
    """Ratio of output to input white-noise standard deviation (interior)."""
    return float(np.sqrt(np.sum(savgol_coeffs(window, order) ** 2)))
