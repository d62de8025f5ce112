"""Gapless-plane potentials of rectangular surface electrodes.

Every electrode is a rectangle lying in a plane z = z0 that is otherwise
grounded. Holding one rectangle at 1 V gives the closed-form solid-angle
solution of Laplace's equation above the plane (House, PRA 78, 033402).
For a corner at offsets (u, v) from the field point and height w,

    G(u, v, w) = arctan(u v / (w R)),   R = sqrt(u^2 + v^2 + w^2)

and the rectangle potential is the signed sum of G over its four corners
divided by 2 pi. All derivatives below are exact derivatives of G.

Lengths are in µm; gradients come out in 1/µm and Hessians in 1/µm^2.
"""
import numpy as np

_TWO_PI = 2.0 * np.pi
# corners as (x column, y column, sign) of the (x1, x2, y1, y2) rectangle
_CORNER_X = [1, 0, 1, 0]
_CORNER_Y = [3, 3, 2, 2]
_CORNER_SIGN = np.array([1.0, -1.0, -1.0, 1.0])


class BelowPlaneError(ValueError):
    """Raised when a field point is not strictly above an electrode plane."""


def _as_points(points):
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[None, :]
    if pts.shape[-1] != 3:
        raise ValueError(f"points must have shape (..., 3), got {pts.shape}")
    return pts


def _corner_terms(u, v, w, order):
    """G and its partial derivatives in (u, v, w) up to ``order``."""
    u2, v2, w2 = u * u, v * v, w * w
    r2 = u2 + v2 + w2
    r = np.sqrt(r2)
    out = {"G": np.arctan(u * v / (w * r))}
    if order < 1:
        return out
    uw = u2 + w2
    vw = v2 + w2
    out["u"] = v * w / (uw * r)
    out["v"] = u * w / (vw * r)
    out["w"] = -u * v * (r2 + w2) / (uw * vw * r)
    if order < 2:
        return out
    r3 = r2 * r
    out["uu"] = -u * v * w * (3 * u2 + 2 * v2 + 3 * w2) / (uw**2 * r3)
    out["vv"] = -u * v * w * (2 * u2 + 3 * v2 + 3 * w2) / (vw**2 * r3)
    out["uv"] = w / r3
    out["uw"] = v * (u2 * u2 + u2 * v2 - u2 * w2 - v2 * w2 - 2 * w2 * w2) / (uw**2 * r3)
    out["vw"] = u * (u2 * v2 - u2 * w2 + v2 * v2 - v2 * w2 - 2 * w2 * w2) / (vw**2 * r3)
    # explicit form (not -(uu + vv)) so the Laplace property stays a real check
    poly = (
        2 * u2**3 + 3 * u2**2 * v2 + 7 * u2**2 * w2 + 3 * u2 * v2**2
        + 12 * u2 * v2 * w2 + 11 * u2 * w2**2 + 2 * v2**3 + 7 * v2**2 * w2
        + 11 * v2 * w2**2 + 6 * w2**3
    )
    out["ww"] = u * v * w * poly / (uw**2 * vw**2 * r3)
    return out


def rectangle_basis(rects, planes, points, order=2):
    """Potential (and derivatives) of unit-voltage rectangles at points.

    Parameters
    ----------
    rects : (N, 4) array of (x1, x2, y1, y2) in µm
    planes : (N,) array of electrode plane heights z0 in µm
    points : (P, 3) array of field points in µm
    order : 0, 1 or 2

    Returns
    -------
    tuple ``(phi,)``, ``(phi, grad)`` or ``(phi, grad, hess)`` with shapes
    (N, P), (N, P, 3) and (N, P, 3, 3).
    """
    rects = np.atleast_2d(np.asarray(rects, dtype=float))
    planes = np.broadcast_to(np.asarray(planes, dtype=float), (rects.shape[0],))
    pts = _as_points(points)

    w = pts[None, :, 2] - planes[:, None]
    if np.any(w <= 0):
        raise BelowPlaneError("field point at or below an electrode plane")

    x, y = pts[None, :, 0], pts[None, :, 1]
    # all four corners in one batch: axis 0 runs over (corner, electrode)
    u = rects[:, _CORNER_X].T.reshape(-1, 1) - x
    v = rects[:, _CORNER_Y].T.reshape(-1, 1) - y
    ww = np.tile(w, (4, 1))
    t = _corner_terms(u, v, ww, order)
    n, p = rects.shape[0], pts.shape[0]
    scale = (_CORNER_SIGN / _TWO_PI).reshape(4, 1, 1)

    def corner_sum(a):
        return np.sum(scale * a.reshape(4, n, p), axis=0)

    phi = corner_sum(t["G"])
    if order == 0:
        return (phi,)
    # d/dx = -d/du, d/dy = -d/dv, d/dz = d/dw
    grad = np.stack([-corner_sum(t["u"]), -corner_sum(t["v"]), corner_sum(t["w"])], axis=-1)
    if order == 1:
        return phi, grad
    hxx, hyy, hzz = corner_sum(t["uu"]), corner_sum(t["vv"]), corner_sum(t["ww"])
    hxy, hxz, hyz = corner_sum(t["uv"]), -corner_sum(t["uw"]), -corner_sum(t["vw"])
    hess = np.stack([np.stack([hxx, hxy, hxz], -1), np.stack([hxy, hyy, hyz], -1),
                     np.stack([hxz, hyz, hzz], -1)], axis=-2)
    return phi, grad, hess


def unit_potential(electrode, point):
    """Potential at ``point`` (µm) with ``electrode`` at 1 V, rest grounded."""
    (phi,) = rectangle_basis(electrode.rect[None, :], electrode.z, point, order=0)
    return float(phi[0, 0]) if np.ndim(point) == 1 else phi[0]
