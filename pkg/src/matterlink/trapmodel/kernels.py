"""Compiled single-point evaluation of the rectangle basis.

Same closed forms as :func:`rectangle_basis`, written as scalar loops so
that per-step force evaluations in the integrator avoid numpy call
overhead. Results agree with the vectorised version to rounding.
"""
import math

import numpy as np
from numba import njit

_SIGN = np.array([1.0, -1.0, -1.0, 1.0])
_CX = np.array([1, 0, 1, 0])
_CY = np.array([3, 3, 2, 2])


@njit(cache=True)
def point_basis(rects, planes, px, py, pz, order, phi, grad, hess):
    """Fill phi (N,), grad (N, 3) and hess (N, 3, 3) for one point."""
    inv2pi = 1.0 / (2.0 * math.pi)
    for i in range(rects.shape[0]):
        w = pz - planes[i]
        w2 = w * w
        p = 0.0
        gx = gy = gz = 0.0
        hxx = hyy = hzz = hxy = hxz = hyz = 0.0
        for c in range(4):
            s = _SIGN[c] * inv2pi
            u = rects[i, _CX[c]] - px
            v = rects[i, _CY[c]] - py
            u2 = u * u
            v2 = v * v
            r2 = u2 + v2 + w2
            r = math.sqrt(r2)
            p += s * math.atan(u * v / (w * r))
            if order < 1:
                continue
            uw = u2 + w2
            vw = v2 + w2
            gx -= s * v * w / (uw * r)
            gy -= s * u * w / (vw * r)
            gz -= s * u * v * (r2 + w2) / (uw * vw * r)
            if order < 2:
                continue
            r3 = r2 * r
            hxx -= s * u * v * w * (3 * u2 + 2 * v2 + 3 * w2) / (uw * uw * r3)
            hyy -= s * u * v * w * (2 * u2 + 3 * v2 + 3 * w2) / (vw * vw * r3)
            hxy += s * w / r3
            hxz -= s * v * (u2 * u2 + u2 * v2 - u2 * w2 - v2 * w2 - 2 * w2 * w2) / (uw * uw * r3)
            hyz -= s * u * (u2 * v2 - u2 * w2 + v2 * v2 - v2 * w2 - 2 * w2 * w2) / (vw * vw * r3)
            poly = (2 * u2 ** 3 + 3 * u2 ** 2 * v2 + 7 * u2 ** 2 * w2 + 3 * u2 * v2 ** 2
                    + 12 * u2 * v2 * w2 + 11 * u2 * w2 ** 2 + 2 * v2 ** 3 + 7 * v2 ** 2 * w2
                    + 11 * v2 * w2 ** 2 + 6 * w2 ** 3)
            hzz += s * u * v * w * poly / (uw * uw * vw * vw * r3)
        phi[i] = p
        if order >= 1:
            grad[i, 0] = gx
            grad[i, 1] = gy
            grad[i, 2] = gz
        if order >= 2:
            hess[i, 0, 0] = hxx
            hess[i, 1, 1] = hyy
            hess[i, 2, 2] = hzz
            hess[i, 0, 1] = hess[i, 1, 0] = hxy
            hess[i, 0, 2] = hess[i, 2, 0] = hxz
            hess[i, 1, 2] = hess[i, 2, 1] = hyz


@njit(cache=True)
def trap_force(rects, planes, n_dc, volts, amp_re, amp_im, pseudo_coef, charge, secular,
               rf_cos, rf_sin, px, py, pz, out):
    """Force (J/µm) from DC electrodes ``[:n_dc]`` and RF electrodes ``[n_dc:]``.

    Secular mode adds the pseudopotential gradient; otherwise the RF
    electrodes carry Re(a exp(i Omega t)) = a_re cos - a_im sin.
    """
    n = rects.shape[0]
    phi = np.empty(n)
    grad = np.empty((n, 3))
    hess = np.empty((n, 3, 3))
    if secular:
        point_basis(rects, planes, px, py, pz, 2, phi, grad, hess)
    else:
        point_basis(rects, planes, px, py, pz, 1, phi, grad, hess)
    for k in range(3):
        f = 0.0
        for i in range(n_dc):
            f += volts[i] * grad[i, k]
        out[k] = -charge * f
    if secular:
        gre = np.zeros(3)
        gim = np.zeros(3)
        hre = np.zeros((3, 3))
        him = np.zeros((3, 3))
        for j in range(n - n_dc):
            i = n_dc + j
            for a in range(3):
                gre[a] += amp_re[j] * grad[i, a]
                gim[a] += amp_im[j] * grad[i, a]
                for b in range(3):
                    hre[a, b] += amp_re[j] * hess[i, a, b]
                    him[a, b] += amp_im[j] * hess[i, a, b]
        for a in range(3):
            acc = 0.0
            for b in range(3):
                acc += hre[a, b] * gre[b] + him[a, b] * gim[b]
            out[a] -= 2.0 * pseudo_coef * acc
    else:
        for j in range(n - n_dc):
            i = n_dc + j
            vrf = amp_re[j] * rf_cos - amp_im[j] * rf_sin
            for a in range(3):
                out[a] -= charge * vrf * grad[i, a]
