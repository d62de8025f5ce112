"""Pseudopotential, RF null, trap depth and secular frequencies."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage, optimize

from ..constants import AMU, ELEMENTARY_CHARGE, PER_UM, PER_UM2, joule_to_mev
from .electrostatics import rectangle_basis
from .layout import TrapLayout

import logging
logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RfDrive:
    amplitude: float = 101.75  # V, module A
    omega: float = 2 * np.pi * 19.32e6  # rad/s
    phase_mismatch: float = 0.0  # rad, module B relative to A
    amplitude_mismatch: float = 0.0  # V, module B minus module A

    def __post_init__(self):
        if not self.amplitude > 0:
            raise ValueError("RF amplitude must be positive")
        if not self.omega > 0:
            raise ValueError("RF angular frequency must be positive")

    @classmethod
    def from_frequency(cls, frequency_hz, **kw):
        return cls(omega=2 * np.pi * frequency_hz, **kw)

    @property
    def frequency(self):
        return self.omega / (2 * np.pi)

    @property
    def period_us(self):
        return 1e6 / self.frequency

    def phasor(self, module):
        if module == "A":
            return complex(self.amplitude)
        return (self.amplitude + self.amplitude_mismatch) * np.exp(1j * self.phase_mismatch)


@dataclass(frozen=True)
class IonSpecies:
    mass: float = 174.0  # amu
    charge: int = 1  # elementary charges

    def __post_init__(self):
        if not self.mass > 0:
            raise ValueError("ion mass must be positive")
        if self.charge == 0:
            raise ValueError("ion must be charged")

    @property
    def mass_kg(self):
        return self.mass * AMU

    @property
    def charge_c(self):
        return self.charge * ELEMENTARY_CHARGE


YB174 = IonSpecies(174.0, 1)
YB171 = IonSpecies(171.0, 1)


class NoMinimumError(RuntimeError):
    pass


GAP_MODELS = ("bridged", "grounded")


def effective_rects(layout, gap_model="bridged"):
    """Electrode rectangles as seen by the electrostatic model.

    ``grounded`` treats the inter-module slot as grounded plane. ``bridged``
    extends every electrode that ends at the module edge by half the gap, so
    the slot mouth takes the potential of the electrodes facing it.
    """
    if gap_model not in GAP_MODELS:
        raise ValueError(f"gap_model must be one of {GAP_MODELS}")
    rects = layout.rects().copy()
    if gap_model == "grounded" or not layout.select(module="A") or not layout.select(module="B"):
        return rects
    a_hi = layout.module_xrange("A")[1]
    b_lo = layout.module_xrange("B")[0]
    half = 0.5 * (b_lo - a_hi)
    for i, e in enumerate(layout.electrodes):
        if e.module == "A" and abs(e.x2 - a_hi) < 1e-9:
            rects[i, 1] += half
        elif e.module == "B" and abs(e.x1 - b_lo) < 1e-9:
            rects[i, 0] -= half
    return rects


class TrapModel:
    """Cached electrode basis for one layout, RF drive and ion species.

    Internal units: µm for positions, V for potentials. Energies from the
    ``*_energy`` methods are in joules, their gradients in J/µm.
    """

    def __init__(self, layout: TrapLayout, drive: RfDrive = None, ion: IonSpecies = None,
                 gap_model="bridged"):
        self.layout = layout
        self.drive = drive or RfDrive()
        self.ion = ion or IonSpecies()
        self.gap_model = gap_model
        self._ids = layout.ids
        self._all_rects = effective_rects(layout, gap_model)
        self._all_planes = layout.planes()
        rf = [i for i, e in enumerate(layout.electrodes) if e.role == "RF"]
        self._rf_rects = self._all_rects[rf]
        self._rf_planes = self._all_planes[rf]
        self._rf_amp = np.array([self.drive.phasor(layout.electrodes[i].module) for i in rf])
        # q^2 / (4 m Omega^2) with fields converted from V/µm to V/m
        self._pseudo_coef = (self.ion.charge_c**2 / (4 * self.ion.mass_kg * self.drive.omega**2)
                             * PER_UM**2)

    def with_drive(self, drive):
        return TrapModel(self.layout, drive, self.ion, self.gap_model)

    # -- DC ----------------------------------------------------------------

    def voltage_vector(self, voltages):
        """Full per-electrode voltage vector from a dict or an array."""
        if isinstance(voltages, dict):
            unknown = set(voltages) - set(self._ids)
            if unknown:
                raise KeyError(f"unknown electrodes: {sorted(unknown)}")
            return np.array([voltages.get(i, 0.0) for i in self._ids], dtype=float)
        v = np.asarray(voltages, dtype=float)
        if v.shape != (len(self._ids),):
            raise ValueError(f"expected {len(self._ids)} voltages, got shape {v.shape}")
        return v

    def basis(self, points, ids=None, order=2):
        """Unit potentials of the selected electrodes (all if ``ids`` is None)."""
        if ids is None:
            return rectangle_basis(self._all_rects, self._all_planes, points, order)
        idx = [self._ids.index(i) for i in ids]
        return rectangle_basis(self._all_rects[idx], self._all_planes[idx], points, order)

    def dc(self, voltages, points, order=2):
        """DC potential (V), gradient (V/µm) and Hessian (V/µm^2) at points."""
        v = self.voltage_vector(voltages)
        nz = np.flatnonzero(v)
        pts = np.atleast_2d(points)
        if nz.size == 0:
            p = pts.shape[0]
            return (np.zeros(p), np.zeros((p, 3)), np.zeros((p, 3, 3)))[:order + 1]
        terms = rectangle_basis(self._all_rects[nz], self._all_planes[nz], pts, order)
        return tuple(np.tensordot(v[nz], t, axes=(0, 0)) for t in terms)

    # -- RF ----------------------------------------------------------------

    def rf_phasor(self, points, order=1):
        """Complex RF field-amplitude gradient (V/µm) and optionally Hessian."""
        terms = rectangle_basis(self._rf_rects, self._rf_planes, points, order=order)
        g = np.tensordot(self._rf_amp, terms[1], axes=(0, 0))
        if order == 1:
            return g
        return g, np.tensordot(self._rf_amp, terms[2], axes=(0, 0))

    def pseudo_energy(self, points):
        g = self.rf_phasor(points)
        return self._pseudo_coef * np.sum(np.abs(g) ** 2, axis=-1)

    def pseudo_gradient(self, points):
        g, h = self.rf_phasor(points, order=2)
        return 2 * self._pseudo_coef * np.real(np.einsum("pij,pj->pi", h, np.conj(g)))

    def pseudo_hessian(self, point, step=1e-3):
        point = np.asarray(point, dtype=float)
        offs = np.vstack([np.eye(3) * step, -np.eye(3) * step]) + point
        grads = self.pseudo_gradient(offs)
        hess = (grads[:3] - grads[3:]) / (2 * step)
        return 0.5 * (hess + hess.T)

    # -- totals ------------------------------------------------------------

    def total_energy(self, voltages, points):
        (phi,) = self.dc(voltages, points, order=0)
        return self.ion.charge_c * phi + self.pseudo_energy(points)

    def total_gradient(self, voltages, points):
        _, grad = self.dc(voltages, points, order=1)
        return self.ion.charge_c * grad + self.pseudo_gradient(points)

    def total_hessian(self, voltages, point):
        """Hessian of the total potential energy in J/µm^2."""
        _, _, h = self.dc(voltages, np.atleast_2d(point), order=2)
        return self.ion.charge_c * h[0] + self.pseudo_hessian(point)

    # -- RF null -----------------------------------------------------------

    def null_point(self, x, guess=(0.0, 120.0), z_bounds=(5.0, 2000.0)):
        """(y, z) minimising the pseudopotential in the cross-section at ``x``."""

        def resid(yz):
            g = self.rf_phasor(np.array([[x, yz[0], yz[1]]]))[0]
            return np.concatenate([g.real, g.imag])

        def jac(yz):
            _, h = self.rf_phasor(np.array([[x, yz[0], yz[1]]]), order=2)
            cols = h[0][:, 1:]
            return np.vstack([cols.real, cols.imag])

        lo = [-np.inf, z_bounds[0]]
        hi = [np.inf, z_bounds[1]]
        sol = optimize.least_squares(resid, np.asarray(guess, dtype=float), jac=jac,
                                     bounds=(lo, hi), xtol=1e-14, ftol=1e-15, gtol=1e-15)
        y, z = sol.x
        if z <= z_bounds[0] * (1 + 1e-9) or z >= z_bounds[1] * (1 - 1e-9):
            raise NoMinimumError(f"no bounded RF null at x = {x:g} µm")
        return float(y), float(z)


def field_and_hessian(layout, voltages, point, gap_model="bridged"):
    """DC potential (V), gradient (V/m) and Hessian (V/m^2) at one point (µm)."""
    model = TrapModel(layout, gap_model=gap_model)
    phi, g, h = model.dc(voltages, np.atleast_2d(point), order=2)
    return float(phi[0]), g[0] * PER_UM, h[0] * PER_UM2


def pseudopotential(layout, drive, ion, point, gap_model="bridged"):
    """Time-averaged RF pseudopotential energy in meV at point(s) in µm."""
    model = TrapModel(layout, drive, ion, gap_model)
    e = joule_to_mev(model.pseudo_energy(np.atleast_2d(point)))
    return float(e[0]) if np.ndim(point) == 1 else e


def pseudopotential_quadrature(model, point, n=64):
    """Pseudopotential (J) by direct averaging of the RF field over a period.

    Independent of the phasor closed form used by :class:`TrapModel`;
    kept for cross-checking the two-module mismatch model.
    """
    terms = rectangle_basis(model._rf_rects, model._rf_planes, np.atleast_2d(point), order=1)
    grads = terms[1][:, 0, :] * PER_UM  # (n_rf, 3) in V/m per volt
    t = np.arange(n) / n * 2 * np.pi
    amps = model._rf_amp
    # instantaneous voltage on each rail: Re(a e^{i w t})
    volts = np.real(amps[:, None] * np.exp(1j * t[None, :]))
    fields = np.einsum("kt,kj->tj", volts, grads)
    mean_sq = np.mean(np.sum(fields**2, axis=1))
    return model.ion.charge_c**2 * mean_sq / (2 * model.ion.mass_kg * model.drive.omega**2)


@dataclass
class NullProfile:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    energy_mev: np.ndarray

    @property
    def height_variation(self):
        return float(np.max(self.z) - np.min(self.z))

    @property
    def barrier_mev(self):
        return float(np.max(self.energy_mev) - np.min(self.energy_mev))

    def height_at(self, x):
        return np.interp(x, self.x, self.z)


def rf_null_profile(layout, drive=None, ion=None, x_range=None, n=81, model=None,
                    gap_model="bridged"):
    """Trace the RF null along the transport axis.

    ``x_range`` is either an explicit array of axial positions or a
    (start, stop) pair sampled with ``n`` points.
    """
    model = model or TrapModel(layout, drive, ion, gap_model)
    if x_range is None:
        x_range = (layout.zones["Zone1"], layout.zones["Zone2"])
    xs = np.asarray(x_range, dtype=float)
    if xs.shape == (2,):
        xs = np.linspace(xs[0], xs[1], n)
    guess = (0.0, 120.0)
    ys, zs = np.empty_like(xs), np.empty_like(xs)
    for i, x in enumerate(xs):
        ys[i], zs[i] = model.null_point(x, guess)
        guess = (ys[i], zs[i])
    pts = np.column_stack([xs, ys, zs])
    return NullProfile(xs, ys, zs, joule_to_mev(model.pseudo_energy(pts)))


def two_rail_null_height(inner, outer):
    """Null height above two infinite rails with edges at |y| = inner, outer."""
    return float(np.sqrt(inner * outer))


@dataclass
class DepthResult:
    depth_mev: float
    barrier_mev: float
    saddle: np.ndarray
    null: np.ndarray
    profile: NullProfile


def _escape_level(grid, start):
    """Lowest level at which the basin containing ``start`` reaches the edge."""
    lo = grid[start]
    edge = np.zeros_like(grid, dtype=bool)
    edge[0, :] = edge[-1, :] = edge[:, 0] = edge[:, -1] = True
    hi = float(np.max(grid[edge]))

    def spills(level):
        lab, _ = ndimage.label(grid <= level)
        k = lab[start]
        return k != 0 and np.any(lab[edge] == k)

    if not spills(hi):
        raise NoMinimumError("escape level not found inside the search grid")
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if spills(mid):
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-9 * max(abs(hi), 1e-30):
            break
    return lo, hi


def cross_section_saddle(model, x, null_yz, half_width=400.0, z_max=800.0, step=4.0):
    """Lowest pseudopotential saddle on escape paths in the plane at ``x``.

    A grid watershed locates the spill level; a Newton polish on the
    gradient refines the saddle position. Returns (energy J, point).
    """
    y0, z0 = null_yz
    ys = np.arange(y0 - half_width, y0 + half_width + step / 2, step)
    z_floor = float(np.max(model._rf_planes)) + max(step, 10.0)
    zs = np.arange(z_floor, z_max + step / 2, step)
    yy, zz = np.meshgrid(ys, zs, indexing="ij")
    pts = np.column_stack([np.full(yy.size, x), yy.ravel(), zz.ravel()])
    e = model.pseudo_energy(pts).reshape(yy.shape)
    start = (int(np.argmin(np.abs(ys - y0))), int(np.argmin(np.abs(zs - z0))))
    lo, hi = _escape_level(e, start)

    band = (e >= lo - (hi - lo)) & (e <= hi + (hi - lo))
    cand = np.argwhere(band)
    g = model.pseudo_gradient(np.column_stack([np.full(len(cand), x),
                                               ys[cand[:, 0]], zs[cand[:, 1]]]))
    best = cand[np.argmin(np.linalg.norm(g[:, 1:], axis=1))]
    seed = np.array([ys[best[0]], zs[best[1]]])

    def grad2(yz):
        return model.pseudo_gradient(np.array([[x, yz[0], yz[1]]]))[0, 1:]

    sol = optimize.root(grad2, seed, method="hybr")
    yz = sol.x if (sol.success and np.linalg.norm(sol.x - seed) < 3 * step) else seed
    point = np.array([x, yz[0], yz[1]])
    energy = float(model.pseudo_energy(point[None])[0])
    if not sol.success or energy > hi * (1 + 1e-6) + 1e-30:
        energy, point = hi, point
    return energy, point


def with_misalignment(layout, misalignment):
    """Reposition module B so the gap and offsets equal (dx, dy, dz)."""
    dx, dy, dz = misalignment
    if max(abs(dy), abs(dz)) > 50 or not 0 <= dx <= 50:
        raise ValueError("misalignment magnitudes must be <= 50 µm")
    a_hi = layout.module_xrange("A")[1]
    b_lo = layout.module_xrange("B")[0]
    sx = (a_hi + dx) - b_lo
    sy = dy - layout.misalign_y
    sz = dz - layout.misalign_z
    es = tuple(
        replace(e, x1=e.x1 + sx, x2=e.x2 + sx, y1=e.y1 + sy, y2=e.y2 + sy, z=e.z + sz)
        if e.module == "B" else e
        for e in layout.electrodes
    )
    return replace(layout, electrodes=es, gap_x=dx, misalign_y=dy, misalign_z=dz)


def trap_depth_and_barrier(layout, drive=None, ion=None, misalignment=None,
                           sections=None, step=4.0, model=None, gap_model="bridged"):
    """RF trap depth and gap barrier, both in meV.

    The depth is the lowest cross-section saddle energy above the global
    null minimum; the barrier is the rise of the pseudopotential along the
    null line across the gap.
    """
    if misalignment is not None:
        if model is not None:
            drive, ion, gap_model = model.drive, model.ion, model.gap_model
        layout = with_misalignment(layout, misalignment)
        model = None
    model = model or TrapModel(layout, drive, ion, gap_model)
    z1, z2 = layout.zones["Zone1"], layout.zones["Zone2"]
    a_hi = layout.module_xrange("A")[1]
    b_lo = layout.module_xrange("B")[0]
    mid = 0.5 * (a_hi + b_lo)
    xs = np.unique(np.concatenate([np.linspace(z1, z2, 41), mid + np.linspace(-60, 60, 25)]))
    profile = rf_null_profile(layout, x_range=xs, model=model)
    if sections is None:
        sections = np.unique(np.concatenate([np.linspace(z1, z2, 7), [mid]]))
    best = None
    for x in sections:
        i = int(np.argmin(np.abs(profile.x - x)))
        yz = model.null_point(x, (profile.y[i], profile.z[i]))
        energy, point = cross_section_saddle(model, x, yz, step=step)
        if best is None or energy < best[0]:
            best = (energy, point)
    imin = int(np.argmin(profile.energy_mev))
    null = np.array([profile.x[imin], profile.y[imin], profile.z[imin]])
    depth = float(joule_to_mev(best[0])) - float(profile.energy_mev[imin])
    return DepthResult(depth, profile.barrier_mev, best[1], null, profile)


@dataclass
class SecularResult:
    frequencies: np.ndarray  # Hz, negative for unstable directions
    axes: np.ndarray  # columns are eigenvectors
    axial_index: int

    @property
    def axial(self):
        return float(self.frequencies[self.axial_index])

    @property
    def radial(self):
        return np.delete(self.frequencies, self.axial_index)


def frequencies_from_hessian(hessian_si, mass_kg):
    """Secular frequencies (Hz) from an energy Hessian in J/m^2."""
    lam, vec = np.linalg.eigh(0.5 * (hessian_si + hessian_si.T))
    freqs = np.sign(lam) * np.sqrt(np.abs(lam) / mass_kg) / (2 * np.pi)
    axial = int(np.argmax(np.abs(vec[0])))
    return SecularResult(freqs, vec, axial)


def secular_frequencies(model: TrapModel, voltages, point, tol=0.5):
    """Normal-mode frequencies of the total potential at a local minimum.

    Raises :class:`NoMinimumError` if the Newton step from ``point`` to the
    stationary point is longer than ``tol`` µm.
    """
    point = np.asarray(point, dtype=float)
    hess = model.total_hessian(voltages, point)  # J/µm^2
    grad = model.total_gradient(voltages, point[None])[0]  # J/µm
    try:
        step = np.linalg.solve(hess, grad)
    except np.linalg.LinAlgError:
        step = np.full(3, np.inf)
    if not np.linalg.norm(step) <= tol:
        raise NoMinimumError(f"point {point} is not a potential minimum "
                             f"(Newton step {np.linalg.norm(step):.3g} µm)")
    return frequencies_from_hessian(hess * PER_UM2, model.ion.mass_kg)
