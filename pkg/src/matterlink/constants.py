"""Physical constants and unit conversions.

Lengths are carried in µm and times in µs inside the package; energies are
reported in meV and frequencies in Hz at the public interfaces.
"""
import numpy as np

ELEMENTARY_CHARGE = 1.602176634e-19  # C
AMU = 1.66053906660e-27  # kg
HBAR = 1.054571817e-34  # J s

UM = 1e-6  # m per µm
US = 1e-6  # s per µs

# 1/µm -> 1/m and 1/µm^2 -> 1/m^2
PER_UM = 1e6
PER_UM2 = 1e12


def joule_to_mev(energy):
    return np.asarray(energy) / ELEMENTARY_CHARGE * 1e3


def mev_to_joule(energy):
    return np.asarray(energy) * 1e-3 * ELEMENTARY_CHARGE
