"""Two-module surface-trap electrode layout.

Coordinates: x along the transport axis (the inter-module gap is centred on
x = 0, module A on the negative side), y across the rails, z out of the
electrode plane. All lengths in µm.
"""
from __future__ import annotations

import hashlib
import io
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

MODULES = ("A", "B")
ROLES = ("RF", "DC", "ground")


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class Electrode:
    id: str
    module: str
    role: str
    x1: float
    x2: float
    y1: float
    y2: float
    z: float = 0.0  # height of the electrode plane

    def __post_init__(self):
        if self.module not in MODULES:
            raise LayoutError(f"{self.id}: unknown module {self.module!r}")
        if self.role not in ROLES:
            raise LayoutError(f"{self.id}: unknown role {self.role!r}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise LayoutError(f"{self.id}: rectangle must have positive width and length")

    @property
    def rect(self):
        return np.array([self.x1, self.x2, self.y1, self.y2])

    @property
    def center(self):
        return 0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2)

    def overlaps(self, other):
        return (self.x1 < other.x2 and other.x1 < self.x2
                and self.y1 < other.y2 and other.y1 < self.y2)

    def separation(self, other):
        """Edge-to-edge distance between two rectangles (0 if touching)."""
        dx = max(other.x1 - self.x2, self.x1 - other.x2, 0.0)
        dy = max(other.y1 - self.y2, self.y1 - other.y2, 0.0)
        return float(np.hypot(dx, dy))


@dataclass(frozen=True)
class LayoutParams:
    rf_width: float = 270.0
    rf_separation: float = 90.0
    dc_width: float = 220.0
    dc_pitch: float = 230.0  # 10 µm gaps between segments
    dc_length: float = 1000.0  # radial extent of each DC segment
    rf_dc_clearance: float = 10.0
    n_dc: int = 12  # DC pairs per module
    gap_x: float = 10.0
    misalign_y: float = 0.0
    misalign_z: float = 0.0
    zone_separation: float = 684.0
    loading_offset: float = 1840.0
    center_ground: bool = True

    def validate(self):
        problems = []
        for name in ("rf_width", "rf_separation", "dc_width", "dc_pitch", "dc_length",
                     "zone_separation", "loading_offset"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be positive")
        if self.gap_x < 0:
            problems.append("gap_x must be non-negative")
        if self.rf_dc_clearance < 5.0:
            problems.append("rf_dc_clearance must be at least 5 µm")
        # electrode pairs 1-8 are the four pairs nearest the gap on each module
        if self.n_dc < 4:
            problems.append("n_dc must be at least 4 pairs per module")
        if self.dc_width > self.dc_pitch:
            problems.append("dc_width exceeds dc_pitch: adjacent DC electrodes overlap")
        for name in ("misalign_y", "misalign_z"):
            if abs(getattr(self, name)) > 50:
                problems.append(f"|{name}| must be <= 50 µm")
        return problems


@dataclass(frozen=True)
class TrapLayout:
    electrodes: tuple
    gap_x: float
    misalign_y: float = 0.0
    misalign_z: float = 0.0
    zones: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [e.id for e in self.electrodes]
        if len(set(ids)) != len(ids):
            raise LayoutError("duplicate electrode ids")

    @property
    def ids(self):
        return [e.id for e in self.electrodes]

    def index(self, electrode_id):
        return self.ids.index(electrode_id)

    def select(self, role=None, module=None):
        return [e for e in self.electrodes
                if (role is None or e.role == role) and (module is None or e.module == module)]

    def rects(self, electrodes=None):
        electrodes = self.electrodes if electrodes is None else electrodes
        return np.array([e.rect for e in electrodes]).reshape(-1, 4)

    def planes(self, electrodes=None):
        electrodes = self.electrodes if electrodes is None else electrodes
        return np.array([e.z for e in electrodes])

    def module_xrange(self, module):
        es = self.select(module=module)
        return min(e.x1 for e in es), max(e.x2 for e in es)

    def dc_pairs(self, module):
        """DC electrode pairs of a module ordered from the gap outwards."""
        pairs = {}
        for e in self.select(role="DC", module=module):
            num = int(e.id.split("DC")[1][:-1])
            pairs.setdefault(num, []).append(e.id)
        return [sorted(pairs[k]) for k in sorted(pairs)]

    def default_active(self, pairs_per_module=4):
        """Ids of electrode pairs 1-8: four pairs nearest the gap on each module."""
        out = []
        for module in MODULES:
            for pair in self.dc_pairs(module)[:pairs_per_module]:
                out.extend(pair)
        return out

    def mirrored_y(self):
        electrodes = tuple(replace(e, y1=-e.y2, y2=-e.y1) for e in self.electrodes)
        return replace(self, electrodes=electrodes, misalign_y=-self.misalign_y)

    def check(self):
        """Return a list of geometry problems (empty when valid)."""
        problems = []
        for module in MODULES:
            es = self.select(module=module)
            for i, a in enumerate(es):
                for b in es[i + 1:]:
                    if a.overlaps(b):
                        problems.append(f"{a.id} overlaps {b.id}")
                    elif {a.role, b.role} == {"RF", "DC"} and a.separation(b) < 5.0 - 1e-9:
                        problems.append(f"{a.id}-{b.id} RF-DC separation below 5 µm")
        if self.select(module="A") and self.select(module="B"):
            a_hi = self.module_xrange("A")[1]
            b_lo = self.module_xrange("B")[0]
            if b_lo - a_hi < -1e-9 or abs((b_lo - a_hi) - self.gap_x) > 1e-6:
                problems.append("modules must occupy disjoint x-ranges separated by gap_x")
        return problems

    def digest(self):
        return hashlib.sha256(dumps_layout(self).encode()).hexdigest()[:16]


def build_two_module_layout(params=None, **overrides):
    """Electrode geometry of two facing linear surface-trap modules.

    Each module carries two RF rails terminating at the inter-module edge
    and ``n_dc`` segmented DC pairs outside the rails. Module B is offset by
    (gap_x, misalign_y, misalign_z) relative to module A.
    """
    p = replace(params or LayoutParams(), **overrides)
    problems = p.validate()
    if problems:
        raise LayoutError("; ".join(problems))

    length = p.n_dc * p.dc_pitch - (p.dc_pitch - p.dc_width)
    half_sep = 0.5 * p.rf_separation
    rf_outer = half_sep + p.rf_width
    dc_inner = rf_outer + p.rf_dc_clearance

    electrodes = []
    for module in MODULES:
        sgn = -1.0 if module == "A" else 1.0
        edge = sgn * 0.5 * p.gap_x
        dy = 0.0 if module == "A" else p.misalign_y
        z0 = 0.0 if module == "A" else p.misalign_z

        def xspan(near, far):
            a, b = edge + sgn * near, edge + sgn * far
            return (min(a, b), max(a, b))

        def add(eid, role, xs, ys):
            electrodes.append(Electrode(eid, module, role, xs[0], xs[1],
                                        ys[0] + dy, ys[1] + dy, z0))

        xs = xspan(0.0, length)
        add(f"{module}-RF1", "RF", xs, (half_sep, rf_outer))
        add(f"{module}-RF2", "RF", xs, (-rf_outer, -half_sep))
        if p.center_ground:
            g = half_sep - p.rf_dc_clearance
            if g > 0:
                add(f"{module}-GND", "ground", xs, (-g, g))
        for k in range(p.n_dc):
            xs = xspan(k * p.dc_pitch, k * p.dc_pitch + p.dc_width)
            add(f"{module}-DC{k + 1}T", "DC", xs, (dc_inner, dc_inner + p.dc_length))
            add(f"{module}-DC{k + 1}B", "DC", xs, (-dc_inner - p.dc_length, -dc_inner))

    zone1 = -0.5 * p.zone_separation
    zones = {"Loading": zone1 - p.loading_offset, "Zone1": zone1, "Zone2": -zone1}
    layout = TrapLayout(tuple(electrodes), p.gap_x, p.misalign_y, p.misalign_z, zones)
    problems = layout.check()
    if problems:
        raise LayoutError("; ".join(problems))
    return layout


# -- text serialization -----------------------------------------------------

_HEADER = "# matterlink layout v1"
_COLUMNS = ("id", "module", "role", "x1_um", "x2_um", "y1_um", "y2_um", "z_um")


def dumps_layout(layout):
    buf = io.StringIO()
    buf.write(_HEADER + "\n")
    buf.write(f"gap_x_um = {layout.gap_x!r}\n")
    buf.write(f"misalign_y_um = {layout.misalign_y!r}\n")
    buf.write(f"misalign_z_um = {layout.misalign_z!r}\n")
    for name, pos in layout.zones.items():
        buf.write(f"zone.{name}_um = {float(pos)!r}\n")
    buf.write("[electrodes]\n")
    buf.write(",".join(_COLUMNS) + "\n")
    for e in layout.electrodes:
        vals = [e.id, e.module, e.role] + [repr(float(getattr(e, k))) for k in
                                           ("x1", "x2", "y1", "y2", "z")]
        buf.write(",".join(vals) + "\n")
    return buf.getvalue()


def loads_layout(text):
    lines = [ln.strip() for ln in text.splitlines()]
    if not lines or lines[0] != _HEADER:
        raise LayoutError("not a matterlink layout document")
    scalars, zones, rows = {}, {}, []
    in_table = False
    for ln in lines[1:]:
        if not ln or (ln.startswith("#")):
            continue
        if ln == "[electrodes]":
            in_table = True
            continue
        if in_table:
            if ln.startswith("id,"):
                if tuple(ln.split(",")) != _COLUMNS:
                    raise LayoutError(f"unexpected electrode columns: {ln}")
                continue
            rows.append(ln.split(","))
            continue
        key, _, val = (s.strip() for s in ln.partition("="))
        if not key.endswith("_um"):
            raise LayoutError(f"key {key!r} lacks a unit suffix")
        if key.startswith("zone."):
            zones[key[5:-3]] = float(val)
        elif key in ("gap_x_um", "misalign_y_um", "misalign_z_um"):
            scalars[key[:-3]] = float(val)
        else:
            raise LayoutError(f"unknown layout key {key!r}")
    electrodes = tuple(
        Electrode(r[0], r[1], r[2], *map(float, r[3:8])) for r in rows
    )
    layout = TrapLayout(electrodes, scalars.get("gap_x", 0.0), scalars.get("misalign_y", 0.0),
                        scalars.get("misalign_z", 0.0), zones)
    problems = layout.check()
    if problems:
        raise LayoutError("; ".join(problems))
    return layout


def params_to_dict(params):
    return asdict(params)


def params_from_dict(d):
    known = {f.name for f in fields(LayoutParams)}
    unknown = set(d) - known
    if unknown:
        raise LayoutError(f"unknown layout parameters: {sorted(unknown)}")
    return LayoutParams(**d)
