"""Effective photonic entanglement rates versus the physical matter link."""
from dataclasses import asdict, dataclass


@dataclass(frozen=True)
class PhotonicParams:
    raw_rate: float = 182.0  # 1/s
    conversion_efficiency: float = 0.09
    switch_loss_db: float = 2.1
    raw_fidelity: float = 0.94
    target_fidelity: float = 0.997
    distillation_factor: float = 6.0

    def validate(self):
        problems = []
        if self.raw_rate < 0:
            problems.append("raw_rate must be non-negative")
        for name in ("conversion_efficiency", "raw_fidelity", "target_fidelity"):
            if not 0 < getattr(self, name) <= 1:
                problems.append(f"{name} must lie in (0, 1]")
        if self.switch_loss_db < 0:
            problems.append("switch_loss_db must be non-negative")
        if self.distillation_factor < 1:
            problems.append("distillation_factor must be >= 1")
        return problems


@dataclass(frozen=True)
class MatterLinkParams:
    link_duration_us: float = 412.5
    loss_infidelity: float = 7e-8
    coherence_infidelity: float = 5e-4

    def validate(self):
        return [] if self.link_duration_us > 0 else ["link_duration_us must be positive"]


@dataclass(frozen=True)
class StagedRates:
    raw: float
    converted: float
    switched: float
    distilled: float

    def fractions(self):
        """Each stage as a fraction of the raw rate."""
        r = self.raw
        return {k: (v / r if r else float("nan")) for k, v in asdict(self).items()}


def db_to_transmission(loss_db):
    return 10.0 ** (-loss_db / 10.0)


def effective_photonic_rate(p: PhotonicParams = PhotonicParams()):
    problems = p.validate()
    if problems:
        raise ValueError("; ".join(problems))
    converted = p.conversion_efficiency * p.raw_rate
    switched = converted * db_to_transmission(p.switch_loss_db)
    return StagedRates(p.raw_rate, converted, switched, switched / p.distillation_factor)


def matter_link_rate(m: MatterLinkParams = MatterLinkParams()):
    if not m.link_duration_us > 0:
        raise ValueError("link duration must be positive")
    return 1e6 / m.link_duration_us


SLOW_RATE_THRESHOLD = 1.0  # 1/s


def compare(p: PhotonicParams = PhotonicParams(), m: MatterLinkParams = MatterLinkParams()):
    staged = effective_photonic_rate(p)
    matter = matter_link_rate(m)
    ratio = matter / staged.distilled if staged.distilled > 0 else float("inf")
    return {
        "matter_rate": matter,
        "photonic": asdict(staged),
        "photonic_fractions": staged.fractions(),
        "matter_to_distilled": ratio,
        "distilled_below_threshold": staged.distilled < SLOW_RATE_THRESHOLD,
    }
