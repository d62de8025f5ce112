import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from matterlink.signalchain import SignalChain  # noqa: E402
from matterlink.trapmodel import TrapModel, build_two_module_layout  # noqa: E402
from matterlink.waveform import SynthesisConfig, TrapBasis, compile_transport  # noqa: E402


@pytest.fixture(scope="session")
def layout():
    return build_two_module_layout()


@pytest.fixture(scope="session")
def model(layout):
    return TrapModel(layout)


@pytest.fixture(scope="session")
def basis(model):
    return TrapBasis(model)


@pytest.fixture(scope="session")
def synth_cfg():
    return SynthesisConfig()


@pytest.fixture(scope="session")
def transport(basis, synth_cfg, layout):
    """Default Zone1 -> Zone2 transport waveform (58 updates, 412.5 µs)."""
    z = layout.zones
    return compile_transport(basis, z["Zone1"], z["Zone2"], synth_cfg)


@pytest.fixture(scope="session")
def chain():
    return SignalChain()
