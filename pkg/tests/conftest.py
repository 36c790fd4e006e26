import numpy as np
import pytest

from exoembody.human import build_default_walker, synthetic_gait
from exoembody.multibody import JointDef, ModelTopology, SegmentDef
from exoembody.policy import _Controller
from exoembody.simulation import PLAYBACK


@pytest.fixture(scope="session")
def walker():
    return build_default_walker()


@pytest.fixture(scope="session")
def gait(walker):
    return synthetic_gait(walker)


def rod_pendulum(mass=2.0, length=0.8, gravity=(0.0, -9.81), **joint):
    """Uniform rod hanging from a world pivot; angle measured from straight down."""
    rod = SegmentDef("rod", mass, mass * length ** 2 / 12, (0.0, -length / 2), length,
                     (("tip", (0.0, -length)),))
    return ModelTopology((rod,), (JointDef("pivot", None, "rod", **joint),), gravity=gravity)

# verdict lines from the acceptance suite, echoed at the end of the run
ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1][1:])):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class Playback(_Controller):
    """Test controller that drives the tracked joints exactly along the reference."""

    def loop_fields(self):
        return dict(controller=PLAYBACK, reflex_kp=0.0, reflex_kd=0.0, reflex_fhat=1.0,
                    reflex_feedforward=False, reflex_lead=0.0, assist_aware=False)

    def to_dict(self):
        return {"kind": "playback"}
