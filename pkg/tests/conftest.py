import numpy as np
import pytest

from mv4d.core import normalize_times
from mv4d.diffusion import CorruptionSpec, GuidanceConfig, OracleDenoiser
from mv4d.gridsampler import SamplerConfig, alternate_sample
from mv4d.toyworld import generate_scene, render_input_video
from mv4d.trajectory import make_path, plan_trajectory


def orbit_video(scene, count=8, turns=0.35, radius=3.5, elevation=0.8):
    cams = make_path("orbit", center=scene.center, radius=radius, count=count, turns=turns,
                     elevation=elevation)
    return render_input_video(scene, cams, normalize_times(range(count)))


@pytest.fixture(scope="session")
def scene():
    return generate_scene(7, 3)


@pytest.fixture(scope="session")
def video(scene):
    return orbit_video(scene)


@pytest.fixture(scope="session")
def exact_grid(scene, video):
    """K=6 x L=8 grid completed with the exact oracle and the default schedule.

    Unit guidance makes the guided prediction the fully conditioned one, which
    is what the exact oracle answers exactly.
    """
    plan = plan_trajectory([v.camera for v in video], 6)
    cfg = SamplerConfig(K=6, guidance=GuidanceConfig(1.0, 1.0))
    den = OracleDenoiser(scene, CorruptionSpec())
    return alternate_sample(video, plan, den, cfg), plan, cfg


@pytest.fixture
def rng():
    return np.random.default_rng(1234)



_CRITERIA = {}


def pytest_runtest_logreport(report):
    if "test_criterion_" not in report.nodeid:
        return
    num = int(report.nodeid.split("test_criterion_")[1][:2])
    failed = report.failed or (report.when == "call" and report.skipped)
    prev = _CRITERIA.get(num, "PASS")
    if failed:
        _CRITERIA[num] = "FAIL"
    elif report.when == "call":
        _CRITERIA[num] = prev


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        terminalreporter.write_line(f"criterion {num:2d}: {_CRITERIA[num]}")
