import pytest

from lightmux.noise import NoiseModel
from lightmux.scene import SceneFamilySpec, generate_scene_family

CALIBRATED = NoiseModel(0.7, 66.0, 15.0, 30.0)


@pytest.fixture(scope="session")
def noise():
    return CALIBRATED


@pytest.fixture(scope="session")
def tiny_family():
    """Two classes whose ring contrasts under the two illuminants cancel when both are on."""
    spec = SceneFamilySpec(num_classes=2, poses_per_class=6, num_illuminants=2, image_side=40,
                           discriminant_illuminants={2}, base_seed=3)
    return generate_scene_family(spec)


@pytest.fixture(scope="session")
def blank_family():
    """Identical class prototypes: labels carry no signal."""
    spec = SceneFamilySpec(num_classes=2, poses_per_class=6, num_illuminants=2, image_side=40,
                           discriminant_illuminants=set(), similarity=1.0, base_seed=4)
    return generate_scene_family(spec)


ACCEPTANCE = {}


def record_criterion(number, passed, detail):
    ACCEPTANCE.setdefault(number, []).append((passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        results = ACCEPTANCE[number]
        ok = all(p for p, _ in results)
        detail = "; ".join(d for _, d in results)
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")
