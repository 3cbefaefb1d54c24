import pytest

from cfa.chipforge import SceneSpec, ShadowParams, synth_dataset

TINY_SCENE = dict(
    n_classes=3,
    chips_per_class_train=12,
    chips_per_class_test=6,
    chip_size=32,
    scatterer_count_range=(4, 8),
    target_half_length_range=(3.0, 5.0),
    target_half_width_range=(1.5, 3.0),
    psf_sigma=1.0,
    center_jitter=1.0,
    shadow_params=ShadowParams(length=6.0),
    scene_pool_size=6,
    master_seed=7,
)


@pytest.fixture(scope="session")
def tiny_spec():
    return SceneSpec(**TINY_SCENE)


@pytest.fixture(scope="session")
def tiny_ds(tiny_spec):
    return synth_dataset(tiny_spec)


# criterion results collected by test_acceptance and echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
