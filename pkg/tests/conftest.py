import numpy as np
import pytest
import torch

from scrprior.synthscene import DatasetConfig, SceneConfig, make_dataset

torch.set_num_threads(1)

# criterion number -> (passed, detail), filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


def random_quat(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


@pytest.fixture(scope="session")
def small_dataset():
    return make_dataset(3, SceneConfig(textureless_fraction=0.3), DatasetConfig(n_frames=8, depth_sensor=True))


@pytest.fixture(scope="session")
def textured_dataset():
    return make_dataset(11, SceneConfig(textureless_fraction=0.0), DatasetConfig(n_frames=8))
