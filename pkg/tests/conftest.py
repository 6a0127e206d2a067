import pytest

from gridlens import gridworld as gw
from gridlens.model import ModelConfig, init_weights

SMALL = ModelConfig(n_layers=2, n_heads=4, d_model=24, d_mlp=8, grid_size=4, n_classes=3, d_vis=8, max_seq=64)
SMALL_SCENES = gw.SceneParams(grid_size=4, n_classes=3, d_vis=8, n_objects=(1, 2), max_side=2)


@pytest.fixture(scope="session")
def small_weights():
    return init_weights(SMALL, seed=3, scale=0.3)


def small_grids(n, seed=0):
    scenes = gw.generate_scenes(n, seed, SMALL_SCENES)
    return scenes, [gw.render_tokens(s, n_classes=3, d_vis=8) for s in scenes]


@pytest.fixture(scope="session")
def planted():
    from gridlens.planted import plant_model

    return plant_model(ModelConfig())


@pytest.fixture(scope="session")
def planted_weights(planted):
    return planted[0]


@pytest.fixture(scope="session")
def control_pairs():
    scenes = gw.generate_scenes(50, 2024)
    return [gw.make_control_pair(s, s.objects[i % len(s.objects)].class_id) for i, s in enumerate(scenes)]


@pytest.fixture(scope="session")
def cma_reports(planted_weights, control_pairs):
    from gridlens.causal import cma_sweep

    return {task: cma_sweep(planted_weights, control_pairs, task, 50)
            for task in ("localization", "classification_binary")}


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
