import numpy as np
import pytest

from vcstar import pipeline, toy


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_features_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy_features")
    toy.make_toy_features(root, n_speakers=4, n_utterances=6, order=9, min_frames=40, max_frames=80)
    return root


@pytest.fixture(scope="session")
def toy_store(toy_features_dir):
    store, _ = pipeline.extract_and_cache(pipeline.scan_dataset(toy_features_dir))
    return store


@pytest.fixture
def tiny_config():
    return pipeline.TrainConfig(seed=0, batch_size=2, crop_frames=16, iterations=3,
                                architecture="tiny", checkpoint_every=2)


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def acceptance_log(request):
    """Record a PASS/FAIL line for the terminal summary and echo it."""

    def log(criterion: str, passed: bool, detail: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'} criterion {criterion}: {detail}"
        request.config.acceptance_lines.append(line)
        print(line)

    return log


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance_lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in config.acceptance_lines:
            terminalreporter.write_line(line)
