
import numpy as np
import pytest
import torch

from cldenoise.data import synthetic_dataset
from cldenoise.models import DiscriminatorConfig, GeneratorConfig
from cldenoise.training import TrainConfig

torch.set_num_threads(1)

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    entry = _criteria.setdefault(n, {"title": title, "passed": [], "failed": [], "skipped": []})
    if report.when == "call" or report.outcome != "passed":
        if report.outcome == "failed":
            entry["failed"].append(item.name)
        elif report.outcome == "skipped":
            entry["skipped"].append(item.name)
        elif report.when == "call":
            entry["passed"].append(item.name)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        e = _criteria[n]
        status = "FAIL" if e["failed"] else "PASS" if e["passed"] else "SKIP"
        line = f"criterion {n}: {status}  {e['title']}"
        if e["failed"]:
            line += "  (failed: " + ", ".join(e["failed"]) + ")"
        if e["skipped"] and e["passed"]:
            line += "  (skipped: " + ", ".join(e["skipped"]) + ")"
        terminalreporter.write_line(line)


TINY_GEN = GeneratorConfig(n_down=3, n_up=3, base_channels=4, max_channels=16, input_size=16)
TINY_DISC = DiscriminatorConfig(n_layers=2, base_channels=4)


@pytest.fixture
def tiny_cfg():
    """A training config small enough for dozens of steps per test."""
    return TrainConfig(
        batch_size=4, epochs=4, decay_start_epoch=2, lr=1e-3, seed=3,
        generator=TINY_GEN, discriminator=TINY_DISC, head_hidden_dim=8, head_output_dim=8,
        steps_per_epoch=2,
    )


@pytest.fixture(scope="session")
def tiny_dataset():
    return synthetic_dataset(n_images=10, size=24, noise_sigma=0.1, seed=1, patch_size=16,
                             test_fraction=0.2, name="tiny")


@pytest.fixture
def tiny_batch(tiny_dataset):
    return tiny_dataset.sample_batch(tiny_dataset.train_indices[:4], np.random.default_rng(0))

