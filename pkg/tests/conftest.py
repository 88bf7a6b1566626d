import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def finegrained_small(tmp_path_factory):
    from qgn.datasets import SyntheticFinegrainedSpec, gen_finegrained

    root = tmp_path_factory.mktemp("fg")
    split = gen_finegrained(SyntheticFinegrainedSpec(num_classes=12, images_per_class=20, seed=3), root)
    return root, split


@pytest.fixture(scope="session")
def scenes_small(tmp_path_factory):
    from qgn.datasets import SearchSceneSpec, gen_search_scenes

    root = tmp_path_factory.mktemp("ps")
    spec = SearchSceneSpec(num_train_ids=12, num_test_ids=10, gallery_size=6, seed=5)
    return root, gen_search_scenes(spec, root)


_criteria: list[str] = []


@pytest.fixture
def report_criterion():
    """Record one acceptance line; all lines are printed in the terminal summary."""
    def report(number: int, name: str, ok: bool, detail: str = "") -> bool:
        line = f"criterion {number} {name}: {'PASS' if ok else 'FAIL'}"
        _criteria.append(f"{line} ({detail})" if detail else line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if _criteria:
        terminalreporter.section("acceptance criteria")
        for line in _criteria:
            terminalreporter.write_line(line)
