import pytest

from flatsplat.config import RunConfig, build_experiment


def small_config(**train) -> RunConfig:
    """2x1 blocks, 16 small views: fast enough for many short runs."""
    doc = {
        "scene": {"seed": 3, "n_gt": 16},
        "cameras": {"count": 16, "test_count": 4, "resolution": 24},
        "partition": {"nx": 2, "ny": 1, "rho": 0.1},
        "anchors": {"spacing": 0.25, "k_g": 2},
        "train": {"n_workers": 2, "period": 3, "iterations": 8, "hidden": 16, **train},
        "output": {"checkpoint_every": 4},
    }
    return RunConfig.from_dict(doc)


@pytest.fixture(scope="session")
def small_experiment():
    return build_experiment(small_config())


# -- acceptance reporting -----------------------------------------------------

ACCEPTANCE: dict[str, str] = {}


def record_criterion(cid: str, ok: bool, detail: str) -> bool:
    line = f"{cid} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE[cid] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE, key=lambda c: int(c[1:])):
        terminalreporter.write_line(ACCEPTANCE[cid])
