import pytest

from quadhedge.market import HestonParams

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def table1():
    return HestonParams.table1(1)


@pytest.fixture
def table1_m2():
    return HestonParams.table1(2)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def mvh_small():
    """A short MVH training run (m=1, N=10) shared by several tests."""
    from quadhedge.bsde import SolverConfig
    from quadhedge.mvh import extract_strategy, solve_bsre, solve_extended_bsde

    p = HestonParams.table1(1)
    bsre = solve_bsre(p, SolverConfig(n_steps=10, iterations=1500, partial=750, control_scale=0.01), seed=0)
    ext = solve_extended_bsde(p, SolverConfig(n_steps=10, iterations=1500, partial=750, y0_range=(6.5, 7.2)),
                              bsre, seed=0)
    return p, bsre, ext, extract_strategy(p, bsre.result, ext)


@pytest.fixture(scope="session")
def lrm_small():
    from quadhedge.bsde import SolverConfig
    from quadhedge.lrm import extract_strategy, solve_fs_bsde

    p = HestonParams.table1(1)
    res = solve_fs_bsde(p, SolverConfig(n_steps=10, iterations=1500, partial=750, y0_range=(6.5, 7.2)), seed=0)
    return p, res, extract_strategy(p, res)
