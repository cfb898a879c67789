import pytest

from snag.graph import make_splits, sbm_generate


def separable_sbm(blocks=3, per_block=10, seed=0):
    """Disconnected cliques with one-hot block features: every sane model scores 1.0."""
    return make_splits(sbm_generate(blocks, per_block, p_in=1.0, p_out=0.0, feature_noise=0.0, seed=seed), seed=seed)


def noisy_sbm(blocks=3, per_block=20, seed=0, noise=1.0, p_in=0.3, p_out=0.05):
    return make_splits(sbm_generate(blocks, per_block, p_in, p_out, feature_noise=noise, seed=seed), seed=seed)


@pytest.fixture(scope="session")
def separable():
    return separable_sbm()


@pytest.fixture(scope="session")
def noisy():
    return noisy_sbm()


# acceptance criteria append (number, title, passed, detail) here
ACCEPTANCE_RESULTS: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {number}. {title}: {detail}")
