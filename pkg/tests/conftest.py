import numpy as np
import pytest

from semplan import world as W

_ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    _ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def chain_world():
    """Two states; action 0 pays 1 now, action 1 pays 1 on the following turn.

    State 0 is the decision point. Action 0 goes to the absorbing state 1
    (reward 1 on entry). Action 1 goes to a waiting state that is also
    state 0 under a relabelling, so we use three states: 0 start, 1 sink,
    2 waiting; from 2 every action pays 1 and goes to the sink.
    """
    kernel = np.zeros((3, 2, 3))
    rewards = np.zeros((3, 2, 3))
    kernel[0, 0, 1] = 1.0
    rewards[0, 0, 1] = 1.0
    kernel[0, 1, 2] = 1.0
    kernel[1, :, 1] = 1.0
    kernel[2, :, 1] = 1.0
    rewards[2, :, 1] = 1.0
    emb = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    mid = emb[:, None, :] + np.array([[0.3, 0.1], [-0.2, 0.4]])[None, :, :]
    return W.LatentWorld(kernel, rewards, emb, mid, seed=0)


@pytest.fixture
def chain():
    return chain_world()
