import numpy as np
import pytest

from bayesrecon.numerics import make_rng


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture(scope="session")
def small_trained_net():
    """A default-topology prior trained with the default schedule on 16x16 phantoms."""
    from bayesrecon.phantoms import PhantomSpec, generate_phantoms
    from bayesrecon.prior import PriorNet
    from bayesrecon.training import TrainConfig, train

    images = generate_phantoms(PhantomSpec(shape=(16, 16), seed=5), 200)
    net = PriorNet(seed=3)
    train(net, images, TrainConfig(seed=1))
    return net, images


class AcceptanceRecorder:
    """Collects clause outcomes so the run ends with one line per criterion."""

    def __init__(self):
        self.clauses: dict[int, list[tuple[bool, str]]] = {}

    def check(self, criterion: int, ok: bool, text: str) -> bool:
        self.clauses.setdefault(criterion, []).append((bool(ok), text))
        print(f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {text}")
        return bool(ok)

    def lines(self) -> list[str]:
        out = []
        for n in sorted(self.clauses):
            parts = self.clauses[n]
            ok = all(p[0] for p in parts)
            out.append(f"{'PASS' if ok else 'FAIL'} criterion {n}: "
                       + "; ".join(p[1] for p in parts))
        return out


_RECORDER = AcceptanceRecorder()


@pytest.fixture(scope="session")
def acceptance():
    return _RECORDER


def pytest_terminal_summary(terminalreporter):
    lines = _RECORDER.lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
