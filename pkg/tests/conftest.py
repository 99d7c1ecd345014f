import numpy as np
import pytest

from polybench.dataset import build_augmented_dataset
from polybench.phantom_synth import enumerate_phantom_grid, generate_corpus


@pytest.fixture(scope="session")
def easy_corpus():
    return generate_corpus(enumerate_phantom_grid(), master_seed=3, difficulty="easy")


@pytest.fixture(scope="session")
def full_manifest(tmp_path_factory, easy_corpus):
    out = tmp_path_factory.mktemp("dataset")
    return build_augmented_dataset(easy_corpus, out, master_seed=3, difficulty="easy")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_proxy_weights(tmp_path_factory):
    from polybench.pretrain import ProxyPretrainConfig, proxy_pretrain

    cfg = ProxyPretrainConfig(n_per_class=2, epochs=1, image_size=32, holdout=0.0)
    return proxy_pretrain(cfg, tmp_path_factory.mktemp("weights") / "proxy.safetensors")


_ACCEPTANCE = pytest.StashKey[list]()


class _Criterion:
    def __init__(self, lines, number):
        self.lines, self.number, self.done = lines, number, False

    def report(self, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {self.number}: {detail}"
        self.lines.append(line)
        print(line)
        self.done = True
        return ok


@pytest.fixture
def criterion(request):
    """``criterion(n)`` gives a recorder whose single PASS/FAIL line is echoed in the run summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])
    made = []

    def make(number):
        made.append(_Criterion(lines, number))
        return made[-1]

    yield make
    for c in made:
        if not c.done:
            c.report(False, "raised before reaching its checks")


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
