import numpy as np
import pytest

from lmcompress.data import Vocabulary
from lmcompress.model import ModelConfig, init_model


def tiny_vocab(n):
    return Vocabulary(["<unk>", "<eos>"] + [f"w{i}" for i in range(n - 2)])


def tiny_model(kind="dense-lstm", seed=0, n_vocab=7, k=4, embed=4, layers=2, scale=2.0, **kw):
    if kind == "lowrank-lstm":
        kw.setdefault("rank", 2)
    if kind == "tt-lstm":
        kw.setdefault("tt_dims", 2)
        kw.setdefault("tt_ranks", 2)
    cfg = ModelConfig(layers, k, embed, n_vocab, layer_kind=kind, init_scale=scale, **kw)
    return init_model(cfg, tiny_vocab(n_vocab), seed=seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def record(criterion, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
