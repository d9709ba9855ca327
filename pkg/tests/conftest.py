import numpy as np
import pytest

from babn.attention import AttentionConfig
from babn.randvar import RngStream


@pytest.fixture
def rng():
    return RngStream(1234)


@pytest.fixture
def np_rng():
    return np.random.default_rng(7)


@pytest.fixture
def toy_config():
    # reference gradcheck model: L=2, d_model=8, H=2, seq=4
    return AttentionConfig(d_model=8, n_heads=2, n_layers=2, ffn_hidden=12, vocab_size=6,
                           max_seq_len=4, n_classes=6, pooling="tokens")


# one summary line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
