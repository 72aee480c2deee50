import numpy as np
import pytest

from ragged_attn.core import RaggedQKV, make_config
from ragged_attn.reference import naive_attention


def random_qkv(lengths, heads, head_dim, seed):
    rng = np.random.default_rng(seed)
    cu = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    shape = (int(cu[-1]), heads, head_dim)
    q, k, v = (rng.standard_normal(shape).astype(np.float32) for _ in range(3))
    return RaggedQKV(q, k, v, cu)


def oracle_error(qkv, out):
    """Max |out - naive| over every (image, head)."""
    cu = qkv.cu_seqlens
    err = 0.0
    for i in range(cu.size - 1):
        s, e = cu[i], cu[i + 1]
        if e == s:
            continue
        for h in range(qkv.shape[1]):
            ref = naive_attention(qkv.q[s:e, h], qkv.k[s:e, h], qkv.v[s:e, h])
            err = max(err, float(np.abs(out[s:e, h] - ref).max()))
    return err


@pytest.fixture(scope="session")
def desk():
    return make_config("desk")


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
