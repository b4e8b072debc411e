from pathlib import Path

import numpy as np
import pytest

from distilbench.objectives import resplit_heads
from distilbench.tensor import Tensor
from distilbench.transformer import ForwardTrace, ModelConfig, init_parameters

DATA = Path(__file__).parent / "data"

TOY_TEACHER = ModelConfig(num_layers=2, num_heads=2, hidden_size=16, ff_size=32, vocab_size=13,
                          max_seq_len=8)
TOY_STUDENT = ModelConfig(num_layers=1, num_heads=2, hidden_size=8, ff_size=16, vocab_size=13,
                          max_seq_len=8)


def perturb(model, rng, scale):
    """Spread weights away from the tiny init so gradients are not vanishingly small."""
    for name, p in model.params.items():
        p.data += scale * rng.standard_normal(p.shape)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_teacher():
    return perturb(init_parameters(TOY_TEACHER, 1), np.random.default_rng(11), 0.3)


@pytest.fixture
def toy_student():
    return perturb(init_parameters(TOY_STUDENT, 2), np.random.default_rng(12), 0.3)


@pytest.fixture
def toy_tokens():
    return np.array([[2, 5, 7, 9, 11, 3], [2, 6, 6, 8, 3, 0]])


@pytest.fixture
def toy_mask():
    return np.array([[1, 1, 1, 1, 1, 1], [1, 1, 1, 1, 1, 0]])


def random_orthogonal(rng, n):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def rotate_student(trace, ar, rotations):
    """Copy of ``trace`` whose relation heads are right-multiplied by orthogonal matrices."""
    out = []
    for kind, w in zip("QKV", rotations):
        per = resplit_heads(trace.qkv(kind, trace.num_layers), ar).data
        rotated = np.einsum("...ane,aef->...anf", per, w)
        b, _, n, dr = rotated.shape
        merged = rotated.transpose(0, 2, 1, 3).reshape(b, n, ar * dr)
        heads = trace.config.num_heads
        out.append(Tensor(merged.reshape(b, n, heads, -1).transpose(0, 2, 1, 3)))
    hidden = trace.hidden_states
    return ForwardTrace(hidden, [out[0]], [out[1]], [out[2]], [], None, trace.mask, trace.config)


# -- acceptance reporting ------------------------------------------------------------

_CRITERIA: dict[str, tuple[int, str]] = {}
_OUTCOMES: dict[int, tuple[str, float, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            _CRITERIA[item.nodeid] = mark.args


def pytest_runtest_logreport(report):
    if report.nodeid not in _CRITERIA:
        return
    number, title = _CRITERIA[report.nodeid]
    if report.when == "call" or report.failed:
        status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        prev = _OUTCOMES.get(number)
        if prev is None or prev[0] == "PASS":
            _OUTCOMES[number] = (status, report.duration, title)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        status, seconds, title = _OUTCOMES[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {title}  ({seconds:.1f}s)")
