import numpy as np
import pytest

from acnn import corpus

# the two synthetic "languages" used by the protocol and attention checks
SPEC_A = dict(language="A", cue_position_s=0.5, timbre_hz=500.0, seed=1)
SPEC_B = dict(language="B", cue_position_s=3.0, timbre_hz=2500.0, seed=2)


def numeric_grad(f, x, eps=1e-6):
    """Central finite differences of scalar f with respect to array x (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        up = f()
        x[i] = old - eps
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * eps)
    return g


def rel_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_features(labels, T=60, seed=0, burst=(20, 26), rows=26, base=-6.0):
    """Log-energy-like matrices; class-1 samples carry a high-energy burst."""
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    X = base + 0.3 * rng.normal(size=(len(labels), rows, T))
    X[labels == 1, :, burst[0] : burst[1]] += 4.0
    return X


def _build(tmp_path_factory, name, fields):
    out = tmp_path_factory.mktemp(name)
    records = corpus.generate_synthetic(corpus.SyntheticSpec(**fields), out)
    return records, corpus.featurize_records(records)


@pytest.fixture(scope="session")
def corpus_a(tmp_path_factory):
    return _build(tmp_path_factory, "synA", SPEC_A)


@pytest.fixture(scope="session")
def corpus_b(tmp_path_factory):
    return _build(tmp_path_factory, "synB", SPEC_B)


ACCEPTANCE_LINES = []


def record_criterion(name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
