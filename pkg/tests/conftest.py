import numpy as np
import pytest

from stgload import dataio
from stgload.model import AttGcnModel, ModelConfig

TINY = dict(n_features=2, channels=4, n_blocks=2, depth=2, att_dim=4, gru_dim=4,
            gru_layers=2, emb_dim=4, dropout_p=0.0)


def central_diff(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Plain central-difference gradient of scalar ``f`` at ``x`` (test-side oracle)."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + h
        hi = f(x)
        x[i] = orig - h
        lo = f(x)
        x[i] = orig
        g[i] = (hi - lo) / (2 * h)
    return g


def tiny_model(seed: int = 0, n_nodes: int = 3, **overrides) -> AttGcnModel:
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(**{**TINY, "seed": seed, **overrides})
    return AttGcnModel(cfg, rng.standard_normal((n_nodes, cfg.emb_dim)))


@pytest.fixture(scope="session")
def small_synth():
    """Three clusters of two buildings, 400 hours."""
    return dataio.synth_generate(3, 2, 400, 0.05, seed=3)


# one line per acceptance criterion, echoed again in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
