import numpy as np
import pytest

from stsmesh import bodymodel as bm
from stsmesh import synth


@pytest.fixture(scope="session")
def model():
    return bm.build_toy_model(seed=0)


@pytest.fixture(scope="session")
def bank(model):
    return synth.build_bank(model, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_params(model, rng, scale=0.3, beta_sigma=0.5):
    """Unconstrained random parameters for gradient and oracle checks."""
    p = bm.FullParams.rest(model)
    return p.copy(theta_global=rng.normal(0, scale, 3),
                  theta_body=rng.normal(0, scale, p.theta_body.shape),
                  hand_left=rng.normal(0, 1.0, model.hand_pca_dim),
                  hand_right=rng.normal(0, 1.0, model.hand_pca_dim),
                  psi_face=rng.normal(0, scale, model.n_expression + 3),
                  beta=rng.normal(0, beta_sigma, model.n_shape))


ACCEPTANCE = pytest.StashKey()


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion for the run summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE, {})

    def report(number, ok, detail):
        lines[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(lines[number])
        assert ok, detail

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
