from pathlib import Path

import numpy as np
import pytest

from misalign.model import ChainState, ModelSpec, PriorSpec

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures() -> Path:
    return FIXTURES


def toy_spec(n=4, p=2, r=2, seed=0, y=True, priors=None, name="proposed") -> ModelSpec:
    """Small random model with a well-conditioned SPD coefficient covariance."""
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))]) if p else np.zeros((n, 0))
    Lam = rng.standard_normal((n, r))
    A = rng.standard_normal((r, r))
    vals, vecs = np.linalg.eigh(A @ A.T + np.eye(r))
    yv = rng.standard_normal(n) if y else None
    return ModelSpec(X, yv, Lam, vecs, vals, priors or PriorSpec(), name=name)


def toy_state(spec: ModelSpec, seed=1) -> ChainState:
    rng = np.random.default_rng(seed)
    return ChainState(
        beta=rng.standard_normal(spec.p),
        delta=rng.standard_normal(spec.r),
        mu=rng.standard_normal(spec.n),
        sigma2=0.7,
        sigma2_eta=1.3,
        phi=0.9,
    )


ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion():
    """Record one pass/fail line for an acceptance criterion, then assert it."""

    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail})"
        ACCEPTANCE.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
