"""Shared fixtures: small tasks and deterministic generators."""

from __future__ import annotations

import numpy as np
import pytest

from starlab.nqm import QuadraticTask

from helpers import BENCH_HESSIAN


@pytest.fixture
def bench_task() -> QuadraticTask:
    """The 2-D quadratic used throughout the docs and experiments."""
    return QuadraticTask(
        dim=2,
        hessian=BENCH_HESSIAN.copy(),
        noise_cov=np.eye(2),
        init_mean=np.zeros(2),
        init_cov=10.0 * np.eye(2),
    )


@pytest.fixture
def gen() -> np.random.Generator:
    return np.random.default_rng(20260816)
