import time

import numpy as np
import pytest

from mpctune import DimensionMismatch, TrainingSetViolation
from mpctune.scenario_cert import (
    Certificate,
    certify,
    epsilon_of_k,
    validate_empirical,
)

# frozen with 50-digit interval arithmetic, rounded to double
FROZEN = [
    (2, 500, 1e-6, 0.06179190543223543),
    (2, 1000, 1e-6, 0.03334387182328059),
    (3, 1000, 1e-6, 0.038990594588033858),
    (0, 100, 0.01, 0.087989160644090258),
    (0, 100, 1e-6, 0.16823622889732899),
    (1, 100, 1e-6, 0.20751710164608268),
    (3, 100, 1e-6, 0.26915087431287982),
    (5, 100, 1e-6, 0.31942404681363016),
    (0, 6, 1e-6, 0.92581636244095977),
]


def test_frozen_reference_values():
    for k, M, beta, expect in FROZEN:
        got = epsilon_of_k(k, M, beta)
        assert got == pytest.approx(expect, abs=1e-13), (k, M, beta)


def test_full_support_gives_trivial_bound():
    assert epsilon_of_k(7, 7, 1e-6) == 1.0
    assert epsilon_of_k(100, 100, 0.5) == 1.0


def test_monotonicity_and_range():
    eps_k = [epsilon_of_k(k, 200, 1e-6) for k in range(0, 201)]
    assert all(0.0 < e <= 1.0 for e in eps_k)
    assert all(b > a for a, b in zip(eps_k, eps_k[1:]))
    # more scenarios tighten the bound
    eps_m = [epsilon_of_k(3, M, 1e-6) for M in (50, 100, 500, 2000, 10000)]
    assert all(b < a for a, b in zip(eps_m, eps_m[1:]))
    # more confidence demanded (smaller beta) loosens it
    eps_b = [epsilon_of_k(3, 100, b) for b in (1e-2, 1e-4, 1e-6, 1e-9)]
    assert all(b > a for a, b in zip(eps_b, eps_b[1:]))


def test_input_validation():
    with pytest.raises(DimensionMismatch):
        epsilon_of_k(-1, 10, 1e-6)
    with pytest.raises(DimensionMismatch):
        epsilon_of_k(11, 10, 1e-6)
    with pytest.raises(DimensionMismatch):
        epsilon_of_k(0, 0, 1e-6)
    with pytest.raises(DimensionMismatch):
        epsilon_of_k(0, 10, 0.0)
    with pytest.raises(DimensionMismatch):
        epsilon_of_k(0, 10, 1.0)
    with pytest.raises(DimensionMismatch):
        epsilon_of_k(2.0, 10, 0.5)


def test_evaluation_is_fast():
    start = time.perf_counter()
    for _ in range(2000):
        epsilon_of_k(17, 100000, 1e-9)
    elapsed = time.perf_counter() - start
    assert elapsed < 1.0


def test_certificate_round_trip():
    cert = certify(2, 1000, 1e-6, feasible_on_training=True,
                   dataset_digest="ab" * 32, when="2024-01-01T00:00:00+00:00")
    assert cert.epsilon == pytest.approx(0.03334387182328059, abs=1e-13)
    back = Certificate.from_text(cert.to_text())
    assert back == cert


def test_certify_requires_training_feasibility():
    with pytest.raises(TrainingSetViolation):
        certify(2, 1000, 1e-6, feasible_on_training=False)


def test_validate_empirical():
    cert = certify(2, 1000, 1e-6, feasible_on_training=True)
    report = validate_empirical(cert, [False] * 97 + [True] * 3)
    assert report["fresh_scenarios"] == 100
    assert report["violations"] == 3
    assert report["violation_rate"] == pytest.approx(0.03)
    assert report["within_bound"]
    report_bad = validate_empirical(cert, [True] * 10)
    assert not report_bad["within_bound"]
