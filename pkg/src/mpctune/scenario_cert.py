"""Scenario-based bound on the closed-loop violation probability.

After tuning on M drawn scenarios with k of them ending up as support (the
ones the selection loop actually trained on), the probability that a fresh
scenario violates the constraints is bounded by epsilon(k) with confidence
1 - beta, provided the tuned parameter is feasible on every training
scenario.  The bound is the classic inversion

    1 - epsilon = (beta / (M * C(M, k)))^(1 / (M - k)),

evaluated in the log domain so it stays exact for the tiny beta values
(1e-6 and below) this is meant for.
"""

import math
from dataclasses import dataclass
from datetime import datetime, timezone

from .errors import DimensionMismatch, TrainingSetViolation


def epsilon_of_k(k, M, beta):
    """Violation-probability bound for k support scenarios out of M."""
    if not isinstance(M, (int,)) or M < 1:
        raise DimensionMismatch(f"M must be a positive integer, got {M!r}")
    if not isinstance(k, (int,)) or k < 0 or k > M:
        raise DimensionMismatch(f"k must be an integer in [0, {M}], got {k!r}")
    if not (0.0 < beta < 1.0):
        raise DimensionMismatch(f"beta must lie in (0, 1), got {beta!r}")
    if k == M:
        return 1.0
    log_binom = math.lgamma(M + 1) - math.lgamma(k + 1) - math.lgamma(M - k + 1)
    log_rhs = (math.log(beta) - math.log(M) - log_binom) / (M - k)
    return -math.expm1(log_rhs)


@dataclass(frozen=True)
class Certificate:
    """Result of a certification run, serializable as a small text file."""

    M: int
    k_star: int
    beta: float
    epsilon: float
    dataset_digest: str
    generated: str

    def to_text(self):
        lines = [
            "closed-loop scenario certificate",
            f"generated: {self.generated}",
            f"dataset sha256: {self.dataset_digest}",
            f"scenarios (M): {self.M}",
            f"support size (k*): {self.k_star}",
            f"confidence parameter (beta): {self.beta!r}",
            f"violation probability bound (epsilon): {self.epsilon!r}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        fields = {}
        for line in text.strip().splitlines()[1:]:
            key, _, value = line.partition(":")
            fields[key.strip()] = value.strip()
        return cls(M=int(fields["scenarios (M)"]),
                   k_star=int(fields["support size (k*)"]),
                   beta=float(fields["confidence parameter (beta)"]),
                   epsilon=float(fields["violation probability bound (epsilon)"]),
                   dataset_digest=fields["dataset sha256"],
                   generated=fields["generated"])


def certify(k_star, M, beta, feasible_on_training, dataset_digest="", when=None):
    """Build a certificate; refuses if training feasibility was not confirmed.

    The bound is meaningless when the tuned parameter still violates one of
    its own training scenarios, so that case raises instead of producing a
    misleading number.
    """
    if not feasible_on_training:
        raise TrainingSetViolation(
            "tuned parameter violates a training scenario; no certificate")
    eps = epsilon_of_k(k_star, M, beta)
    generated = when if when is not None \
        else datetime.now(timezone.utc).isoformat(timespec="seconds")
    return Certificate(M=int(M), k_star=int(k_star), beta=float(beta),
                       epsilon=eps, dataset_digest=dataset_digest,
                       generated=generated)


def validate_empirical(certificate, violated_flags):
    """Compare the bound against fresh out-of-sample rollouts."""
    flags = [bool(v) for v in violated_flags]
    count = sum(flags)
    rate = count / len(flags) if flags else 0.0
    return {
        "fresh_scenarios": len(flags),
        "violations": count,
        "violation_rate": rate,
        "epsilon": certificate.epsilon,
        "within_bound": rate <= certificate.epsilon,
    }
