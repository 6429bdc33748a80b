"""
Noise mechanisms and closed-form (epsilon, delta) accounting for sharing clipped features.

All asymptotic constants of the underlying bounds are fixed to 1 and the sampling rate to q = 1,
so the reported epsilons are budget indices: consistent when compared with each other, not tight
absolute guarantees. Logarithms are natural.
"""
import logging
import math
import sys
from dataclasses import dataclass

from fedfed_sim.errors import DomainError

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)
logger.addHandler(logging.StreamHandler(sys.stderr))

GAUSSIAN = "gaussian"
LAPLACE = "laplace"
FEDFED = "fedfed"
RAW = "raw"


@dataclass(frozen=True)
class NoiseMechanism:
    kind: str
    scale: float

    def __post_init__(self):
        if self.kind not in (GAUSSIAN, LAPLACE):
            raise DomainError(f"Unknown noise mechanism: {self.kind}")
        if not self.scale > 0:
            raise DomainError(f"Noise scale must be > 0, got {self.scale}")

    @classmethod
    def gaussian(cls, sigma):
        return cls(GAUSSIAN, sigma)

    @classmethod
    def laplace(cls, scale):
        return cls(LAPLACE, scale)

    @classmethod
    def with_variance(cls, kind, variance):
        """
        Mechanism of the given kind whose per-coordinate variance equals `variance`
        (Laplace variance is 2b^2)
        """
        if kind == GAUSSIAN:
            return cls.gaussian(math.sqrt(variance))
        return cls(kind, math.sqrt(variance / 2.0))

    @property
    def variance(self):
        if self.kind == GAUSSIAN:
            return self.scale**2
        return 2.0 * self.scale**2


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise DomainError(f"epsilon must be > 0, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise DomainError(f"delta must lie in (0, 1), got {self.delta}")


@dataclass(frozen=True)
class CompositionInput:
    """
    k clients each sharing clipped features under the same (rho, R, delta, sigma_s)
    """

    k: int
    delta: float
    hat_delta: float
    rho: float
    rounds: int
    sigma_s: float

    def __post_init__(self):
        if self.k < 1:
            raise DomainError(f"k must be >= 1, got {self.k}")
        if not 0 < self.hat_delta < 1:
            raise DomainError(f"hat_delta must lie in (0, 1), got {self.hat_delta}")
        _check_common(self.rho, self.rounds, self.delta)
        if not self.sigma_s > 0:
            raise DomainError(f"sigma_s must be > 0, got {self.sigma_s}")
        if self.hat_delta + self.k * self.delta >= 1:
            logger.warning(
                f"hat_delta + k * delta = {self.hat_delta + self.k * self.delta:.4g} >= 1; "
                "the composed delta is vacuous"
            )

    @property
    def epsilon(self):
        return epsilon_single(self.rho, self.rounds, self.delta, self.sigma_s)


def _check_common(rho, rounds, delta):
    if not 0 < rho < 1:
        raise DomainError(f"rho must lie in (0, 1), got {rho}")
    if rounds < 1:
        raise DomainError(f"R must be >= 1, got {rounds}")
    if not 0 < delta < 1:
        raise DomainError(f"delta must lie in (0, 1), got {delta}")


def sample_noise(mech, dim, rng):
    """
    i.i.d. noise of shape `dim` (int or tuple) drawn from the mechanism
    :param NoiseMechanism mech: distribution
    :param numpy.random.Generator rng: stream; identical streams give identical samples
    """
    if isinstance(dim, int) and dim < 1:
        raise DomainError(f"dim must be >= 1, got {dim}")
    if mech.kind == GAUSSIAN:
        return rng.normal(0.0, mech.scale, size=dim)
    return rng.laplace(0.0, mech.scale, size=dim)


def epsilon_single(rho, rounds, delta, sigma_s, mode=FEDFED, sigma_r=None):
    """
    Per-client budget index.
    fedfed: rho * sqrt(R ln(1/delta)) / sigma_s
    raw:    sqrt(R ln(1/delta)) * (rho / sigma_s + (1 - rho) / sigma_r); sigma_r = inf reduces to fedfed
    """
    _check_common(rho, rounds, delta)
    if not sigma_s > 0:
        raise DomainError(f"sigma_s must be > 0, got {sigma_s}")
    root = math.sqrt(rounds * math.log(1.0 / delta))
    if mode == FEDFED:
        return rho * root / sigma_s
    if mode == RAW:
        if sigma_r is None or not sigma_r > 0:
            raise DomainError(f"raw mode needs sigma_r > 0, got {sigma_r}")
        return root * (rho / sigma_s + (1.0 - rho) / sigma_r)
    raise DomainError(f"Unknown accounting mode: {mode}")


def dpsgd_sigma(epsilon, delta, steps, sampling_rate=1.0):
    """
    Noise multiplier rule sigma = q * sqrt(T ln(1/delta)) / epsilon
    """
    if not epsilon > 0:
        raise DomainError(f"epsilon must be > 0, got {epsilon}")
    if not 0 < delta < 1:
        raise DomainError(f"delta must lie in (0, 1), got {delta}")
    if steps < 1:
        raise DomainError(f"steps must be >= 1, got {steps}")
    if not 0 < sampling_rate <= 1:
        raise DomainError(f"sampling_rate must lie in (0, 1], got {sampling_rate}")
    return sampling_rate * math.sqrt(steps * math.log(1.0 / delta)) / epsilon


def required_sigma_pair(epsilon, delta, rounds, rho):
    """
    Noise needed for the same (epsilon, delta) when sharing clipped features (sensitivity rho*||x||)
    versus raw features (sensitivity ||x||). Returns (sigma_fedfed, sigma_raw); their ratio is rho
    """
    _check_common(rho, rounds, delta)
    sigma_raw = dpsgd_sigma(epsilon, delta, rounds)
    return rho * sigma_raw, sigma_raw


def composition_branches(epsilon, k, hat_delta):
    """
    The three candidate bounds of the k-fold composition theorem, in order
    """
    drift = math.tanh(epsilon / 2.0) * epsilon * k
    return (
        k * epsilon,
        drift + epsilon * math.sqrt(2.0 * k * math.log(math.e + math.sqrt(k * epsilon**2 / hat_delta))),
        drift + epsilon * math.sqrt(2.0 * k * math.log(1.0 / hat_delta)),
    )


def compose_epsilon(inp):
    """
    Returns (epsilon_hat, delta_total) for k clients
    :param CompositionInput inp: per-client parameters
    """
    epsilon = inp.epsilon
    epsilon_hat = min(composition_branches(epsilon, inp.k, inp.hat_delta))
    delta_total = 1.0 - (1.0 - inp.hat_delta) * (1.0 - inp.delta) ** inp.k
    return epsilon_hat, delta_total


def residual_norm_bounds(x_norm, rho):
    """
    (lower, upper) bounds on ||x - x_s|| when ||x_s|| <= rho * ||x||
    """
    if not 0 < rho < 1:
        raise DomainError(f"rho must lie in (0, 1), got {rho}")
    return (1.0 - rho) * x_norm, (1.0 + rho) * x_norm


def epsilon_sweep(noise_variances, rho, rounds, delta):
    """
    Budget index for each sharing-noise variance sigma_s^2
    """
    return [
        {"sigma_s_sq": float(v), "epsilon": epsilon_single(rho, rounds, delta, math.sqrt(v))}
        for v in noise_variances
    ]


def privacy_report(rho, rounds, delta, sigma_s, k, hat_delta):
    budget = PrivacyBudget(epsilon_single(rho, rounds, delta, sigma_s), delta)
    epsilon = budget.epsilon
    epsilon_hat, delta_total = compose_epsilon(
        CompositionInput(k=k, delta=delta, hat_delta=hat_delta, rho=rho, rounds=rounds, sigma_s=sigma_s)
    )
    sigma_fedfed, sigma_raw = required_sigma_pair(epsilon, delta, rounds, rho)
    return {
        "epsilon_single": epsilon,
        "epsilon_hat": epsilon_hat,
        "delta_total": delta_total,
        "sigma_pair": {"fedfed": sigma_fedfed, "raw": sigma_raw},
    }
