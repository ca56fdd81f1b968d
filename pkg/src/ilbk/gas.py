"""Physical parameters of the test-particle / background system.

Test particles of mass ``m`` collide inelastically (restitution ``eps``) with a
Maxwellian background of mass ``m1``, temperature ``theta1`` and bulk velocity
``u1``. Everything downstream consumes :class:`DerivedConstants`.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np


class InvalidParameterError(ValueError):
    """Raised when physical parameters violate their admissible ranges."""


def _as_velocity(u) -> np.ndarray:
    arr = np.asarray(u, dtype=float).reshape(-1)
    if arr.shape != (3,):
        raise InvalidParameterError(f"u1 must be a 3-vector, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class GasParameters:
    m: float = 1.0
    m1: float = 1.0
    eps: float = 1.0
    theta1: float = 1.0
    u1: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        u = _as_velocity(self.u1)
        object.__setattr__(self, "u1", tuple(float(x) for x in u))
        for name in ("m", "m1", "eps", "theta1"):
            val = getattr(self, name)
            if not (isinstance(val, (int, float, np.floating)) and math.isfinite(val)):
                raise InvalidParameterError(f"{name} must be a finite number, got {val!r}")
        if self.m <= 0:
            raise InvalidParameterError("m must be positive")
        if self.m1 <= 0:
            raise InvalidParameterError("m1 must be positive")
        if not 0 < self.eps <= 1:
            raise InvalidParameterError("eps must lie in (0,1]")
        if self.theta1 <= 0:
            raise InvalidParameterError("theta1 must be positive")
        if not np.all(np.isfinite(u)):
            raise InvalidParameterError("u1 must be finite")

    @property
    def u1_array(self) -> np.ndarray:
        return np.array(self.u1, dtype=float)

    def to_dict(self) -> dict:
        return {"m": self.m, "m1": self.m1, "eps": self.eps,
                "theta1": self.theta1, "u1": list(self.u1)}


@dataclass(frozen=True)
class DerivedConstants:
    """Constants shared by the kernel, the collision frequency and the equilibrium.

    Attributes
    ----------
    alpha : float
        Mass ratio ``m1 / (m + m1)``.
    beta : float
        Inelasticity ``(1 - eps) / 2``.
    gamma, gammabar : float
        Coefficients of ``[q.n] n`` in the inverse collision map.
    mu : float
        Kernel exponent shift, ``1 / (alpha (1 - beta)) - 2``. Negative when
        ``m < eps * m1``; ``1 + mu`` is always positive.
    theta_sharp : float
        Equilibrium temperature of the test particles.
    prefactor : float
        ``1 / (2 eps^2 gamma^2)`` in front of the gain kernel.
    """

    alpha: float
    beta: float
    gamma: float
    gammabar: float
    mu: float
    theta_sharp: float
    prefactor: float
    mu_negative_flag: bool = field(default=False)


def derive_constants(p: GasParameters) -> DerivedConstants:
    alpha = p.m1 / (p.m + p.m1)
    beta = (1.0 - p.eps) / 2.0
    a1b = alpha * (1.0 - beta)
    gamma = a1b / (1.0 - 2.0 * beta)
    gammabar = (1.0 - alpha) * (1.0 - beta) / (1.0 - 2.0 * beta)
    mu = (1.0 - 2.0 * a1b) / a1b
    theta_sharp = p.theta1 * (1.0 - alpha) * (1.0 - beta) / (1.0 - a1b)
    prefactor = 1.0 / (2.0 * p.eps**2 * gamma**2)
    flag = p.m < p.eps * p.m1

    if not (0 < alpha < 1 and 0 <= beta < 0.5 and 1 + mu > 0 and theta_sharp > 0):
        raise InvalidParameterError(f"derived constants out of range for {p}")
    lhs = p.m / (2.0 * theta_sharp)
    rhs = p.m1 * (1.0 + mu) / (2.0 * p.theta1)
    if abs(lhs - rhs) > 1e-12 * abs(rhs):
        raise InvalidParameterError(
            f"equilibrium exponent mismatch: {lhs!r} != {rhs!r}")
    if flag:
        warnings.warn(f"mu = {mu:.6g} < 0 (m < eps*m1); kernel bounds are not "
                      "guaranteed in this regime", RuntimeWarning, stacklevel=2)
    return DerivedConstants(alpha=alpha, beta=beta, gamma=gamma, gammabar=gammabar,
                            mu=mu, theta_sharp=theta_sharp, prefactor=prefactor,
                            mu_negative_flag=flag)


@dataclass(frozen=True)
class Maxwellian:
    mass: float
    theta: float
    u: tuple = (0.0, 0.0, 0.0)

    def __call__(self, v) -> np.ndarray:
        return maxwellian_eval(self, v)

    def log(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        d2 = np.sum((v - np.asarray(self.u)) ** 2, axis=-1)
        return 1.5 * math.log(self.mass / (2 * math.pi * self.theta)) - self.mass * d2 / (2 * self.theta)

    @property
    def width(self) -> float:
        """Standard deviation of each velocity component."""
        return math.sqrt(self.theta / self.mass)


def maxwellian_eval(mx: Maxwellian, v) -> np.ndarray:
    """Gaussian density of ``mx`` at velocities ``v`` (shape ``(..., 3)``)."""
    v = np.asarray(v, dtype=float)
    d2 = np.sum((v - np.asarray(mx.u)) ** 2, axis=-1)
    norm = (mx.mass / (2 * math.pi * mx.theta)) ** 1.5
    return norm * np.exp(-mx.mass * d2 / (2 * mx.theta))


def background_distribution(p: GasParameters) -> Maxwellian:
    return Maxwellian(p.m1, p.theta1, p.u1)


def equilibrium_distribution(p: GasParameters, consts: DerivedConstants | None = None) -> Maxwellian:
    """Unit-mass steady state: Maxwellian with the test mass at ``theta_sharp``."""
    consts = consts or derive_constants(p)
    return Maxwellian(p.m, consts.theta_sharp, p.u1)


def thermal_width(p: GasParameters, consts: DerivedConstants | None = None) -> float:
    """Larger of the background and equilibrium velocity standard deviations."""
    consts = consts or derive_constants(p)
    return math.sqrt(max(p.theta1 / p.m1, consts.theta_sharp / p.m))
