"""Closed-form control problem built around a single Dirichlet eigenmode.

With mu = 1, bounds [0, 0.5] and the driving mode sin(2 pi x1) sin(2 pi x2)
(n=2; sin(2 pi x) for n=1), choosing the data

    f   = lam^s * ubar - zbar,      u_d = (1 + mu lam^s) * ubar,

makes (ubar, pbar = -mu ubar, zbar = clamp(ubar)) satisfy the first-order
optimality system exactly, so discrete solutions can be compared against
known fields at every mesh resolution.  All sines here are unnormalized; the
orthonormal spectral basis lives only inside the spectral module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .control import BoxBounds, ProblemConfig
from .spectral import ConfigurationError

__all__ = ["ManufacturedProblem", "build_manufactured"]


@dataclass(frozen=True)
class ManufacturedProblem:
    s: float
    n: int
    mu: float
    bounds: BoxBounds
    lam: float
    lam_s: float
    u_exact: Callable
    p_exact: Callable
    z_exact: Callable
    forcing: Callable
    u_d: Callable

    def problem(self) -> ProblemConfig:
        return ProblemConfig(
            s=self.s,
            u_d=self.u_d,
            bounds=self.bounds,
            mu=self.mu,
            c=0.0,
            forcing=self.forcing,
        )


def build_manufactured(s: float, n: int = 2, mu: float = 1.0,
                       bounds: BoxBounds = BoxBounds(0.0, 0.5)) -> ManufacturedProblem:
    if not 0.0 < s < 1.0:
        raise ConfigurationError(f"s must be in (0,1), got {s}")
    if n == 2:
        lam = 8.0 * math.pi**2  # mode (2,2)

        def ubar(x1, x2):
            return np.sin(2.0 * math.pi * np.asarray(x1)) * np.sin(2.0 * math.pi * np.asarray(x2))

    elif n == 1:
        lam = 4.0 * math.pi**2  # mode k=2

        def ubar(x):
            return np.sin(2.0 * math.pi * np.asarray(x))

    else:
        raise ConfigurationError(f"dimension n must be 1 or 2, got {n}")

    lam_s = lam**s
    a, b = bounds.a, bounds.b

    def pbar(*x):
        return -mu * ubar(*x)

    def zbar(*x):
        return np.clip(-pbar(*x) / mu, a, b)

    def forcing(*x):
        return lam_s * ubar(*x) - zbar(*x)

    def u_d(*x):
        return (1.0 + mu * lam_s) * ubar(*x)

    return ManufacturedProblem(
        s=s, n=n, mu=mu, bounds=bounds, lam=lam, lam_s=lam_s,
        u_exact=ubar, p_exact=pbar, z_exact=zbar, forcing=forcing, u_d=u_d,
    )
