"""
Karras-style noise schedule and the consistency-model scaling functions.

sigma_at(t) walks from sigma_max (t=0) down to sigma_min (t=T-1); c_in
restricts the range of noised boxes before they reach the decoder, and
c_skip/c_out blend the noisy input with the network output so that the
consistency function is the identity at sigma_min.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Tuple, Union

import numpy as np
import torch

from src.errors import DomainError

logger = logging.getLogger(__name__)

PARAMETERIZATIONS = ('consistency', 'edm')

Sigma = Union[float, torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    """The (sigma_min, sigma_max, rho, T, sigma_data) schedule family"""

    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    total_steps: int = 40
    sigma_data: float = 0.5
    parameterization: str = 'consistency'

    def __post_init__(self):
        if not (0 < self.sigma_min < self.sigma_max):
            raise DomainError(
                f"need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}")
        if self.rho <= 0:
            raise DomainError(f"rho must be positive, got {self.rho}")
        if int(self.total_steps) != self.total_steps or self.total_steps < 2:
            raise DomainError(f"total_steps must be an integer >= 2, got {self.total_steps}")
        if self.sigma_data <= 0:
            raise DomainError(f"sigma_data must be positive, got {self.sigma_data}")
        if self.parameterization not in PARAMETERIZATIONS:
            raise DomainError(
                f"unknown parameterization '{self.parameterization}', "
                f"expected one of {PARAMETERIZATIONS}")
        if self.parameterization == 'edm':
            logger.warning("EDM scalings do not make f_theta the identity at sigma_min")

    @property
    def T(self) -> int:
        return int(self.total_steps)

    def sigma_at(self, t: float) -> float:
        """Noise level at (possibly fractional) timestep t in [0, T-1]"""
        last = self.T - 1
        if not (0 <= t <= last):
            raise DomainError(f"timestep {t} outside [0, {last}]")
        # Closed-form endpoints; the power below does not round-trip exactly.
        if t == 0:
            return float(self.sigma_max)
        if t == last:
            return float(self.sigma_min)
        inv_rho = 1.0 / self.rho
        max_inv_rho = self.sigma_max ** inv_rho
        min_inv_rho = self.sigma_min ** inv_rho
        return (max_inv_rho + t / last * (min_inv_rho - max_inv_rho)) ** self.rho

    def sigmas(self) -> np.ndarray:
        """All integer-step noise levels, shape (T,)"""
        return np.array([self.sigma_at(t) for t in range(self.T)], dtype=np.float64)

    def c_in(self, sigma: Sigma) -> Sigma:
        """Input scaling 1 / sqrt(sigma^2 + sigma_data^2)"""
        if _any_below(sigma, 0.0):
            raise DomainError(f"c_in needs sigma >= 0, got {sigma}")
        if isinstance(sigma, torch.Tensor):
            return torch.rsqrt(sigma ** 2 + self.sigma_data ** 2)
        return 1.0 / math.sqrt(sigma ** 2 + self.sigma_data ** 2)

    def c_skip_out(self, sigma: Sigma) -> Tuple[Sigma, Sigma]:
        """Skip and output scalings; (1, 0) exactly at sigma_min"""
        if _any_below(sigma, self.sigma_min):
            raise DomainError(f"c_skip/c_out need sigma >= sigma_min, got {sigma}")
        sd2 = self.sigma_data ** 2
        if isinstance(sigma, torch.Tensor):
            sqrt = torch.sqrt
        else:
            sqrt = math.sqrt
        if self.parameterization == 'edm':
            c_skip = sd2 / (sigma ** 2 + sd2)
            c_out = sigma * self.sigma_data / sqrt(sigma ** 2 + sd2)
            return c_skip, c_out
        shifted = sigma - self.sigma_min
        c_skip = sd2 / (shifted ** 2 + sd2)
        c_out = self.sigma_data * shifted / sqrt(sigma ** 2 + sd2)
        return c_skip, c_out

    def table(self) -> List[Dict[str, float]]:
        """One row per integer timestep: t, sigma, c_in, c_skip, c_out"""
        rows = []
        for t in range(self.T):
            sigma = self.sigma_at(t)
            c_skip, c_out = self.c_skip_out(sigma)
            rows.append({
                't': t,
                'sigma': sigma,
                'c_in': self.c_in(sigma),
                'c_skip': c_skip,
                'c_out': c_out,
            })
        return rows


def _any_below(sigma: Sigma, bound: float) -> bool:
    if isinstance(sigma, torch.Tensor):
        # float32 storage of the bound itself must not trip the check
        return bool((sigma.double() < torch.tensor(bound, dtype=sigma.dtype).double()).any())
    return sigma < bound
