"""
Euler denoiser step with an optional distillation teacher.

Without a teacher the clean padded set x_s is used as the x_0 estimate,
which makes the Euler step land exactly on the same noise trajectory.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Union

import torch

from src.decoder.features import ImageFeatures
from src.errors import DomainError

logger = logging.getLogger(__name__)

Sigma = Union[float, torch.Tensor]


@dataclass
class TeacherContext:
    """What a teacher may look at besides (x_t, sigma_t)"""

    features: Optional[ImageFeatures]
    x_s: torch.Tensor


TeacherFn = Callable[[torch.Tensor, torch.Tensor, TeacherContext], torch.Tensor]


@dataclass
class TeacherHandle:
    """Optional pretrained denoiser ddm(x_t, sigma_t) -> x_0 estimate"""

    ddm: Optional[TeacherFn] = None
    name: str = 'none'

    @property
    def present(self) -> bool:
        return self.ddm is not None


def ground_truth_teacher() -> TeacherHandle:
    """Reference oracle: always answers with the clean padded set"""
    return TeacherHandle(ddm=lambda x_t, sigma_t, context: context.x_s, name='ground-truth')


def _expand(sigma: Sigma, like: torch.Tensor) -> Sigma:
    if isinstance(sigma, torch.Tensor) and sigma.dim() > 0:
        return sigma.reshape(-1, *([1] * (like.dim() - 1)))
    return sigma


def euler_denoise_step(x_t: torch.Tensor, x_0: torch.Tensor, sigma_t: Sigma,
                       sigma_tm1: Sigma) -> torch.Tensor:
    """x_t + ((x_t - x_0) / sigma_t) * (sigma_tm1 - sigma_t)"""
    if bool(torch.as_tensor(sigma_t).le(0).any()):
        raise DomainError(f"Euler step needs sigma_t > 0, got {sigma_t}")
    sigma_t = _expand(sigma_t, x_t)
    sigma_tm1 = _expand(sigma_tm1, x_t)
    gradient = (x_t - x_0) / sigma_t
    return x_t + gradient * (sigma_tm1 - sigma_t)


def denoise(x_t: torch.Tensor, sigma_t: Sigma, sigma_tm1: Sigma, x_s: torch.Tensor,
            teacher: Optional[TeacherHandle] = None,
            features: Optional[ImageFeatures] = None) -> torch.Tensor:
    """Predict x_{t-1} from x_t; the teacher supplies x_0 when present"""
    if teacher is not None and teacher.present:
        with torch.no_grad():
            sigma = torch.as_tensor(sigma_t, dtype=x_t.dtype, device=x_t.device)
            x_0 = teacher.ddm(x_t, sigma, TeacherContext(features=features, x_s=x_s))
    else:
        x_0 = x_s
    return euler_denoise_step(x_t, x_0, sigma_t, sigma_tm1)
