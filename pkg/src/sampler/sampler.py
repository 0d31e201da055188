"""
Few-step inference: pure Gaussian boxes are decoded, renewed, stepped and
supplemented n_ss times. The last decode, whole, goes through the score
floor and NMS; renewal only decides which boxes carry over between steps.
"""

import logging
import time
import zlib
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from src.corruption.proposals import (ProposalSet, box_renewal, gaussian_rows, make_generator,
                                      supplement_proposals)
from src.decoder.consistency import Denoiser, DetectionOutput
from src.errors import DomainError
from src.geometry.boxes import Box, Detection
from src.geometry.nms import nms
from src.schedule.noise_schedule import NoiseSchedule
from src.trainer.denoiser import euler_denoise_step

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SamplerConfig:
    """n_ss steps over n_p proposals; B_th renewal and N_th NMS thresholds"""

    n_ss: int = 4
    n_p: int = 500
    B_th: float = 0.98
    N_th: float = 0.64
    seed: int = 0
    score_floor: float = 0.05

    def validate(self, schedule: NoiseSchedule):
        if not (1 <= self.n_ss <= schedule.T):
            raise DomainError(f"n_ss must be in [1, {schedule.T}], got {self.n_ss}")
        if self.n_p < 1:
            raise DomainError(f"n_p must be >= 1, got {self.n_p}")
        if not (0.0 <= self.B_th <= 1.0):
            raise DomainError(f"B_th must be in [0, 1], got {self.B_th}")
        if not (0.0 < self.N_th <= 1.0):
            raise DomainError(f"N_th must be in (0, 1], got {self.N_th}")

    @classmethod
    def from_settings(cls, settings, **overrides) -> 'SamplerConfig':
        s = settings.sampler
        config = cls(n_ss=s.n_ss, n_p=s.n_p, B_th=s.B_th, N_th=s.N_th,
                     seed=settings.seed, score_floor=s.score_floor)
        return replace(config, **{k: v for k, v in overrides.items() if v is not None})


@dataclass
class SamplingTrace:
    """What happened inside one sample() call"""

    sigmas: List[float] = field(default_factory=list)
    proposal_counts: List[int] = field(default_factory=list)
    survivors: List[int] = field(default_factory=list)
    decoder_calls: int = 0


@dataclass
class BatchResult:
    detections: List[List[Detection]]
    seconds: List[float]
    traces: List[SamplingTrace]


def sigma_ladder(schedule: NoiseSchedule, n_ss: int) -> List[Tuple[float, float]]:
    """
    (sigma_t, sigma_next) for t = 0, T/n_ss, 2T/n_ss, ...; a step whose
    next timestep falls past T-1 targets sigma_min.
    """
    T = schedule.T
    ladder = []
    for k in range(n_ss):
        t = k * T / n_ss
        t_next = (k + 1) * T / n_ss
        sigma_next = schedule.sigma_at(t_next) if t_next <= T - 1 else schedule.sigma_min
        ladder.append((schedule.sigma_at(t), sigma_next))
    return ladder


def image_seed(seed: int, image_id) -> int:
    """Per-image seed independent of batch composition"""
    return int(seed) ^ zlib.crc32(str(image_id).encode('utf-8'))


def _model_device(model) -> torch.device:
    if isinstance(model, torch.nn.Module):
        param = next(model.parameters(), None)
        if param is not None:
            return param.device
    return torch.device('cpu')


def to_detections(output: DetectionOutput, score_floor: float) -> List[Detection]:
    """Best class per row; rows under the floor are dropped"""
    if output.x_cls.shape[0] == 0:
        return []
    scores, labels = output.scores.max(dim=-1)
    boxes = output.x_box.detach().double().cpu().tolist()
    detections = []
    for box, score, label in zip(boxes, scores.tolist(), labels.tolist()):
        if score < score_floor:
            continue
        detections.append(Detection(Box(*box), int(label), float(score)))
    return detections


@torch.no_grad()
def sample_with_trace(image, model: Denoiser, schedule: Optional[NoiseSchedule],
                      config: SamplerConfig) -> Tuple[List[Detection], SamplingTrace]:
    schedule = schedule or model.schedule
    config.validate(schedule)
    if isinstance(model, torch.nn.Module):
        model.eval()

    device = _model_device(model)
    generator = make_generator(config.seed)
    trace = SamplingTrace()

    features = model.extract_features(image)
    x = ProposalSet(gaussian_rows((config.n_p, 4), generator).to(device) * schedule.sigma_max,
                    sigma=schedule.sigma_max)
    output = None
    for sigma_t, sigma_next in sigma_ladder(schedule, config.n_ss):
        x = replace(x, sigma=sigma_t)
        trace.sigmas.append(sigma_t)
        trace.proposal_counts.append(x.count)

        output = model.f_theta(features, x)
        trace.decoder_calls += 1

        x_b, x_0, n_r = box_renewal(output, ProposalSet(output.x_b, sigma_t),
                                    ProposalSet(output.x_0, sigma_t), config.B_th)
        trace.survivors.append(n_r)

        stepped = euler_denoise_step(x_b.boxes, x_0.boxes, sigma_t, sigma_next)
        x = supplement_proposals(ProposalSet(stepped, sigma_next), config.n_p, sigma_next, generator)

    detections = nms(to_detections(output, config.score_floor), config.N_th)
    logger.debug(f"Sampled {len(detections)} detections in {trace.decoder_calls} decoder calls")
    return detections, trace


def sample(image, model: Denoiser, schedule: Optional[NoiseSchedule] = None,
           config: SamplerConfig = SamplerConfig()) -> List[Detection]:
    """Detections for one H x W x 3 image"""
    return sample_with_trace(image, model, schedule, config)[0]


def sample_batch(images: Sequence[np.ndarray], model: Denoiser, schedule: Optional[NoiseSchedule] = None,
                 config: SamplerConfig = SamplerConfig(),
                 image_ids: Optional[Sequence] = None) -> BatchResult:
    """Each image sampled on its own derived seed and timed"""
    if not images:
        raise DomainError("sample_batch needs at least one image")
    image_ids = list(image_ids) if image_ids is not None else list(range(len(images)))
    if len(image_ids) != len(images):
        raise DomainError(f"{len(image_ids)} image ids for {len(images)} images")

    result = BatchResult(detections=[], seconds=[], traces=[])
    for image, image_id in zip(images, image_ids):
        start = time.perf_counter()
        detections, trace = sample_with_trace(image, model, schedule,
                                              replace(config, seed=image_seed(config.seed, image_id)))
        result.seconds.append(time.perf_counter() - start)
        result.detections.append(detections)
        result.traces.append(trace)
    return result
