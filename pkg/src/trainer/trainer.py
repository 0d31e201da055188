"""
Consistency training loop for the detector.

Each iteration samples a timestep index r per image, noises the padded GT
set to sigma_at(r), reaches sigma_at(r - 1) along the same trajectory with
an Euler step, decodes the first with the online parameters and the second
with the EMA target, and optimizes the sum of both detection losses.
"""

import logging
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch
from torch.optim import AdamW
from torch.optim.lr_scheduler import MultiStepLR
from tqdm.auto import tqdm

from src.config.settings import Settings
from src.corruption.proposals import add_noise, make_generator, pad_ground_truth, renewal_mask
from src.data.dataset import DetectionTorchDataset, TrainingBatch, make_loader
from src.data.records import DetectionDataset
from src.decoder.consistency import ConsistencyDetector, DetectionOutput, build_detector
from src.decoder.features import ImageFeatures
from src.errors import DatasetError, TrainingDivergedError
from src.objective.losses import LossBreakdown, consistency_loss
from src.output.metrics import MetricsWriter
from src.storage.checkpoints import CheckpointStore
from src.trainer.denoiser import TeacherHandle, denoise
from src.trainer.ema import ModelEMA

logger = logging.getLogger(__name__)


def seed_everything(seed: int):
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def sample_timesteps(batch_size: int, total_steps: int, generator: torch.Generator) -> torch.Tensor:
    """One r per image, uniform over {1, ..., T-1}"""
    return torch.randint(1, total_steps, (batch_size,), generator=generator, device=generator.device)


def renew_auxiliary(logits: torch.Tensor, x_tm1: torch.Tensor, num_gt: torch.Tensor,
                    threshold: float, sigma_tm1: torch.Tensor,
                    generator: torch.Generator) -> Tuple[torch.Tensor, int]:
    """
    Replace low-scoring auxiliary rows of x_{t_{r-1}} by fresh
    Gaussian * sigma_{t_{r-1}} rows. GT rows are never replaced.
    """
    batch, n, classes = logits.shape
    keep = renewal_mask(logits.detach().reshape(-1, classes), threshold).reshape(batch, n)
    auxiliary = torch.arange(n, device=x_tm1.device)[None, :] >= num_gt.to(x_tm1.device)[:, None]
    replace = auxiliary & ~keep.to(x_tm1.device)
    fresh = torch.randn(x_tm1.shape, generator=generator, dtype=x_tm1.dtype,
                        device=generator.device).to(x_tm1.device)
    fresh = fresh * sigma_tm1.reshape(-1, 1, 1)
    return torch.where(replace[..., None], fresh, x_tm1), int(replace.sum())


@dataclass
class TrainerState:
    """theta, theta^-, optimizer moments, iteration counter and the noise RNG"""

    model: ConsistencyDetector
    ema: ModelEMA
    optimizer: AdamW
    lr_scheduler: MultiStepLR
    generator: torch.Generator
    iteration: int = 0

    @property
    def lr(self) -> float:
        return float(self.optimizer.param_groups[0]['lr'])

    def blob(self, settings: Settings, categories: List[str]) -> Dict[str, Any]:
        return {
            'model': self.model.state_dict(),
            'ema': self.ema.state_dict(),
            'optimizer': self.optimizer.state_dict(),
            'lr_scheduler': self.lr_scheduler.state_dict(),
            'generator': self.generator.get_state(),
            'iteration': self.iteration,
            'settings': settings.echo(),
            'num_classes': self.model.num_classes,
            'categories': list(categories),
        }


def init_state(model: ConsistencyDetector, settings: Settings) -> TrainerState:
    cfg = settings.trainer
    optimizer = AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    return TrainerState(
        model=model,
        ema=ModelEMA(model, cfg.ema_decay),
        optimizer=optimizer,
        lr_scheduler=MultiStepLR(optimizer, milestones=cfg.lr_milestones, gamma=cfg.lr_gamma),
        generator=make_generator(settings.seed + 1),
    )


class ConsistencyTrainer:
    """Owns one TrainerState and advances it batch by batch"""

    def __init__(self, settings: Settings, num_classes: int, teacher: Optional[TeacherHandle] = None,
                 metrics: Optional[MetricsWriter] = None, device: str = 'cpu'):
        self.settings = settings
        self.device = torch.device(device)
        self.schedule = settings.schedule.to_schedule()
        self.weights = settings.loss.to_weights()
        self.teacher = teacher or TeacherHandle()
        self.metrics = metrics or MetricsWriter()

        seed_everything(settings.seed)
        model = build_detector(settings.model, self.schedule, num_classes).to(self.device)
        self.state = init_state(model, settings)
        if self.teacher.present:
            logger.info(f"🎓 Distilling from teacher '{self.teacher.name}'")

    @property
    def model(self) -> ConsistencyDetector:
        return self.state.model

    def _pad_batch(self, batch: TrainingBatch) -> Tuple[torch.Tensor, torch.Tensor, List[torch.Tensor]]:
        cfg = self.settings.trainer
        padded = [pad_ground_truth(boxes, cfg.n_tr, self.state.generator, cfg.padding_mode,
                                   self.schedule.sigma_min)
                  for boxes in batch.boxes]
        x_s = torch.stack([p.boxes for p in padded]).to(self.device)
        num_gt = torch.tensor([p.num_gt for p in padded], dtype=torch.long)
        return x_s, num_gt, [p.gt_index for p in padded]

    def _target_output(self, batch: TrainingBatch, features, x_tm1: torch.Tensor,
                       sigma_tm1: torch.Tensor) -> DetectionOutput:
        if not self.settings.trainer.ema_target:
            return self.model.f_theta(features, x_tm1, sigma_tm1)
        target = self.state.ema.module
        # the target sees features from its own backbone weights, so the image goes through twice
        with torch.no_grad():
            target_features = target.extract_features(batch.images)
            return target.f_theta(target_features, x_tm1, sigma_tm1)

    def compute_loss(self, batch: TrainingBatch) -> Tuple[LossBreakdown, torch.Tensor, torch.Tensor]:
        """Forward pass of one iteration; returns (loss, sigma_t, sigma_tm1)"""
        cfg = self.settings.trainer
        generator = self.state.generator

        r = sample_timesteps(len(batch), self.schedule.T, generator).tolist()
        sigma_t = torch.tensor([self.schedule.sigma_at(i) for i in r], device=self.device)
        sigma_tm1 = torch.tensor([self.schedule.sigma_at(i - 1) for i in r], device=self.device)

        x_s, num_gt, gt_index = self._pad_batch(batch)
        epsilon = torch.randn(x_s.shape, generator=generator, device=generator.device).to(self.device)
        x_t = add_noise(x_s, sigma_t, epsilon)

        features = self.model.extract_features(batch.images)
        teacher_features = None
        if self.teacher.present:
            teacher_features = ImageFeatures(features.maps.detach(), features.stride, features.image_sizes)
        x_tm1 = denoise(x_t, sigma_t, sigma_tm1, x_s, self.teacher, teacher_features)

        out_t = self.model.f_theta(features, x_t, sigma_t)
        if cfg.train_box_renewal:
            x_tm1, replaced = renew_auxiliary(out_t.x_cls, x_tm1, num_gt, self.settings.sampler.B_th,
                                              sigma_tm1, generator)
            logger.debug(f"Renewed {replaced} auxiliary boxes")
        out_tm1 = self._target_output(batch, features, x_tm1, sigma_tm1)

        total = None
        for i in range(len(batch)):
            # supervise exactly the GT rows that went into x_s
            keep = gt_index[i].to(self.device)
            gt_boxes = batch.boxes[i].to(self.device)[keep]
            gt_labels = batch.labels[i].to(self.device)[keep]
            loss = consistency_loss(out_t.image(i), out_tm1.image(i), gt_boxes, gt_labels, self.weights)
            total = loss if total is None else total + loss
        return total.scaled(1.0 / len(batch)), sigma_t, sigma_tm1

    def training_iteration(self, batch: TrainingBatch) -> Dict[str, Any]:
        """One optimizer step plus the EMA update; returns the loss record"""
        if len(batch) == 0:
            raise DatasetError("empty training batch")
        state = self.state
        state.model.train()

        loss, sigma_t, sigma_tm1 = self.compute_loss(batch)
        record = {
            'iteration': state.iteration,
            **loss.as_dict(),
            'sigma_t': float(sigma_t.mean()),
            'sigma_tm1': float(sigma_tm1.mean()),
            'lr': state.lr,
        }
        if not torch.isfinite(loss.total):
            self.metrics.diverged(record)
            raise TrainingDivergedError(f"loss is {record['total']} at iteration {state.iteration}", record)

        state.optimizer.zero_grad(set_to_none=True)
        loss.total.backward()
        if self.settings.trainer.clip_grad_norm > 0:
            torch.nn.utils.clip_grad_norm_(state.model.parameters(), self.settings.trainer.clip_grad_norm)
        state.optimizer.step()
        state.lr_scheduler.step()
        state.ema.update(state.model)
        state.iteration += 1

        self.metrics.write(record)
        return record

    def train(self, dataset: DetectionDataset, store: CheckpointStore, progress: bool = True) -> Path:
        """Run the configured number of iterations; returns the final checkpoint path"""
        cfg = self.settings.trainer
        if len(dataset) == 0:
            raise DatasetError("training dataset is empty")

        torch_dataset = DetectionTorchDataset(dataset, hflip_prob=cfg.hflip_prob, seed=self.settings.seed)
        loader = make_loader(torch_dataset, cfg.batch_size, self.settings.seed, cfg.num_workers)
        logger.info(f"🏋️  Training for {cfg.iterations} iterations on {len(dataset)} images")

        bar = tqdm(total=cfg.iterations, disable=not progress, desc='train')
        epoch = 0
        while self.state.iteration < cfg.iterations:
            torch_dataset.set_epoch(epoch)
            for batch in loader:
                record = self.training_iteration(batch)
                bar.update(1)
                if self.state.iteration % cfg.log_every == 0:
                    logger.info(f"📉 iter {record['iteration']}: loss {record['total']:.4f} "
                                f"(cls {record['cls']:.4f}, l1 {record['l1']:.4f}, giou {record['giou']:.4f})")
                if self.state.iteration % cfg.checkpoint_every == 0:
                    store.save(self.state.blob(self.settings, dataset.categories), iteration=self.state.iteration)
                if self.state.iteration >= cfg.iterations:
                    break
            epoch += 1
        bar.close()

        final = store.save(self.state.blob(self.settings, dataset.categories), final=True)
        logger.info(f"✅ Training finished after {self.state.iteration} iterations")
        return final


def train(dataset: DetectionDataset, settings: Settings, out_dir, teacher: Optional[TeacherHandle] = None,
          device: str = 'cpu', progress: bool = True) -> Path:
    """Train from scratch into out_dir (checkpoints/ and metrics.jsonl)"""
    out_dir = Path(out_dir)
    trainer = ConsistencyTrainer(settings, dataset.num_classes, teacher=teacher,
                                 metrics=MetricsWriter(out_dir / 'metrics.jsonl'), device=device)
    return trainer.train(dataset, CheckpointStore(out_dir / 'checkpoints'), progress=progress)
