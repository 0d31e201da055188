"""
EMA target network theta^- for consistency training
"""

import copy
import logging

import torch
from torch import nn

from src.errors import DomainError

logger = logging.getLogger(__name__)


class ModelEMA:
    """Shadow copy of a model updated as theta^- <- mu theta^- + (1 - mu) theta"""

    def __init__(self, model: nn.Module, decay: float):
        if not (0.0 <= decay <= 1.0):
            raise DomainError(f"EMA decay must be in [0, 1], got {decay}")
        self.decay = decay
        self.module = copy.deepcopy(model)
        self.module.eval()
        for param in self.module.parameters():
            param.requires_grad_(False)

    @torch.no_grad()
    def update(self, model: nn.Module, decay: float = None):
        mu = self.decay if decay is None else decay
        for target, source in zip(self.module.parameters(), model.parameters()):
            target.mul_(mu).add_(source.detach(), alpha=1.0 - mu)
        for target, source in zip(self.module.buffers(), model.buffers()):
            target.copy_(source)

    def state_dict(self):
        return self.module.state_dict()

    def load_state_dict(self, state):
        self.module.load_state_dict(state)
