"""Dense task heads, smoothed BCE, Adam stepping, LR schedule and early stopping"""

import copy
import logging
import math
from collections import OrderedDict
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .encoder import load_checkpoint, load_state, save_checkpoint
from .errors import FormatError, NumericError

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class DenseHead(nn.Module):
    """input -> hidden (ReLU) -> one logit"""

    def __init__(self, input_dim: int, hidden_dim: Optional[int] = None):
        super().__init__()
        hidden_dim = hidden_dim or input_dim
        self.layers = nn.Sequential(
            nn.Linear(input_dim, hidden_dim),
            nn.ReLU(),
            nn.Linear(hidden_dim, 1),
        )

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_features

    @property
    def hidden_dim(self) -> int:
        return self.layers[0].out_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.layers(x).squeeze(-1)


def bce_smoothed(logits: torch.Tensor, labels: torch.Tensor, epsilon: float = 0.0) -> torch.Tensor:
    """Mean binary cross-entropy against smoothed targets, in stable logit form"""
    labels = labels.to(logits.dtype)
    targets = labels * (1 - epsilon) + (1 - labels) * epsilon
    return F.binary_cross_entropy_with_logits(logits, targets)


class AdamState:
    """Adam with coupled L2 weight decay over a set of named parameters

    Moments live in the wrapped torch optimizer; `step` counts applied updates.
    """

    def __init__(self, named_params: Iterable[Tuple[str, nn.Parameter]], lr: float, weight_decay: float = 0.0):
        named = [(n, p) for n, p in named_params if p.requires_grad]
        self.names = [n for n, _ in named]
        self.params = [p for _, p in named]
        self.optimizer = torch.optim.Adam(
            self.params, lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS, weight_decay=weight_decay
        )
        self.step = 0

    def zero_grad(self) -> None:
        self.optimizer.zero_grad(set_to_none=True)


def adam_step(state: AdamState, lr: Optional[float] = None, weight_decay: Optional[float] = None) -> None:
    """Apply one bias-corrected Adam update from the parameters' .grad fields

    Raises:
        NumericError: a gradient holds NaN or inf (named in the message)
    """
    for name, param in zip(state.names, state.params):
        if param.grad is not None and not bool(torch.isfinite(param.grad).all()):
            raise NumericError(f"Non-finite gradient for parameter {name}")
    for group in state.optimizer.param_groups:
        if lr is not None:
            group["lr"] = lr
        if weight_decay is not None:
            group["weight_decay"] = weight_decay
    state.optimizer.step()
    state.step += 1


def lr_at(step: int, peak: float, warmup_steps: int = 0, half_period: int = 0) -> float:
    """Linear warmup to `peak`, then a half-cosine decay to zero over `half_period` steps

    With half_period 0 the rate stays at `peak` after warmup.
    """
    if warmup_steps and step < warmup_steps:
        return peak * step / warmup_steps
    if not half_period:
        return peak
    progress = min(step - warmup_steps, half_period) / half_period
    return max(0.0, peak * 0.5 * (1 + math.cos(math.pi * progress)))


def make_scheduler(state: AdamState, warmup_steps: int, half_period: int) -> torch.optim.lr_scheduler.LambdaLR:
    """Per-step LambdaLR following lr_at relative to the optimizer's base rate"""
    return torch.optim.lr_scheduler.LambdaLR(
        state.optimizer, lr_lambda=lambda step: lr_at(step, 1.0, warmup_steps, half_period)
    )


class EarlyStopping:
    """Track a maximized validation score; stop after `patience` epochs without improvement"""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_score = -math.inf
        self.best_epoch = 0
        self.best_state: Optional[Dict[str, torch.Tensor]] = None
        self.bad_epochs = 0
        self.history: List[float] = []

    def update(self, epoch: int, score: float, module: Optional[nn.Module] = None) -> bool:
        """Record one epoch; returns True when training should stop"""
        self.history.append(score)
        if score > self.best_score:
            self.best_score = score
            self.best_epoch = epoch
            self.bad_epochs = 0
            if module is not None:
                self.best_state = copy.deepcopy(module.state_dict())
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    def restore(self, module: nn.Module) -> None:
        if self.best_state is not None:
            module.load_state_dict(self.best_state)


def head_state(heads: Mapping[str, DenseHead]) -> Tuple["OrderedDict[str, torch.Tensor]", dict]:
    """Named tensors under `heads.<task>.` and the matching config block"""
    state: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    shapes = {}
    for task, head in heads.items():
        shapes[task] = [head.input_dim, head.hidden_dim]
        for name, tensor in head.state_dict().items():
            state[f"heads.{task}.{name}"] = tensor
    return state, {"heads": shapes}


def head_checkpoint(heads: Mapping[str, DenseHead]) -> bytes:
    state, config = head_state(heads)
    return save_checkpoint(state, config)


def restore_heads(data: bytes) -> Dict[str, DenseHead]:
    """Rebuild every head stored in a head or multi-task checkpoint"""
    config, state = load_checkpoint(data)
    if "heads" not in config:
        raise FormatError("Checkpoint holds no task heads")
    heads = {}
    for task, (input_dim, hidden_dim) in config["heads"].items():
        head = DenseHead(int(input_dim), int(hidden_dim))
        load_state(head, state, prefix=f"heads.{task}.")
        heads[task] = head
    return heads
