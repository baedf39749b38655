"""Momentum SGD with L2 weight decay and a cosine learning-rate schedule."""
import math
from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name):
        self.param = name
        super().__init__(f"non-finite gradient in parameter {name!r}")


def cosine_lr(epoch, total_epochs, lr0):
    """lr0 * (1 + cos(pi * epoch / total)) / 2."""
    if total_epochs <= 0:
        return lr0
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return lr0 * (1.0 + math.cos(math.pi * epoch / total_epochs)) / 2.0


@dataclass
class OptimizerState:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epoch: int = 0
    total_epochs: int = 1
    buffers: dict = field(default_factory=dict)

    def set_epoch(self, epoch, lr0):
        self.epoch = epoch
        self.lr = cosine_lr(epoch, self.total_epochs, lr0)


def sgd_step(params, state, grads=None):
    """In-place update: buf = momentum*buf + grad + wd*param; param -= lr*buf.

    ``params`` is a mapping name -> Tensor (or a list of tensors).  Gradients
    are read from each tensor's ``grad`` unless ``grads`` supplies them.
    """
    items = params.items() if hasattr(params, "items") else ((str(i), p) for i, p in enumerate(params))
    items = list(items)
    for name, p in items:
        g = grads[name] if grads is not None else p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
    for name, p in items:
        g = grads[name] if grads is not None else p.grad
        if g is None:
            continue
        d = g + p.data.dtype.type(state.weight_decay) * p.data if state.weight_decay else g.copy()
        buf = state.buffers.get(name)
        if buf is None or buf.shape != d.shape:
            # first step or grown classifier head: restart momentum for this tensor
            buf = d
        else:
            buf = p.data.dtype.type(state.momentum) * buf + d
        state.buffers[name] = buf
        p.data -= p.data.dtype.type(state.lr) * buf
    return params
