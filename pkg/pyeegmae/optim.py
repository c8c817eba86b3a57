"""@ingroup pyeegmae
@file
AdamW with per-parameter learning rate scales, global-norm gradient clipping, and the cosine schedule with linear
warmup.
"""
import logging
import math
from collections import OrderedDict

import numpy as np

from .entity import ContractError

log = logging.getLogger(__name__)

class CosineWarmupSchedule(object):
    """Linear warmup from 0 to @p peak_lr over @p warmup_steps, then cosine annealing to @p min_lr at @p total_steps.

    lr(0) = 0, lr(warmup_steps) = peak_lr, lr(total_steps) = min_lr; steps beyond the end stay at min_lr.
    """
    def __init__(self, peak_lr, min_lr, warmup_steps, total_steps):
        """@throws ContractError if warmup_steps is not below total_steps.
        """
        if not 0 <= warmup_steps < total_steps:
            raise ContractError('warmup must be shorter than training, got {} of {} steps'.format(warmup_steps,
                                                                                               total_steps))
        self.peak_lr = peak_lr
        self.min_lr = min_lr
        self.warmup_steps = warmup_steps
        self.total_steps = total_steps

    def __call__(self, step):
        if step < self.warmup_steps:
            return self.peak_lr * step / self.warmup_steps
        progress = min(1.0, (step - self.warmup_steps) / float(self.total_steps - self.warmup_steps))
        return self.min_lr + 0.5 * (self.peak_lr - self.min_lr) * (1.0 + math.cos(math.pi * progress))

def clip_grad_norm(tensors, max_norm):
    """Rescales gradients in place so that their global Euclidean norm is at most @p max_norm.

    @returns The norm before clipping, a float.
    """
    grads = [t.grad for t in tensors if t.grad is not None]
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for grad in grads:
            grad *= scale
    return total

class AdamW(object):
    """Adam with decoupled weight decay.

    Weight decay applies to matrices only; biases, layer norm parameters and the [MASK]/[PAD] vectors are not decayed.
    Parameters without a gradient in a step are left untouched.
    """
    #pylint: disable=too-many-arguments
    def __init__(self, named_parameters, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, lr_scales=None):
        """@param named_parameters (name, Tensor) pairs to optimize.
        @param lr_scales Optionally, a name -> multiplier mapping applied to the scheduled learning rate.
        """
        self.named_parameters = list(named_parameters)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.lr_scales = dict(lr_scales or {})
        self.step_count = 0
        self._first = OrderedDict((name, np.zeros_like(t.data)) for name, t in self.named_parameters)
        self._second = OrderedDict((name, np.zeros_like(t.data)) for name, t in self.named_parameters)

    def step(self, lr):
        """Applies one update with base learning rate @p lr.
        """
        self.step_count += 1
        correction1 = 1.0 - self.beta1 ** self.step_count
        correction2 = 1.0 - self.beta2 ** self.step_count
        for name, tensor in self.named_parameters:
            grad = tensor.grad
            if grad is None:
                continue
            rate = lr * self.lr_scales.get(name, 1.0)
            if self.weight_decay and tensor.ndim >= 2:
                tensor.data *= 1.0 - rate * self.weight_decay
            first, second = self._first[name], self._second[name]
            first *= self.beta1
            first += (1.0 - self.beta1) * grad
            second *= self.beta2
            second += (1.0 - self.beta2) * grad * grad
            update = (first / correction1) / (np.sqrt(second / correction2) + self.eps)
            tensor.data -= (rate * update).astype(tensor.dtype, copy=False)

    def zero_grad(self):
        for _, tensor in self.named_parameters:
            tensor.zero_grad()

    def moments(self):
        """@returns An OrderedDict mapping parameter names to (first, second) moment arrays.
        """
        return OrderedDict((name, (self._first[name], self._second[name])) for name in self._first)

    def load_moments(self, first, second, step_count):
        """Restores moments saved with moments(); names missing from @p first keep zero moments.
        """
        for name in self._first:
            if name in first:
                self._first[name][...] = first[name]
                self._second[name][...] = second[name]
        self.step_count = int(step_count)
