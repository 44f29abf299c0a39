"""Loss, optimizer, and learning-rate schedule.

The loss is the piecewise quadratic/linear robust regression loss with
transition at beta (beta = 1 keeps the two branches continuous and bounds
the per-element gradient magnitude at 1). The optimizer is Adam with
decoupled weight decay; both decay and the moment update read the
pre-step parameter value. The schedule is plain cosine annealing, stepped
once per epoch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, NumericError
from .tensor import Tensor


@dataclass
class SmoothL1Config:
    beta: float = 1.0

    def validate(self) -> None:
        if self.beta <= 0:
            raise ContractError(f"beta must be positive, got {self.beta}")


def smooth_l1(target: Tensor, pred: Tensor, beta: float = 1.0) -> Tensor:
    """Batch-mean of: 0.5*d^2 if |d| < beta else |d| - 0.5*beta, d = target - pred."""
    if beta <= 0:
        raise ContractError(f"beta must be positive, got {beta}")
    if target.shape != pred.shape:
        raise DimensionError(f"target {target.shape} vs prediction {pred.shape}")
    d = T.sub(target, pred)
    quadratic = d * d * 0.5
    linear = T.absolute(d) - 0.5 * beta
    per_element = T.where(np.abs(d.data) < beta, quadratic, linear)
    return per_element.mean()


@dataclass
class CosineSchedule:
    eta_max: float = 1e-5
    eta_min: float = 0.0
    total_epochs: int = 15

    def validate(self) -> None:
        if self.eta_min > self.eta_max:
            raise ContractError(f"eta_min {self.eta_min} > eta_max {self.eta_max}")
        if self.total_epochs < 1:
            raise ContractError("total_epochs must be >= 1")


def cosine_lr(epoch: float, sched: CosineSchedule) -> float:
    """lr at epoch t in [0, T]: eta_min + (eta_max-eta_min)(1+cos(pi t/T))/2."""
    if not 0 <= epoch <= sched.total_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {sched.total_epochs}]")
    span = sched.eta_max - sched.eta_min
    return sched.eta_min + 0.5 * span * (1.0 + math.cos(math.pi * epoch / sched.total_epochs))


class AdamW:
    """Adam moments plus decoupled decay:

        m <- b1*m + (1-b1)*g          v <- b2*v + (1-b2)*g^2
        theta <- theta - lr*mhat/(sqrt(vhat)+eps) - lr*wd*theta

    A non-finite gradient aborts the step before any state is touched.
    Parameters whose grad is None count as zero gradient (they still decay).
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-5,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        if lr < 0 or eps <= 0:
            raise ContractError("lr must be >= 0 and eps > 0")
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        if lr < 0:
            raise ContractError(f"negative learning rate {lr}")
        grads = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for {name}; step aborted")
            grads[name] = g

        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + (lr * self.weight_decay) * p.data
            p.data -= update.astype(p.data.dtype, copy=False)

    # -- checkpoint support ----------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state(self, tensors: dict[str, np.ndarray], step_count: int) -> None:
        for name in self.params:
            self.m[name] = tensors[f"opt.m.{name}"].astype(self.m[name].dtype, copy=True)
            self.v[name] = tensors[f"opt.v.{name}"].astype(self.v[name].dtype, copy=True)
        self.step_count = int(step_count)
