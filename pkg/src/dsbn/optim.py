"""Adaptation-weight and learning-rate schedules, and Adam."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .tensor import Parameter


@dataclass
class ScheduleParams:
    gamma_adapt: float = 10.0
    eta0: float = 1e-4
    alpha_lr: float = 10.0
    beta_lr: float = 0.75
    max_iters: int = 3000

    def progress(self, iteration: int) -> float:
        return min(max(iteration / self.max_iters, 0.0), 1.0)


def _clamp_progress(p: float) -> float:
    if not 0.0 <= p <= 1.0:
        warnings.warn(f"training progress {p} outside [0, 1]; clamping", RuntimeWarning, stacklevel=3)
        return min(max(p, 0.0), 1.0)
    return p


def lambda_schedule(p: float, gamma_adapt: float = 10.0) -> float:
    """``2 / (1 + exp(-gamma * p)) - 1``: rises from 0 towards 1."""
    p = _clamp_progress(p)
    return 2.0 / (1.0 + math.exp(-gamma_adapt * p)) - 1.0


def lr_schedule(p: float, sched: ScheduleParams) -> float:
    """Annealed step size ``eta0 / (1 + alpha * p) ** beta``."""
    p = _clamp_progress(p)
    return sched.eta0 / (1.0 + sched.alpha_lr * p) ** sched.beta_lr


class Adam:
    """Bias-corrected Adam over a fixed list of parameters.

    Parameters that are frozen, or that received no gradient in the current
    step, are left untouched (their moments do not advance either).
    """

    def __init__(self, params: list[Parameter], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.steps = [0] * len(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            if p.grad is None or not getattr(p, "trainable", True):
                continue
            g = p.grad
            self.steps[i] += 1
            t = self.steps[i]
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            m_hat = self.m[i] / (1.0 - b1**t)
            v_hat = self.v[i] / (1.0 - b2**t)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i in range(len(self.params)):
            out[f"adam.{i}.m"] = self.m[i]
            out[f"adam.{i}.v"] = self.v[i]
        out["adam.steps"] = np.array(self.steps, dtype=np.int64)
        return out

    def load_state_arrays(self, arrays) -> None:
        for i in range(len(self.params)):
            self.m[i] = np.array(arrays[f"adam.{i}.m"], dtype=np.float64)
            self.v[i] = np.array(arrays[f"adam.{i}.v"], dtype=np.float64)
        self.steps = [int(s) for s in arrays["adam.steps"]]


def adam_step(opt: Adam, lr: float) -> None:
    opt.step(lr)
