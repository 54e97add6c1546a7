"""Adam with bias correction and a repeating one-cycle (cosine) learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor


class Adam:
    """``lr_scales`` optionally multiplies the step size per parameter (same order as ``params``)."""

    def __init__(self, params: Sequence[Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 lr_scales: Sequence[float] | None = None):
        self.params = list(params)
        self.lr_scales = [1.0] * len(self.params) if lr_scales is None else [float(s) for s in lr_scales]
        if len(self.lr_scales) != len(self.params):
            raise ValueError("lr_scales must have one entry per parameter")
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def reset_moments(self) -> None:
        for m, v in zip(self.m, self.v):
            m[...] = 0
            v[...] = 0
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v, scale in zip(self.params, self.m, self.v, self.lr_scales):
            if p.grad is None:
                continue
            g = p.grad
            if g.shape != m.shape:
                raise ValueError(f"gradient shape {g.shape} does not match moment buffer {m.shape}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (scale * lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype, copy=False)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {"adam.t": np.array([self.t], dtype=np.int64)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            state[f"adam.m.{i}"] = m
            state[f"adam.v.{i}"] = v
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["adam.t"][0])
        for i in range(len(self.params)):
            m, v = state[f"adam.m.{i}"], state[f"adam.v.{i}"]
            if m.shape != self.m[i].shape or v.shape != self.v[i].shape:
                raise ValueError(f"moment buffer {i}: shape {m.shape} != {self.m[i].shape}")
            self.m[i][...] = m
            self.v[i][...] = v


def adam_step(params: Sequence[Tensor], state: Adam, lr: float) -> None:
    """Apply one Adam update using each parameter's accumulated ``grad``."""
    if [id(p) for p in params] != [id(p) for p in state.params]:
        raise ValueError("parameter list does not match optimizer state")
    state.step(lr)


@dataclass
class OneCycleSchedule:
    """Cosine warm-up from max_lr/div_factor to max_lr, then cosine decay to max_lr/final_div_factor.

    The cycle repeats every ``steps_per_cycle`` steps.
    """

    max_lr: float = 1e-3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    pct_ramp_up: float = 0.3
    steps_per_cycle: int = 100
    cycles: int = 3

    def __post_init__(self):
        if self.max_lr <= 0 or self.div_factor <= 0 or self.final_div_factor <= 0:
            raise ValueError("learning rates and divisors must be positive")
        if not 0 < self.pct_ramp_up < 1:
            raise ValueError("pct_ramp_up must lie in (0, 1)")
        if self.steps_per_cycle < 2:
            raise ValueError("steps_per_cycle must be >= 2")

    @property
    def total_steps(self) -> int:
        return self.steps_per_cycle * self.cycles

    def lr_at(self, step: int) -> float:
        return lr_at(self, step)


def _cos_interp(start: float, end: float, frac: float) -> float:
    return end + (start - end) * (1.0 + math.cos(math.pi * frac)) / 2.0


def lr_at(schedule: OneCycleSchedule, global_step: int) -> float:
    if global_step < 0:
        raise ValueError("global_step must be >= 0")
    s = schedule
    pos = global_step % s.steps_per_cycle
    ramp = s.pct_ramp_up * s.steps_per_cycle
    if pos <= ramp:
        return _cos_interp(s.max_lr / s.div_factor, s.max_lr, pos / ramp)
    return _cos_interp(s.max_lr, s.max_lr / s.final_div_factor, (pos - ramp) / (s.steps_per_cycle - ramp))
